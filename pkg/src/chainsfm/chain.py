"""Compose scaled relative motions into global poses along a chain or cycle,
and similarity alignment of camera centers for evaluation.

Global poses follow the recursion R_1 = I, t_1 = 0,
R_{j+1} = R_{j,j+1} R_j and t_{j+1} = R_{j,j+1} t_j + lam_{j,j+1} t_hat_{j,j+1},
with the first baseline fixed to unit length; successive baseline lengths are
accumulated multiplicatively from the per-triplet ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BrokenChain, DegenerateAlignment, NegativeScale
from .geometry import GlobalPose, RelativePose


@dataclass
class ChainInput:
    """Consecutive relative poses plus one baseline ratio per interior
    camera.  For a cycle the last pose wraps back to the first camera."""

    relative_poses: list[RelativePose]
    ratios: list[float]
    cycle: bool = False

    def validate(self) -> None:
        m = len(self.relative_poses)
        if m == 0:
            raise BrokenChain("no relative poses")
        if len(self.ratios) != m - 1:
            raise BrokenChain(
                f"{m} pairs need {m - 1} ratios, got {len(self.ratios)}")
        for a, b in zip(self.relative_poses[:-1], self.relative_poses[1:]):
            if a.pair[1] != b.pair[0]:
                raise BrokenChain(f"pairs {a.pair} and {b.pair} do not join")
        if self.cycle and \
                self.relative_poses[-1].pair[1] != self.relative_poses[0].pair[0]:
            raise BrokenChain("cycle does not return to the first camera")


@dataclass
class ChainOutput:
    """Global poses under the unit-first-baseline convention."""

    poses: list[GlobalPose]
    lambdas: list[float]          # accumulated scale of each pair
    closure_gap: float | None = None   # cycle diagnostic, chain units

    @property
    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.poses])


def compose_chain(inp: ChainInput) -> ChainOutput:
    """Sequential fold of the pose recursion.

    Cycles are composed open; the distance between the re-predicted first
    center and the origin is reported as the closure gap, not redistributed.
    """
    inp.validate()
    for r in inp.ratios:
        if not np.isfinite(r) or r <= 0:
            raise NegativeScale(f"ratio {r!r} is not a positive real")
    poses = [GlobalPose.identity()]
    lambdas = []
    lam = 1.0
    closure_gap = None
    for k, rp in enumerate(inp.relative_poses):
        if k > 0:
            lam *= inp.ratios[k - 1]
        lambdas.append(lam)
        prev = poses[-1]
        R = rp.rotation @ prev.rotation
        t = rp.rotation @ prev.translation + lam * rp.direction
        nxt = GlobalPose(R, t)
        if inp.cycle and k == len(inp.relative_poses) - 1:
            closure_gap = float(np.linalg.norm(nxt.center - poses[0].center))
        else:
            poses.append(nxt)
    return ChainOutput(poses=poses, lambdas=lambdas, closure_gap=closure_gap)


@dataclass
class AlignmentResult:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    center_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.center_errors))

    @property
    def max_error(self) -> float:
        return float(np.max(self.center_errors))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.scale * X @ self.rotation.T + self.translation


def align_similarity(est: np.ndarray, gt: np.ndarray) -> AlignmentResult:
    """Closed-form least-squares similarity mapping `est` centers onto `gt`.

    Standard SVD solution of the orthogonal Procrustes problem with scale.
    Raises DegenerateAlignment when the centers are collinear (the rotation
    about the common axis is unobservable), except for the exact two-camera
    case where any completion gives zero residual.
    """
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise DegenerateAlignment("center arrays must both be (n, 3)")
    n = est.shape[0]
    if n < 2:
        raise DegenerateAlignment("need at least two centers")
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    X, Y = est - mu_e, gt - mu_g
    var_x = float(np.sum(X * X)) / n
    if var_x < 1e-24:
        raise DegenerateAlignment("estimated centers are coincident")
    H = (Y.T @ X) / n
    U, D, Vt = np.linalg.svd(H)
    if n > 2 and D[1] < 1e-12 * max(D[0], 1.0):
        raise DegenerateAlignment("camera centers are collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S)) / var_x
    t = mu_g - s * R @ mu_e
    res = AlignmentResult(scale=s, rotation=R, translation=t)
    res.center_errors = np.linalg.norm(res.apply(est) - gt, axis=1)
    return res
