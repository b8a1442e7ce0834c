"""Two-stage bundle adjustment over poses, points, and lines with
coplanarity residuals.

The cost is the plain sum of squared pixel residuals: point reprojection
components, endpoint-to-line distances (two per line observation), and the
coplanarity distance of each inlier line pair re-evaluated in every image
that sees both lines.  Stage one refines structure and translations with
rotations frozen; stage two frees everything.  The Jacobian comes from
automatic differentiation and the normal equations are solved by a
Levenberg-Marquardt loop with strictly decreasing accepted cost.

Gauge: the first pose is fixed entirely, and after every accepted step the
whole reconstruction is rescaled so the first baseline keeps its initial
length (the cost is similarity invariant, so this changes nothing but the
parameterization).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DivergedNaN, EmptyProblem
from .geometry import GlobalPose, Intrinsics, Line3, triangulate_line, triangulate_point

jax.config.update("jax_enable_x64", True)

DEFAULT_MAX_ITERS = 200
DEFAULT_FTOL = 1e-10
DEFAULT_GTOL = 1e-12


@dataclass
class BAProblem:
    """Parameters, structure, and observations of one adjustment."""

    poses: list[GlobalPose]
    intrinsics: list[Intrinsics]
    points3d: dict[int, np.ndarray]
    lines3d: dict[int, Line3]
    # observations
    point_obs: list[tuple[int, int, np.ndarray]]        # (camera, tid, px)
    line_obs: list[tuple[int, int, np.ndarray, np.ndarray]]  # (cam, tid, a, b)
    coplanar_pairs: list[tuple[int, int, tuple[int, ...]]]   # (tid_a, tid_b, shared cams)
    stage1_done: bool = False
    cost_trace: list[float] = field(default_factory=list)

    @property
    def n_residuals(self) -> int:
        return (2 * len(self.point_obs) + 2 * len(self.line_obs)
                + 2 * sum(len(s) for *_, s in self.coplanar_pairs))


def build_problem(poses: list[GlobalPose], intrinsics: list[Intrinsics],
                  point_tracks: dict[int, list[tuple[int, np.ndarray]]],
                  line_tracks: dict[int, list[tuple[int, np.ndarray, np.ndarray]]],
                  coplanar_pairs: list[tuple[int, int]] = (),
                  ) -> BAProblem:
    """Triangulate initial structure from the first two observations of each
    track and collect the residual bookkeeping.

    Coplanar pairs are kept as pairs (no plane clustering); each pair
    contributes residuals in every image observing both of its lines.
    Tracks whose initial triangulation is degenerate are dropped.
    """
    from .errors import ChainSfmError
    from .geometry import line_from_segment, normalize_point

    points3d, point_obs = {}, []
    for tid, obs in sorted(point_tracks.items()):
        if len(obs) < 2:
            continue
        (c1, p1), (c2, p2) = obs[0], obs[1]
        try:
            P = triangulate_point(normalize_point(p1, intrinsics[c1]),
                                  normalize_point(p2, intrinsics[c2]),
                                  poses[c1], poses[c2])
        except ChainSfmError:
            continue
        points3d[tid] = P
        point_obs.extend((c, tid, np.asarray(px, float)) for c, px in obs)

    lines3d, line_obs = {}, []
    line_cams: dict[int, set] = {}
    for tid, obs in sorted(line_tracks.items()):
        if len(obs) < 2:
            continue
        (c1, a1, b1), (c2, a2, b2) = obs[0], obs[1]
        try:
            L = triangulate_line(
                line_from_segment(a1, b1, intrinsics[c1]),
                line_from_segment(a2, b2, intrinsics[c2]),
                poses[c1], poses[c2])
        except ChainSfmError:
            continue
        lines3d[tid] = L
        line_cams[tid] = {c for c, *_ in obs}
        line_obs.extend((c, tid, np.asarray(a, float), np.asarray(b, float))
                        for c, a, b in obs)

    pairs = []
    for ta, tb in coplanar_pairs:
        if ta in lines3d and tb in lines3d:
            shared = tuple(sorted(line_cams[ta] & line_cams[tb]))
            if shared:
                pairs.append((ta, tb, shared))

    prob = BAProblem(poses=list(poses), intrinsics=list(intrinsics),
                     points3d=points3d, lines3d=lines3d,
                     point_obs=point_obs, line_obs=line_obs,
                     coplanar_pairs=pairs)
    if prob.n_residuals == 0:
        raise EmptyProblem("no observations survived triangulation")
    return prob


# --- differentiable residual machinery ------------------------------------

def _exp_so3(w):
    """Rodrigues rotation, safe at zero angle."""
    th2 = jnp.dot(w, w)
    big = th2 > 1e-24
    # Evaluate the exact branch with a safe denominator so its derivative
    # stays finite at zero angle (both where-branches are differentiated).
    safe = jnp.where(big, th2, 1.0)
    th = jnp.sqrt(safe)
    a = jnp.where(big, jnp.sin(th) / th, 1.0 - th2 / 6.0)
    b = jnp.where(big, (1.0 - jnp.cos(th)) / safe, 0.5 - th2 / 24.0)
    W = jnp.array([[0.0, -w[2], w[1]],
                   [w[2], 0.0, -w[0]],
                   [-w[1], w[0], 0.0]])
    return jnp.eye(3) + a * W + b * (W @ W)


class _Model:
    """Index bookkeeping plus the packed residual function."""

    def __init__(self, prob: BAProblem):
        self.prob = prob
        self.n_cams = len(prob.poses)
        self.pt_ids = sorted(prob.points3d)
        self.ln_ids = sorted(prob.lines3d)
        self.pt_index = {t: i for i, t in enumerate(self.pt_ids)}
        self.ln_index = {t: i for i, t in enumerate(self.ln_ids)}
        self.R0 = np.array([p.rotation for p in prob.poses])
        # Baseline length to preserve (first non-fixed camera center).
        self.baseline0 = float(np.linalg.norm(
            prob.poses[1].center - prob.poses[0].center)) \
            if self.n_cams > 1 else 1.0

        # Observation tables for vectorized evaluation.
        self.pt_cam = np.array([c for c, t, _ in prob.point_obs], dtype=int)
        self.pt_idx = np.array([self.pt_index[t]
                                for c, t, _ in prob.point_obs], dtype=int)
        self.pt_px = np.array([px for *_, px in prob.point_obs],
                              dtype=float).reshape(-1, 2)
        self.ln_cam = np.array([c for c, *_ in prob.line_obs], dtype=int)
        self.ln_idx = np.array([self.ln_index[t]
                                for c, t, *_ in prob.line_obs], dtype=int)
        self.ln_a = np.array([a for _, _, a, _ in prob.line_obs],
                             dtype=float).reshape(-1, 2)
        self.ln_b = np.array([b for *_, b in prob.line_obs],
                             dtype=float).reshape(-1, 2)
        cop = [(self.ln_index[ta], self.ln_index[tb], c)
               for ta, tb, shared in prob.coplanar_pairs for c in shared]
        self.cop_ia = np.array([a for a, _, _ in cop], dtype=int)
        self.cop_ib = np.array([b for _, b, _ in cop], dtype=int)
        self.cop_cam = np.array([c for *_, c in cop], dtype=int)
        self.fx = np.array([K.fx for K in prob.intrinsics])
        self.fy = np.array([K.fy for K in prob.intrinsics])
        self.cx = np.array([K.cx for K in prob.intrinsics])
        self.cy = np.array([K.cy for K in prob.intrinsics])
        self._residuals_jit = jax.jit(self._residuals)
        self._jac_jit = jax.jit(jax.jacrev(self._residuals))

    # packing: [w_j, t_j for j in 1..n-1] + points + lines(d, p)
    def pack(self) -> np.ndarray:
        prob = self.prob
        parts = []
        for j in range(1, self.n_cams):
            # Tangent of the current rotation about the base rotation; zero
            # right after construction, nonzero when the problem state was
            # replaced under a reused compiled model.
            parts.append(Rotation.from_matrix(
                prob.poses[j].rotation @ self.R0[j].T).as_rotvec())
            parts.append(prob.poses[j].translation)
        for t in self.pt_ids:
            parts.append(prob.points3d[t])
        for t in self.ln_ids:
            L = prob.lines3d[t]
            parts.append(L.direction)
            parts.append(L.point)
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack_into(self, x: np.ndarray) -> None:
        """Write parameters back, renormalizing line gauge DOF."""
        prob = self.prob
        k = 0
        for j in range(1, self.n_cams):
            w = x[k:k + 3]
            t = x[k + 3:k + 6]
            R = np.asarray(_exp_so3(jnp.asarray(w))) @ self.R0[j]
            prob.poses[j] = GlobalPose(R, np.asarray(t))
            k += 6
        for t in self.pt_ids:
            prob.points3d[t] = x[k:k + 3].copy()
            k += 3
        for t in self.ln_ids:
            d = x[k:k + 3]
            p = x[k + 3:k + 6]
            d = d / np.linalg.norm(d)
            p = p - np.dot(p, d) * d   # closest point to origin
            prob.lines3d[t] = Line3(d, p)
            k += 6

    def _cameras(self, x):
        Rs = [jnp.asarray(self.R0[0])]
        ts = [jnp.asarray(self.prob.poses[0].translation)]
        k = 0
        for j in range(1, self.n_cams):
            w = x[k:k + 3]
            t = x[k + 3:k + 6]
            Rs.append(_exp_so3(w) @ self.R0[j])
            ts.append(t)
            k += 6
        return Rs, ts, k

    def _residuals(self, x):
        Rs, ts, k = self._cameras(x)
        Rs = jnp.stack(Rs)
        ts = jnp.stack(ts)
        npts = len(self.pt_ids)
        pts = x[k:k + 3 * npts].reshape(npts, 3)
        k += 3 * npts
        nlns = len(self.ln_ids)
        lns = x[k:k + 6 * nlns].reshape(nlns, 6)

        out = []
        if self.pt_cam.size:
            c = self.pt_cam
            q = jnp.einsum("mij,mj->mi", Rs[c], pts[self.pt_idx]) + ts[c]
            u = self.fx[c] * q[:, 0] / q[:, 2] + self.cx[c]
            v = self.fy[c] * q[:, 1] / q[:, 2] + self.cy[c]
            out.append(jnp.stack([u - self.pt_px[:, 0],
                                  v - self.pt_px[:, 1]], axis=1).ravel())
        if self.ln_cam.size:
            c = self.ln_cam
            d = lns[self.ln_idx, :3]
            p = lns[self.ln_idx, 3:]
            dc = jnp.einsum("mij,mj->mi", Rs[c], d)
            pc = jnp.einsum("mij,mj->mi", Rs[c], p) + ts[c]
            n = jnp.cross(dc, pc)
            la = n[:, 0] / self.fx[c]
            lb = n[:, 1] / self.fy[c]
            lc = (n[:, 2] - n[:, 0] * self.cx[c] / self.fx[c]
                  - n[:, 1] * self.cy[c] / self.fy[c])
            s = jnp.hypot(la, lb)
            la, lb, lc = la / s, lb / s, lc / s
            out.append(jnp.stack(
                [la * self.ln_a[:, 0] + lb * self.ln_a[:, 1] + lc,
                 la * self.ln_b[:, 0] + lb * self.ln_b[:, 1] + lc],
                axis=1).ravel())
        if self.cop_cam.size:
            c = self.cop_cam
            da = lns[self.cop_ia, :3]
            pa = lns[self.cop_ia, 3:]
            db = lns[self.cop_ib, :3]
            pb = lns[self.cop_ib, 3:]
            ua = da / jnp.linalg.norm(da, axis=1, keepdims=True)
            ub = db / jnp.linalg.norm(db, axis=1, keepdims=True)
            r = pb - pa
            dab = jnp.einsum("mi,mi->m", ua, ub)
            uar = jnp.einsum("mi,mi->m", ua, r)
            ubr = jnp.einsum("mi,mi->m", ub, r)
            det = dab * dab - 1.0
            s = (-uar + dab * ubr) / det
            t = (-dab * uar + ubr) / det
            Pab = pa + s[:, None] * ua
            Pba = pb + t[:, None] * ub
            qa = jnp.einsum("mij,mj->mi", Rs[c], Pab) + ts[c]
            qb = jnp.einsum("mij,mj->mi", Rs[c], Pba) + ts[c]
            out.append(jnp.stack(
                [self.fx[c] * (qa[:, 0] / qa[:, 2] - qb[:, 0] / qb[:, 2]),
                 self.fy[c] * (qa[:, 1] / qa[:, 2] - qb[:, 1] / qb[:, 2])],
                axis=1).ravel())
        return jnp.concatenate(out) if out else jnp.zeros(0)

    def rotation_mask(self) -> np.ndarray:
        """Boolean mask of parameters that are rotation tangents."""
        mask = np.zeros(6 * (self.n_cams - 1) + 3 * len(self.pt_ids)
                        + 6 * len(self.ln_ids), dtype=bool)
        for j in range(self.n_cams - 1):
            mask[6 * j:6 * j + 3] = True
        return mask

    def rescale_gauge(self, x: np.ndarray) -> np.ndarray:
        """Rescale the reconstruction so the first baseline keeps its
        initial length.  The cost is similarity invariant."""
        if self.n_cams < 2:
            return x
        k0 = 0  # camera 1 block
        w = x[k0:k0 + 3]
        t = x[k0 + 3:k0 + 6]
        R = np.asarray(_exp_so3(jnp.asarray(w))) @ self.R0[1]
        c1 = np.asarray(self.prob.poses[0].center)
        c2 = -R.T @ t
        cur = float(np.linalg.norm(c2 - c1))
        if cur < 1e-300:
            return x
        s = self.baseline0 / cur
        # Similarity about the fixed first camera's center: camera 0 maps to
        # itself, so the reprojection cost is exactly invariant.
        y = x.copy()
        for j in range(self.n_cams - 1):
            wj = x[6 * j:6 * j + 3]
            tj = x[6 * j + 3:6 * j + 6]
            Rj = np.asarray(_exp_so3(jnp.asarray(wj))) @ self.R0[j + 1]
            cj = -Rj.T @ tj
            y[6 * j + 3:6 * j + 6] = -Rj @ (c1 + s * (cj - c1))
        k = 6 * (self.n_cams - 1)
        for i in range(len(self.pt_ids)):
            p = x[k + 3 * i:k + 3 * i + 3]
            y[k + 3 * i:k + 3 * i + 3] = c1 + s * (p - c1)
        k += 3 * len(self.pt_ids)
        for i in range(len(self.ln_ids)):
            p = x[k + 6 * i + 3:k + 6 * i + 6]   # line points, not directions
            y[k + 6 * i + 3:k + 6 * i + 6] = c1 + s * (p - c1)
        return y


def residual_vector(prob: BAProblem) -> np.ndarray:
    """Current residuals, for inspection and testing."""
    model = _Model(prob)
    return np.asarray(model._residuals_jit(jnp.asarray(model.pack())))


def total_cost(prob: BAProblem) -> float:
    r = residual_vector(prob)
    return float(np.dot(r, r))


def solve(prob: BAProblem, stage: str,
          max_iters: int = DEFAULT_MAX_ITERS,
          ftol: float = DEFAULT_FTOL,
          gtol: float = DEFAULT_GTOL,
          _model: _Model | None = None) -> BAProblem:
    """Levenberg-Marquardt over the packed parameters, in place.

    `stage` is "rotations-fixed" or "full"; the full stage requires the
    rotations-fixed stage to have run first.  Accepted steps strictly
    decrease the cost; the trace of accepted costs is appended to
    `prob.cost_trace`.  Non-finite residuals abort with DivergedNaN carrying
    the last valid state.
    """
    if stage not in ("rotations-fixed", "full"):
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "full" and not prob.stage1_done:
        raise ValueError("run the rotations-fixed stage first")

    model = _model if _model is not None else _Model(prob)
    x = model.pack()
    frozen = model.rotation_mask() if stage == "rotations-fixed" else \
        np.zeros(x.size, dtype=bool)
    free = ~frozen

    r = np.asarray(model._residuals_jit(jnp.asarray(x)))
    if not np.all(np.isfinite(r)):
        raise DivergedNaN("non-finite residuals at the starting point", prob)
    cost = float(np.dot(r, r))
    prob.cost_trace.append(cost)
    mu = 1e-4
    for _ in range(max_iters):
        J = np.asarray(model._jac_jit(jnp.asarray(x)))[:, free]
        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) < gtol:
            break
        H = J.T @ J
        # The line parameterization carries two exact null directions per
        # line (direction scale, point slide along the line); floor the
        # damping diagonal so they stay inert instead of poisoning the
        # normal-equation solve.
        damp = np.maximum(np.diag(H), 1.0)
        step_taken = False
        for _ in range(25):
            A = H + mu * np.diag(damp)
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            x_new = x.copy()
            x_new[free] += delta
            r_new = np.asarray(model._residuals_jit(jnp.asarray(x_new)))
            if not np.all(np.isfinite(r_new)):
                # Reject the probe and stiffen the damping; the accepted
                # state stays valid.
                mu *= 10.0
                continue
            cost_new = float(np.dot(r_new, r_new))
            if cost_new < cost:
                x = model.rescale_gauge(x_new)
                r = np.asarray(model._residuals_jit(jnp.asarray(x)))
                prev_cost, cost = cost, cost_new
                prob.cost_trace.append(cost)
                mu = max(mu / 10.0, 1e-12)
                step_taken = True
                break
            mu *= 10.0
        if not step_taken:
            break
        if prev_cost - cost <= ftol * max(cost, 1e-300):
            break
    model.unpack_into(x)
    if stage == "rotations-fixed":
        prob.stage1_done = True
    return prob


def run_two_stage(prob: BAProblem, stage1: bool = True,
                  max_iters: int = DEFAULT_MAX_ITERS,
                  ftol: float = DEFAULT_FTOL,
                  gtol: float = DEFAULT_GTOL,
                  _model: _Model | None = None) -> BAProblem:
    """The standard schedule: rotations-fixed refinement, then full.

    Both stages share one compiled model so the autodiff Jacobian is traced
    only once per problem shape.  A caller repeatedly re-solving the same
    problem from different starting states may pass its own `_model` to
    amortize the compilation; the model must have been built from this
    `prob` object (same observations, same fixed first pose).
    """
    model = _model if _model is not None else _Model(prob)
    if stage1:
        solve(prob, "rotations-fixed", max_iters=max_iters, ftol=ftol,
              gtol=gtol, _model=model)
    else:
        prob.stage1_done = True
    return solve(prob, "full", max_iters=max_iters, ftol=ftol, gtol=gtol,
                 _model=model)
