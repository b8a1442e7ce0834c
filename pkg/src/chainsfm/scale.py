"""Candidate scale ratios for a camera triplet.

Given the two bifocal calibrations of a triplet of successive cameras
(1-2 and 2-3), a single feature yields a candidate for the signed ratio of
the two baseline lengths: a hypothesized coplanar pair of lines (one seen
in cameras 1-2, the other in 2-3), or a point or line tracked across all
three views.  All computations use the triplet-local frame with camera 1 at
the origin and a unit first baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegenerateConfiguration, DegenerateMinimizer, InconsistentSign
from .features import CoplanarPairHypothesis, LineTriplet, PointTriplet
from .geometry import (
    GlobalPose,
    RelativePose,
    angle_between_deg,
    point_on_homoline,
    triangulate_line,
    triangulate_point,
)

# Reject a ratio when a denominator's angle is within this many degrees of
# degenerate.  Conservative conditioning bound, not model selection.
DEGENERACY_FLOOR_DEG = 1.0

# Minimum 3D direction angle between the two lines of a coplanar pair.
PARALLEL_FLOOR_DEG = 15.0


@dataclass(frozen=True)
class TripletFrame:
    """The two consecutive relative poses of a camera triplet.

    `cameras` maps the local indices 1, 2, 3 to chain positions."""

    relpose12: RelativePose
    relpose23: RelativePose
    cameras: tuple[int, int, int] = (0, 1, 2)

    @cached_property
    def relpose21(self) -> RelativePose:
        return self.relpose12.inverse()

    @cached_property
    def relpose32(self) -> RelativePose:
        return self.relpose23.inverse()

    @cached_property
    def rotations(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Triplet-local global rotations (camera 1 is the identity)."""
        R1 = np.eye(3)
        R2 = self.relpose12.rotation
        R3 = self.relpose23.rotation @ R2
        return R1, R2, R3

    def reversed(self) -> "TripletFrame":
        return TripletFrame(self.relpose32, self.relpose21,
                            self.cameras[::-1])

    def local_poses(self, lam: float) -> tuple[GlobalPose, GlobalPose, GlobalPose]:
        """Global poses with camera 1 at the origin, unit first baseline and
        second baseline scaled by `lam`."""
        R1, R2, R3 = self.rotations
        pose1 = GlobalPose(R1, np.zeros(3))
        t2 = self.relpose12.direction.copy()
        pose2 = GlobalPose(R2, t2)
        t3 = self.relpose23.rotation @ t2 + lam * self.relpose23.direction
        return pose1, pose2, GlobalPose(R3, t3)


def _unit(v):
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise DegenerateConfiguration("direction-undefined")
    return v / n


def _guard_dot(l: np.ndarray, v: np.ndarray, floor_deg: float, reason: str) -> float:
    """Dot product, rejected when the vectors are within `floor_deg` of
    perpendicular (vanishing denominator)."""
    d = float(np.dot(l, v))
    if abs(d) < np.linalg.norm(l) * np.linalg.norm(v) * np.sin(
            np.radians(floor_deg)):
        raise DegenerateConfiguration(reason)
    return d


def coplanar_scale_ratio(h: CoplanarPairHypothesis, tf: TripletFrame,
                         sample_pa: np.ndarray | None = None,
                         sample_pb: np.ndarray | None = None,
                         parallel_floor_deg: float = PARALLEL_FLOOR_DEG,
                         degeneracy_floor_deg: float = DEGENERACY_FLOOR_DEG,
                         ) -> float:
    """Signed ratio of the two baseline lengths from one coplanar line pair.

    The first line is observed in cameras 1-2 only, the second in cameras
    2-3 only; assuming both lie in a common plane ties the two otherwise
    independent bifocal scales together.  Only rotations and translation
    directions are needed.  The result does not depend on the choice of the
    sample points on the camera-2 observations (exactly, for coplanar
    input); by default the segment midpoints are used.
    """
    R1, R2, R3 = tf.rotations
    la1, la2 = h.la.line_i, h.la.line_j
    lb2, lb3 = h.lb.line_i, h.lb.line_j

    d_a = _unit(np.cross(R1.T @ la1, R2.T @ la2))
    d_b = _unit(np.cross(R2.T @ lb2, R3.T @ lb3))
    if angle_between_deg(d_a, d_b) < parallel_floor_deg:
        raise DegenerateConfiguration("parallel-line-directions")
    n = _unit(np.cross(d_a, d_b))

    if sample_pa is None:
        sample_pa = point_on_homoline(la2, near=_mid_homo(h.la.seg_j))
    if sample_pb is None:
        sample_pb = point_on_homoline(lb2, near=_mid_homo(h.lb.seg_i))

    R21 = tf.relpose21.rotation
    R23 = tf.relpose23.rotation
    t21 = tf.relpose21.direction
    t23 = tf.relpose23.direction

    num = (float(np.dot(lb3, R23 @ sample_pb))
           * float(np.dot(n, R2.T @ sample_pa))
           * float(np.dot(la1, t21)))
    den = (_guard_dot(la1, R21 @ sample_pa, degeneracy_floor_deg,
                      "line-a-through-epipole")
           * _guard_dot(n, R2.T @ sample_pb, degeneracy_floor_deg,
                        "plane-through-center-2")
           * _guard_dot(lb3, t23, degeneracy_floor_deg,
                        "line-b-parallel-to-baseline"))
    return num / den


def _mid_homo(seg) -> np.ndarray:
    """Normalized homogeneous midpoint of a segment, used as a
    well-conditioned anchor for the sample point on its supporting line."""
    if seg.na is None or seg.nb is None:
        # No intrinsics were available; fall back to the line's own
        # closest-to-origin point.
        return point_on_homoline(seg.line)
    m = 0.5 * (seg.na + seg.nb)
    return m / m[2]


def quadratic_angle_minimizer(u: np.ndarray, v: np.ndarray, w: np.ndarray,
                              degeneracy_floor_deg: float = DEGENERACY_FLOOR_DEG,
                              ) -> float:
    """Scalar minimizing the angle between u and v + lam * w.

    The objective ||u x (v + lam w)|| / (||u|| ||v + lam w||) has a rational
    derivative whose numerator factors into two linear terms; the stationary
    points are evaluated and the argmin returned.
    """
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    w = np.asarray(w, float)
    nu, nw = np.linalg.norm(u), np.linalg.norm(w)
    if nu < 1e-12 or nw < 1e-12:
        raise DegenerateMinimizer("u or w vanishes")
    if angle_between_deg(u, w) < degeneracy_floor_deg:
        raise DegenerateMinimizer("u parallel to w")

    uv, uw, vw = np.dot(u, v), np.dot(u, w), np.dot(v, w)
    nv2, nw2 = np.dot(v, v), nw * nw
    scale = max(nu * np.sqrt(nv2) * nw2, 1e-300)

    def objective(lam):
        a = v + lam * w
        na = np.linalg.norm(a)
        if na < 1e-300:
            return 1.0
        return np.linalg.norm(np.cross(u, a)) / (nu * na)

    # Derivative numerator: (u.v + lam u.w) * (A lam + B) with
    # A = (u.w)(v.w) - (u.v)||w||^2, B = (u.w)||v||^2 - (u.v)(v.w).
    A = uw * vw - uv * nw2
    B = uw * nv2 - uv * vw
    roots = []
    if abs(A) > 1e-14 * scale:
        roots.append(-B / A)
    if abs(uw) > 1e-14 * nu * nw:
        roots.append(-uv / uw)
    roots = [r for r in roots if np.isfinite(r)]
    if not roots:
        raise DegenerateMinimizer("no finite stationary point")
    return float(min(roots, key=objective))


def _directed_tau(p_first: np.ndarray, p_mid: np.ndarray, p_last: np.ndarray,
                  tf: TripletFrame) -> float:
    """Scale of the second baseline from one point triplet, first two views
    fixed at unit baseline."""
    pose1, pose2, _ = tf.local_poses(1.0)
    P = triangulate_point(p_first, p_mid, pose1, pose2)
    _, R2, R3 = tf.rotations
    v = R3 @ (P - pose2.center)
    w = tf.relpose23.direction
    return quadratic_angle_minimizer(p_last, v, w)


def trifocal_point_ratio(pt: PointTriplet, tf: TripletFrame) -> float:
    """Symmetrized second/first baseline ratio from one tracked point.

    Computed forward (cameras 1-2 triangulate, camera 3 constrains) and
    backward (cameras 3-2 triangulate, camera 1 constrains, reciprocal
    ratio), then averaged.  Opposite signs of the two estimates reject the
    hypothesis.
    """
    p1, p2, p3 = pt.normalized
    tau_fwd = _directed_tau(p1, p2, p3, tf)
    tau_bwd = _directed_tau(p3, p2, p1, tf.reversed())
    if abs(tau_bwd) < 1e-12:
        raise DegenerateMinimizer("reverse ratio vanishes")
    if np.sign(tau_fwd) != np.sign(1.0 / tau_bwd):
        raise InconsistentSign(
            f"forward {tau_fwd:.4g} vs backward {1.0 / tau_bwd:.4g}")
    return 0.5 * (tau_fwd + 1.0 / tau_bwd)


def _directed_tau_line(l_first: np.ndarray, l_mid: np.ndarray,
                       l_last: np.ndarray, tf: TripletFrame) -> float:
    pose1, pose2, _ = tf.local_poses(1.0)
    L = triangulate_line(l_first, l_mid, pose1, pose2)
    _, R2, R3 = tf.rotations
    v = R3 @ np.cross(L.direction, L.point - pose2.center)
    w = np.cross(R3 @ L.direction, tf.relpose23.direction)
    return quadratic_angle_minimizer(l_last, v, w)


def trifocal_line_ratio(lt: LineTriplet, tf: TripletFrame) -> float:
    """Symmetrized baseline ratio from one tracked line.

    Depends only on the supporting lines, never on segment endpoints.
    """
    l1, l2, l3 = lt.lines
    tau_fwd = _directed_tau_line(l1, l2, l3, tf)
    tau_bwd = _directed_tau_line(l3, l2, l1, tf.reversed())
    if abs(tau_bwd) < 1e-12:
        raise DegenerateMinimizer("reverse ratio vanishes")
    if np.sign(tau_fwd) != np.sign(1.0 / tau_bwd):
        raise InconsistentSign(
            f"forward {tau_fwd:.4g} vs backward {1.0 / tau_bwd:.4g}")
    return 0.5 * (tau_fwd + 1.0 / tau_bwd)
