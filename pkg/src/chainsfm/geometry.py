"""Elementary projective/Euclidean types and operations.

Conventions: a camera with rotation R and translation t maps a world point P
to camera coordinates R @ P + t; its center is C = -R.T @ t.  Image
observations are kept in normalized coordinates (intrinsics removed, K = I)
as homogeneous 3-vectors.  Homogeneous lines are stored unit-norm with the
first nonzero entry positive so that equal lines compare equal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCamera,
    CenterOnLine,
    CoincidentEndpoints,
    NegativeDepth,
    ParallelLines,
    ParallelPlanes,
    ParallelRays,
)

# Numerical-conditioning floor for parallel rays/planes/lines (degrees).
# Distinct from the 15 deg candidate filter used during robust estimation.
DEGENERACY_ANGLE_DEG = 0.1


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-15:
        raise ValueError("cannot normalize near-zero vector")
    return v / n


def angle_between_deg(u: np.ndarray, v: np.ndarray) -> float:
    """Unsigned angle between two 3-vectors, in [0, 90] degrees (axial)."""
    c = abs(float(np.dot(_unit(u), _unit(v))))
    return float(np.degrees(np.arccos(min(c, 1.0))))


def check_rotation(R: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise ValueError("matrix is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix determinant is not +1")
    return R


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix from an axis-angle 3-vector (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        W = skew(w)
        return np.eye(3) + W + 0.5 * W @ W
    k = w / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def look_at_rotation(center: np.ndarray, target: np.ndarray,
                     up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> np.ndarray:
    """World-to-camera rotation for a camera at `center` looking at `target`.

    Camera z-axis points toward the target, x right, y down.
    """
    z = _unit(np.asarray(target, float) - np.asarray(center, float))
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x = _unit(x)
    y = np.cross(z, x)
    # Rows are the camera axes expressed in world coordinates.
    return np.stack([x, y, z])


def canonical_line(l: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Unit-norm homogeneous line with first nonzero entry positive."""
    l = np.asarray(l, dtype=float)
    n = np.linalg.norm(l)
    if n < tol:
        raise ValueError("zero line")
    l = l / n
    for x in l:
        if abs(x) > tol:
            if x < 0:
                l = -l
            break
    return l


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics plus image size, all in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def area(self) -> float:
        return float(self.width * self.height)

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))


@dataclass(frozen=True)
class RelativePose:
    """Relative rotation and unit translation direction from camera i to j."""

    rotation: np.ndarray  # R_ij
    direction: np.ndarray  # unit t_ij
    pair: tuple[int, int]

    def __post_init__(self):
        check_rotation(self.rotation)
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("translation direction must be unit norm")
        if self.pair[0] == self.pair[1]:
            raise ValueError("relative pose needs two distinct cameras")

    def inverse(self) -> "RelativePose":
        R = self.rotation.T
        return RelativePose(R, -R @ self.direction, (self.pair[1], self.pair[0]))


@dataclass(frozen=True)
class GlobalPose:
    """Camera pose in the world frame: x_cam = R @ x_world + t."""

    rotation: np.ndarray
    translation: np.ndarray
    # exact center when constructed from one; -R.T @ (-R @ c) differs from
    # c in the last ulp, which would break byte-identical file round trips
    _center: np.ndarray | None = None

    def __post_init__(self):
        check_rotation(self.rotation)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float))

    @property
    def center(self) -> np.ndarray:
        if self._center is not None:
            return self._center
        return -self.rotation.T @ self.translation

    @classmethod
    def from_center(cls, R: np.ndarray, center: np.ndarray) -> "GlobalPose":
        R = np.asarray(R, float)
        center = np.asarray(center, dtype=float)
        return cls(R, -R @ center, center)

    @classmethod
    def identity(cls) -> "GlobalPose":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class Line3:
    """3D line as unit direction plus a point on the line."""

    direction: np.ndarray
    point: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("line direction must be unit norm")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))

    def at(self, s: float) -> np.ndarray:
        return self.point + s * self.direction


@dataclass(frozen=True)
class Segment2:
    """Detected 2D segment: pixel endpoints plus its normalized supporting line.

    `na`/`nb` cache the normalized homogeneous endpoints when the segment was
    built from known intrinsics (see `make_segment`)."""

    a: np.ndarray  # pixels
    b: np.ndarray  # pixels
    line: np.ndarray  # normalized homogeneous supporting line
    image: int
    na: np.ndarray | None = None
    nb: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        if np.linalg.norm(self.a - self.b) < 1e-9:
            raise CoincidentEndpoints("segment endpoints coincide")

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.a + self.b)

    def length(self) -> float:
        return float(np.linalg.norm(self.b - self.a))


def make_segment(a, b, K: "Intrinsics", image: int) -> Segment2:
    """Segment with its supporting line and normalized endpoints filled in."""
    line = line_from_segment(a, b, K)
    return Segment2(a=a, b=b, line=line, image=image,
                    na=normalize_point(a, K), nb=normalize_point(b, K))


# --- normalization --------------------------------------------------------

def normalize_point(px: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Pixel point -> normalized homogeneous point (z = 1)."""
    x, y = np.asarray(px, dtype=float)
    return np.array([(x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0])


def denormalize_point(p: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Normalized homogeneous point -> pixel coordinates."""
    p = np.asarray(p, dtype=float)
    if abs(p[2]) < 1e-15:
        raise ValueError("point at infinity")
    x, y = p[0] / p[2], p[1] / p[2]
    return np.array([K.fx * x + K.cx, K.fy * y + K.cy])


def line_from_segment(a: np.ndarray, b: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Normalized homogeneous line through two pixel endpoints."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.linalg.norm(a - b) < 1e-9:
        raise CoincidentEndpoints("endpoints are closer than 1e-9 px")
    pa = normalize_point(a, K)
    pb = normalize_point(b, K)
    return canonical_line(np.cross(pa, pb))


def pixel_line(l: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Normalized homogeneous line -> pixel-frame line, scaled so that
    (a, b) is unit norm (signed point-line products are pixel distances)."""
    lp = np.linalg.solve(K.K.T, np.asarray(l, dtype=float))
    n = np.hypot(lp[0], lp[1])
    if n < 1e-15:
        raise ValueError("line at infinity")
    return lp / n


def point_line_distance_px(px: np.ndarray, l: np.ndarray, K: Intrinsics) -> float:
    """Pixel distance from a pixel point to a normalized homogeneous line."""
    lp = pixel_line(l, K)
    x, y = np.asarray(px, dtype=float)
    return abs(lp[0] * x + lp[1] * y + lp[2])


# --- triangulation --------------------------------------------------------

def triangulate_point(p1: np.ndarray, p2: np.ndarray,
                      pose1: GlobalPose, pose2: GlobalPose) -> np.ndarray:
    """Midpoint of the common perpendicular of the two viewing rays."""
    c1, c2 = pose1.center, pose2.center
    d1 = _unit(pose1.rotation.T @ np.asarray(p1, dtype=float))
    d2 = _unit(pose2.rotation.T @ np.asarray(p2, dtype=float))
    if angle_between_deg(d1, d2) < DEGENERACY_ANGLE_DEG:
        raise ParallelRays("viewing rays closer than the degeneracy floor")
    # Solve [d1 -d2] [s; t] = c2 - c1 in the least-squares sense.
    A = np.stack([d1, -d2], axis=1)
    s, t = np.linalg.lstsq(A, c2 - c1, rcond=None)[0]
    P = 0.5 * ((c1 + s * d1) + (c2 + t * d2))
    z1 = (pose1.rotation @ P + pose1.translation)[2]
    z2 = (pose2.rotation @ P + pose2.translation)[2]
    if z1 <= 0 or z2 <= 0:
        raise NegativeDepth(f"triangulated point has depths {z1:.3g}, {z2:.3g}")
    return P


def triangulate_line(l1: np.ndarray, l2: np.ndarray,
                     pose1: GlobalPose, pose2: GlobalPose) -> Line3:
    """Intersect the two back-projected planes through the camera centers."""
    n1 = pose1.rotation.T @ np.asarray(l1, dtype=float)
    n2 = pose2.rotation.T @ np.asarray(l2, dtype=float)
    d = np.cross(n1, n2)
    nd = np.linalg.norm(d)
    if nd < np.linalg.norm(n1) * np.linalg.norm(n2) * np.sin(
            np.radians(DEGENERACY_ANGLE_DEG)):
        raise ParallelPlanes("back-projected planes are near parallel")
    d = d / nd
    # Point on both planes; third row pins the component along d to zero.
    A = np.stack([n1, n2, d])
    b = np.array([np.dot(n1, pose1.center), np.dot(n2, pose2.center), 0.0])
    p = np.linalg.solve(A, b)
    return Line3(d, p)


def closest_points_between_lines(la: Line3, lb: Line3) -> tuple[np.ndarray, np.ndarray]:
    """Closest point on `la` to `lb` and vice versa."""
    da, db = la.direction, lb.direction
    if angle_between_deg(da, db) < DEGENERACY_ANGLE_DEG:
        raise ParallelLines("line directions closer than the degeneracy floor")
    r = lb.point - la.point
    dab = float(np.dot(da, db))
    # [1 -dab; dab -1] [s; t] = [da.r; db.r]
    det = dab * dab - 1.0
    s = (-np.dot(da, r) + dab * np.dot(db, r)) / det
    t = (-dab * np.dot(da, r) + np.dot(db, r)) / det
    return la.at(s), lb.at(t)


# --- projection -----------------------------------------------------------

def project_point(P: np.ndarray, pose: GlobalPose) -> np.ndarray:
    """Project to a normalized homogeneous point (z = 1)."""
    q = pose.rotation @ (np.asarray(P, dtype=float) - pose.center)
    if q[2] <= 1e-12:
        raise BehindCamera(f"point depth {q[2]:.3g}")
    return q / q[2]


def project_line(L: Line3, pose: GlobalPose) -> np.ndarray:
    """Project a 3D line to a normalized homogeneous image line."""
    v = np.asarray(L.point, dtype=float) - pose.center
    n = np.cross(L.direction, v)
    if np.linalg.norm(n) < max(1.0, np.linalg.norm(v)) * 1e-12:
        raise CenterOnLine("camera center lies on the line")
    return canonical_line(pose.rotation @ n)


def point_on_homoline(l: np.ndarray, near: np.ndarray | None = None) -> np.ndarray:
    """A finite homogeneous point (z = 1) on the normalized image line `l`.

    If `near` (homogeneous, z = 1) is given, returns its foot on the line.
    """
    a, b, c = np.asarray(l, dtype=float)
    n2 = a * a + b * b
    if n2 < 1e-24:
        raise ValueError("line at infinity has no finite points")
    if near is None:
        x, y = -a * c / n2, -b * c / n2
    else:
        x0, y0 = near[0] / near[2], near[1] / near[2]
        r = (a * x0 + b * y0 + c) / n2
        x, y = x0 - a * r, y0 - b * r
    return np.array([x, y, 1.0])
