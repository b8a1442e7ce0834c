"""Ground-truth scene generator: cameras, planes, lines, points, noise and
outlier models.

Scenes are man-made-style: cameras along an arc looking at the origin, a
wall-like and a floor-like plane carrying the coplanar line pairs, free 3D
lines and points for the trifocal families.  Every line on a plane is
visible in exactly one consecutive camera pair, so each camera triplet gets
genuine coplanar-pair hypotheses with no trifocal support from them.  The
whole scene is a deterministic function of the seed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .errors import InfeasibleSpec
from .geometry import (
    GlobalPose,
    Intrinsics,
    Line3,
    RelativePose,
    look_at_rotation,
    project_point,
    so3_exp,
)

DEFAULT_INTRINSICS = Intrinsics(fx=1200.0, fy=1200.0, cx=960.0, cy=540.0,
                                width=1920, height=1080)


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic description of a synthetic chain scene."""

    seed: int = 0
    n_cameras: int = 8
    camera_radius: float = 10.0
    camera_arc_deg: float = 100.0
    camera_height_step: float = 0.2
    spacing_jitter: float = 0.35     # uneven camera spacing -> nontrivial ratios
    n_planes: int = 2
    plane_extent: float = 3.0
    lines_per_pair_per_plane: int = 4
    trifocal_lines_per_triplet: int = 3
    points_per_triplet: int = 4
    noise_sigma_px: float = 0.0
    outlier_fraction: float = 0.0
    intrinsics: Intrinsics = DEFAULT_INTRINSICS
    guarantee_coplanar: bool = True
    near_coplanar_offset: float = 0.0  # nuisance off-plane shift, scene fraction
    cycle: bool = False

    def __post_init__(self):
        if self.n_cameras < 2:
            raise InfeasibleSpec("need at least two cameras")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise InfeasibleSpec("outlier fraction must be in [0, 1]")


@dataclass
class GroundTruth:
    """Everything the generator knows that the pipeline must recover."""

    poses: list[GlobalPose]
    ratios: list[float]                 # one per interior camera
    points3d: dict[int, np.ndarray]     # track id -> xyz
    lines3d: dict[int, Line3]           # track id -> line
    line_plane: dict[int, int | None]   # track id -> plane index (None: free)
    line_visibility: dict[int, tuple[int, ...]]
    point_visibility: dict[int, tuple[int, ...]]
    outlier_segment_matches: dict[tuple[int, int], set[int]] = field(
        default_factory=dict)           # pair -> indices into the match list
    outlier_point_matches: dict[tuple[int, int], set[int]] = field(
        default_factory=dict)


def mutate_overlap(spec: SceneSpec, mode: str) -> SceneSpec:
    """Remove trifocal feature families while keeping coplanar bifocal pairs."""
    if mode == "remove-trifocal-points":
        return dataclasses.replace(spec, points_per_triplet=0)
    if mode == "remove-trifocal-lines":
        return dataclasses.replace(spec, trifocal_lines_per_triplet=0)
    if mode == "bifocal-only":
        return dataclasses.replace(spec, points_per_triplet=0,
                                   trifocal_lines_per_triplet=0)
    raise InfeasibleSpec(f"unknown overlap mode {mode!r}")


# --- camera chain ---------------------------------------------------------

def _camera_poses(spec: SceneSpec, rng: np.random.Generator) -> list[GlobalPose]:
    n = spec.n_cameras
    arc = np.radians(spec.camera_arc_deg)
    gaps = 1.0 + spec.spacing_jitter * rng.uniform(-1, 1, size=max(n - 1, 1))
    theta = np.concatenate([[0.0], np.cumsum(gaps)])
    theta = theta / theta[-1] * arc - arc / 2 + np.pi / 2
    poses = []
    for j in range(n):
        c = np.array([spec.camera_radius * np.cos(theta[j]),
                      spec.camera_radius * np.sin(theta[j]),
                      spec.camera_height_step * j])
        R = look_at_rotation(c, np.zeros(3))
        poses.append(GlobalPose.from_center(R, c))
    return poses


def _plane_frames(spec: SceneSpec, poses: list[GlobalPose],
                  rng: np.random.Generator):
    """(origin, in-plane basis u, v, normal) per plane."""
    u_avg = np.mean([p.center for p in poses], axis=0)
    u_avg = u_avg / np.linalg.norm(u_avg)
    frames = []
    for k in range(spec.n_planes):
        if k % 2 == 0:
            # Wall-like: faces the cameras, sits behind the origin.
            normal = so3_exp(rng.normal(scale=0.08, size=3)) @ u_avg
            origin = -u_avg * (1.2 + 0.3 * rng.uniform())
        else:
            # Floor-like.
            normal = so3_exp(rng.normal(scale=0.08, size=3)) @ np.array(
                [0.0, 0, 1.0])
            origin = np.array([0.0, 0, -1.4 - 0.2 * rng.uniform()])
        normal = normal / np.linalg.norm(normal)
        u = np.cross(normal, [0.0, 0, 1.0])
        if np.linalg.norm(u) < 0.2:
            u = np.cross(normal, [1.0, 0, 0])
        u = u / np.linalg.norm(u)
        v = np.cross(normal, u)
        frames.append((origin, u, v, normal))
    return frames


# --- projection helpers ---------------------------------------------------

def _project_px(P, pose: GlobalPose, K: Intrinsics):
    p = project_point(P, pose)  # raises BehindCamera when not in front
    return np.array([K.fx * p[0] + K.cx, K.fy * p[1] + K.cy])


def _inside(px, K: Intrinsics, margin: float = 12.0) -> bool:
    return (margin <= px[0] <= K.width - margin
            and margin <= px[1] <= K.height - margin)


def _clip_segment(a: np.ndarray, b: np.ndarray, K: Intrinsics):
    """Liang-Barsky clip of segment a-b to the image rectangle, or None."""
    d = b - a
    t0, t1 = 0.0, 1.0
    for p, q in [(-d[0], a[0]), (d[0], K.width - a[0]),
                 (-d[1], a[1]), (d[1], K.height - a[1])]:
        if abs(p) < 1e-12:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return a + t0 * d, a + t1 * d


# --- generation -----------------------------------------------------------

def generate(spec: SceneSpec) -> tuple[Dataset, GroundTruth]:
    """Build the scene, project features, add noise and outliers.

    Returns the dataset in the standard ingestion form plus the ground truth.
    """
    rng = np.random.default_rng(spec.seed)
    K = spec.intrinsics
    poses = _camera_poses(spec, rng)
    n = spec.n_cameras
    pairs = [(j, j + 1) for j in range(n - 1)]
    if spec.cycle:
        pairs.append((n - 1, 0))
    triplets = [(j, j + 1, j + 2) for j in range(n - 2)]

    frames = _plane_frames(spec, poses, rng)

    lines3d: dict[int, Line3] = {}
    line_plane: dict[int, int | None] = {}
    line_vis: dict[int, tuple[int, ...]] = {}
    line_endpoints: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    points3d: dict[int, np.ndarray] = {}
    point_vis: dict[int, tuple[int, ...]] = {}
    next_id = 0

    def visible_segment(P0, P1, cams) -> bool:
        for c in cams:
            try:
                a = _project_px(P0, poses[c], K)
                b = _project_px(P1, poses[c], K)
            except Exception:
                return False
            if not (_inside(a, K) and _inside(b, K)):
                return False
            if np.linalg.norm(a - b) < 25.0:
                return False
        return True

    # Plane lines: visible in exactly one consecutive pair each.  In-plane
    # directions are spread deterministically so the 15 deg filter always
    # leaves workable pairs.
    m = max(spec.lines_per_pair_per_plane, 1)
    for pi, (origin, u, v, normal) in enumerate(frames):
        for pair_idx, (i, j) in enumerate(pairs):
            for k in range(spec.lines_per_pair_per_plane):
                placed = False
                for _ in range(200):
                    ang = (np.pi * (k + (pair_idx % 2) * 0.5) / m
                           + rng.normal(scale=0.08))
                    d = np.cos(ang) * u + np.sin(ang) * v
                    c0 = (origin + rng.uniform(-1, 1) * spec.plane_extent * u * 0.5
                          + rng.uniform(-1, 1) * spec.plane_extent * v * 0.5)
                    if spec.near_coplanar_offset > 0:
                        c0 = c0 + normal * spec.near_coplanar_offset * \
                            spec.plane_extent * rng.uniform(-1, 1)
                    half = 0.35 * spec.plane_extent
                    P0, P1 = c0 - half * d, c0 + half * d
                    if visible_segment(P0, P1, (i, j)):
                        placed = True
                        break
                if not placed:
                    if spec.guarantee_coplanar:
                        raise InfeasibleSpec(
                            f"cannot place a plane line for pair {(i, j)}")
                    continue
                tid = next_id
                next_id += 1
                lines3d[tid] = Line3(d / np.linalg.norm(d), c0)
                line_plane[tid] = pi
                line_vis[tid] = (i, j)
                line_endpoints[tid] = (P0, P1)

    # Free trifocal lines and points.
    for (a, b, c) in triplets:
        for _ in range(spec.trifocal_lines_per_triplet):
            for _ in range(200):
                d = rng.normal(size=3)
                d /= np.linalg.norm(d)
                c0 = rng.uniform(-1, 1, size=3) * 1.5
                P0, P1 = c0 - 0.9 * d, c0 + 0.9 * d
                if visible_segment(P0, P1, (a, b, c)):
                    tid = next_id
                    next_id += 1
                    lines3d[tid] = Line3(d, c0)
                    line_plane[tid] = None
                    line_vis[tid] = (a, b, c)
                    line_endpoints[tid] = (P0, P1)
                    break
            else:
                raise InfeasibleSpec(f"cannot place a trifocal line for "
                                     f"triplet {(a, b, c)}")
        for _ in range(spec.points_per_triplet):
            for _ in range(200):
                P = rng.uniform(-1, 1, size=3) * 2.0
                ok = all(_inside(_project_px(P, poses[ci], K), K)
                         for ci in (a, b, c)
                         if (poses[ci].rotation @ (P - poses[ci].center))[2] > 0.5)
                ok = ok and all(
                    (poses[ci].rotation @ (P - poses[ci].center))[2] > 0.5
                    for ci in (a, b, c))
                if ok:
                    tid = next_id
                    next_id += 1
                    points3d[tid] = P
                    point_vis[tid] = (a, b, c)
                    break
            else:
                raise InfeasibleSpec(f"cannot place a point for triplet "
                                     f"{(a, b, c)}")

    # Observations.
    segments: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] = {
        i: {} for i in range(n)}
    points_obs: dict[int, dict[int, np.ndarray]] = {i: {} for i in range(n)}
    for tid, (P0, P1) in line_endpoints.items():
        for c in line_vis[tid]:
            a = _project_px(P0, poses[c], K)
            b = _project_px(P1, poses[c], K)
            clipped = _clip_segment(a, b, K)
            if clipped is None:
                continue
            a, b = clipped
            if spec.noise_sigma_px > 0:
                a = a + rng.normal(scale=spec.noise_sigma_px, size=2)
                b = b + rng.normal(scale=spec.noise_sigma_px, size=2)
            segments[c][tid] = (a, b)
    for tid, P in points3d.items():
        for c in point_vis[tid]:
            px = _project_px(P, poses[c], K)
            if spec.noise_sigma_px > 0:
                px = px + rng.normal(scale=spec.noise_sigma_px, size=2)
            points_obs[c][tid] = px

    # Matches: identity correspondence on track ids, then outlier injection.
    segment_matches = {}
    point_matches = {}
    for (i, j) in pairs:
        segment_matches[(i, j)] = sorted(
            (t, t) for t in segments[i] if t in segments[j])
        point_matches[(i, j)] = sorted(
            (t, t) for t in points_obs[i] if t in points_obs[j])

    gt = GroundTruth(
        poses=poses,
        ratios=[float(np.linalg.norm(poses[t + 2].center - poses[t + 1].center)
                      / np.linalg.norm(poses[t + 1].center - poses[t].center))
                for t in range(n - 2)],
        points3d=points3d, lines3d=lines3d, line_plane=line_plane,
        line_visibility=line_vis, point_visibility=point_vis)

    relposes = {}
    for (i, j) in pairs:
        Rij = poses[j].rotation @ poses[i].rotation.T
        tij = poses[j].translation - Rij @ poses[i].translation
        relposes[(i, j)] = RelativePose(Rij, tij / np.linalg.norm(tij), (i, j))

    ds = Dataset(cameras=[K] * n, segments=segments, points=points_obs,
                 segment_matches=segment_matches, point_matches=point_matches,
                 relative_poses=relposes, gt_poses=poses, cycle=spec.cycle)

    if spec.outlier_fraction > 0:
        _inject_outliers(ds, gt, spec, rng)

    return ds, gt


def _inject_outliers(ds: Dataset, gt: GroundTruth, spec: SceneSpec,
                     rng: np.random.Generator) -> None:
    """Replace a fraction of matches with wrong correspondences.

    A corrupted match pairs the image-i feature with a different feature of
    image j.  The label is kept truthful: the image-j observation of the
    replacement must disagree with the true geometry of the image-i track
    by more than 1e-3 px (resampled otherwise), so a flagged outlier never
    coincidentally satisfies its constraint at the true scale.
    """
    K = spec.intrinsics

    def point_gap(ida, wrong, j):
        """Pixel distance between track ida's true projection in image j
        and the observation claimed for it."""
        proj = _project_px(gt.points3d[ida], gt.poses[j], K)
        return float(np.linalg.norm(proj - ds.points[j][wrong]))

    def line_gap(ida, wrong, j):
        """Worst endpoint distance (px) from the claimed observation to the
        true infinite image line of track ida in image j."""
        L = gt.lines3d[ida]
        a = _project_px(L.point, gt.poses[j], K)
        b = _project_px(L.point + L.direction, gt.poses[j], K)
        t = (b - a) / np.linalg.norm(b - a)
        pa, pb = ds.segments[j][wrong]
        return max(abs(float(t[0] * (p - a)[1] - t[1] * (p - a)[0]))
                   for p in (pa, pb))

    for kind, matches_map in [("seg", ds.segment_matches),
                              ("pt", ds.point_matches)]:
        for pair, matches in matches_map.items():
            n_out = int(round(spec.outlier_fraction * len(matches)))
            if n_out == 0 or len(matches) < 2:
                continue
            j = pair[1]
            idxs = rng.choice(len(matches), size=n_out, replace=False)
            flagged = set()
            for idx in sorted(idxs):
                ida, _ = matches[idx]
                others = [m[1] for k, m in enumerate(matches)
                          if k != idx and m[1] != ida]
                if not others:
                    continue
                for _ in range(50):
                    wrong = others[rng.integers(len(others))]
                    try:
                        gap = (point_gap(ida, wrong, j) if kind == "pt"
                               else line_gap(ida, wrong, j))
                    except Exception:
                        continue
                    if gap > 1e-3:
                        matches[idx] = (ida, wrong)
                        flagged.add(idx)
                        break
            if kind == "seg":
                gt.outlier_segment_matches[pair] = flagged
            else:
                gt.outlier_point_matches[pair] = flagged
