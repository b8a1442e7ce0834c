import numpy as np
import pytest

from chainsfm import errors
from chainsfm.assemble import line_matches, line_triplets, point_triplets, triplet_frame
from chainsfm.features import CoplanarPairHypothesis, LineMatch2V
from chainsfm.geometry import (
    GlobalPose,
    Line3,
    look_at_rotation,
    point_on_homoline,
    so3_exp,
)
from chainsfm.scale import (
    TripletFrame,
    coplanar_scale_ratio,
    quadratic_angle_minimizer,
    trifocal_line_ratio,
    trifocal_point_ratio,
)
from chainsfm.synth import SceneSpec, generate

from conftest import project_segment, triplet_frame_from_poses


def plane_scene(c3, default_K):
    """Two lines in the plane z = 5; first seen by cameras 1-2, second by 2-3."""
    poses = [GlobalPose.from_center(np.eye(3), c)
             for c in ([-1.0, 0, 0], [0.0, 0, 0], c3)]
    # Directions 60 degrees apart, neither parallel to a baseline.
    da = np.array([np.cos(np.radians(20)), np.sin(np.radians(20)), 0.0])
    db = np.array([np.cos(np.radians(80)), np.sin(np.radians(80)), 0.0])
    la = Line3(da, np.array([0.0, -0.3, 5.0]))
    lb = Line3(db, np.array([0.2, 0.1, 5.0]))
    K = default_K
    h = CoplanarPairHypothesis(
        LineMatch2V((0, 1), project_segment(la, -1, 1, poses[0], K, 0),
                    project_segment(la, -1, 1, poses[1], K, 1)),
        LineMatch2V((1, 2), project_segment(lb, -1, 1, poses[1], K, 1),
                    project_segment(lb, -1, 1, poses[2], K, 2)))
    return h, triplet_frame_from_poses(*poses)


def test_coplanar_ratio_unit(default_K):
    h, tf = plane_scene([0.0, 1.0, 0], default_K)
    assert coplanar_scale_ratio(h, tf) == pytest.approx(1.0, abs=1e-9)


def test_coplanar_ratio_double(default_K):
    h, tf = plane_scene([0.0, 2.0, 0], default_K)
    assert coplanar_scale_ratio(h, tf) == pytest.approx(2.0, abs=1e-9)


def test_coplanar_parallel_directions(default_K):
    poses = [GlobalPose.from_center(np.eye(3), c)
             for c in ([-1.0, 0, 0], [0.0, 0, 0], [0.0, 1.0, 0])]
    # 10 degrees apart: below the 15 degree floor.
    da = np.array([np.cos(np.radians(20)), np.sin(np.radians(20)), 0.0])
    db = np.array([np.cos(np.radians(30)), np.sin(np.radians(30)), 0.0])
    la = Line3(da, np.array([0.0, -0.3, 5.0]))
    lb = Line3(db, np.array([0.2, 0.1, 5.0]))
    K = default_K
    h = CoplanarPairHypothesis(
        LineMatch2V((0, 1), project_segment(la, -1, 1, poses[0], K, 0),
                    project_segment(la, -1, 1, poses[1], K, 1)),
        LineMatch2V((1, 2), project_segment(lb, -1, 1, poses[1], K, 1),
                    project_segment(lb, -1, 1, poses[2], K, 2)))
    with pytest.raises(errors.DegenerateConfiguration):
        coplanar_scale_ratio(h, triplet_frame_from_poses(*poses))


def test_coplanar_sample_point_invariance(default_K):
    h, tf = plane_scene([0.0, 1.4, 0], default_K)
    base = coplanar_scale_ratio(h, tf)
    rng = np.random.default_rng(0)
    for _ in range(10):
        pa = point_on_homoline(h.la.line_j,
                               near=np.array([*rng.normal(size=2), 1.0]))
        pb = point_on_homoline(h.lb.line_i,
                               near=np.array([*rng.normal(size=2), 1.0]))
        r = coplanar_scale_ratio(h, tf, sample_pa=pa, sample_pb=pb)
        assert abs(r - base) < 1e-9 * abs(base)


def test_coplanar_scale_covariance(default_K):
    h1, tf1 = plane_scene([0.0, 0.8, 0], default_K)
    h3, tf3 = plane_scene([0.0, 2.4, 0], default_K)
    r1 = coplanar_scale_ratio(h1, tf1)
    r3 = coplanar_scale_ratio(h3, tf3)
    assert r3 == pytest.approx(3.0 * r1, rel=1e-9)


def test_coplanar_endpoint_independence(default_K):
    # Sliding the endpoints along the supporting lines leaves the segments'
    # lines identical, so the result is bit-for-bit stable.
    poses = [GlobalPose.from_center(np.eye(3), c)
             for c in ([-1.0, 0, 0], [0.0, 0, 0], [0.0, 1.3, 0])]
    da = np.array([np.cos(np.radians(20)), np.sin(np.radians(20)), 0.0])
    db = np.array([np.cos(np.radians(70)), np.sin(np.radians(70)), 0.0])
    la = Line3(da, np.array([0.0, -0.3, 5.0]))
    lb = Line3(db, np.array([0.2, 0.1, 5.0]))
    K = default_K
    tf = triplet_frame_from_poses(*poses)

    from chainsfm.geometry import Segment2

    def slide(seg, off0, off1):
        d = (seg.b - seg.a) / np.linalg.norm(seg.b - seg.a)
        return Segment2(seg.a + off0 * d, seg.b + off1 * d, seg.line,
                        seg.image, seg.na, seg.nb)

    base = CoplanarPairHypothesis(
        LineMatch2V((0, 1), project_segment(la, -1, 1, poses[0], K, 0),
                    project_segment(la, -1, 1, poses[1], K, 1)),
        LineMatch2V((1, 2), project_segment(lb, -1, 1, poses[1], K, 1),
                    project_segment(lb, -1, 1, poses[2], K, 2)))
    moved = CoplanarPairHypothesis(
        LineMatch2V((0, 1), slide(base.la.seg_i, 11.0, -4.0), base.la.seg_j),
        LineMatch2V((1, 2), base.lb.seg_i, slide(base.lb.seg_j, -6.0, 9.0)))
    # Fixed sample points isolate the formula from the midpoint default.
    pa = point_on_homoline(base.la.line_j)
    pb = point_on_homoline(base.lb.line_i)
    r0 = coplanar_scale_ratio(base, tf, sample_pa=pa, sample_pb=pb)
    r1 = coplanar_scale_ratio(moved, tf, sample_pa=pa, sample_pb=pb)
    assert r0 == r1


# --- quadratic minimizer --------------------------------------------------

def _objective(u, v, w, lam):
    a = np.asarray(v) + lam * np.asarray(w)
    return np.linalg.norm(np.cross(u, a)) / (np.linalg.norm(u) * np.linalg.norm(a))


def test_minimizer_exact_alignment_1():
    lam = quadratic_angle_minimizer([1.0, 0, 0], [1.0, 1, 0], [0.0, -1, 0])
    assert lam == pytest.approx(1.0, abs=1e-12)


def test_minimizer_exact_alignment_2():
    lam = quadratic_angle_minimizer([0.0, 0, 1], [1.0, 0, 1], [-1.0, 0, 0])
    assert lam == pytest.approx(1.0, abs=1e-12)


def test_minimizer_parallel_uw():
    with pytest.raises(errors.DegenerateMinimizer):
        quadratic_angle_minimizer([1.0, 0, 0], [0.0, 1, 0], [1.0, 1e-9, 0])


def grid_objective_min(u, v, w, grid, grid2):
    # Scalar form: f^2 = 1 - (u.a)^2 / (|u|^2 |a|^2) with a = v + lam w.
    uv, uw, vw = np.dot(u, v), np.dot(u, w), np.dot(v, w)
    s = uv + grid * uw
    n = np.dot(v, v) + 2 * vw * grid + np.dot(w, w) * grid2
    g = (s * s / (n * np.dot(u, u))).max()
    return np.sqrt(max(1.0 - g, 0.0))


def test_minimizer_grid_oracle():
    rng = np.random.default_rng(42)
    grid = np.linspace(-1e3, 1e3, 1_000_001)
    grid2 = grid * grid
    n = 0
    while n < 1000:
        u, v, w = rng.normal(size=(3, 3))
        try:
            lam = quadratic_angle_minimizer(u, v, w)
        except errors.DegenerateMinimizer:
            continue
        f = _objective(u, v, w, lam)
        assert f <= grid_objective_min(u, v, w, grid, grid2) + 1e-9
        n += 1


def test_minimizer_local_minimum_property():
    rng = np.random.default_rng(7)
    n = 0
    while n < 200:
        u, v, w = rng.normal(size=(3, 3))
        try:
            lam = quadratic_angle_minimizer(u, v, w)
        except errors.DegenerateMinimizer:
            continue
        f = _objective(u, v, w, lam)
        assert f <= _objective(u, v, w, lam + 1e-6) + 1e-12
        assert f <= _objective(u, v, w, lam - 1e-6) + 1e-12
        n += 1


# --- trifocal ratios on generator scenes ----------------------------------

@pytest.fixture(scope="module")
def scene():
    spec = SceneSpec(seed=3, n_cameras=5)
    ds, gt = generate(spec)
    return spec, ds, gt


def test_trifocal_point_recovers_truth(scene):
    spec, ds, gt = scene
    for t in range(len(gt.ratios)):
        tf = triplet_frame(ds, t)
        for pt in point_triplets(ds, t):
            r = trifocal_point_ratio(pt, tf)
            assert r == pytest.approx(gt.ratios[t], rel=1e-9)


def test_trifocal_line_recovers_truth(scene):
    spec, ds, gt = scene
    for t in range(len(gt.ratios)):
        tf = triplet_frame(ds, t)
        for lt in line_triplets(ds, t):
            r = trifocal_line_ratio(lt, tf)
            assert r == pytest.approx(gt.ratios[t], rel=1e-9)


def test_trifocal_symmetrization_noop_when_noiseless(scene):
    from chainsfm.scale import _directed_tau
    spec, ds, gt = scene
    tf = triplet_frame(ds, 0)
    for pt in point_triplets(ds, 0):
        p1, p2, p3 = pt.normalized
        tau_f = _directed_tau(p1, p2, p3, tf)
        tau_b = _directed_tau(p3, p2, p1, tf.reversed())
        assert tau_f == pytest.approx(1.0 / tau_b, rel=1e-9)


def test_trifocal_line_endpoint_independence(scene):
    spec, ds, gt = scene
    tf = triplet_frame(ds, 1)
    lts = line_triplets(ds, 1)
    assert lts
    lt = lts[0]
    base = trifocal_line_ratio(lt, tf)
    # Rebuild the third segment with endpoints moved along the line.
    from chainsfm.features import LineTriplet
    from chainsfm.geometry import Segment2
    s3 = lt.segs[2]
    d = (s3.b - s3.a) / np.linalg.norm(s3.b - s3.a)
    moved = Segment2(s3.a + 7.0 * d, s3.b - 3.0 * d, s3.line, s3.image,
                     s3.na, s3.nb)
    lt2 = LineTriplet(lt.cameras, (lt.segs[0], lt.segs[1], moved))
    assert trifocal_line_ratio(lt2, tf) == base


def test_trifocal_line_direction_parallel_to_baseline(default_K):
    # Line direction parallel to the 2->3 translation direction: w vanishes.
    # The 1-2 baseline is transverse so the line still triangulates.
    poses = [GlobalPose.from_center(np.eye(3), c)
             for c in ([0.0, 0, 0], [0.0, 1.0, 0], [1.3, 1.0, 0])]
    L = Line3(np.array([1.0, 0, 0]), np.array([0.0, 0.4, 6.0]))
    K = default_K
    from chainsfm.features import LineTriplet
    segs = tuple(project_segment(L, -1, 1, poses[i], K, i) for i in range(3))
    tf = triplet_frame_from_poses(*poses)
    with pytest.raises(errors.DegenerateMinimizer):
        trifocal_line_ratio(LineTriplet((0, 1, 2), segs), tf)


def test_parallel_rays_propagate(default_K):
    poses = [GlobalPose.from_center(np.eye(3), c)
             for c in ([0.0, 0, 0], [1.0, 0, 0], [2.0, 0.5, 0])]
    tf = triplet_frame_from_poses(*poses)
    from chainsfm.features import PointTriplet
    # Same observed direction in views 1 and 2: point at infinity.
    norm = np.array([[0.1, 0.0, 1.0]] * 3)
    pt = PointTriplet((0, 1, 2), np.zeros((3, 2)), norm)
    with pytest.raises(errors.ParallelRays):
        trifocal_point_ratio(pt, tf)


def test_rotation_invariance(default_K):
    # Globally rotating the scene and all poses leaves every ratio unchanged.
    spec = SceneSpec(seed=9, n_cameras=4)
    ds, gt = generate(spec)
    t = 0
    tf = triplet_frame(ds, t)
    S = so3_exp([0.3, -0.2, 0.9])
    rot_poses = [GlobalPose.from_center(p.rotation @ S.T, S @ p.center)
                 for p in gt.poses]
    tf_rot = triplet_frame_from_poses(*rot_poses[:3])
    for pt in point_triplets(ds, t):
        r0 = trifocal_point_ratio(pt, tf)
        r1 = trifocal_point_ratio(pt, tf_rot)
        assert r1 == pytest.approx(r0, rel=1e-9)
