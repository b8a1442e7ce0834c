import numpy as np
import pytest

from chainsfm import errors, robust
from chainsfm.assemble import (
    line_matches,
    line_triplets,
    point_triplets,
    triplet_frame,
)
from chainsfm.features import LineMatch2V, PointTriplet
from chainsfm.geometry import (
    GlobalPose,
    Line3,
    denormalize_point,
    normalize_point,
    pixel_line,
    project_point,
    triangulate_point,
)
from chainsfm.synth import SceneSpec, generate

from conftest import project_segment, triplet_frame_from_poses


def setup_triplet(spec, t=1):
    ds, gt = generate(spec)
    tf = triplet_frame(ds, t)
    cands = robust.build_candidates(
        line_matches(ds, (t, t + 1)), line_matches(ds, (t + 1, t + 2)),
        point_triplets(ds, t), line_triplets(ds, t), tf)
    intr = tuple(ds.cameras[c] for c in tf.cameras)
    return ds, gt, tf, cands, intr, gt.ratios[t]


@pytest.fixture(scope="module")
def clean_triplet():
    return setup_triplet(SceneSpec(seed=3, n_cameras=5))


def two_line_matches(angle_b_deg, default_K):
    """One line seen by cameras 1-2 and one by 2-3, in the plane z = 5."""
    poses = [GlobalPose.from_center(np.eye(3), c)
             for c in ([-1.0, 0, 0], [0.0, 0, 0], [0.0, 1.0, 0])]
    da = np.array([np.cos(np.radians(20)), np.sin(np.radians(20)), 0.0])
    db = np.array([np.cos(np.radians(angle_b_deg)),
                   np.sin(np.radians(angle_b_deg)), 0.0])
    la = Line3(da, np.array([0.0, -0.3, 5.0]))
    lb = Line3(db, np.array([0.2, 0.1, 5.0]))
    K = default_K
    m12 = LineMatch2V((0, 1), project_segment(la, -1, 1, poses[0], K, 0),
                      project_segment(la, -1, 1, poses[1], K, 1), (0, 0))
    m23 = LineMatch2V((1, 2), project_segment(lb, -1, 1, poses[1], K, 1),
                      project_segment(lb, -1, 1, poses[2], K, 2), (1, 1))
    return m12, m23, triplet_frame_from_poses(*poses)


def test_build_candidates_singleton(default_K):
    m12, m23, tf = two_line_matches(80.0, default_K)
    cands = robust.build_candidates([m12], [m23], [], [], tf)
    assert len(cands.coplanar) == 1
    assert cands.n_se2 == 2
    assert cands.n_pt == 0 and cands.n_se == 0


def test_build_candidates_parallel_filter(default_K):
    # 3D directions 10 degrees apart: below the 15 degree floor.
    m12, m23, tf = two_line_matches(30.0, default_K)
    cands = robust.build_candidates([m12], [m23], [], [], tf)
    assert len(cands.coplanar) == 0


def test_build_candidates_matches_bruteforce(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    t = 1
    m12 = line_matches(ds, (t, t + 1))
    m23 = line_matches(ds, (t + 1, t + 2))
    R1, R2, R3 = tf.rotations

    def direction(m, Ra, Rb):
        d = np.cross(Ra.T @ m.line_i, Rb.T @ m.line_j)
        return d / np.linalg.norm(d)

    def endpoint_dist(sa, sb):
        return min(np.linalg.norm(p - q)
                   for p in (sa.a, sa.b) for q in (sb.a, sb.b))

    dist = np.array([[endpoint_dist(a.seg_j, b.seg_i) for b in m23]
                     for a in m12])
    n = cands.neighbors
    expected = set()
    for ia, ma in enumerate(m12):
        for ib, mb in enumerate(m23):
            near = (np.sum(dist[ia] < dist[ia, ib]) < n
                    or np.sum(dist[:, ib] < dist[ia, ib]) < n)
            da, db = direction(ma, R1, R2), direction(mb, R2, R3)
            ang = np.degrees(np.arccos(min(abs(np.dot(da, db)), 1.0)))
            if near and ang >= 15.0 and ma.match_id[1] != mb.match_id[0]:
                expected.add((ma.match_id[1], mb.match_id[0]))
    assert set(cands.coplanar_line_keys) == expected


def test_candidate_counts(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    t = 1
    ids = {m.match_id[1] for m in line_matches(ds, (t, t + 1))} | \
          {m.match_id[0] for m in line_matches(ds, (t + 1, t + 2))}
    assert cands.n_se2 == len(ids)
    assert cands.n_pt == len(point_triplets(ds, t))
    assert cands.n_se == len(line_triplets(ds, t))


def same_plane_pairs(cands, gt):
    out = []
    for i, (ka, kb) in enumerate(cands.coplanar_line_keys):
        pa, pb = gt.line_plane.get(ka), gt.line_plane.get(kb)
        if pa is not None and pa == pb and ka != kb:
            out.append(i)
    return out


def test_coplanar_residual_zero_at_true_scale(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    true_pairs = same_plane_pairs(cands, gt)
    assert true_pairs
    for i in true_pairs:
        r = robust.coplanar_residual(cands.coplanar[i], lam, tf, intr[1])
        assert r < 1e-6


def test_coplanar_residual_grows_off_truth(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    i = same_plane_pairs(cands, gt)[0]
    h = cands.coplanar[i]
    at = lambda l: robust.coplanar_residual(h, l, tf, intr[1])
    assert at(lam) < at(0.8 * lam)
    assert at(lam) < at(1.25 * lam)
    # strictly increasing leaving the optimum
    assert at(1.1 * lam) < at(1.2 * lam) < at(1.3 * lam)


def test_coplanar_residual_cheirality_sentinel(default_K):
    # The two lines intersect in the plane z = -5, behind every camera.
    poses = [GlobalPose.from_center(np.eye(3), c)
             for c in ([-1.0, 0, 0], [0.0, 0, 0], [0.0, 1.0, 0])]
    da = np.array([np.cos(np.radians(20)), np.sin(np.radians(20)), 0.0])
    db = np.array([np.cos(np.radians(80)), np.sin(np.radians(80)), 0.0])
    la = Line3(da, np.array([0.0, -0.3, -5.0]))
    lb = Line3(db, np.array([0.2, 0.1, -5.0]))
    K = default_K
    from chainsfm.features import CoplanarPairHypothesis
    h = CoplanarPairHypothesis(
        LineMatch2V((0, 1), project_segment(la, -1, 1, poses[0], K, 0),
                    project_segment(la, -1, 1, poses[1], K, 1)),
        LineMatch2V((1, 2), project_segment(lb, -1, 1, poses[1], K, 1),
                    project_segment(lb, -1, 1, poses[2], K, 2)))
    tf = triplet_frame_from_poses(*poses)
    assert robust.coplanar_residual(h, 1.0, tf, K) == np.inf


def test_trifocal_residuals_zero_at_true_scale(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    assert cands.n_pt > 0 and cands.n_se > 0
    for p in cands.tri_points:
        assert robust.trifocal_point_residual(p, lam, tf, intr[0],
                                              intr[2]) < 1e-6
    for l in cands.tri_lines:
        assert robust.trifocal_line_residual(l, lam, tf, intr[0],
                                             intr[2]) < 1e-6


def test_trifocal_point_residual_collapsed_camera(clean_triplet):
    """At scale 0 the forward half equals the reprojection distance from a
    camera sitting at the second center; the symmetric residual is the
    sentinel because the reverse triangulation baseline vanishes."""
    ds, gt, tf, cands, intr, lam = clean_triplet
    p = cands.tri_points[0]
    p1, p2, p3 = p.normalized
    got = robust.trifocal_point_residual_oneway(p1, p2, p3, 0.0, tf, intr[2])
    pose1, pose2, _ = tf.local_poses(1.0)
    P = triangulate_point(p1, p2, pose1, pose2)
    R3 = tf.rotations[2]
    collapsed = GlobalPose(R3, -R3 @ pose2.center)
    oracle = np.linalg.norm(
        denormalize_point(project_point(P, collapsed), intr[2])
        - denormalize_point(p3, intr[2]))
    assert got == pytest.approx(oracle, abs=1e-9)
    assert robust.trifocal_point_residual(p, 0.0, tf, intr[0],
                                          intr[2]) == np.inf


def test_trifocal_point_residual_perturbation(clean_triplet):
    """A 2 px shift of the last observation moves the forward half by
    exactly 2 px; the backward half reacts through triangulation, so the
    symmetric average lands between 1 and the worst case."""
    ds, gt, tf, cands, intr, lam = clean_triplet
    p = cands.tri_points[0]
    px3 = denormalize_point(p.normalized[2], intr[2]) + np.array([2.0, 0.0])
    n3 = normalize_point(px3, intr[2])
    pert = PointTriplet(p.cameras, p.px,
                        np.array([p.normalized[0], p.normalized[1], n3]))
    fwd = robust.trifocal_point_residual_oneway(
        pert.normalized[0], pert.normalized[1], pert.normalized[2],
        lam, tf, intr[2])
    assert fwd == pytest.approx(2.0, abs=1e-6)
    full = robust.trifocal_point_residual(pert, lam, tf, intr[0], intr[2])
    assert 1.0 - 1e-6 <= full <= 2.5


def test_trifocal_line_residual_pure_offset(clean_triplet):
    """Endpoints of the last segment shifted 3 px perpendicular to the
    reprojected line: the one-way endpoint distance is exactly 3 px."""
    ds, gt, tf, cands, intr, lam = clean_triplet
    lt = cands.tri_lines[0]
    s1, s2, s3 = lt.segs
    lp = pixel_line(s3.line, intr[2])   # unit-normal pixel form
    from chainsfm.geometry import make_segment
    shifted = make_segment(s3.a + 3.0 * lp[:2], s3.b + 3.0 * lp[:2],
                           intr[2], s3.image)
    got = robust.trifocal_line_residual_oneway(s1.line, s2.line, shifted,
                                               lam, tf, intr[2])
    assert got == pytest.approx(3.0, abs=1e-6)


def test_trifocal_line_residual_dual_path(clean_triplet):
    """Endpoint-to-line distances recomputed through an explicit pixel-space
    two-point line construction agree with the normalized-form path."""
    ds, gt, tf, cands, intr, lam = clean_triplet
    from chainsfm.geometry import point_on_homoline, project_line, triangulate_line
    K3 = intr[2]
    for lt in cands.tri_lines:
        s1, s2, s3 = lt.segs
        pose1, pose2, pose3 = tf.local_poses(1.17 * lam)
        L = triangulate_line(s1.line, s2.line, pose1, pose2)
        l3 = project_line(L, pose3)
        # Oracle: two points on the line, to pixels, 2D point-line distance.
        q0 = point_on_homoline(l3)
        q1 = q0 + np.cross(l3, [0.0, 0, 1.0])
        a = denormalize_point(q0 / q0[2], K3)
        b = denormalize_point(q1 / q1[2], K3)
        t = (b - a) / np.linalg.norm(b - a)

        def dist(p):
            return abs(float(np.cross(np.append(t, 0.0),
                                      np.append(p - a, 0.0))[2]))

        oracle = 0.5 * (dist(s3.a) + dist(s3.b))
        got = robust.trifocal_line_residual_oneway(s1.line, s2.line, s3,
                                                   1.17 * lam, tf, K3)
        assert got == pytest.approx(oracle, abs=1e-9)


def test_profile_matches_scalar_functions(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    l = 1.17 * lam
    prof = robust.residual_profile(cands, l, tf, intr)
    for i, h in enumerate(cands.coplanar):
        try:
            r = robust.coplanar_residual(h, l, tf, intr[1])
        except errors.ChainSfmError:
            r = np.inf
        if np.isinf(r):
            assert np.isinf(prof.coplanar[i])
        else:
            assert prof.coplanar[i] == pytest.approx(r, abs=1e-9)
    for i, p in enumerate(cands.tri_points):
        assert prof.tri_points[i] == pytest.approx(
            robust.trifocal_point_residual(p, l, tf, intr[0], intr[2]),
            abs=1e-12)
    for i, lt in enumerate(cands.tri_lines):
        assert prof.tri_lines[i] == pytest.approx(
            robust.trifocal_line_residual(lt, l, tf, intr[0], intr[2]),
            abs=1e-12)


def test_per_line_distances_are_partner_minima(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    prof = robust.residual_profile(cands, lam, tf, intr)
    for key, (d, i) in prof.per_line.items():
        partners = [j for j, ks in enumerate(cands.coplanar_line_keys)
                    if key in ks]
        assert d == min(prof.coplanar[j] for j in partners)
        assert key in cands.coplanar_line_keys[i]


def test_ransac_single_hypothesis(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    hyp = robust.ScaleHypothesis(lam, "trifocal-point", 0)
    sel = robust.ransac_select(cands, [hyp], 1.0, tf, intr)
    assert sel.lam == lam
    assert sel.method == "fixed-threshold"
    assert set(sel.inliers["tri_points"]) == set(range(cands.n_pt))
    assert set(sel.inliers["tri_lines"]) == set(range(cands.n_se))


def test_noiseless_selection_consistency(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    hyps = robust.generate_hypotheses(cands, tf)
    for thr in (1e-3, 0.1, 1.0):
        sel = robust.ransac_select(cands, hyps, thr, tf, intr)
        assert abs(sel.lam - lam) / lam < 1e-6
    sel = robust.ac_select(cands, hyps, tf, intr)
    assert abs(sel.lam - lam) / lam < 1e-6
    assert sel.method == "a-contrario"


def test_selection_order_independence(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    hyps = robust.generate_hypotheses(cands, tf)
    shuffled = list(hyps)
    np.random.default_rng(7).shuffle(shuffled)
    a = robust.ransac_select(cands, hyps, 1.0, tf, intr)
    b = robust.ransac_select(cands, shuffled, 1.0, tf, intr)
    assert a.lam == b.lam and a.inliers == b.inliers
    c = robust.ac_select(cands, hyps, tf, intr)
    d = robust.ac_select(cands, shuffled, tf, intr)
    assert c.lam == d.lam and c.inliers == d.inliers


def test_ransac_with_outliers():
    for seed in range(4):
        ds, gt, tf, cands, intr, lam = setup_triplet(
            SceneSpec(seed=seed, n_cameras=5, outlier_fraction=0.2))
        hyps = robust.generate_hypotheses(cands, tf)
        sel = robust.ransac_select(cands, hyps, 1.0, tf, intr)
        assert abs(sel.lam - lam) / lam < 0.02


def test_ac_with_noise_and_outliers():
    # Tolerance calibrated on an 8-seed run of this generator configuration
    # (worst relative error observed: 0.043).
    for seed in range(4):
        ds, gt, tf, cands, intr, lam = setup_triplet(
            SceneSpec(seed=seed, n_cameras=5, noise_sigma_px=0.5,
                      outlier_fraction=0.2))
        hyps = robust.generate_hypotheses(cands, tf)
        sel = robust.ac_select(cands, hyps, tf, intr)
        assert abs(sel.lam - lam) / lam < 0.08


def test_empty_hypotheses_raise(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    with pytest.raises(errors.NoValidHypothesis):
        robust.ransac_select(cands, [], 1.0, tf, intr)
    with pytest.raises(errors.NoValidHypothesis):
        robust.ac_select(cands, [], tf, intr)


def test_inliers_are_subsets(clean_triplet):
    ds, gt, tf, cands, intr, lam = clean_triplet
    hyps = robust.generate_hypotheses(cands, tf)
    sel = robust.ac_select(cands, hyps, tf, intr)
    assert set(sel.inliers["coplanar"]) <= set(range(len(cands.coplanar)))
    assert set(sel.inliers["tri_points"]) <= set(range(cands.n_pt))
    assert set(sel.inliers["tri_lines"]) <= set(range(cands.n_se))
    assert sel.n_inliers > 0
