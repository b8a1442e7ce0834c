"""Candidate generation, residual families, and triplet scale selection.

Three residual families score a candidate second-baseline scale: coplanarity
distances for hypothesized coplanar line pairs, reprojection distances for
point triplets, and endpoint-to-line distances for line triplets.  Selection
is either classic fixed-threshold RANSAC (exhaustive over all hypotheses) or
the parameterless a-contrario variant minimizing a number-of-false-alarms
score; both are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import ChainSfmError, NoValidHypothesis
from .features import (
    CoplanarPairHypothesis,
    LineMatch2V,
    LineTriplet,
    PointTriplet,
    ScaleHypothesis,
)
from .geometry import (
    DEGENERACY_ANGLE_DEG,
    Intrinsics,
    angle_between_deg,
    closest_points_between_lines,
    denormalize_point,
    point_line_distance_px,
    project_line,
    project_point,
    triangulate_line,
    triangulate_point,
)
from .scale import (
    TripletFrame,
    coplanar_scale_ratio,
    trifocal_line_ratio,
    trifocal_point_ratio,
)

INF = float("inf")

DEFAULT_NEIGHBORS = 10
DEFAULT_PARALLEL_FLOOR_DEG = 15.0


@dataclass
class CandidateSet:
    """All hypotheses/constraints available for one camera triplet."""

    coplanar: list[CoplanarPairHypothesis]
    tri_points: list[PointTriplet]
    tri_lines: list[LineTriplet]
    n_se2: int               # camera-2 segments matched toward camera 1 or 3
    neighbors: int = DEFAULT_NEIGHBORS
    # Per coplanar pair, the camera-2 segment ids of its two lines; used to
    # aggregate pair residuals into per-line residuals for the NFA.
    coplanar_line_keys: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_pt(self) -> int:
        return len(self.tri_points)

    @property
    def n_se(self) -> int:
        return len(self.tri_lines)


@dataclass
class ResidualProfile:
    """Residuals of every candidate at one scale, in pixels."""

    lam: float
    coplanar: np.ndarray   # per coplanar pair
    per_line: dict         # camera-2 segment id -> (min distance, pair index)
    tri_points: np.ndarray
    tri_lines: np.ndarray


@dataclass
class SelectionResult:
    lam: float
    log10_nfa: float
    inliers: dict[str, list[int]]
    method: str

    @property
    def n_inliers(self) -> int:
        return sum(len(v) for v in self.inliers.values())


def _endpoint_distance(sa, sb) -> float:
    """Minimum distance between segment endpoints, in pixels."""
    return min(float(np.linalg.norm(p - q))
               for p in (sa.a, sa.b) for q in (sb.a, sb.b))


def build_candidates(matches_12: list[LineMatch2V],
                     matches_23: list[LineMatch2V],
                     tri_points: list[PointTriplet],
                     tri_lines: list[LineTriplet],
                     tf: TripletFrame,
                     neighbors: int = DEFAULT_NEIGHBORS,
                     parallel_floor_deg: float = DEFAULT_PARALLEL_FLOOR_DEG,
                     ) -> CandidateSet:
    """Pair bifocal line matches into coplanarity candidates.

    Each camera-2 segment is paired with the `neighbors` closest segments
    (endpoint distance in image 2) matched toward the other camera; pairs
    whose 3D directions, known from the rotations alone, are within
    `parallel_floor_deg` are dropped.
    """
    R1, R2, R3 = tf.rotations

    def direction(m: LineMatch2V, Ra, Rb):
        d = np.cross(Ra.T @ m.line_i, Rb.T @ m.line_j)
        n = np.linalg.norm(d)
        return d / n if n > 1e-12 else None

    dir_a = [direction(m, R1, R2) for m in matches_12]
    dir_b = [direction(m, R2, R3) for m in matches_23]

    pair_set = set()
    if matches_12 and matches_23:
        dist = np.array([[_endpoint_distance(ma.seg_j, mb.seg_i)
                          for mb in matches_23] for ma in matches_12])
        for ia in range(len(matches_12)):
            for ib in np.argsort(dist[ia], kind="stable")[:neighbors]:
                pair_set.add((ia, int(ib)))
        for ib in range(len(matches_23)):
            for ia in np.argsort(dist[:, ib], kind="stable")[:neighbors]:
                pair_set.add((int(ia), ib))

    coplanar = []
    keys = []
    for ia, ib in sorted(pair_set):
        da, db = dir_a[ia], dir_b[ib]
        if da is None or db is None:
            continue
        if angle_between_deg(da, db) < parallel_floor_deg:
            continue
        ma, mb = matches_12[ia], matches_23[ib]
        if ma.match_id[1] == mb.match_id[0]:
            # Same camera-2 segment on both sides: the two back-projected
            # lines lie in that segment's viewing plane through the second
            # center, so they intersect at every scale and the coplanarity
            # residual is identically zero, carrying no scale information.
            continue
        coplanar.append(CoplanarPairHypothesis(ma, mb))
        keys.append((ma.match_id[1], mb.match_id[0]))

    cam2_segs = {m.match_id[1] for m in matches_12} | \
                {m.match_id[0] for m in matches_23}
    return CandidateSet(coplanar=coplanar, tri_points=list(tri_points),
                        tri_lines=list(tri_lines), n_se2=len(cam2_segs),
                        neighbors=neighbors, coplanar_line_keys=keys)


# --- residuals ------------------------------------------------------------

def coplanar_residual(h: CoplanarPairHypothesis, lam: float,
                      tf: TripletFrame, K2: Intrinsics) -> float:
    """Pixel distance, in the shared camera 2, between the reprojections of
    the mutually closest points of the two triangulated lines.

    Returns +inf when a closest point falls behind camera 2 (cheirality);
    geometric degeneracies propagate as exceptions.
    """
    pose1, pose2, pose3 = tf.local_poses(lam)
    La = triangulate_line(h.la.line_i, h.la.line_j, pose1, pose2)
    Lb = triangulate_line(h.lb.line_i, h.lb.line_j, pose2, pose3)
    pab, pba = closest_points_between_lines(La, Lb)
    try:
        qa = denormalize_point(project_point(pab, pose2), K2)
        qb = denormalize_point(project_point(pba, pose2), K2)
    except (ChainSfmError, ValueError):
        return INF
    return float(np.linalg.norm(qa - qb))


def trifocal_point_residual_oneway(p_first, p_mid, p_last, lam: float,
                                   tf: TripletFrame, K_last: Intrinsics) -> float:
    """Reprojection distance in the last camera of the point triangulated
    from the first two, under second-baseline scale `lam`."""
    pose1, pose2, pose3 = tf.local_poses(lam)
    P = triangulate_point(p_first, p_mid, pose1, pose2)
    proj = denormalize_point(project_point(P, pose3), K_last)
    obs = denormalize_point(p_last, K_last)
    return float(np.linalg.norm(proj - obs))


def trifocal_point_residual(pt: PointTriplet, lam: float, tf: TripletFrame,
                            K1: Intrinsics, K3: Intrinsics) -> float:
    """Symmetrized point reprojection error: average of the camera-3 error
    (triangulating from 1-2) and the camera-1 error (triangulating from 3-2).
    """
    p1, p2, p3 = pt.normalized
    try:
        d3 = trifocal_point_residual_oneway(p1, p2, p3, lam, tf, K3)
    except ChainSfmError:
        return INF
    if abs(lam) < 1e-12:
        return INF  # reverse triangulation baseline collapses
    try:
        d1 = trifocal_point_residual_oneway(p3, p2, p1, 1.0 / lam,
                                            tf.reversed(), K1)
    except ChainSfmError:
        return INF
    return 0.5 * (d1 + d3)


def trifocal_line_residual_oneway(l_first, l_mid, seg_last, lam: float,
                                  tf: TripletFrame, K_last: Intrinsics) -> float:
    """Mean pixel distance of the last segment's endpoints to the line
    reprojected from the first two views."""
    pose1, pose2, pose3 = tf.local_poses(lam)
    L = triangulate_line(l_first, l_mid, pose1, pose2)
    l_proj = project_line(L, pose3)
    return 0.5 * (point_line_distance_px(seg_last.a, l_proj, K_last)
                  + point_line_distance_px(seg_last.b, l_proj, K_last))


def trifocal_line_residual(lt: LineTriplet, lam: float, tf: TripletFrame,
                           K1: Intrinsics, K3: Intrinsics) -> float:
    s1, s2, s3 = lt.segs
    try:
        d3 = trifocal_line_residual_oneway(s1.line, s2.line, s3, lam, tf, K3)
    except ChainSfmError:
        return INF
    if abs(lam) < 1e-12:
        return INF
    try:
        d1 = trifocal_line_residual_oneway(s3.line, s2.line, s1, 1.0 / lam,
                                           tf.reversed(), K1)
    except ChainSfmError:
        return INF
    return 0.5 * (d1 + d3)


def _coplanar_residuals(cands: CandidateSet, lam: float, tf: TripletFrame,
                        K2: Intrinsics, cache: dict) -> np.ndarray:
    """All coplanar pair residuals at `lam`, batched.

    The first line of each pair is triangulated from views 1-2, which do not
    depend on `lam`; those lines are cached across hypotheses.  Second lines
    are triangulated once per distinct match, then the closest-point and
    reprojection steps run vectorized over all pairs."""
    n = len(cands.coplanar)
    res = np.full(n, INF)
    if n == 0:
        return res
    pose1, pose2, pose3 = tf.local_poses(lam)
    if "la" not in cache:
        la_list = []
        for h in cands.coplanar:
            try:
                L = triangulate_line(h.la.line_i, h.la.line_j, pose1, pose2)
                la_list.append((L.direction, L.point))
            except ChainSfmError:
                la_list.append(None)
        cache["la"] = la_list
    la_list = cache["la"]

    lb_cache: dict = {}
    idx, Ad, Ap, Bd, Bp = [], [], [], [], []
    for i, h in enumerate(cands.coplanar):
        key = id(h.lb)
        if key not in lb_cache:
            try:
                L = triangulate_line(h.lb.line_i, h.lb.line_j, pose2, pose3)
                lb_cache[key] = (L.direction, L.point)
            except ChainSfmError:
                lb_cache[key] = None
        if la_list[i] is None or lb_cache[key] is None:
            continue
        idx.append(i)
        Ad.append(la_list[i][0])
        Ap.append(la_list[i][1])
        Bd.append(lb_cache[key][0])
        Bp.append(lb_cache[key][1])
    if not idx:
        return res
    idx = np.array(idx)
    Ad, Ap, Bd, Bp = (np.array(a) for a in (Ad, Ap, Bd, Bp))

    # Mutually closest points of the two (unit-direction) lines.
    r = Bp - Ap
    dab = np.einsum("ij,ij->i", Ad, Bd)
    dar = np.einsum("ij,ij->i", Ad, r)
    dbr = np.einsum("ij,ij->i", Bd, r)
    ok = np.abs(dab) < np.cos(np.radians(DEGENERACY_ANGLE_DEG))
    det = np.where(ok, dab * dab - 1.0, -1.0)
    s = (-dar + dab * dbr) / det
    t = (-dab * dar + dbr) / det
    Pab = Ap + s[:, None] * Ad
    Pba = Bp + t[:, None] * Bd

    # Reproject both into camera 2; behind-camera points are sentinels.
    qa = (Pab - pose2.center) @ pose2.rotation.T
    qb = (Pba - pose2.center) @ pose2.rotation.T
    ok &= (qa[:, 2] > 1e-12) & (qb[:, 2] > 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        dx = K2.fx * (qa[:, 0] / qa[:, 2] - qb[:, 0] / qb[:, 2])
        dy = K2.fy * (qa[:, 1] / qa[:, 2] - qb[:, 1] / qb[:, 2])
        d = np.hypot(dx, dy)
    res[idx[ok]] = d[ok]
    return res


def _trifocal_caches(cands: CandidateSet, tf: TripletFrame, cache: dict):
    """Triangulations for the trifocal families.

    Forward entities live in the triplet frame (views 1-2, independent of
    the second-baseline scale); backward ones in the reversed frame (views
    3-2, whose unit first baseline is likewise scale-free)."""
    if "tri" in cache:
        return cache["tri"]
    pose1, pose2, _ = tf.local_poses(1.0)
    rpose1, rpose2, _ = tf.reversed().local_poses(1.0)
    pt_fwd, pt_bwd = [], []
    for p in cands.tri_points:
        p1, p2, p3 = p.normalized
        for out, args in ((pt_fwd, (p1, p2, pose1, pose2)),
                          (pt_bwd, (p3, p2, rpose1, rpose2))):
            try:
                out.append(triangulate_point(*args))
            except ChainSfmError:
                out.append(None)
    ln_fwd, ln_bwd = [], []
    for lt in cands.tri_lines:
        s1, s2, s3 = lt.segs
        for out, args in ((ln_fwd, (s1.line, s2.line, pose1, pose2)),
                          (ln_bwd, (s3.line, s2.line, rpose1, rpose2))):
            try:
                out.append(triangulate_line(*args))
            except ChainSfmError:
                out.append(None)
    cache["tri"] = (pt_fwd, pt_bwd, ln_fwd, ln_bwd)
    return cache["tri"]


def residual_profile(cands: CandidateSet, lam: float, tf: TripletFrame,
                     intrinsics: tuple[Intrinsics, Intrinsics, Intrinsics],
                     cache: dict | None = None) -> ResidualProfile:
    """Evaluate every candidate of every family at `lam`.

    Degenerate candidates contribute the +inf sentinel (outliers at any
    threshold, worst entries of the NFA scans).  Passing the same `cache`
    dict across calls reuses the scale-independent triangulations."""
    if cache is None:
        cache = {}
    K1, K2, K3 = intrinsics
    cop = _coplanar_residuals(cands, lam, tf, K2, cache)
    per_line: dict = {}
    for i, (ka, kb) in enumerate(cands.coplanar_line_keys):
        for key in (ka, kb):
            if key not in per_line or cop[i] < per_line[key][0]:
                per_line[key] = (cop[i], i)

    pt_fwd, pt_bwd, ln_fwd, ln_bwd = _trifocal_caches(cands, tf, cache)
    pts = np.full(cands.n_pt, INF)
    lns = np.full(cands.n_se, INF)
    if abs(lam) >= 1e-12:
        _, _, pose3 = tf.local_poses(lam)
        _, _, rpose3 = tf.reversed().local_poses(1.0 / lam)
        for i, p in enumerate(cands.tri_points):
            if pt_fwd[i] is None or pt_bwd[i] is None:
                continue
            try:
                d3 = np.linalg.norm(
                    denormalize_point(project_point(pt_fwd[i], pose3), K3)
                    - denormalize_point(p.normalized[2], K3))
                d1 = np.linalg.norm(
                    denormalize_point(project_point(pt_bwd[i], rpose3), K1)
                    - denormalize_point(p.normalized[0], K1))
            except (ChainSfmError, ValueError):
                continue
            pts[i] = 0.5 * (d1 + d3)
        for i, lt in enumerate(cands.tri_lines):
            if ln_fwd[i] is None or ln_bwd[i] is None:
                continue
            s1, _, s3 = lt.segs
            try:
                l3 = project_line(ln_fwd[i], pose3)
                l1 = project_line(ln_bwd[i], rpose3)
            except ChainSfmError:
                continue
            d3 = 0.5 * (point_line_distance_px(s3.a, l3, K3)
                        + point_line_distance_px(s3.b, l3, K3))
            d1 = 0.5 * (point_line_distance_px(s1.a, l1, K1)
                        + point_line_distance_px(s1.b, l1, K1))
            lns[i] = 0.5 * (d1 + d3)
    return ResidualProfile(lam=lam, coplanar=cop, per_line=per_line,
                           tri_points=pts, tri_lines=lns)


# --- hypothesis generation ------------------------------------------------

def generate_hypotheses(cands: CandidateSet, tf: TripletFrame,
                        ) -> list[ScaleHypothesis]:
    """One candidate scale per feature, degenerate features skipped."""
    out = []
    for i, h in enumerate(cands.coplanar):
        try:
            out.append(ScaleHypothesis(coplanar_scale_ratio(h, tf),
                                       "coplanar-pair", i))
        except (ChainSfmError, ValueError):
            pass
    for i, p in enumerate(cands.tri_points):
        try:
            out.append(ScaleHypothesis(trifocal_point_ratio(p, tf),
                                       "trifocal-point", i))
        except (ChainSfmError, ValueError):
            pass
    for i, l in enumerate(cands.tri_lines):
        try:
            out.append(ScaleHypothesis(trifocal_line_ratio(l, tf),
                                       "trifocal-line", i))
        except (ChainSfmError, ValueError):
            pass
    return out


# --- fixed-threshold selection --------------------------------------------

def ransac_select(cands: CandidateSet, hypotheses: list[ScaleHypothesis],
                  threshold_px: float, tf: TripletFrame,
                  intrinsics) -> SelectionResult:
    """Exhaustive scoring of every hypothesis; inlier = residual below the
    fixed threshold.  Ties break by summed inlier residual, then |lam - 1|.
    """
    if not hypotheses:
        raise NoValidHypothesis("no scale hypotheses to score")
    best = None
    cache: dict = {}
    for hyp in hypotheses:
        prof = residual_profile(cands, hyp.ratio, tf, intrinsics, cache)
        fams = {"coplanar": prof.coplanar, "tri_points": prof.tri_points,
                "tri_lines": prof.tri_lines}
        inliers = {k: [int(i) for i in np.nonzero(v < threshold_px)[0]]
                   for k, v in fams.items()}
        count = sum(len(v) for v in inliers.values())
        ssum = sum(float(v[i]) for k, v in fams.items() for i in inliers[k])
        key = (-count, ssum, abs(hyp.ratio - 1.0))
        if best is None or key < best[0]:
            best = (key, hyp.ratio, inliers)
    if best[0][0] == 0:
        raise NoValidHypothesis("no hypothesis gathered any inlier")
    return SelectionResult(lam=best[1], log10_nfa=float("nan"),
                           inliers=best[2], method="fixed-threshold")


# --- a-contrario selection ------------------------------------------------

def _log10_binom(n: int, k: int) -> float:
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)) \
        / np.log(10.0)


def _scan(sorted_d: np.ndarray, n_total: int, k_lo: int, per_term,
          ) -> tuple[float, int]:
    """min over k of the NFA term; returns (log10 value, minimizing k)."""
    best, best_k = INF, -1
    for rank, d in enumerate(sorted_d):
        k = k_lo + rank
        if k > n_total:
            break
        with np.errstate(divide="ignore"):
            term = per_term(k, d)
        if term < best:
            best, best_k = term, k
    return best, best_k


def nfa_coplanar(profile: ResidualProfile, cands: CandidateSet,
                 area: float) -> float:
    """log10 NFA of the coplanarity family.

    Per-line distances are the minima over each line's candidate partners;
    the scan chooses how many lines to call inliers.  Undefined (+inf) when
    fewer than 3 camera-2 lines exist."""
    return _nfa_coplanar_full(profile, cands, area)[0]


def _nfa_coplanar_full(profile, cands, area):
    n_se2 = cands.n_se2
    n_cop = len(profile.per_line)
    if n_se2 < 3 or n_cop < 3:
        return INF, -1, []
    items = sorted(profile.per_line.items(), key=lambda kv: (kv[1][0], kv[0]))
    d = np.array([v[0] for _, v in items])
    lead = np.log10(n_se2 - 2) + np.log10(n_se2) + np.log10(cands.neighbors)

    def per_term(k, dk):
        # The distance of the k-th line enters with exponent k - 2: the two
        # best-fitting lines are the ones the scale hypothesis was built
        # from and carry no evidence of their own.
        return lead + _log10_binom(n_se2, k - 2) + (k - 2) * np.log10(
            np.pi * dk * dk / area)

    best, best_k = _scan(d[2:], n_cop, 3, per_term)
    inlier_pairs = [items[i][1][1] for i in range(best_k)] if best_k > 0 else []
    return best, best_k, sorted(set(inlier_pairs))


def nfa_trifocal_points(profile: ResidualProfile, n_pt: int,
                        area: float) -> float:
    """log10 NFA of the trifocal point family; +inf when n_pt < 2."""
    return _nfa_points_full(profile.tri_points, n_pt, area)[0]


def _nfa_points_full(dists, n_pt, area):
    if n_pt < 2 or len(dists) == 0:
        return INF, -1, []
    order = np.argsort(dists, kind="stable")
    d = np.asarray(dists)[order]
    lead = np.log10(n_pt - 1)

    def per_term(k, dk):
        return lead + _log10_binom(n_pt, k) + np.log10(k) + \
            (k - 1) * np.log10(np.pi * dk * dk / area)

    best, best_k = _scan(d[1:], n_pt, 2, per_term)
    inl = [int(i) for i in order[:best_k]] if best_k > 0 else []
    return best, best_k, sorted(inl)


def nfa_trifocal_lines(profile: ResidualProfile, n_se: int, area: float,
                       diagonal: float) -> float:
    """log10 NFA of the trifocal line family; the distance enters linearly
    (line strip of width d), not squared.  +inf when n_se < 2."""
    return _nfa_lines_full(profile.tri_lines, n_se, area, diagonal)[0]


def _nfa_lines_full(dists, n_se, area, diagonal):
    if n_se < 2 or len(dists) == 0:
        return INF, -1, []
    order = np.argsort(dists, kind="stable")
    d = np.asarray(dists)[order]
    lead = np.log10(n_se - 1)

    def per_term(k, dk):
        return lead + _log10_binom(n_se, k) + np.log10(k) + \
            (k - 1) * np.log10(2.0 * diagonal * dk / area)

    best, best_k = _scan(d[1:], n_se, 2, per_term)
    inl = [int(i) for i in order[:best_k]] if best_k > 0 else []
    return best, best_k, sorted(inl)


def ac_select(cands: CandidateSet, hypotheses: list[ScaleHypothesis],
              tf: TripletFrame, intrinsics) -> SelectionResult:
    """Parameterless selection: minimize the product of the family NFAs.

    Families with too few candidates contribute factor 1.  Deterministic:
    equal scores resolve toward the ratio closest to 1."""
    if not hypotheses:
        raise NoValidHypothesis("no scale hypotheses to score")
    K1, K2, K3 = intrinsics
    area, diag = K2.area, K2.diagonal
    best = None
    cache: dict = {}
    for hyp in hypotheses:
        prof = residual_profile(cands, hyp.ratio, tf, intrinsics, cache)
        c_nfa, _, c_inl = _nfa_coplanar_full(prof, cands, area)
        p_nfa, _, p_inl = _nfa_points_full(prof.tri_points, cands.n_pt, area)
        l_nfa, _, l_inl = _nfa_lines_full(prof.tri_lines, cands.n_se, area,
                                          diag)
        total = 0.0
        defined = False
        for v in (c_nfa, p_nfa, l_nfa):
            if np.isfinite(v):
                total += v
                defined = True
            elif v == -INF:
                total = -INF
                defined = True
        if not defined:
            continue
        key = (total, abs(hyp.ratio - 1.0))
        if best is None or key < best[0]:
            # A family whose best realization still expects at least one
            # false alarm (log10 NFA > 0) is indistinguishable from chance;
            # its score enters the product, but its members are not trusted
            # as inliers.
            best = (key, hyp.ratio,
                    {"coplanar": c_inl if c_nfa <= 0.0 else [],
                     "tri_points": p_inl if p_nfa <= 0.0 else [],
                     "tri_lines": l_inl if l_nfa <= 0.0 else []})
    if best is None:
        raise NoValidHypothesis("every hypothesis left all families undefined")
    return SelectionResult(lam=best[1], log10_nfa=best[0][0],
                           inliers=best[2], method="a-contrario")
