"""End-to-end chain calibration: per-triplet scale selection, chain
composition, structure triangulation, two-stage refinement, and export.

The driver mirrors the estimation order of the library modules: coplanarity
and trifocal candidates per camera triplet, one baseline-ratio selection per
triplet (a-contrario by default, fixed-threshold on request), sequential
composition into global poses, then bundle adjustment over points, lines,
and the selected coplanar inlier pairs.

Per-triplet estimation is independent and may run on a thread pool
(``CHAINSFM_THREADS``); results are joined by triplet index, so the report
is identical for any thread count.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import assemble, ba, robust
from .chain import ChainInput, ChainOutput, align_similarity, compose_chain
from .dataio import Dataset, export_ply, save_poses
from .errors import (
    BrokenChain,
    ChainSfmError,
    DegenerateAlignment,
    EmptyProblem,
)
from .geometry import GlobalPose, Line3, closest_points_between_lines

REPORT_SCHEMA = "chainsfm/report"
REPORT_VERSION = 1


@dataclass
class PipelineConfig:
    """Knobs of one calibration run; serializable as flat JSON."""

    method: str = "ac"                  # "ac" or "fixed"
    threshold_px: float = 3.0           # fixed-threshold inlier gate
    neighbors: int = robust.DEFAULT_NEIGHBORS
    parallel_floor_deg: float = robust.DEFAULT_PARALLEL_FLOOR_DEG
    ba_enabled: bool = True
    ba_stage1: bool = True
    ba_max_iters: int = ba.DEFAULT_MAX_ITERS
    ba_ftol: float = ba.DEFAULT_FTOL
    ba_gtol: float = ba.DEFAULT_GTOL
    threads: int | None = None          # None: CHAINSFM_THREADS, default 1

    def __post_init__(self):
        if self.method not in ("ac", "fixed"):
            raise ValueError(f"unknown selection method {self.method!r}")

    def resolved_threads(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        return max(1, int(os.environ.get("CHAINSFM_THREADS", "1")))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TripletReport:
    """Selection outcome for one camera triplet."""

    index: int
    cameras: tuple[int, int, int]
    method: str
    lam: float
    log10_nfa: float
    n_candidates: dict[str, int]
    n_inliers: dict[str, int]
    seconds: float


@dataclass
class RunReport:
    """Schema-versioned summary of one pipeline run."""

    schema: str = REPORT_SCHEMA
    version: int = REPORT_VERSION
    method: str = "ac"
    triplets: list[TripletReport] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    closure_gap: float | None = None
    n_points: int = 0
    n_lines: int = 0
    n_coplanar_pairs: int = 0
    ba_initial_cost: float | None = None
    ba_final_cost: float | None = None
    ba_accepted_steps: int = 0
    pre_ba_mean_center_error: float | None = None
    pre_ba_max_center_error: float | None = None
    post_ba_mean_center_error: float | None = None
    post_ba_max_center_error: float | None = None
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """JSON-canonical form: tuples become lists and a non-finite
        log10 NFA (exact fit) becomes null."""
        d = asdict(self)
        for t in d["triplets"]:
            t["cameras"] = list(t["cameras"])
            if not np.isfinite(t["log10_nfa"]):
                t["log10_nfa"] = None
        return d

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


@dataclass
class PipelineResult:
    """Full in-memory output of `run_pipeline`."""

    report: RunReport
    chain: ChainOutput
    poses: list[GlobalPose]
    problem: ba.BAProblem | None
    point_tracks: dict
    line_tracks: dict
    coplanar_track_pairs: list[tuple[int, int]]


# --- track assembly --------------------------------------------------------

class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _tracks_from_edges(edges) -> tuple[dict[int, list], dict]:
    """Connected components of the verified-match graph.

    A component holding two different feature ids in the same image mixes
    observations of distinct features, which happens when a contaminating
    match slips through verification.  All nodes of a conflicted image are
    removed and connectivity is recomputed, splitting or dropping the bad
    merge instead of feeding it to the adjustment.

    Returns {track id: sorted (img, fid) nodes, one per image} plus the
    node -> track id map; numbering is deterministic."""
    edges = sorted({(a, b) if a <= b else (b, a) for a, b in edges})
    groups: dict = {}
    while True:
        uf = _UnionFind()
        for a, b in edges:
            uf.union(a, b)
        groups = {}
        for key in sorted(uf.parent):
            groups.setdefault(uf.find(key), []).append(key)
        bad = set()
        for nodes in groups.values():
            by_img: dict = {}
            for img, fid in nodes:
                by_img.setdefault(img, set()).add(fid)
            for img, fids in by_img.items():
                if len(fids) > 1:
                    bad.update((img, fid) for fid in fids)
        if not bad:
            break
        edges = [e for e in edges if e[0] not in bad and e[1] not in bad]
    tracks, node_tid = {}, {}
    tid = 0
    for root in sorted(groups):
        nodes = sorted(groups[root])
        if len(nodes) >= 2:
            tracks[tid] = nodes
            for node in nodes:
                node_tid[node] = tid
            tid += 1
    return tracks, node_tid


# --- per-triplet selection --------------------------------------------------

def _select_triplet(ds: Dataset, t: int, config: PipelineConfig):
    start = time.perf_counter()
    pairs = ds.chain_pairs()
    tf = assemble.triplet_frame(ds, t)
    m12 = assemble.line_matches(ds, pairs[t])
    m23 = assemble.line_matches(ds, pairs[t + 1])
    cands = robust.build_candidates(
        m12, m23, assemble.point_triplets(ds, t),
        assemble.line_triplets(ds, t), tf,
        neighbors=config.neighbors,
        parallel_floor_deg=config.parallel_floor_deg)
    hyps = robust.generate_hypotheses(cands, tf)
    intrinsics = tuple(ds.cameras[c] for c in tf.cameras)
    if config.method == "fixed":
        sel = robust.ransac_select(cands, hyps, config.threshold_px, tf,
                                   intrinsics)
    else:
        sel = robust.ac_select(cands, hyps, tf, intrinsics)
    rep = TripletReport(
        index=t, cameras=tf.cameras, method=sel.method, lam=sel.lam,
        log10_nfa=sel.log10_nfa,
        n_candidates={"coplanar": len(cands.coplanar),
                      "tri_points": cands.n_pt, "tri_lines": cands.n_se},
        n_inliers={k: len(v) for k, v in sel.inliers.items()},
        seconds=time.perf_counter() - start)
    return rep, sel, cands


# --- structure export helpers ----------------------------------------------

def _line_render_extent(line: Line3, obs, poses, cameras):
    """Endpoints of a 3D line clipped to the span its observations cover.

    Each observed segment endpoint is back-projected as a viewing ray; the
    closest point on the line to that ray marks one station.  The extreme
    stations along the direction bound the drawn segment."""
    from .geometry import normalize_point
    stations = []
    for cam, a, b in obs:
        pose = poses[cam]
        for px in (a, b):
            ray = pose.rotation.T @ normalize_point(px, cameras[cam])
            n = np.linalg.norm(ray)
            try:
                p_line, _ = closest_points_between_lines(
                    line, Line3(ray / n, pose.center))
            except ChainSfmError:
                continue
            stations.append(float(np.dot(p_line - line.point,
                                         line.direction)))
    if not stations:
        return None
    return line.at(min(stations)), line.at(max(stations))


def _coplanar_quad(la: Line3, lb: Line3, ends_a, ends_b):
    """Bounding rectangle of the two drawn segments in their common plane."""
    n = np.cross(la.direction, lb.direction)
    norm = np.linalg.norm(n)
    if norm < 1e-9:
        return None
    n /= norm
    try:
        pa, pb = closest_points_between_lines(la, lb)
    except ChainSfmError:
        return None
    anchor = 0.5 * (pa + pb)
    u = la.direction
    v = np.cross(n, u)
    pts = [p for pair in (ends_a, ends_b) if pair for p in pair]
    if not pts:
        return None
    coords = np.array([[np.dot(p - anchor, u), np.dot(p - anchor, v)]
                       for p in pts])
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    return np.array([anchor + lo[0] * u + lo[1] * v,
                     anchor + hi[0] * u + lo[1] * v,
                     anchor + hi[0] * u + hi[1] * v,
                     anchor + lo[0] * u + hi[1] * v])


def export_structure(prob: "ba.BAProblem | None", line_tracks: dict,
                     ds: Dataset, path: str) -> None:
    """Write the structure of an adjustment problem as PLY: points, clipped
    line segments, and one bounding quad per coplanar inlier pair."""
    if prob is None:
        export_ply(np.zeros((0, 3)), [], path)
        return
    points = np.array([prob.points3d[t] for t in sorted(prob.points3d)]) \
        if prob.points3d else np.zeros((0, 3))
    extents = {}
    for tid in sorted(prob.lines3d):
        ext = _line_render_extent(prob.lines3d[tid],
                                  line_tracks[tid],
                                  prob.poses, ds.cameras)
        if ext is not None:
            extents[tid] = ext
    quads = []
    for ta, tb, _ in prob.coplanar_pairs:
        quad = _coplanar_quad(prob.lines3d[ta], prob.lines3d[tb],
                              extents.get(ta), extents.get(tb))
        if quad is not None:
            quads.append(quad)
    export_ply(points, [extents[t] for t in sorted(extents)], path,
               plane_quads=quads)


# Observation gates for the adjustment, in pixels.  Measured on clean
# noisy runs (sigma 0.5 px, no outlier matches), start residuals at the
# composed chain poses stay below roughly 11 px for points, 9 px for line
# endpoints, and 55 px for coplanarity terms; the gates sit a factor of
# about five above those ceilings, so they only remove observations that
# are inconsistent with the rest of the reconstruction, not noisy ones.
BA_POINT_GATE_PX = 50.0
BA_LINE_GATE_PX = 50.0
BA_COPLANAR_GATE_PX = 250.0
# When the median start residual already exceeds this, the composed chain
# itself is off (for example a contaminated scale estimate), large residuals
# are signal rather than bad matches, and pruning would remove exactly the
# observations the refinement needs; clean runs stay well below it.
BA_GATE_SKIP_MEDIAN_PX = 10.0


def _prune_observations(poses, intrinsics, point_tracks, line_tracks,
                        cop_pairs):
    """Drop observations grossly inconsistent with the composed chain.

    Verified inlier sets can still carry a few contaminating matches (the
    selection thresholds are image-scale, not noise-scale); a plain sum of
    squares has no tolerance for them, so anything far beyond the clean
    residual ceiling is removed before refinement."""
    prob = ba.build_problem(poses, intrinsics, point_tracks, line_tracks,
                            cop_pairs)
    r = ba.residual_vector(prob)
    npt, nln = len(prob.point_obs), len(prob.line_obs)
    pt_mag = np.linalg.norm(r[:2 * npt].reshape(-1, 2), axis=1)
    ln_mag = np.linalg.norm(r[2 * npt:2 * (npt + nln)].reshape(-1, 2), axis=1)
    cop_mag = np.linalg.norm(r[2 * (npt + nln):].reshape(-1, 2), axis=1)

    all_mag = np.concatenate([pt_mag, ln_mag, cop_mag])
    if len(all_mag) and float(np.median(all_mag)) > BA_GATE_SKIP_MEDIAN_PX:
        return point_tracks, line_tracks, cop_pairs

    drop_pt = {(c, tid) for (c, tid, _), m in zip(prob.point_obs, pt_mag)
               if m > BA_POINT_GATE_PX}
    drop_ln = {(c, tid) for (c, tid, _, _), m in zip(prob.line_obs, ln_mag)
               if m > BA_LINE_GATE_PX}
    bad_pairs = set()
    k = 0
    for ta, tb, shared in prob.coplanar_pairs:
        for _ in shared:
            if cop_mag[k] > BA_COPLANAR_GATE_PX:
                bad_pairs.add((ta, tb))
            k += 1

    if not (drop_pt or drop_ln or bad_pairs):
        return point_tracks, line_tracks, cop_pairs
    point_tracks = {
        tid: kept for tid, obs in point_tracks.items()
        if len(kept := [o for o in obs if (o[0], tid) not in drop_pt]) >= 2}
    line_tracks = {
        tid: kept for tid, obs in line_tracks.items()
        if len(kept := [o for o in obs if (o[0], tid) not in drop_ln]) >= 2}
    cop_pairs = [(ta, tb) for ta, tb in cop_pairs
                 if (ta, tb) not in bad_pairs
                 and ta in line_tracks and tb in line_tracks]
    return point_tracks, line_tracks, cop_pairs


# --- driver ----------------------------------------------------------------

def _center_errors(poses, gt_poses):
    est = np.array([p.center for p in poses])
    ref = np.array([p.center for p in gt_poses])
    res = align_similarity(est, ref)
    return res.mean_error, res.max_error


def run_pipeline(ds: Dataset, config: PipelineConfig | None = None,
                 out_dir: str | None = None) -> PipelineResult:
    """Calibrate the full chain and optionally write poses, structure,
    and the run report to `out_dir`."""
    config = config or PipelineConfig()
    ds.validate()
    report = RunReport(method=config.method)
    pairs = ds.chain_pairs()
    n_trip = len(pairs) - 1

    t0 = time.perf_counter()
    failures = []
    results: list = [None] * n_trip

    def work(t):
        return _select_triplet(ds, t, config)

    with ThreadPoolExecutor(max_workers=config.resolved_threads()) as pool:
        for t, outcome in enumerate(pool.map(
                lambda t: _try(work, t), range(n_trip))):
            if isinstance(outcome, ChainSfmError):
                failures.append((t, outcome))
            else:
                results[t] = outcome
    if failures:
        detail = "; ".join(f"triplet {t}: {e}" for t, e in failures)
        raise BrokenChain(f"scale selection failed for "
                          f"{len(failures)} of {n_trip} triplets ({detail})")
    report.timings["selection"] = time.perf_counter() - t0

    report.triplets = [rep for rep, _, _ in results]
    report.lambdas = [rep.lam for rep in report.triplets]

    t0 = time.perf_counter()
    chain = compose_chain(ChainInput(
        [ds.relative_poses[p] for p in pairs],
        list(report.lambdas), cycle=ds.cycle))
    report.closure_gap = chain.closure_gap
    report.timings["chain"] = time.perf_counter() - t0

    # Only inlier-verified matches enter the adjustment: the residual is a
    # plain sum of squares, so outlier observations must stay out.  Tracks
    # are connected components of the verified match edges alone; joins
    # through unchecked matches are discarded.
    pt_edges, ln_edges, cop_edges = [], [], []
    for rep, sel, cands in results:
        for idx in sel.inliers.get("tri_points", []):
            tp = cands.tri_points[idx]
            nodes = list(zip(tp.cameras, tp.feature_ids))
            pt_edges.append((nodes[0], nodes[1]))
            pt_edges.append((nodes[1], nodes[2]))
        for idx in sel.inliers.get("tri_lines", []):
            lt = cands.tri_lines[idx]
            nodes = list(zip(lt.cameras, lt.feature_ids))
            ln_edges.append((nodes[0], nodes[1]))
            ln_edges.append((nodes[1], nodes[2]))
        for idx in sel.inliers.get("coplanar", []):
            h = cands.coplanar[idx]
            for m in (h.la, h.lb):
                ln_edges.append(((m.pair[0], m.match_id[0]),
                                 (m.pair[1], m.match_id[1])))
            cop_edges.append(((h.la.pair[1], h.la.match_id[1]),
                              (h.lb.pair[0], h.lb.match_id[0])))

    pt_nodes, _ = _tracks_from_edges(pt_edges)
    ln_nodes, ln_node_tid = _tracks_from_edges(ln_edges)
    point_tracks = {
        tid: [(img, np.asarray(ds.points[img][fid], float))
              for img, fid in obs]
        for tid, obs in pt_nodes.items()}
    line_tracks = {
        tid: [(img, np.asarray(ds.segments[img][fid][0], float),
               np.asarray(ds.segments[img][fid][1], float))
              for img, fid in obs]
        for tid, obs in ln_nodes.items()}
    cop_pairs = set()
    for na, nb in cop_edges:
        ta, tb = ln_node_tid.get(na), ln_node_tid.get(nb)
        if ta is not None and tb is not None and ta != tb:
            cop_pairs.add((min(ta, tb), max(ta, tb)))
    cop_pairs = sorted(cop_pairs)

    poses = [GlobalPose(p.rotation.copy(), p.translation.copy())
             for p in chain.poses]
    problem = None
    if config.ba_enabled:
        t0 = time.perf_counter()
        try:
            point_tracks, line_tracks, cop_pairs = _prune_observations(
                poses, ds.cameras, point_tracks, line_tracks, cop_pairs)
            problem = ba.build_problem(poses, ds.cameras, point_tracks,
                                       line_tracks, cop_pairs)
            report.ba_initial_cost = ba.total_cost(problem)
            ba.run_two_stage(problem, stage1=config.ba_stage1,
                             max_iters=config.ba_max_iters,
                             ftol=config.ba_ftol, gtol=config.ba_gtol)
            report.ba_final_cost = problem.cost_trace[-1]
            report.ba_accepted_steps = len(problem.cost_trace)
            report.n_points = len(problem.points3d)
            report.n_lines = len(problem.lines3d)
            report.n_coplanar_pairs = len(problem.coplanar_pairs)
            poses = problem.poses
        except EmptyProblem:
            problem = None
        report.timings["ba"] = time.perf_counter() - t0

    if ds.gt_poses is not None:
        try:
            pre = _center_errors(chain.poses, ds.gt_poses)
            report.pre_ba_mean_center_error = pre[0]
            report.pre_ba_max_center_error = pre[1]
            post = _center_errors(poses, ds.gt_poses)
            report.post_ba_mean_center_error = post[0]
            report.post_ba_max_center_error = post[1]
        except DegenerateAlignment:
            pass

    result = PipelineResult(report=report, chain=chain, poses=poses,
                            problem=problem, point_tracks=point_tracks,
                            line_tracks=line_tracks,
                            coplanar_track_pairs=cop_pairs)
    if out_dir is not None:
        t0 = time.perf_counter()
        os.makedirs(out_dir, exist_ok=True)
        save_poses(poses, os.path.join(out_dir, "poses.txt"))
        export_structure(result.problem, result.line_tracks, ds,
                         os.path.join(out_dir, "structure.ply"))
        report.timings["export"] = time.perf_counter() - t0
        report.save(os.path.join(out_dir, "report.json"))
    return result


def _try(fn, *args):
    try:
        return fn(*args)
    except ChainSfmError as e:
        return e
