"""Assemble per-triplet features from a loaded dataset.

Bifocal line matches become `LineMatch2V`; features matched in both
consecutive pairs of a triplet are joined transitively on their shared
middle-image id into point/line triplets.
"""

from __future__ import annotations

import numpy as np

from .dataio import Dataset
from .features import LineMatch2V, LineTriplet, PointTriplet
from .geometry import make_segment, normalize_point
from .scale import TripletFrame


def triplet_frame(ds: Dataset, t: int) -> TripletFrame:
    """Triplet frame for cameras (t, t+1, t+2) of the chain."""
    cams = _triplet_cameras(ds, t)
    return TripletFrame(ds.relative_poses[(cams[0], cams[1])],
                        ds.relative_poses[(cams[1], cams[2])], cams)


def _triplet_cameras(ds: Dataset, t: int) -> tuple[int, int, int]:
    n = ds.n_cameras
    if ds.cycle:
        return (t % n, (t + 1) % n, (t + 2) % n)
    return (t, t + 1, t + 2)


def n_triplets(ds: Dataset) -> int:
    return ds.n_cameras if ds.cycle else ds.n_cameras - 2


def line_matches(ds: Dataset, pair: tuple[int, int]) -> list[LineMatch2V]:
    i, j = pair
    Ki, Kj = ds.cameras[i], ds.cameras[j]
    out = []
    for ida, idb in ds.segment_matches.get(pair, []):
        ai, bi = ds.segments[i][ida]
        aj, bj = ds.segments[j][idb]
        out.append(LineMatch2V(pair, make_segment(ai, bi, Ki, i),
                               make_segment(aj, bj, Kj, j), (ida, idb)))
    return out


def point_triplets(ds: Dataset, t: int) -> list[PointTriplet]:
    a, b, c = _triplet_cameras(ds, t)
    first = {idb: ida for ida, idb in ds.point_matches.get((a, b), [])}
    out = []
    for idb, idc in ds.point_matches.get((b, c), []):
        if idb not in first:
            continue
        ida = first[idb]
        px = np.array([ds.points[a][ida], ds.points[b][idb], ds.points[c][idc]])
        norm = np.array([normalize_point(px[k], ds.cameras[cam])
                         for k, cam in enumerate((a, b, c))])
        out.append(PointTriplet((a, b, c), px, norm, track_id=idb,
                                feature_ids=(ida, idb, idc)))
    return out


def line_triplets(ds: Dataset, t: int) -> list[LineTriplet]:
    a, b, c = _triplet_cameras(ds, t)
    first = {idb: ida for ida, idb in ds.segment_matches.get((a, b), [])}
    out = []
    for idb, idc in ds.segment_matches.get((b, c), []):
        if idb not in first:
            continue
        ida = first[idb]
        segs = tuple(
            make_segment(*ds.segments[cam][fid], ds.cameras[cam], cam)
            for cam, fid in ((a, ida), (b, idb), (c, idc)))
        out.append(LineTriplet((a, b, c), segs, track_id=idb,
                               feature_ids=(ida, idb, idc)))
    return out
