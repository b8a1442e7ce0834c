"""Dataset file formats: ingestion, validation and export.

All feature files are line-oriented text with a one-line JSON header
(schema name, version, units), so fixtures stay diffable and language
neutral.  Pixel coordinates are stored in the original image frame;
normalization happens at load time using the per-camera intrinsics.

Directory layout::

    dataset/
      cameras.txt          id fx fy cx cy width height   (header carries cycle flag)
      segments.txt         img id x1 y1 x2 y2
      points.txt           img id x y
      segment_matches.txt  img_i img_j id_i id_j
      point_matches.txt    img_i img_j id_i id_j
      relative_poses.txt   img_i img_j r00..r22 tx ty tz
      gt_poses.txt         id r00..r22 cx cy cz          (optional)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DanglingReference, IoError, MissingIntrinsics, ParseError
from .geometry import GlobalPose, Intrinsics, RelativePose

SCHEMA_VERSION = 1

_FILES = {
    "cameras": "cameras.txt",
    "segments": "segments.txt",
    "points": "points.txt",
    "segment_matches": "segment_matches.txt",
    "point_matches": "point_matches.txt",
    "relative_poses": "relative_poses.txt",
    "gt_poses": "gt_poses.txt",
}


@dataclass
class Dataset:
    """In-memory form of a dataset directory.

    Cameras are listed in chain order; consecutive entries must have a
    relative pose.  Feature ids are arbitrary integers, unique per image.
    """

    cameras: list[Intrinsics]
    segments: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]]
    points: dict[int, dict[int, np.ndarray]]
    segment_matches: dict[tuple[int, int], list[tuple[int, int]]]
    point_matches: dict[tuple[int, int], list[tuple[int, int]]]
    relative_poses: dict[tuple[int, int], RelativePose]
    gt_poses: list[GlobalPose] | None = None
    cycle: bool = False

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    def chain_pairs(self) -> list[tuple[int, int]]:
        pairs = [(j, j + 1) for j in range(self.n_cameras - 1)]
        if self.cycle:
            pairs.append((self.n_cameras - 1, 0))
        return pairs

    def validate(self) -> None:
        n = self.n_cameras
        if n < 2:
            raise ParseError("dataset needs at least two cameras")
        for (i, j), matches in list(self.segment_matches.items()) + list(
                self.point_matches.items()):
            for img in (i, j):
                if not 0 <= img < n:
                    raise MissingIntrinsics(f"no camera with index {img}")
        for (i, j), matches in self.segment_matches.items():
            for ida, idb in matches:
                if ida not in self.segments.get(i, {}):
                    raise DanglingReference(
                        f"segment {ida} of image {i} in match {i}-{j}")
                if idb not in self.segments.get(j, {}):
                    raise DanglingReference(
                        f"segment {idb} of image {j} in match {i}-{j}")
        for (i, j), matches in self.point_matches.items():
            for ida, idb in matches:
                if ida not in self.points.get(i, {}):
                    raise DanglingReference(
                        f"point {ida} of image {i} in match {i}-{j}")
                if idb not in self.points.get(j, {}):
                    raise DanglingReference(
                        f"point {idb} of image {j} in match {i}-{j}")
        for pair in self.chain_pairs():
            if pair not in self.relative_poses:
                raise ParseError(f"missing relative pose for chain pair {pair}")
        if self.gt_poses is not None and len(self.gt_poses) != n:
            raise ParseError("ground-truth pose count does not match cameras")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _header(schema: str, **extra) -> str:
    d = {"schema": f"chainsfm/{schema}", "version": SCHEMA_VERSION,
         "units": "px"}
    d.update(extra)
    return json.dumps(d, sort_keys=True)


def _read_lines(path: str, schema: str):
    """Yields (lineno, tokens) for data lines after checking the header."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = f.read().splitlines()
    except OSError as e:
        raise IoError(str(e)) from e
    if not raw:
        raise ParseError("empty file", path=path, line=1)
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"bad JSON header: {e}", path=path, line=1) from e
    if header.get("schema") != f"chainsfm/{schema}":
        raise ParseError(
            f"expected schema chainsfm/{schema}, got {header.get('schema')}",
            path=path, line=1)
    rows = []
    for ln, text in enumerate(raw[1:], start=2):
        text = text.strip()
        if not text or text.startswith("#"):
            continue
        rows.append((ln, text.split()))
    return header, rows


def save_dataset(ds: Dataset, path: str) -> None:
    os.makedirs(path, exist_ok=True)

    with open(os.path.join(path, _FILES["cameras"]), "w") as f:
        f.write(_header("cameras", cycle=ds.cycle) + "\n")
        for i, K in enumerate(ds.cameras):
            f.write(" ".join([str(i), _fmt(K.fx), _fmt(K.fy), _fmt(K.cx),
                              _fmt(K.cy), str(K.width), str(K.height)]) + "\n")

    with open(os.path.join(path, _FILES["segments"]), "w") as f:
        f.write(_header("segments") + "\n")
        for img in sorted(ds.segments):
            for sid in sorted(ds.segments[img]):
                a, b = ds.segments[img][sid]
                f.write(" ".join([str(img), str(sid), _fmt(a[0]), _fmt(a[1]),
                                  _fmt(b[0]), _fmt(b[1])]) + "\n")

    with open(os.path.join(path, _FILES["points"]), "w") as f:
        f.write(_header("points") + "\n")
        for img in sorted(ds.points):
            for pid in sorted(ds.points[img]):
                p = ds.points[img][pid]
                f.write(" ".join([str(img), str(pid), _fmt(p[0]),
                                  _fmt(p[1])]) + "\n")

    for key, matches in [("segment_matches", ds.segment_matches),
                         ("point_matches", ds.point_matches)]:
        with open(os.path.join(path, _FILES[key]), "w") as f:
            f.write(_header(key) + "\n")
            for (i, j) in sorted(matches):
                for ida, idb in matches[(i, j)]:
                    f.write(f"{i} {j} {ida} {idb}\n")

    with open(os.path.join(path, _FILES["relative_poses"]), "w") as f:
        f.write(_header("relative_poses") + "\n")
        for (i, j) in sorted(ds.relative_poses):
            rp = ds.relative_poses[(i, j)]
            vals = list(rp.rotation.ravel()) + list(rp.direction)
            f.write(" ".join([str(i), str(j)] + [_fmt(v) for v in vals]) + "\n")

    gt_path = os.path.join(path, _FILES["gt_poses"])
    if ds.gt_poses is not None:
        with open(gt_path, "w") as f:
            f.write(_header("gt_poses") + "\n")
            for i, pose in enumerate(ds.gt_poses):
                vals = list(pose.rotation.ravel()) + list(pose.center)
                f.write(" ".join([str(i)] + [_fmt(v) for v in vals]) + "\n")
    elif os.path.exists(gt_path):
        os.remove(gt_path)


def load_dataset(path: str) -> Dataset:
    """Load and fully validate a dataset directory."""
    cam_path = os.path.join(path, _FILES["cameras"])
    header, rows = _read_lines(cam_path, "cameras")
    cameras: dict[int, Intrinsics] = {}
    for ln, tok in rows:
        try:
            idx = int(tok[0])
            cameras[idx] = Intrinsics(float(tok[1]), float(tok[2]),
                                      float(tok[3]), float(tok[4]),
                                      int(tok[5]), int(tok[6]))
        except (ValueError, IndexError) as e:
            raise ParseError(f"bad camera row: {e}", path=cam_path, line=ln)
    if sorted(cameras) != list(range(len(cameras))):
        raise ParseError("camera ids must be 0..n-1", path=cam_path)
    cam_list = [cameras[i] for i in range(len(cameras))]

    def read_features(key, schema, ncols):
        p = os.path.join(path, _FILES[key])
        out: dict[int, dict[int, object]] = {}
        if not os.path.exists(p):
            return out
        _, rows = _read_lines(p, schema)
        for ln, tok in rows:
            try:
                img, fid = int(tok[0]), int(tok[1])
                vals = [float(t) for t in tok[2:2 + ncols]]
                if len(vals) != ncols:
                    raise ValueError("wrong column count")
            except (ValueError, IndexError) as e:
                raise ParseError(f"bad row: {e}", path=p, line=ln)
            if ncols == 4:
                item = (np.array(vals[:2]), np.array(vals[2:]))
            else:
                item = np.array(vals)
            out.setdefault(img, {})[fid] = item
        return out

    segments = read_features("segments", "segments", 4)
    points = read_features("points", "points", 2)

    def read_matches(key):
        p = os.path.join(path, _FILES[key])
        out: dict[tuple[int, int], list[tuple[int, int]]] = {}
        if not os.path.exists(p):
            return out
        _, rows = _read_lines(p, key)
        for ln, tok in rows:
            try:
                i, j, ida, idb = (int(t) for t in tok[:4])
            except (ValueError, IndexError) as e:
                raise ParseError(f"bad match row: {e}", path=p, line=ln)
            out.setdefault((i, j), []).append((ida, idb))
        return out

    segment_matches = read_matches("segment_matches")
    point_matches = read_matches("point_matches")

    rp_path = os.path.join(path, _FILES["relative_poses"])
    relposes: dict[tuple[int, int], RelativePose] = {}
    if os.path.exists(rp_path):
        _, rows = _read_lines(rp_path, "relative_poses")
        for ln, tok in rows:
            try:
                i, j = int(tok[0]), int(tok[1])
                vals = np.array([float(t) for t in tok[2:14]])
            except (ValueError, IndexError) as e:
                raise ParseError(f"bad pose row: {e}", path=rp_path, line=ln)
            try:
                relposes[(i, j)] = RelativePose(vals[:9].reshape(3, 3),
                                                vals[9:12], (i, j))
            except ValueError as e:
                raise ParseError(str(e), path=rp_path, line=ln)

    gt_path = os.path.join(path, _FILES["gt_poses"])
    gt_poses = None
    if os.path.exists(gt_path):
        _, rows = _read_lines(gt_path, "gt_poses")
        gt = {}
        for ln, tok in rows:
            try:
                i = int(tok[0])
                vals = np.array([float(t) for t in tok[1:13]])
            except (ValueError, IndexError) as e:
                raise ParseError(f"bad gt pose row: {e}", path=gt_path, line=ln)
            gt[i] = GlobalPose.from_center(vals[:9].reshape(3, 3), vals[9:12])
        gt_poses = [gt[i] for i in sorted(gt)]

    ds = Dataset(cameras=cam_list, segments=segments, points=points,
                 segment_matches=segment_matches, point_matches=point_matches,
                 relative_poses=relposes, gt_poses=gt_poses,
                 cycle=bool(header.get("cycle", False)))
    ds.validate()
    return ds


def save_poses(poses: list[GlobalPose], path: str) -> None:
    """Write global poses as text: id, rotation row-major, center."""
    try:
        with open(path, "w") as f:
            f.write(_header("poses") + "\n")
            for i, pose in enumerate(poses):
                vals = list(pose.rotation.ravel()) + list(pose.center)
                f.write(" ".join([str(i)] + [_fmt(v) for v in vals]) + "\n")
    except OSError as e:
        raise IoError(str(e)) from e


def load_poses(path: str) -> list[GlobalPose]:
    _, rows = _read_lines(path, "poses")
    out = {}
    for ln, tok in rows:
        try:
            i = int(tok[0])
            vals = np.array([float(t) for t in tok[1:13]])
            if vals.size != 12:
                raise ValueError("wrong column count")
        except (ValueError, IndexError) as e:
            raise ParseError(f"bad pose row: {e}", path=path, line=ln)
        out[i] = GlobalPose.from_center(vals[:9].reshape(3, 3), vals[9:12])
    if sorted(out) != list(range(len(out))):
        raise ParseError("pose ids must be 0..n-1", path=path)
    return [out[i] for i in range(len(out))]


# --- PLY export -----------------------------------------------------------

def export_ply(points: np.ndarray, line_endpoints: list, path: str,
               plane_quads: list | None = None) -> None:
    """Write structure as ASCII PLY: point vertices, line edges, and
    optional coplanar-patch quads.  Deterministic output, doubles throughout.

    `points` is (n, 3); `line_endpoints` a list of (p0, p1) 3D pairs;
    `plane_quads` a list of (4, 3) arrays.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    plane_quads = plane_quads or []
    verts = [points] if len(points) else []
    edges = []
    faces = []
    base = len(points)
    for p0, p1 in line_endpoints:
        verts.append(np.array([p0, p1], dtype=float))
        edges.append((base, base + 1))
        base += 2
    for quad in plane_quads:
        quad = np.asarray(quad, dtype=float).reshape(4, 3)
        verts.append(quad)
        faces.append(tuple(range(base, base + 4)))
        base += 4
    allv = np.concatenate(verts, axis=0) if verts else np.zeros((0, 3))

    try:
        with open(path, "w") as f:
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {len(allv)}\n")
            f.write("property double x\nproperty double y\nproperty double z\n")
            f.write(f"element edge {len(edges)}\n")
            f.write("property int vertex1\nproperty int vertex2\n")
            f.write(f"element face {len(faces)}\n")
            f.write("property list uchar int vertex_indices\n")
            f.write("end_header\n")
            for v in allv:
                f.write(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
            for a, b in edges:
                f.write(f"{a} {b}\n")
            for quad in faces:
                f.write("4 " + " ".join(str(i) for i in quad) + "\n")
    except OSError as e:
        raise IoError(str(e)) from e
