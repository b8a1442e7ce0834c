"""Dataset text formats, pose files, and PLY export."""

import filecmp
import os

import numpy as np
import pytest

from chainsfm.dataio import (
    Dataset,
    export_ply,
    load_dataset,
    load_poses,
    save_dataset,
    save_poses,
)
from chainsfm.errors import DanglingReference, ParseError
from chainsfm.synth import SceneSpec, generate


def parse_ascii_ply(path):
    """Strict standalone ASCII-PLY reader: validates the header grammar and
    element counts, returns {element: list of rows}."""
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == "ply"
    assert lines[1] == "format ascii 1.0"
    elements = []  # (name, count, properties)
    i = 2
    while lines[i] != "end_header":
        tok = lines[i].split()
        if tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            assert elements, "property before any element"
            elements[-1][2].append(tok[1:])
        elif tok[0] != "comment":
            raise AssertionError(f"unknown header line: {lines[i]}")
        i += 1
    i += 1
    out = {}
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            tok = lines[i].split()
            i += 1
            if props and props[0][0] == "list":
                n = int(tok[0])
                assert len(tok) == n + 1
                rows.append([int(t) for t in tok[1:]])
            else:
                assert len(tok) == len(props)
                rows.append([float(t) for t in tok])
        out[name] = rows
    assert i == len(lines)
    return out


@pytest.fixture
def noisy_ds():
    return generate(SceneSpec(seed=4, n_cameras=5, noise_sigma_px=0.7,
                              outlier_fraction=0.2))[0]


def test_save_load_save_is_byte_identical(tmp_path, noisy_ds):
    d1, d2 = str(tmp_path / "d1"), str(tmp_path / "d2")
    save_dataset(noisy_ds, d1)
    save_dataset(load_dataset(d1), d2)
    names = sorted(os.listdir(d1))
    assert names == sorted(os.listdir(d2))
    match, mismatch, errors = filecmp.cmpfiles(d1, d2, names, shallow=False)
    assert mismatch == [] and errors == []


def test_load_recovers_all_numeric_fields_exactly(tmp_path, noisy_ds):
    path = str(tmp_path / "d")
    save_dataset(noisy_ds, path)
    ds = load_dataset(path)
    assert ds.n_cameras == noisy_ds.n_cameras
    assert ds.cycle == noisy_ds.cycle
    for a, b in zip(ds.cameras, noisy_ds.cameras):
        assert a == b
    for img in noisy_ds.segments:
        assert sorted(ds.segments[img]) == sorted(noisy_ds.segments[img])
        for sid, (p0, p1) in noisy_ds.segments[img].items():
            assert np.array_equal(ds.segments[img][sid][0], p0)
            assert np.array_equal(ds.segments[img][sid][1], p1)
    for img in noisy_ds.points:
        for pid, p in noisy_ds.points[img].items():
            assert np.array_equal(ds.points[img][pid], p)
    assert ds.segment_matches == noisy_ds.segment_matches
    assert ds.point_matches == noisy_ds.point_matches
    for pair, rp in noisy_ds.relative_poses.items():
        assert np.array_equal(ds.relative_poses[pair].rotation, rp.rotation)
        assert np.array_equal(ds.relative_poses[pair].direction, rp.direction)
    for a, b in zip(ds.gt_poses, noisy_ds.gt_poses):
        assert np.array_equal(a.rotation, b.rotation)
        assert np.allclose(a.center, b.center, rtol=0, atol=1e-14)


def test_dangling_segment_reference_names_the_id(tmp_path, noisy_ds):
    path = str(tmp_path / "d")
    noisy_ds.segment_matches[(0, 1)].append((99999, 0))
    save_dataset(noisy_ds, path)
    with pytest.raises(DanglingReference, match="99999"):
        load_dataset(path)


def test_missing_relative_pose_is_rejected(tmp_path, noisy_ds):
    path = str(tmp_path / "d")
    del noisy_ds.relative_poses[(2, 3)]
    save_dataset(noisy_ds, path)
    with pytest.raises(ParseError, match=r"\(2, 3\)"):
        load_dataset(path)


def test_parse_error_carries_path_and_line(tmp_path, noisy_ds):
    path = str(tmp_path / "d")
    save_dataset(noisy_ds, path)
    seg = os.path.join(path, "segments.txt")
    with open(seg) as f:
        lines = f.read().splitlines()
    lines[3] = "0 7 not-a-number 1 2 3"
    with open(seg, "w") as f:
        f.write("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="segments.txt:4"):
        load_dataset(path)


def test_wrong_schema_header_is_rejected(tmp_path, noisy_ds):
    path = str(tmp_path / "d")
    save_dataset(noisy_ds, path)
    pts = os.path.join(path, "points.txt")
    with open(pts) as f:
        body = f.read().splitlines()[1:]
    with open(pts, "w") as f:
        f.write('{"schema": "chainsfm/segments", "version": 1}\n')
        f.write("\n".join(body) + "\n")
    with pytest.raises(ParseError, match="expected schema chainsfm/points"):
        load_dataset(path)


def test_poses_round_trip_exactly(tmp_path, noisy_ds):
    path = str(tmp_path / "poses.txt")
    save_poses(noisy_ds.gt_poses, path)
    poses = load_poses(path)
    assert len(poses) == len(noisy_ds.gt_poses)
    for a, b in zip(poses, noisy_ds.gt_poses):
        assert np.array_equal(a.rotation, b.rotation)
        assert np.allclose(a.center, b.center, rtol=0, atol=1e-14)


def test_poses_with_gapped_ids_are_rejected(tmp_path, noisy_ds):
    path = str(tmp_path / "poses.txt")
    save_poses(noisy_ds.gt_poses, path)
    with open(path) as f:
        lines = f.read().splitlines()
    del lines[2]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="0..n-1"):
        load_poses(path)


def test_export_ply_empty_structure(tmp_path):
    path = str(tmp_path / "empty.ply")
    export_ply(np.zeros((0, 3)), [], path)
    parsed = parse_ascii_ply(path)
    assert parsed == {"vertex": [], "edge": [], "face": []}


def test_export_ply_one_point_one_line(tmp_path):
    path = str(tmp_path / "s.ply")
    p = np.array([[1.0, 2.0, 3.0]])
    seg = (np.array([0.0, 0.0, 0.0]), np.array([1.0, 1.0, 1.0]))
    export_ply(p, [seg], path)
    parsed = parse_ascii_ply(path)
    assert len(parsed["vertex"]) == 3
    assert parsed["vertex"][0] == [1.0, 2.0, 3.0]
    assert parsed["edge"] == [[1.0, 2.0]]
    assert parsed["face"] == []


def test_export_ply_quads_reference_valid_vertices(tmp_path):
    path = str(tmp_path / "q.ply")
    quad = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    export_ply(np.zeros((0, 3)), [], path, plane_quads=[quad])
    parsed = parse_ascii_ply(path)
    assert len(parsed["vertex"]) == 4
    assert parsed["face"] == [[0, 1, 2, 3]]


def test_export_ply_is_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(5, 3))
    segs = [(rng.normal(size=3), rng.normal(size=3)) for _ in range(3)]
    p1, p2 = str(tmp_path / "a.ply"), str(tmp_path / "b.ply")
    export_ply(pts, segs, p1)
    export_ply(pts, segs, p2)
    assert open(p1).read() == open(p2).read()


def test_validate_rejects_too_few_cameras():
    with pytest.raises(ParseError, match="two cameras"):
        Dataset(cameras=[], segments={}, points={}, segment_matches={},
                point_matches={}, relative_poses={}).validate()
