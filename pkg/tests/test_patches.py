import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinecade.edgemap import EdgeMap, extract_edges
from spinecade.errors import EmptyEdgeMapError, NoPositivesError, VersionMismatchError
from spinecade.orientation import EdgeOrientation
from spinecade.patches import (
    Label,
    PatchExtractor,
    Strategy,
    build_patchset,
    extract_mirrored,
    extract_oriented,
    extract_original,
    label_edge_voxel,
    load_patchset,
    mirror,
    patchset_bytes,
    save_patchset,
)
from spinecade.volume import Annotation, ProcessLabel, Volume


def orient(theta, anisotropy=1.0):
    return EdgeOrientation(theta, anisotropy, (math.cos(theta), math.sin(theta)), (1.0, 0.0))


@pytest.fixture(scope="module")
def random_volume():
    rng = np.random.default_rng(0)
    return Volume(rng.integers(-1200, 2500, size=(20, 40, 48), dtype=np.int16), (0.7, 0.7, 1.5))


def test_window_example():
    data = np.zeros((5, 5, 5), np.int16)
    data[2, 2, 2] = 500
    p = extract_original(Volume(data), (2, 2, 2))
    for plane in p.planes:
        assert plane[32, 32] == pytest.approx(700 / 1500, abs=1e-7)


def test_corner_gets_air(random_volume):
    p = extract_original(random_volume, (0, 0, 0))
    assert p.axial[0, 0] == 0.0 and p.coronal[0, 0] == 0.0 and p.sagittal[0, 0] == 0.0


def test_planes_share_center_and_range(random_volume):
    ex = PatchExtractor(random_volume)
    rng = np.random.default_rng(1)
    for _ in range(20):
        e = tuple(int(rng.integers(0, d)) for d in random_volume.dims)
        p = ex.original(e)
        assert p.planes.shape == (3, 64, 64) and p.planes.dtype == np.float32
        assert p.planes.min() >= 0 and p.planes.max() <= 1
        hu = random_volume.value(e)
        expected = np.float32(min(max((hu + 200) / 1500, 0), 1))
        assert p.axial[32, 32] == p.coronal[32, 32] == p.sagittal[32, 32] == expected


def test_plane_axes(random_volume):
    x, y, z = 20, 15, 8
    p = extract_original(random_volume, (x, y, z))
    raw = random_volume.data
    w = lambda hu: np.float32(np.clip((hu + 200) / 1500, 0, 1))  # noqa: E731
    assert p.axial[32 + 3, 32 + 5] == w(raw[z, y + 3, x + 5])
    assert p.coronal[32 + 2, 32 + 5] == w(raw[z + 2, y, x + 5])
    assert p.sagittal[32 + 2, 32 + 3] == w(raw[z + 2, y + 3, x])


def test_mirror_involution_and_columns(random_volume):
    m = extract_mirrored(random_volume, (10, 12, 5))
    o = extract_original(random_volume, (10, 12, 5))
    assert np.array_equal(mirror(m.planes), o.planes)
    assert np.array_equal(m.planes[:, :, 63 - np.arange(64)], o.planes)
    assert m.mirrored and m.center_pixel() == (32, 31)


def test_symmetric_patch_unchanged_by_mirror():
    planes = np.random.default_rng(2).random((3, 64, 64)).astype(np.float32)
    planes = planes + planes[:, :, ::-1]
    assert np.array_equal(mirror(planes), planes)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), axis=st.sampled_from(["lr", "ud"]))
def test_mirror_involution_property(seed, axis):
    planes = np.random.default_rng(seed).random((3, 64, 64)).astype(np.float32)
    assert np.array_equal(mirror(mirror(planes, axis), axis), planes)


def test_oriented_theta_zero_is_original(random_volume):
    for e in [(0, 0, 0), (20, 15, 8), (47, 39, 19)]:
        a = extract_oriented(random_volume, e, orient(0.0))
        b = extract_original(random_volume, e)
        assert a.theta_used == 0.0
        assert np.array_equal(a.planes, b.planes)


def test_isotropic_falls_back(random_volume):
    a = extract_oriented(random_volume, (20, 15, 8), orient(0.7, anisotropy=0.0))
    assert a.theta_used is None
    assert np.array_equal(a.planes, extract_original(random_volume, (20, 15, 8)).planes)


def test_rotation_keeps_coronal_sagittal(random_volume):
    a = extract_oriented(random_volume, (20, 15, 8), orient(0.9))
    b = extract_original(random_volume, (20, 15, 8))
    assert np.array_equal(a.planes[1:], b.planes[1:])
    assert a.axial[32, 32] == pytest.approx(b.axial[32, 32], abs=1e-6)


def test_line_at_30_degrees_becomes_horizontal():
    size, cx, cy = 160, 80, 80
    ys, xs = np.mgrid[0:size, 0:size]
    theta = math.radians(30)
    # signed distance to the line through the centre along theta
    dist = -(xs - cx) * math.sin(theta) + (ys - cy) * math.cos(theta)
    img = np.where(np.abs(dist) <= 1.0, 1300, -200).astype(np.int16)
    v = Volume(np.repeat(img[None], 3, axis=0))
    p = extract_oriented(v, (cx, cy, 1), orient(theta))
    axial = p.axial.astype(np.float64)
    cols = np.arange(64)
    rows = np.array([np.sum(np.arange(64) * axial[:, c]) / axial[:, c].sum() for c in cols])
    slope, intercept = np.polyfit(cols, rows, 1)
    assert abs(slope * 63) < 1.0
    assert abs(rows - (slope * cols + intercept)).max() < 1.0
    assert abs(intercept - 32) < 1.0


def test_label_rule():
    v = Volume(np.zeros((10, 10, 10), np.int16))
    ann = [Annotation("p", (2.0, 0.0, 0.0), ProcessLabel.LEFT)]
    assert label_edge_voxel((0, 0, 0), ann, v, 5.0) == Label.FRACTURE
    assert label_edge_voxel((7, 0, 0), ann, v, 5.0) == Label.FRACTURE  # exactly on the boundary
    assert label_edge_voxel((8, 0, 0), ann, v, 5.0) == Label.NON_FRACTURE
    assert label_edge_voxel((0, 0, 0), [], v, 5.0) == Label.NON_FRACTURE
    with pytest.raises(ValueError):
        label_edge_voxel((0, 0, 0), ann, v, 0.0)


def grid_edges(n_x, n_y, z=2):
    xs, ys = np.meshgrid(np.arange(n_x), np.arange(n_y))
    idx = np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)])
    ones = np.ones(len(idx))
    return EdgeMap(idx, ones, ones, ones, (n_x, n_y, 5), 0.0)


def test_counts_with_ample_voxels():
    v = Volume(np.zeros((5, 40, 40), np.int16))
    edges = grid_edges(40, 40)
    ann = [Annotation("p", (20.0, 20.0, 2.0), ProcessLabel.SPINOUS)]  # ~450 voxels within 12 mm
    ps = build_patchset(v, edges, ann, "original", 1000, 0.3, seed=1, radius_mm=12.0)
    assert (ps.positives, ps.negatives, ps.shortfall) == (300, 700, 0)
    ps = build_patchset(v, edges, ann, "oriented", 1000, 0.3, seed=1, radius_mm=12.0)
    assert (ps.positives, ps.negatives) == (300, 700)
    assert sum(p.mirrored for p in ps.patches) == 150


def test_positive_shortfall_with_mirrors():
    v = Volume(np.zeros((5, 40, 40), np.int16))
    near = np.column_stack([np.arange(10), np.zeros(10), np.full(10, 2)])  # within 4.5 mm
    far = grid_edges(40, 20).indices + [0, 20, 0]
    idx = np.vstack([near, far])
    ones = np.ones(len(idx))
    edges = EdgeMap(idx, ones, ones, ones, (40, 40, 5), 0.0)
    ann = [Annotation("p", (4.5, 0.0, 2.0), ProcessLabel.LEFT)]
    ps = build_patchset(v, edges, ann, "mirrored", 1000, 0.1, seed=0)
    assert ps.positives == 20
    assert sum(p.mirrored for p in ps.patches) == 10
    assert ps.shortfall == 80
    assert ps.negatives == 800


def test_errors():
    v = Volume(np.zeros((5, 8, 8), np.int16))
    with pytest.raises(EmptyEdgeMapError):
        build_patchset(v, grid_edges(0, 0), [], "original", 10, 0.3, 0)
    with pytest.raises(NoPositivesError):
        build_patchset(v, grid_edges(8, 8), [], "original", 10, 0.3, 0)


def test_determinism_and_round_trip(tmp_path, small_phantom):
    img, mask, anns = small_phantom
    edges = extract_edges(img, mask)
    a = build_patchset(img, edges, anns, Strategy.ORIENTED, 60, 0.33, seed=7)
    b = build_patchset(img, edges, anns, Strategy.ORIENTED, 60, 0.33, seed=7)
    assert patchset_bytes(a) == patchset_bytes(b)
    c = build_patchset(img, edges, anns, Strategy.ORIENTED, 60, 0.33, seed=8)
    assert patchset_bytes(a) != patchset_bytes(c)
    for p in a.patches:
        assert p.planes.min() >= 0 and p.planes.max() <= 1
        r, col = p.center_pixel()
        assert abs(p.axial[r, col] - p.coronal[r, col]) < 1e-6
        assert abs(p.axial[r, col] - p.sagittal[r, col]) < 1e-6

    save_patchset(a, tmp_path / "p.bin")
    back = load_patchset(tmp_path / "p.bin")
    assert patchset_bytes(back) == patchset_bytes(a)
    assert [p.mirrored for p in back.patches] == [p.mirrored for p in a.patches]
    assert back.positives + back.negatives == len(back)

    (tmp_path / "bad.bin").write_bytes(b"XXXX" + patchset_bytes(a)[4:])
    with pytest.raises(VersionMismatchError):
        load_patchset(tmp_path / "bad.bin")
