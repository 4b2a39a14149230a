import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskspot.geometry import (BandConfig, GeometryError, GridSpec, RasterMask, TextInstance,
                               assign_grids, centerline_band, match_grids, occupation_ratio,
                               polygon_area, rasterize)


def brute_force_count(poly, h, w, scale=0.25):
    """Pixel-centre ray casting, one pixel at a time."""
    p = np.asarray(poly, dtype=float) * scale
    n = len(p)
    count = 0
    for r in range(h):
        for c in range(w):
            x, y = c + 0.5, r + 0.5
            inside = False
            for i in range(n):
                x0, y0 = p[i]
                x1, y1 = p[i - 1]
                if (y0 > y) != (y1 > y) and x < (x1 - x0) * (y - y0) / (y1 - y0) + x0:
                    inside = not inside
            count += inside
    return count


def mask_from(bits):
    bits = np.asarray(bits, dtype=bool)
    return RasterMask(bits.shape[0], bits.shape[1], bits)


def test_rasterize_full_and_half_plane():
    assert rasterize([[0, 0], [64, 0], [64, 64], [0, 64]], 16, 16).area == 256
    assert rasterize([[0, 0], [32, 0], [32, 64], [0, 64]], 16, 16).area == 128


def test_rasterize_random_triangles_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        tri = rng.uniform(0, 64, size=(3, 2))
        if abs(polygon_area(tri)) < 1:
            continue
        assert rasterize(tri, 16, 16).area == brute_force_count(tri, 16, 16)


def test_rasterize_degenerate_warns():
    with pytest.warns(RuntimeWarning):
        m = rasterize([[0, 0], [10, 10], [20, 20]], 16, 16)
    assert m.area == 0 and m.degenerate


def test_occupation_ratio_examples():
    grid = GridSpec(4, 16, 16)
    cell = grid.cell_mask(5)
    assert occupation_ratio(cell, cell) == 1.0
    assert occupation_ratio(grid.cell_mask(0), cell) == 0.0
    # instance of area 40 overlapping a 16-pixel cell on 8 pixels
    bits = np.zeros((16, 16), dtype=bool)
    r0, r1, c0, c1 = grid.cell_bounds(5)
    bits[r0:r0 + 2, c0:c1] = True            # 8 pixels inside the cell
    bits[0:4, 12:16] = True                   # 16 elsewhere
    bits[12:16, 0:4] = True                   # 16 elsewhere
    inst = mask_from(bits)
    assert inst.area == 40
    assert occupation_ratio(inst, cell) == 0.5


def test_occupation_ratio_empty_and_mismatch():
    empty = RasterMask.empty(8, 8)
    full = mask_from(np.ones((8, 8)))
    assert occupation_ratio(empty, full) == 0.0
    with pytest.raises(GeometryError):
        occupation_ratio(empty, RasterMask.empty(4, 8))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_occupation_ratio_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = mask_from(rng.random((10, 12)) < rng.random())
    b = mask_from(rng.random((10, 12)) < rng.random())
    assert occupation_ratio(a, b) == occupation_ratio(b, a)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 9), st.integers(9, 40), st.integers(9, 40))
def test_grid_cells_tile_plane(S, fh, fw):
    grid = GridSpec(S, fh, fw)
    cover = np.zeros((fh, fw), dtype=int)
    for j in range(grid.num_cells):
        cover += grid.cell_mask(j).bits
    assert np.all(cover == 1)
    assert grid.cell_areas().sum() == fh * fw


def test_cell_bounds_follow_floor_rule():
    grid = GridSpec(3, 10, 7)
    for j in range(9):
        h, w = grid.cell(j)
        assert grid.cell_bounds(j) == (h * 10 // 3, (h + 1) * 10 // 3, w * 7 // 3, (w + 1) * 7 // 3)


def test_grid_ratios_match_pairwise_function():
    rng = np.random.default_rng(4)
    grid = GridSpec(4, 16, 16)
    inst = mask_from(rng.random((16, 16)) < 0.3)
    fast = grid.occupation_ratios(inst)
    for j in range(16):
        assert fast[j] == occupation_ratio(inst, grid.cell_mask(j))


def welcome_instance(iid=0):
    # band lands on feature rows 4..5, cols 8..15 of a 24x24 plane
    poly = np.array([[7, 2.5], [17, 2.5], [17, 7.5], [7, 7.5]]) * 4
    return TextInstance(poly, "WELCOME", id=iid)


def test_match_grids_welcome_example():
    grid = GridSpec(6, 24, 24)
    a = match_grids([welcome_instance()], grid, mu=0.3)
    assert a.positive_grids == [8, 9]
    assert [j + 1 for j in a.positive_grids] == [9, 10]
    assert all(a.owner[j] == 0 for j in (8, 9))


def test_single_cell_instance():
    grid = GridSpec(4, 16, 16)
    a = assign_grids({0: grid.cell_mask(6)}, grid, 0.3)
    assert a.positive_grids == [6]


def test_larger_ratio_claims_shared_cell():
    grid = GridSpec(4, 16, 16)
    r0, r1, c0, c1 = grid.cell_bounds(5)
    # instance 0: 40% of the cell's pixels plus a large body elsewhere -> 0.4
    b0 = np.zeros((16, 16), dtype=bool)
    flat = np.zeros(16, dtype=bool)
    flat[:6] = True
    b0[r0:r1, c0:c1] = flat[:16].reshape(4, 4)
    b0[12:16, 8:16] = True
    # instance 1: 60% of the cell -> ~0.6 (rounded to a 10-pixel overlap)
    b1 = np.zeros((16, 16), dtype=bool)
    rest = np.zeros(16, dtype=bool)
    rest[6:16] = True
    b1[r0:r1, c0:c1] = rest.reshape(4, 4)
    b1[0:4, 12:16] = True
    b1[0:4, 8:12] = True
    m0, m1 = mask_from(b0), mask_from(b1)
    o0, o1 = occupation_ratio(m0, grid.cell_mask(5)), occupation_ratio(m1, grid.cell_mask(5))
    assert o0 < o1 and o0 > 0.3
    a = assign_grids({0: m0, 1: m1}, grid, 0.3)
    assert a.owner[5] == 1


def test_tie_goes_to_smaller_id():
    grid = GridSpec(2, 8, 8)
    bits = np.zeros((8, 8), dtype=bool)
    bits[0:2, 0:4] = True
    other = np.zeros((8, 8), dtype=bool)
    other[2:4, 0:4] = True
    a = assign_grids({3: mask_from(bits), 7: mask_from(other)}, grid, 0.3)
    assert a.owner[0] == 3


def test_unmatched_reported():
    grid = GridSpec(2, 8, 8)
    tiny = np.zeros((8, 8), dtype=bool)
    a = assign_grids({0: mask_from(tiny)}, grid, 0.3)
    assert a.unmatched == [0] and a.positive_grids == []


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_match_grids_order_invariant(seed):
    rng = np.random.default_rng(seed)
    grid = GridSpec(4, 16, 16)
    masks = {i: mask_from(rng.random((16, 16)) < 0.15) for i in range(4)}
    forward = assign_grids(masks, grid, 0.3)
    shuffled = dict(reversed(list(masks.items())))
    backward = assign_grids(shuffled, grid, 0.3)
    assert forward.owner == backward.owner and forward.unmatched == backward.unmatched


def test_centerline_band_rectangle():
    inst = TextInstance([[-20, -5], [20, -5], [20, 5], [-20, 5]], "ABCD")
    band = centerline_band(inst)
    xs, ys = band[:, 0], band[:, 1]
    assert xs.max() - xs.min() == pytest.approx(36)
    assert ys.max() - ys.min() == pytest.approx(4)
    assert band.mean(axis=0) == pytest.approx([0, 0], abs=1e-12)


def test_centerline_band_rotation_equivariant():
    rect = np.array([[-20, -5], [20, -5], [20, 5], [-20, 5]], dtype=float)
    rot = np.array([[0, -1], [1, 0]], dtype=float)
    band = centerline_band(TextInstance(rect, "A"))
    band_rot = centerline_band(TextInstance(rect @ rot.T, "A"))
    assert {tuple(np.round(p, 9)) for p in band @ rot.T} == {tuple(np.round(p, 9)) for p in band_rot}


def test_centerline_band_inside_curved_instance():
    from maskspot.datagen import SceneConfig, generate

    cfg = SceneConfig(height=96, width=96, min_len=3, max_len=4, curve_prob=1.0,
                      max_instances=1, glyph_scale=2, min_radius=30, max_radius=40)
    inst = generate(cfg, 3).instances[0]
    assert len(inst.polygon) > 4
    band = centerline_band(inst)
    inst_mask = rasterize(inst.polygon, 96, 96, scale=1.0)
    band_mask = rasterize(band, 96, 96, scale=1.0)
    assert 0 < band_mask.area < inst_mask.area
    assert not np.any(band_mask.bits & ~inst_mask.bits)


def test_centerline_band_fallback_for_tiny_instance():
    tri = np.array([[0, 0], [4, 0], [2, 3]], dtype=float)
    band = centerline_band(tri)
    assert abs(polygon_area(band)) == pytest.approx(0.25 * abs(polygon_area(tri)))


def test_band_config_exposed():
    rect = np.array([[-20, -5], [20, -5], [20, 5], [-20, 5]], dtype=float)
    band = centerline_band(rect, BandConfig(height_frac=0.6, end_inset=0.1))
    assert band[:, 1].max() - band[:, 1].min() == pytest.approx(6)
    assert band[:, 0].max() - band[:, 0].min() == pytest.approx(38)


def test_instance_validation():
    with pytest.raises(GeometryError):
        TextInstance([[0, 0], [1, 1]], "A")
    with pytest.raises(GeometryError):
        TextInstance([[0, 0], [4, 4], [4, 0], [0, 4]], "A")  # bow tie
    with pytest.raises(GeometryError):
        TextInstance([[0, 0], [4, 0], [4, 4], [0, 4]], "AB", char_boxes=[[[0, 0], [1, 0], [1, 1]]])


def test_rasterize_no_warning_on_normal_polygon():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rasterize([[0, 0], [8, 0], [8, 8]], 4, 4)
