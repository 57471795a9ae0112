import numpy as np
import pytest

from plcd import rmac


def test_default_table_grid_count_and_widths():
    grid = rmac.region_grid(12, (1, 2, 3, 4))
    assert len(grid) == 30
    widths = {r.scale: r.width for r in grid}
    assert widths == {1: 12, 2: 9, 3: 7, 4: 5}
    for r in grid:
        assert 0 <= r.x0 and r.x0 + r.width <= 12
        assert 0 <= r.y0 and r.y0 + r.height <= 12


def test_scale_one_is_full_map():
    (region,) = rmac.region_grid(12, (1,))
    assert (region.x0, region.y0, region.width, region.height) == (0, 0, 12, 12)


def test_scale_two_offsets():
    grid = rmac.region_grid(12, (2,))
    offsets = sorted({(r.x0, r.y0) for r in grid})
    assert offsets == [(0, 0), (0, 3), (3, 0), (3, 3)]


def test_region_count_is_sum_of_squares():
    for scales in ((1,), (1, 2), (1, 2, 3, 4), (2, 4)):
        grid = rmac.region_grid(12, scales)
        assert len(grid) == sum(l * l for l in scales)


def test_in_bounds_across_sides():
    for side in (4, 5, 6, 7, 8, 12, 16):
        grid = rmac.region_grid(side, (1, 2, 3, 4))
        for r in grid:
            assert 0 <= r.x0 and r.x0 + r.width <= side
            assert 0 <= r.y0 and r.y0 + r.height <= side


def test_width_rule_fallback():
    # scale 5 has no table entry: round(2 * 12 / 6) = 4
    assert rmac.region_width(12, 5) == 4


def test_width_rule_error():
    with pytest.raises(ValueError, match="width rule"):
        rmac.region_width(4, 1, width_table={1: 99}, reference_side=4)


def test_rectangular_maps_apply_rule_per_axis():
    grid = rmac.region_grid((6, 12), (2,))
    for r in grid:
        assert r.width == 9 and r.height == rmac.region_width(6, 2)
        assert r.x0 + r.width <= 12 and r.y0 + r.height <= 6


def test_max_pool_constant_map():
    fm = np.full((3, 4, 4), 2.5)
    (region,) = rmac.region_grid(4, (1,))
    assert np.array_equal(rmac.region_max_pool(fm, region), [2.5, 2.5, 2.5])


def test_max_pool_full_map_is_global_max():
    rng = np.random.default_rng(0)
    fm = rng.standard_normal((5, 6, 6))
    (region,) = rmac.region_grid(6, (1,))
    assert np.array_equal(rmac.region_max_pool(fm, region), fm.max(axis=(1, 2)))


def test_max_pool_hand_case():
    fm = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    region = rmac.Region(scale=1, x0=0, y0=0, width=2, height=1)
    assert np.array_equal(rmac.region_max_pool(fm, region), [2.0])


def test_max_pool_out_of_bounds():
    fm = np.zeros((1, 2, 2))
    with pytest.raises(ValueError, match="bounds"):
        rmac.region_max_pool(fm, rmac.Region(1, 1, 1, 2, 2))


def test_pooled_values_attained_and_bound():
    rng = np.random.default_rng(1)
    fm = rng.standard_normal((4, 12, 12))
    for region in rmac.region_grid(12, (1, 2, 3, 4)):
        pooled = rmac.region_max_pool(fm, region)
        window = fm[:, region.y0:region.y0 + region.height,
                    region.x0:region.x0 + region.width]
        for ch in range(fm.shape[0]):
            assert pooled[ch] == window[ch].max()
            assert np.all(pooled[ch] >= window[ch])


def test_monotone_in_cell_values():
    rng = np.random.default_rng(2)
    fm = rng.standard_normal((3, 8, 8))
    grid = rmac.region_grid(8, (1, 2, 3))
    before = np.stack(rmac.extract_patch_features(fm, grid))
    for trial in range(20):
        bumped = fm.copy()
        ch = trial % 3
        y, x = rng.integers(8), rng.integers(8)
        bumped[ch, y, x] += abs(rng.standard_normal()) + 0.1
        after = np.stack(rmac.extract_patch_features(bumped, grid))
        assert np.all(after >= before - 1e-12)


def test_extract_order_stable_and_counts():
    rng = np.random.default_rng(3)
    fm = rng.standard_normal((2, 12, 12))
    grid = rmac.region_grid(12, (1, 2, 3, 4))
    first = rmac.extract_patch_features(fm, grid)
    second = rmac.extract_patch_features(fm, grid)
    assert len(first) == len(grid)
    assert all(np.array_equal(a, b) for a, b in zip(first, second))
    # ascending scale then row-major centers
    order = [(r.scale, r.y0, r.x0) for r in grid]
    assert order == sorted(order)


def test_identical_maps_identical_features():
    rng = np.random.default_rng(4)
    fm = rng.standard_normal((2, 6, 6))
    grid = rmac.region_grid(6, (1, 2))
    a = rmac.extract_patch_features(fm, grid)
    b = rmac.extract_patch_features(fm.copy(), grid)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_local_change_only_affects_covering_regions():
    rng = np.random.default_rng(5)
    fm = rng.standard_normal((2, 12, 12))
    grid = rmac.region_grid(12, (1, 2, 3, 4))
    before = rmac.extract_patch_features(fm, grid)
    y, x = 1, 10
    bumped = fm.copy()
    bumped[:, y, x] = fm.max() + 1.0  # above every max: covering regions must change
    after = rmac.extract_patch_features(bumped, grid)
    for region, b, a in zip(grid, before, after):
        covers = (region.x0 <= x < region.x0 + region.width
                  and region.y0 <= y < region.y0 + region.height)
        if covers:
            assert not np.array_equal(a, b)
        else:
            assert np.array_equal(a, b)


def test_region_cells_match_window():
    grid = rmac.region_grid(6, (2, 3))
    for region in grid:
        cells = rmac.region_cells(region, (1, 6, 6))
        assert len(cells) == region.width * region.height
        ys, xs = np.divmod(cells, 6)
        assert ys.min() == region.y0 and ys.max() == region.y0 + region.height - 1
        assert xs.min() == region.x0 and xs.max() == region.x0 + region.width - 1


def test_grid_csv_dump():
    grid = rmac.region_grid(12, (1, 2))
    csv = rmac.grid_to_csv(grid)
    lines = csv.strip().splitlines()
    assert lines[0] == "scale,x0,y0,w,h"
    assert len(lines) == 1 + len(grid)
    assert lines[1] == "1,0,0,12,12"


def test_empty_scales_rejected():
    with pytest.raises(ValueError, match="scales"):
        rmac.region_grid(12, ())
