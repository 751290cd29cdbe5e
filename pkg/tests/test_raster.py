import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heatlens.raster import (
    Grid,
    RasterFormatError,
    ZoneSet,
    distance_to_mask,
    read_grid,
    read_zones,
    rasterize_zones,
    resample_bilinear,
    write_grid,
    write_zones,
)
from oracles import brute_distance


def square(x0, y0, x1, y1):
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]


@pytest.fixture
def small_grid():
    vals = np.array([[1.5, 2.0, -9999.0], [0.1, 1e-7, 123456.789]])
    return Grid(vals, origin_x=100.0, origin_y=200.0, cell_size=30.0, nodata=-9999.0)


@pytest.mark.parametrize("suffix", [".asc", ".f32"])
def test_roundtrip(tmp_path, small_grid, suffix):
    path = tmp_path / f"g{suffix}"
    write_grid(small_grid, path)
    back = read_grid(path)
    if suffix == ".asc":
        assert back == small_grid
    else:
        assert np.array_equal(back.values, small_grid.values.astype(np.float32).astype(np.float64))
        assert back.cell_size == small_grid.cell_size


def test_f32_bitwise(tmp_path):
    vals = np.random.default_rng(1).normal(size=(5, 7)).astype(np.float32).astype(np.float64)
    g = Grid(vals, cell_size=2.0)
    write_grid(g, tmp_path / "x.f32")
    assert read_grid(tmp_path / "x.f32") == g


def test_ascii_nodata_preserved(tmp_path):
    (tmp_path / "a.asc").write_text(
        "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n-9999 4\n"
    )
    g = read_grid(tmp_path / "a.asc")
    assert (~g.mask).sum() == 1
    assert g.values[1, 0] == -9999


def test_missing_cellsize(tmp_path):
    (tmp_path / "a.asc").write_text("ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\n1 2\n")
    with pytest.raises(RasterFormatError, match="cellsize"):
        read_grid(tmp_path / "a.asc")


def test_malformed_header_names_line(tmp_path):
    (tmp_path / "a.asc").write_text("ncols 2\nnrows two\ncellsize 1\n1 2\n")
    with pytest.raises(RasterFormatError, match=":2:"):
        read_grid(tmp_path / "a.asc")


def test_body_mismatch(tmp_path):
    (tmp_path / "a.asc").write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n")
    with pytest.raises(RasterFormatError, match="body"):
        read_grid(tmp_path / "a.asc")


def test_constant_grid_body_and_nodata_header(tmp_path):
    g = Grid(np.full((2, 3), 7.0), nodata=-1.0)
    write_grid(g, tmp_path / "c.asc")
    text = (tmp_path / "c.asc").read_text().splitlines()
    assert text[5] == "NODATA_value -1"
    assert text[6:] == ["7 7 7", "7 7 7"]


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(np.zeros((2, 2)), cell_size=0)
    with pytest.raises(ValueError):
        Grid(np.array([[np.nan, 1.0]]))


# ---------------------------------------------------------------- zones


def test_full_cover_zone():
    tpl = Grid(np.zeros((4, 5)), cell_size=2.0)
    zones = ZoneSet.from_polygons([(9, [square(0, 0, 10, 8)])])
    z = rasterize_zones(zones, tpl)
    assert np.all(z.values == 9)


def test_overlap_takes_lowest_id():
    tpl = Grid(np.zeros((4, 4)))
    zones = ZoneSet.from_polygons([(7, [square(0, 0, 3, 3)]), (3, [square(1, 1, 4, 4)])])
    z = rasterize_zones(zones, tpl).values
    # overlap cells centres (1.5..2.5, 1.5..2.5) -> rows 1..2, cols 1..2
    assert np.all(z[1:3, 1:3] == 3)
    assert z[3, 0] == 7 and z[0, 3] == 3


def test_zone_order_independent():
    tpl = Grid(np.zeros((6, 6)))
    polys = [(7, [square(0, 0, 4, 4)]), (3, [square(2, 2, 6, 6)]), (5, [square(1, 0, 6, 2)])]
    a = rasterize_zones(ZoneSet.from_polygons(polys), tpl)
    b = rasterize_zones(ZoneSet.from_polygons(polys[::-1]), tpl)
    assert a == b


def _half_open_oracle(rects, x, y):
    # rects: (zone_id, x0, y0, x1, y1); inside iff x0 <= x < x1 and y0 <= y < y1
    hits = [zid for zid, x0, y0, x1, y1 in rects if x0 <= x < x1 and y0 <= y < y1]
    return min(hits) if hits else -1


def test_shared_edges_match_half_open_oracle():
    # zone edges run through cell centres (cell size 1, centres at k + 0.5)
    rects = [(4, 0.5, 0.5, 2.5, 4.0), (2, 2.5, 0.0, 4.0, 2.5), (1, 2.5, 2.5, 4.0, 4.0), (6, 0.0, 0.0, 0.5, 4.0)]
    tpl = Grid(np.zeros((4, 4)))
    zones = ZoneSet.from_polygons([(zid, [square(x0, y0, x1, y1)]) for zid, x0, y0, x1, y1 in rects])
    got = rasterize_zones(zones, tpl).values
    xs, ys = tpl.cell_centers()
    for r in range(4):
        for c in range(4):
            assert got[r, c] == _half_open_oracle(rects, xs[r, c], ys[r, c]), (r, c)


def test_holes_are_excluded():
    tpl = Grid(np.zeros((5, 5)))
    zones = ZoneSet.from_polygons([(1, [square(0, 0, 5, 5), square(2, 2, 3, 3)])])
    z = rasterize_zones(zones, tpl).values
    assert z[2, 2] == -1 and (z == 1).sum() == 24


def test_empty_zoneset_all_nodata():
    z = rasterize_zones(ZoneSet(), Grid(np.zeros((3, 3))))
    assert not z.mask.any()


def test_degenerate_ring_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        ZoneSet.from_polygons([(1, [[[0, 0], [1, 0], [0, 0]]])])


def test_geojson_roundtrip(tmp_path):
    zones = ZoneSet.from_polygons([(1, [square(0, 0, 2, 2)]), (2, [square(2, 0, 4, 2)])])
    write_zones(zones, tmp_path / "z.geojson")
    back = read_zones(tmp_path / "z.geojson")
    assert back.ids == [1, 2]
    assert np.allclose(back.centroids(), [[1, 1], [3, 1]])


# ---------------------------------------------------------------- distance


def test_distance_examples():
    m = np.zeros((5, 5))
    m[2, 2] = 1
    d = distance_to_mask(Grid(m, cell_size=30.0)).values
    assert d[2, 2] == 0
    assert d[2, 3] == pytest.approx(30.0)
    assert d[1, 1] == pytest.approx(30 * np.sqrt(2))


def test_distance_no_targets():
    with pytest.raises(ValueError, match="no target cells"):
        distance_to_mask(Grid(np.zeros((3, 3))))


def test_distance_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(3):
        m = (rng.random((16, 16)) < 0.05).astype(float)
        m[rng.integers(16), rng.integers(16)] = 1
        got = distance_to_mask(Grid(m, cell_size=7.5)).values
        assert np.allclose(got, brute_distance(m == 1, 7.5), atol=1e-9)
        assert np.array_equal(got == 0, m == 1)


# ---------------------------------------------------------------- resampling


def test_resample_constant_and_nodes():
    src = Grid(np.full((4, 4), 3.25), cell_size=10.0)
    tpl = Grid(np.zeros((8, 8)), cell_size=5.0)
    assert np.allclose(resample_bilinear(src, tpl).values, 3.25)

    vals = np.arange(16.0).reshape(4, 4)
    src = Grid(vals, cell_size=10.0)
    same = resample_bilinear(src, src)
    assert np.array_equal(same.values, vals)


def test_resample_midpoint():
    src = Grid(np.array([[2.0, 6.0]]), cell_size=10.0)
    # one template cell centred between the two source centres
    tpl = Grid(np.zeros((1, 1)), origin_x=5.0, origin_y=0.0, cell_size=10.0)
    assert resample_bilinear(src, tpl).values[0, 0] == pytest.approx(4.0)


def test_resample_nodata_propagates():
    src = Grid(np.array([[1.0, -9999.0], [1.0, 1.0]]), cell_size=10.0)
    tpl = Grid(np.zeros((1, 1)), origin_x=5.0, origin_y=5.0, cell_size=10.0)
    assert not resample_bilinear(src, tpl).mask.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_resample_no_overshoot(seed):
    rng = np.random.default_rng(seed)
    src = Grid(rng.normal(size=(6, 7)), cell_size=4.0)
    tpl = Grid(np.zeros((11, 13)), origin_x=1.0, origin_y=1.5, cell_size=1.9)
    out = resample_bilinear(src, tpl).values
    assert out.min() >= src.values.min() - 1e-12
    assert out.max() <= src.values.max() + 1e-12
