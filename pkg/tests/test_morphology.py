import math

import numpy as np
import pytest

from heatlens.morphology import (
    SvfConfig,
    annulus_weights,
    compute_svf,
    sector_sky_fraction,
    svf_layers,
    zone_morphometrics,
)
from heatlens.raster import Grid
from oracles import monte_carlo_svf


def test_config_validation():
    with pytest.raises(ValueError):
        SvfConfig(directions=4)
    with pytest.raises(ValueError):
        SvfConfig(canopy_transmissivity=1.5)


def test_annulus_weights_telescope():
    w = annulus_weights(90)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    for deg in (0.0, 12.0, 37.5, 61.3, 89.0):
        h = math.radians(deg)
        assert sector_sky_fraction(h) == pytest.approx(math.cos(h) ** 2, abs=1e-12)


def test_flat_is_open_sky():
    svf = compute_svf(Grid(np.full((12, 12), 5.0)), cfg=SvfConfig(directions=72))
    assert np.allclose(svf.values, 1.0, atol=1e-6)


def test_deep_pit_is_closed():
    dsm = np.full((21, 21), 500.0)
    dsm[10, 10] = 0.0
    svf = compute_svf(Grid(dsm), cfg=SvfConfig(directions=72, search_radius=20))
    assert svf.values[10, 10] < 0.01


def courtyard():
    # thick walls: a one-cell ridge is narrower than the oracle's march step can resolve
    d = np.full((61, 61), 10.0)
    d[21:40, 21:40] = 0.0
    return d


@pytest.mark.parametrize("rc", [(30, 30), (25, 33), (22, 22)])
def test_courtyard_matches_monte_carlo(rc):
    d = courtyard()
    svf = compute_svf(Grid(d), cfg=SvfConfig(directions=360, search_radius=150)).values[rc]
    ref = monte_carlo_svf(d, None, *rc, n_rays=200_000, seed=11, radius_cells=150)
    assert abs(svf - ref) < 0.01


def test_transparent_canopy_equals_building_only():
    rng = np.random.default_rng(2)
    dsm = Grid(rng.uniform(0, 3, (16, 16)))
    cdsm = Grid(np.where(rng.random((16, 16)) < 0.3, 6.0, 0.0))
    cfg = SvfConfig(directions=36, search_radius=20, canopy_transmissivity=1.0)
    b, _ = svf_layers(dsm, cdsm, cfg)
    assert np.array_equal(compute_svf(dsm, cdsm, cfg).values, np.clip(b, 0, 1))


def test_opaque_canopy_not_above_transparent():
    rng = np.random.default_rng(5)
    dsm = Grid(rng.uniform(0, 3, (16, 16)))
    cdsm = Grid(np.where(rng.random((16, 16)) < 0.3, 6.0, 0.0))
    opaque = compute_svf(dsm, cdsm, SvfConfig(directions=36, search_radius=20, canopy_transmissivity=0.0))
    clear = compute_svf(dsm, cdsm, SvfConfig(directions=36, search_radius=20, canopy_transmissivity=1.0))
    assert np.all(opaque.values <= clear.values)
    assert np.all((opaque.values >= 0) & (clear.values <= 1))


def test_raising_a_cell_never_opens_sky_elsewhere():
    rng = np.random.default_rng(8)
    base = rng.uniform(0, 10, (14, 14))
    cfg = SvfConfig(directions=24, search_radius=20)
    before = compute_svf(Grid(base), cfg=cfg).values
    for _ in range(10):
        r, c = rng.integers(14, size=2)
        raised = base.copy()
        raised[r, c] += rng.uniform(0.5, 20)
        after = compute_svf(Grid(raised), cfg=cfg).values
        others = np.ones_like(base, dtype=bool)
        others[r, c] = False
        assert np.all(after[others] <= before[others])


def test_direction_order_only_changes_rounding():
    rng = np.random.default_rng(4)
    dsm = Grid(rng.uniform(0, 10, (10, 10)))
    a = compute_svf(dsm, cfg=SvfConfig(directions=64, search_radius=15)).values
    b = compute_svf(dsm, cfg=SvfConfig(directions=64, search_radius=15)).values
    assert np.array_equal(a, b)


def test_morphometrics_full_cover():
    bh = Grid(np.full((3, 3), 9.0))
    ch = Grid(np.zeros((3, 3)))
    zones = Grid(np.full((3, 3), 5.0), nodata=-1)
    t = zone_morphometrics(bh, ch, zones, floor_height=3.0)
    assert list(t.zone_ids) == [5]
    assert t["BD"][0] == 1 and t["BH"][0] == 9 and t["BH_sd"][0] == 0 and t["FAR"][0] == 3
    assert t["CD"][0] == 0 and np.isnan(t["CH"][0])


def test_morphometrics_two_buildings():
    bh = Grid(np.array([[10.0, 20.0], [0.0, 0.0]]))
    ch = Grid(np.array([[0.0, 0.0], [4.0, 0.0]]))
    zones = Grid(np.full((2, 2), 1.0), nodata=-1)
    t = zone_morphometrics(bh, ch, zones, floor_height=3.0)
    assert t["BH"][0] == 15
    assert t["BH_sd"][0] == pytest.approx(math.sqrt(50), abs=1e-4)
    assert t["BD"][0] == 0.5 and t["CD"][0] == 0.25
    # floors: round(10/3)=3, round(20/3)=7 -> (3+7)/4
    assert t["FAR"][0] == pytest.approx(2.5)


def test_morphometrics_empty_and_water_zone():
    bh = Grid(np.zeros((2, 4)))
    ch = Grid(np.zeros((2, 4)))
    zones = Grid(np.array([[1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]]), nodata=-1)
    land = Grid(np.array([[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]]))
    t = zone_morphometrics(bh, ch, zones, land_mask=land)
    assert t["BD"][0] == 0 and t["FAR"][0] == 0 and np.isnan(t["BH"][0])
    assert all(np.isnan(t[k][1]) for k in ("BH", "BD", "FAR", "CD"))
