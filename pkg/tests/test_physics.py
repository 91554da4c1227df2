import numpy as np
import pytest
from hypothesis import given, strategies as st

from raincast import physics as P
from raincast.ingest import StationRecord
from raincast.synthetic import bell_terrain


def mono(n, dx=1000.0, A=500.0, mode=3):
    x = np.arange(n) * dx
    k = 2 * np.pi * mode / (n * dx)
    h = np.tile(A * np.sin(k * x), (n, 1))
    return P.TerrainGrid(h), x, k


@pytest.mark.parametrize("n", [32, 64, 128])
def test_monochromatic_closed_form(n):
    terrain, x, k = mono(n)
    cfg = P.OrographicConfig(Cw=0.01, U=10.0, dx=1000.0, dy=1000.0)
    field = P.simulate_field(terrain, cfg, raw=True)
    expect = np.tile(0.01 * 10.0 * 500.0 * k * np.cos(k * x), (n, 1))
    assert np.max(np.abs(field - expect)) / np.max(np.abs(expect)) < 1e-6


def test_flat_terrain_null():
    f = P.simulate_field(P.TerrainGrid(np.full((16, 20), 321.0)),
                         P.OrographicConfig(U=7, V=-3, tau_c=1000, tau_h=500), raw=True)
    np.testing.assert_allclose(f, 0.0, atol=1e-12)


def test_clamped_field_nonnegative():
    terrain, _, _ = mono(32)
    cfg = P.OrographicConfig(U=10.0)
    assert P.simulate_field(terrain, cfg).min() == 0.0
    assert P.simulate_field(terrain, cfg, raw=True).min() < 0.0


@given(st.floats(0.1, 50.0), st.integers(0, 1000))
def test_linearity_in_terrain(a, seed):
    h = np.random.default_rng(seed).normal(size=(16, 16)) * 100
    cfg = P.OrographicConfig(U=5, V=2, tau_c=300, tau_h=200)
    f1 = P.simulate_field(P.TerrainGrid(h), cfg, raw=True)
    f2 = P.simulate_field(P.TerrainGrid(a * h), cfg, raw=True)
    np.testing.assert_allclose(f2, a * f1, rtol=1e-10, atol=1e-10 * np.abs(f2).max())


@given(st.floats(-30, 30), st.floats(-30, 30), st.integers(0, 1000))
def test_wind_reversal_antisymmetry(U, V, seed):
    h = np.random.default_rng(seed).normal(size=(12, 16)) * 100
    f = P.simulate_field(P.TerrainGrid(h), P.OrographicConfig(U=U, V=V), raw=True)
    g = P.simulate_field(P.TerrainGrid(h), P.OrographicConfig(U=-U, V=-V), raw=True)
    np.testing.assert_allclose(g, -f, rtol=1e-10, atol=1e-12)


def test_bell_mountain_maximum_downwind():
    terrain = bell_terrain(128, 2000.0)
    cfg = P.OrographicConfig(Cw=0.01, tau_c=1000, tau_h=500, U=40.0, V=0.0, dx=2000.0, dy=2000.0)
    f = P.simulate_field(terrain, cfg)
    crest = np.unravel_index(np.argmax(terrain.elevations), terrain.elevations.shape)
    peak = np.unravel_index(np.argmax(f), f.shape)
    assert peak[1] > crest[1]


def test_wavenumber_convention():
    k, l = P.wavenumbers(4, 2, 10.0, 5.0)
    np.testing.assert_allclose(k, 2 * np.pi * np.array([0, 1, -2, -1]) / 40.0)
    np.testing.assert_allclose(l, 2 * np.pi * np.array([0, -1]) / 10.0)


def test_config_and_terrain_validation():
    with pytest.raises(P.PhysicsError):
        P.OrographicConfig(tau_c=-1)
    with pytest.raises(P.PhysicsError):
        P.OrographicConfig(Cw=0)
    with pytest.raises(P.PhysicsError):
        P.TerrainGrid(np.array([[1.0, np.nan], [0, 0]]))
    with pytest.raises(P.PhysicsError):
        P.TerrainGrid(np.zeros((1, 5)))


@pytest.mark.parametrize("h, winds, expect", [(0.0, [[3, 4]], 0.0), (100.0, [[3, 4]], 5.0), (800.0, [[0, 0]] * 5, 0.0)])
def test_station_feature_examples(h, winds, expect):
    assert P.station_edge_feature(h, winds, 0.01) == pytest.approx(expect, abs=1e-12)


def test_station_feature_errors_and_series():
    with pytest.raises(P.PhysicsError):
        P.station_edge_feature(-1.0, [[1, 1]])
    with pytest.raises(P.PhysicsError):
        P.station_edge_feature(10.0, np.zeros((0, 2)))
    s = P.station_edge_feature_series(100.0, [[3, 4], [0, 1]], 0.01)
    np.testing.assert_allclose(s, [5.0, 1.0])


def test_feature_table_properties(rng):
    w = rng.normal(5, 2, size=(60, 2))
    stations = [StationRecord("coast", 7, 100, 5.0), StationRecord("twin", 7, 100, 5.0),
                StationRecord("hill", 14.4, 101.4, 1350.0)]
    winds = {s.station_id: w for s in stations}
    t1 = P.build_edge_feature_table(stations, winds, 0.01)
    t2 = P.build_edge_feature_table(stations, winds, 0.02)
    assert t1["coast"] == t1["twin"]
    assert t1["hill"] > t1["coast"]
    for k in t1:
        assert t2[k] == pytest.approx(2 * t1[k], rel=1e-12)
        assert t1[k] >= 0
    with pytest.raises(P.PhysicsError, match="hill"):
        P.build_edge_feature_table(stations, {"coast": w, "twin": w}, 0.01)


def test_terrain_io_roundtrip(tmp_path, rng):
    g = P.TerrainGrid(rng.uniform(0, 900, (5, 7)))
    P.save_terrain(g, tmp_path / "t.json", 250.0, 500.0)
    back, dx, dy = P.load_terrain(tmp_path / "t.json")
    np.testing.assert_array_equal(back.elevations, g.elevations)
    assert (dx, dy) == (250.0, 500.0)
    P.write_field_csv(g.elevations, tmp_path / "g.csv")
    back2, dx2, _ = P.load_terrain(tmp_path / "g.csv")
    np.testing.assert_array_equal(back2.elevations, g.elevations)
    assert dx2 == 1000.0


def test_winds_csv(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("station_id,year,month,u,v\nS,2000,2,1,2\nS,2000,1,3,4\n")
    np.testing.assert_array_equal(P.load_winds_csv(p)["S"], [[3, 4], [1, 2]])
