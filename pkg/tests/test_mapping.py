import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from raincast import mapping as Mp

GRID = Mp.GridSpec(0.0, 2.0, 0.0, 1.0, 0.5)


def test_grid_axes():
    lon, lat = GRID.axes()
    np.testing.assert_allclose(lon, [0, 0.5, 1, 1.5, 2])
    np.testing.assert_allclose(lat, [0, 0.5, 1])


def test_idw_examples():
    r = Mp.idw_interpolate([0.0, 2.0], [0.5, 0.5], [0.0, 10.0], GRID)
    assert r.values[1, 2] == pytest.approx(5.0)
    assert r.values[1, 0] == 0.0 and r.values[1, 4] == 10.0
    one = Mp.idw_interpolate([0.3], [0.7], [42.0], GRID)
    assert np.all(one.values == 42.0)


def test_idw_weights_match_formula():
    lon, lat, v = np.array([0.2, 1.7]), np.array([0.1, 0.9]), np.array([3.0, 8.0])
    r = Mp.idw_interpolate(lon, lat, v, GRID, power=3)
    d = np.hypot(1.0 - lon, 0.5 - lat) ** -3
    assert r.values[1, 2] == pytest.approx((d * v).sum() / d.sum(), rel=1e-14)


def test_idw_errors():
    with pytest.raises(ValueError):
        Mp.idw_interpolate([], [], [], GRID)
    with pytest.raises(ValueError):
        Mp.idw_interpolate([0.0], [0.0], [1.0], GRID, power=0)


@given(st.lists(st.tuples(st.floats(-1, 3), st.floats(-1, 2), st.floats(-100, 100)), min_size=1, max_size=8))
def test_idw_bounded(stations):
    lon, lat, v = map(np.array, zip(*stations))
    r = Mp.idw_interpolate(lon, lat, v, GRID)
    assert r.values.min() >= v.min() - 1e-9 and r.values.max() <= v.max() + 1e-9


def test_render_round_trip(tmp_path):
    r = Mp.idw_interpolate([0.0, 2.0], [0.0, 1.0], [1.0, 9.0], GRID)
    csv_path, img = Mp.render_map(r, tmp_path / "m")
    back = Mp.read_raster_csv(csv_path)
    np.testing.assert_array_equal(back.values, r.values)
    np.testing.assert_array_equal(back.lon, r.lon)
    assert "_min1.000_max9.000" in img.name
    assert Mp.read_ppm(img).shape == (3, 5, 3)


def test_east_west_gradient_is_monotone_ramp(tmp_path):
    lon, lat = GRID.axes()
    r = Mp.Raster(lon, lat, np.tile(lon, (lat.size, 1)))
    _, img = Mp.render_map(r, tmp_path / "g")
    px = Mp.read_ppm(img)[0, :, 0].astype(int)
    assert np.all(np.diff(px) <= 0) and px[0] == 255


def test_flat_raster_warns(tmp_path, caplog):
    lon, lat = GRID.axes()
    r = Mp.Raster(lon, lat, np.zeros((lat.size, lon.size)))
    with caplog.at_level(logging.WARNING):
        csv_path, img = Mp.render_map(r, tmp_path / "z")
    assert "flat raster" in caplog.text
    assert np.all(Mp.read_raster_csv(csv_path).values == 0)
    assert np.unique(Mp.read_ppm(img).reshape(-1, 3), axis=0).shape[0] == 1


def test_non_finite_rejected(tmp_path):
    r = Mp.Raster(np.array([0.0]), np.array([0.0]), np.array([[np.nan]]))
    with pytest.raises(ValueError):
        Mp.render_map(r, tmp_path / "x")
