import numpy as np
import pytest

from windcorr.errors import DataError
from windcorr.grids import (
    AnalysisStore,
    ForecastStore,
    GridField,
    GridSpec,
    arc_degrees,
    haversine_km,
    nearest_grid_sample,
    nearest_indices,
    read_field,
    write_field,
)
from windcorr.types import GeoCoord, TimeStamp


def small_spec():
    return GridSpec(10.0, 20.0, -30.0, -20.0, 1.0)


def make_field(spec=None, init=None, valid=None, seed=0):
    spec = spec or small_spec()
    rng = np.random.default_rng(seed)
    init = init or TimeStamp(2021, 100, 0)
    valid = valid or init
    u = rng.normal(0, 5, spec.n_nodes)
    v = rng.normal(0, 5, spec.n_nodes)
    return GridField(spec, init, valid, u, v)


def test_grid_spec_counts():
    spec = small_spec()
    assert spec.n_lat == 11 and spec.n_lon == 11 and spec.n_nodes == 121
    assert spec.latitudes()[0] == 10.0 and spec.latitudes()[-1] == 20.0


def test_grid_spec_rejects_nondivisible_span():
    with pytest.raises(ValueError):
        GridSpec(0.0, 10.3, 0.0, 10.0, 0.5)


def test_on_node_coordinate_returns_node_value():
    field = make_field()
    value = nearest_grid_sample(field, GeoCoord(13.0, -27.0))
    node = field.spec.node_index(3, 3)
    assert value.u == pytest.approx(field.u[node], abs=1e-12)
    assert value.v == pytest.approx(field.v[node], abs=1e-12)


def test_half_cell_tie_rounds_toward_lower_index():
    spec = small_spec()
    i, j = nearest_indices(spec, np.array([10.5]), np.array([-29.5]))
    assert i[0] == 0 and j[0] == 0
    i, j = nearest_indices(spec, np.array([10.50000001]), np.array([-29.49999999]))
    assert i[0] == 1 and j[0] == 1


def test_outside_margin_rejected():
    spec = small_spec()
    with pytest.raises(DataError):
        nearest_indices(spec, np.array([9.4]), np.array([-25.0]))
    with pytest.raises(DataError):
        nearest_indices(spec, np.array([15.0]), np.array([-19.4]))


def test_nearest_matches_bruteforce_over_random_sweep(rng):
    spec = small_spec()
    field = make_field(spec)
    lats = rng.uniform(spec.lat_min, spec.lat_max, 1000)
    lons = rng.uniform(spec.lon_min, spec.lon_max, 1000)
    i, j = nearest_indices(spec, lats, lons)
    grid_lats = spec.latitudes()
    grid_lons = spec.longitudes()
    for n in range(1000):
        # Brute force over all nodes with the documented tie rule per axis.
        di = np.abs(grid_lats - lats[n])
        dj = np.abs(grid_lons - lons[n])
        bi = np.nonzero(di == di.min())[0][0]
        bj = np.nonzero(dj == dj.min())[0][0]
        assert (i[n], j[n]) == (bi, bj)


def test_field_roundtrip(tmp_path):
    field = make_field()
    path = tmp_path / "field.wgrd"
    write_field(field, path)
    loaded = read_field(path)
    assert loaded.spec == field.spec
    assert loaded.init_time == field.init_time
    assert loaded.valid_time == field.valid_time
    np.testing.assert_array_equal(
        loaded.u, np.asarray(field.u, dtype="<f4").astype(np.float64)
    )


def test_field_truncated_rejected(tmp_path):
    field = make_field()
    path = tmp_path / "field.wgrd"
    write_field(field, path)
    (tmp_path / "broken.wgrd").write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DataError):
        read_field(tmp_path / "broken.wgrd")


def test_field_validates_time_order():
    spec = small_spec()
    with pytest.raises(ValueError):
        GridField(
            spec,
            TimeStamp(2021, 100, 6),
            TimeStamp(2021, 100, 0),
            np.zeros(spec.n_nodes),
            np.zeros(spec.n_nodes),
        )


def test_forecast_store_roundtrip_and_missing(tmp_path):
    store = ForecastStore(tmp_path / "gfs")
    init = TimeStamp(2021, 100, 6)
    field = make_field(init=init, valid=init.add_hours(12))
    store.put(field, forecast_hour=12)
    loaded = store.get(init, 12)
    assert loaded is not None
    np.testing.assert_allclose(loaded.u, field.u, atol=1e-6)
    assert store.get(init, 13) is None
    assert store.has(init, 12)


def test_analysis_store_nearest_time(tmp_path):
    store = AnalysisStore(tmp_path / "era5")
    ts = TimeStamp(2021, 100, 6)
    field = make_field(init=ts, valid=ts)
    store.put(field)
    # Exact hit and nearest-in-window hit.
    assert store.get_nearest(ts) is not None
    assert store.get_nearest(ts.add_hours(2)) is not None
    assert store.get_nearest(ts.add_hours(4)) is None


def test_haversine_known_values():
    # Quarter meridian: pole to equator ~ 10007.5 km.
    d = haversine_km(0.0, 0.0, 90.0, 0.0)
    assert d == pytest.approx(10007.5, rel=1e-3)
    assert haversine_km(12.0, 34.0, 12.0, 34.0) == 0.0
    assert arc_degrees(0.0, 0.0, 0.0, 90.0) == pytest.approx(90.0, rel=1e-9)
