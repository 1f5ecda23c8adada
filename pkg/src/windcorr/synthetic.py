"""Deterministic synthetic world for desk-scale verification.

A closed-form traveling-wave truth field, a synthetic forecast equal to
truth plus a known spatial bias plus lead-growing noise, simulated fixed and
drifting platforms, and a brute-force oracle that quantifies how much error
an ideal bias-removing corrector could eliminate.  Everything is emitted in
the production observation-table and gridded-field formats, so the full
pipeline runs unmodified on synthetic data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grids import AnalysisStore, ForecastStore, GridField, GridSpec, nearest_indices
from .pipeline import MAX_LEAD, MatchupRecord, ObservationRecord, write_observations
from .types import GeoCoord, PlatformType, TimeStamp, WindVector

# Stream tags for content-addressed noise.
_STREAM_NWP = 7
_STREAM_REANALYSIS = 11

_STATION_TYPES = (
    PlatformType.MOORED_BUOY,
    PlatformType.CMAN_STATION,
    PlatformType.COASTAL_STATION,
    PlatformType.TIDE_GAUGE,
    PlatformType.FIXED_PLATFORM,
)


@dataclass(frozen=True)
class SyntheticConfig:
    # Domain box and emitted grid resolution (degrees).  The domain frames a
    # single bump of the systematic error pattern (the bias vanishes near all
    # four edges and peaks mid-domain under the platform cluster), so
    # observation-dense and sparse regions carry very different correctable
    # error.
    lat_min: float = 12.0
    lat_max: float = 48.0
    lon_min: float = -92.0
    lon_max: float = -44.0
    grid_resolution: float = 1.0
    # Truth field: K traveling harmonic components.  Angular rates advance by
    # an irrational fraction of a cycle per day (and per hour), so the field
    # repeats on neither the daily nor the annual cycle: persistence is
    # uninformative and no component is a pure function of clock features.
    # Amplitudes are large relative to the forecast noise so that shrinking a
    # noisy forecast toward climatology buys nothing measurable: the only
    # sizable systematic error is the bias field itself.
    truth_amplitudes: tuple[float, ...] = (66.0, 42.0, 27.0)
    truth_wavenumbers: tuple[int, ...] = (2, 3, 5)
    truth_rates: tuple[float, ...] = (
        2.0 * math.pi * (4.0 + 0.6180339887498949) / 24.0,
        2.0 * math.pi * (2.0 + 0.41421356237309515) / 24.0,
        2.0 * math.pi * (1.0 + 0.2679491924311227) / 24.0,
    )  # rad/hour; periods 5.20 h, 9.94 h, 18.93 h
    # Systematic forecast error.
    bias_amplitude: float = 2.0
    bias_lon_period_deg: float = 90.0
    bias_lat_period_deg: float = 60.0
    bias_v_lon_shift_deg: float = 45.0
    state_dependent_bias: bool = False
    state_dependent_ref_speed: float = 8.0
    # Random error levels (m/s).
    noise_floor: float = 0.5  # forecast noise std at lead 0
    noise_growth: float = 1.0  # extra std at lead 48
    obs_noise: float = 0.3
    reanalysis_noise: float = 1.0
    # Platforms: stations and most ships cluster where the systematic error
    # peaks; a few fast "rover" ships sweep the rest of the domain, so the
    # whole basin sees some training coverage while any single hour leaves
    # wide observation gaps.
    n_fixed_stations: int = 10
    n_ships: int = 7
    n_rover_ships: int = 6
    station_box: tuple[float, float, float, float] = (24.0, 36.0, -74.0, -61.0)
    ship_box: tuple[float, float, float, float] = (25.0, 35.0, -72.0, -63.0)
    rover_box: tuple[float, float, float, float] = (14.0, 46.0, -90.0, -46.0)
    # Platforms report positions rounded to the emitted grid (coarse position
    # precision, as in historical marine reports); measurements are taken at
    # the reported coordinate.
    positions_on_grid: bool = True
    ship_step_std: float = 0.08  # degrees/hour per component
    rover_step_std: float = 0.4
    duration_hours: int = 1440
    start: tuple[int, int, int] = (2021, 91, 0)  # year, day of year, hour
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.noise_floor, self.noise_growth, self.obs_noise, self.reanalysis_noise) < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if self.duration_hours < 72:
            raise ValueError("duration must be >= 72 h for a 48 h-lead dataset")
        if not all(np.isfinite(self.truth_amplitudes)):
            raise ValueError("truth amplitudes must be finite")
        if len(self.truth_amplitudes) != len(self.truth_wavenumbers) or len(
            self.truth_amplitudes
        ) != len(self.truth_rates):
            raise ValueError("truth component tuples must share one length")
        for box in (self.station_box, self.ship_box, self.rover_box):
            b_lat0, b_lat1, b_lon0, b_lon1 = box
            if not (
                self.lat_min <= b_lat0 < b_lat1 <= self.lat_max
                and self.lon_min <= b_lon0 < b_lon1 <= self.lon_max
            ):
                raise ValueError(f"platform box {box} not inside the domain")

    @property
    def start_time(self) -> TimeStamp:
        return TimeStamp(*self.start)

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(
            self.lat_min, self.lat_max, self.lon_min, self.lon_max, self.grid_resolution
        )

    @property
    def domain_box(self) -> tuple[float, float, float, float]:
        return (self.lat_min, self.lat_max, self.lon_min, self.lon_max)


# --- content-addressed noise -------------------------------------------------

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + _SM_GAMMA).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _SM_M1
        z = (z ^ (z >> np.uint64(27))) * _SM_M2
        return z ^ (z >> np.uint64(31))


def _mix_keys(*keys) -> np.ndarray:
    """Combine integer keys (scalars or broadcastable arrays) into one hash."""
    h = np.uint64(0)
    for key in keys:
        arr = np.asarray(key, dtype=np.int64).astype(np.uint64)
        with np.errstate(over="ignore"):
            h = _splitmix64(h ^ _splitmix64(arr))
    return h


def counter_normal(*keys) -> np.ndarray:
    """Standard normal deviates addressed purely by integer keys.

    Reproducible regardless of evaluation order or batching; used for all
    field noise so that regenerating any subset of the world is bit-stable.
    """
    h = _mix_keys(*keys)
    h2 = _splitmix64(h)
    # 53-bit uniforms; +1 keeps u1 in (0, 1] for the log.
    u1 = ((h >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


def _coord_keys(lats: np.ndarray, lons: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Quantize to 1e-6 degrees so file generation and point queries agree.
    return (
        np.round(np.asarray(lats, dtype=np.float64) * 1e6).astype(np.int64),
        np.round(np.asarray(lons, dtype=np.float64) * 1e6).astype(np.int64),
    )


# --- closed-form fields -------------------------------------------------------

def truth_uv(cfg: SyntheticConfig, t_eh: int, lats, lons) -> np.ndarray:
    """Truth wind at epoch-hour ``t_eh`` for arrays of coordinates -> (n, 2)."""
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    t = float(t_eh - cfg.start_time.epoch_hours)
    lat_factor = np.cos(np.deg2rad(lats))
    u = np.zeros_like(lats)
    v = np.zeros_like(lats)
    for amp, wavenumber, rate in zip(
        cfg.truth_amplitudes, cfg.truth_wavenumbers, cfg.truth_rates
    ):
        phase = 2.0 * math.pi * wavenumber * lons / 360.0 + rate * t
        u += amp * np.sin(phase)
        v += amp * np.cos(phase)
    return np.stack([u * lat_factor, v * lat_factor], axis=-1)


def truth_wind(cfg: SyntheticConfig, t: TimeStamp, coord: GeoCoord) -> WindVector:
    uv = truth_uv(cfg, t.epoch_hours, [coord.latitude], [coord.longitude])[0]
    return WindVector(float(uv[0]), float(uv[1]))


def bias_uv(cfg: SyntheticConfig, lats, lons, t_eh: int | None = None) -> np.ndarray:
    """Systematic forecast error field -> (n, 2).

    u bias: B sin(2 pi lon / P_lon) cos(2 pi lat / P_lat); the v bias uses the
    same pattern with the longitude shifted.  In state-dependent mode the
    field is scaled by local truth speed over a reference speed.
    """
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    b = cfg.bias_amplitude
    lat_term = np.cos(2.0 * math.pi * lats / cfg.bias_lat_period_deg)
    bu = b * np.sin(2.0 * math.pi * lons / cfg.bias_lon_period_deg) * lat_term
    bv = (
        b
        * np.sin(2.0 * math.pi * (lons + cfg.bias_v_lon_shift_deg) / cfg.bias_lon_period_deg)
        * lat_term
    )
    out = np.stack([bu, bv], axis=-1)
    if cfg.state_dependent_bias:
        if t_eh is None:
            raise ValueError("state-dependent bias needs a valid time")
        speed = np.linalg.norm(truth_uv(cfg, t_eh, lats, lons), axis=-1)
        out = out * (speed / cfg.state_dependent_ref_speed)[..., None]
    return out


def synthetic_nwp_uv(
    cfg: SyntheticConfig, init_eh: int, forecast_hour: int, lats, lons
) -> np.ndarray:
    """Forecast field values: truth at valid time + bias + seeded noise."""
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    valid_eh = init_eh + forecast_hour
    out = truth_uv(cfg, valid_eh, lats, lons) + bias_uv(cfg, lats, lons, t_eh=valid_eh)
    sigma = cfg.noise_floor + cfg.noise_growth * forecast_hour / float(MAX_LEAD)
    lat_k, lon_k = _coord_keys(lats, lons)
    for comp in (0, 1):
        z = counter_normal(cfg.seed, _STREAM_NWP, init_eh, forecast_hour, lat_k, lon_k, comp)
        out[..., comp] += sigma * z
    return out


def synthetic_nwp(
    cfg: SyntheticConfig, init_t: TimeStamp, forecast_hour: int, coord: GeoCoord
) -> WindVector:
    uv = synthetic_nwp_uv(
        cfg, init_t.epoch_hours, forecast_hour, [coord.latitude], [coord.longitude]
    )[0]
    return WindVector(float(uv[0]), float(uv[1]))


def reanalysis_uv(cfg: SyntheticConfig, valid_eh: int, lats, lons) -> np.ndarray:
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    out = truth_uv(cfg, valid_eh, lats, lons)
    lat_k, lon_k = _coord_keys(lats, lons)
    for comp in (0, 1):
        z = counter_normal(cfg.seed, _STREAM_REANALYSIS, valid_eh, lat_k, lon_k, comp)
        out[..., comp] += cfg.reanalysis_noise * z
    return out


# --- platforms -----------------------------------------------------------------

def _reflect(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    out = np.mod(values - lo, 2.0 * span)
    out = np.where(out > span, 2.0 * span - out, out)
    return out + lo


def simulate_platforms(cfg: SyntheticConfig) -> list[ObservationRecord]:
    """Hourly reports from fixed stations and random-walking ships.

    Stations sit at seeded coordinates inside the station box and cycle
    through the stationary platform categories; ships start inside the ship
    box and take seeded Gaussian steps, reflecting at the domain edges.
    Each report is truth plus independent observation noise.
    """
    start_eh = cfg.start_time.epoch_hours
    hours = np.arange(cfg.duration_hours, dtype=np.int64) + start_eh

    spec = cfg.grid_spec

    def quantize(lats: np.ndarray, lons: np.ndarray):
        if not cfg.positions_on_grid:
            return lats, lons
        i, j = nearest_indices(spec, lats, lons)
        return spec.lat_min + spec.resolution * i, spec.lon_min + spec.resolution * j

    station_rng = np.random.default_rng([cfg.seed, 10])
    s_lat0, s_lat1, s_lon0, s_lon1 = cfg.station_box
    st_lats = station_rng.uniform(s_lat0, s_lat1, cfg.n_fixed_stations)
    st_lons = station_rng.uniform(s_lon0, s_lon1, cfg.n_fixed_stations)
    st_lats, st_lons = quantize(st_lats, st_lons)

    def walk_fleet(
        stream: int, count: int, box, step_std: float, stratified: bool = False
    ) -> np.ndarray:
        fleet_rng = np.random.default_rng([cfg.seed, stream])
        b_lat0, b_lat1, b_lon0, b_lon1 = box
        lat = fleet_rng.uniform(b_lat0, b_lat1, count)
        if stratified:
            # Survey coverage: spread starting longitudes across the box.
            span = b_lon1 - b_lon0
            lon = b_lon0 + span * (np.arange(count) + 0.5) / count
            lon = np.clip(lon + fleet_rng.normal(0.0, 0.05 * span, count), b_lon0, b_lon1)
        else:
            lon = fleet_rng.uniform(b_lon0, b_lon1, count)
        steps = fleet_rng.normal(0.0, step_std, size=(cfg.duration_hours, count, 2))
        track = np.empty((cfg.duration_hours, count, 2))
        for h in range(cfg.duration_hours):
            track[h, :, 0] = lat
            track[h, :, 1] = lon
            lat = _reflect(lat + steps[h, :, 0], cfg.lat_min, cfg.lat_max)
            lon = _reflect(lon + steps[h, :, 1], cfg.lon_min, cfg.lon_max)
        return track

    ship_track = walk_fleet(11, cfg.n_ships, cfg.ship_box, cfg.ship_step_std)
    rover_track = walk_fleet(
        13, cfg.n_rover_ships, cfg.rover_box, cfg.rover_step_std, stratified=True
    )

    noise_rng = np.random.default_rng([cfg.seed, 12])
    records: list[ObservationRecord] = []
    for i in range(cfg.n_fixed_stations):
        pid = f"ST{i:03d}"
        ptype = _STATION_TYPES[i % len(_STATION_TYPES)]
        coord_lat = np.full(cfg.duration_hours, st_lats[i])
        coord_lon = np.full(cfg.duration_hours, st_lons[i])
        noise = noise_rng.normal(0.0, cfg.obs_noise, size=(cfg.duration_hours, 2))
        for h, eh in enumerate(hours):
            uv = truth_uv(cfg, int(eh), coord_lat[h : h + 1], coord_lon[h : h + 1])[0]
            records.append(
                ObservationRecord(
                    pid,
                    ptype,
                    TimeStamp.from_epoch_hours(int(eh)),
                    GeoCoord(float(coord_lat[h]), float(coord_lon[h])),
                    WindVector(float(uv[0] + noise[h, 0]), float(uv[1] + noise[h, 1])),
                )
            )
    for prefix, track, count, ptype in (
        ("SH", ship_track, cfg.n_ships, PlatformType.SHIP),
        ("RV", rover_track, cfg.n_rover_ships, PlatformType.SHIP),
    ):
        for i in range(count):
            pid = f"{prefix}{i:03d}"
            noise = noise_rng.normal(0.0, cfg.obs_noise, size=(cfg.duration_hours, 2))
            r_lats, r_lons = quantize(track[:, i, 0].copy(), track[:, i, 1].copy())
            for h, eh in enumerate(hours):
                lat, lon = float(r_lats[h]), float(r_lons[h])
                uv = truth_uv(cfg, int(eh), [lat], [lon])[0]
                records.append(
                    ObservationRecord(
                        pid,
                        ptype,
                        TimeStamp.from_epoch_hours(int(eh)),
                        GeoCoord(lat, lon),
                        WindVector(float(uv[0] + noise[h, 0]), float(uv[1] + noise[h, 1])),
                    )
                )
    records.sort(key=lambda r: (r.time, r.platform_id))
    return records


# --- world emission ------------------------------------------------------------

FORECAST_HOUR_MAX = MAX_LEAD + 5  # lead 48 issued up to 5 h after a cycle


def generate_field_stores(cfg: SyntheticConfig, gfs_dir, era5_dir) -> tuple[int, int]:
    """Write every forecast and reanalysis field file the pipeline can query.

    Forecast cycles start early enough that observations at the very first
    hour still find their lead-48 cycle.
    """
    spec = cfg.grid_spec
    lat_grid, lon_grid = np.meshgrid(spec.latitudes(), spec.longitudes(), indexing="ij")
    lats, lons = lat_grid.ravel(), lon_grid.ravel()
    start_eh = cfg.start_time.epoch_hours
    gfs = ForecastStore(gfs_dir)
    era = AnalysisStore(era5_dir)

    first_init = ((start_eh - MAX_LEAD - 5) // 6) * 6
    last_init = ((start_eh + cfg.duration_hours - 1) // 6) * 6
    n_forecast = 0
    for init_eh in range(first_init, last_init + 1, 6):
        init_ts = TimeStamp.from_epoch_hours(init_eh)
        for fh in range(FORECAST_HOUR_MAX + 1):
            uv = synthetic_nwp_uv(cfg, init_eh, fh, lats, lons)
            gfs.put(
                GridField(spec, init_ts, init_ts.add_hours(fh), uv[:, 0], uv[:, 1]),
                forecast_hour=fh,
            )
            n_forecast += 1

    n_analysis = 0
    for offset in range(cfg.duration_hours):
        eh = start_eh + offset
        uv = reanalysis_uv(cfg, eh, lats, lons)
        ts = TimeStamp.from_epoch_hours(eh)
        era.put(GridField(spec, ts, ts, uv[:, 0], uv[:, 1]))
        n_analysis += 1
    return n_forecast, n_analysis


def generate_world(cfg: SyntheticConfig, workspace) -> dict[str, Path]:
    """Emit the observation table and both field stores under ``workspace``."""
    workspace = Path(workspace)
    workspace.mkdir(parents=True, exist_ok=True)
    obs_path = workspace / "observations.csv"
    gfs_dir = workspace / "fields" / "gfs"
    era_dir = workspace / "fields" / "era5"
    records = simulate_platforms(cfg)
    write_observations(records, obs_path)
    generate_field_stores(cfg, gfs_dir, era_dir)
    return {"observations": obs_path, "gfs": gfs_dir, "era5": era_dir}


# --- oracle ---------------------------------------------------------------------

def oracle_metrics(
    cfg: SyntheticConfig, matchups: list[MatchupRecord], leads: tuple[int, ...]
) -> dict[int, tuple[float, float]]:
    """Brute-force per-lead (forecast RMSE, ideal bias-removing corrector RMSE).

    The ideal corrector subtracts the analytic bias evaluated at the grid node
    each forecast value was sampled from; it cannot remove forecast noise or
    observation noise, so it is the floor a trained corrector may approach but
    not beat.
    """
    spec = cfg.grid_spec
    lats = np.array([m.observation.coord.latitude for m in matchups])
    lons = np.array([m.observation.coord.longitude for m in matchups])
    times = np.array([m.observation.time.epoch_hours for m in matchups], dtype=np.int64)
    obs = np.array([[m.observation.wind.u, m.observation.wind.v] for m in matchups])
    i, j = nearest_indices(spec, lats, lons)
    node_lats = spec.lat_min + spec.resolution * i
    node_lons = spec.lon_min + spec.resolution * j

    out: dict[int, tuple[float, float]] = {}
    for lead in leads:
        present = np.array([not m.nwp_missing[lead] for m in matchups])
        if not np.any(present):
            continue
        nwp = np.array(
            [[m.nwp_u[lead], m.nwp_v[lead]] for m in matchups], dtype=np.float64
        )[present]
        err = nwp - obs[present]
        nwp_rmse = float(np.sqrt(np.mean(err**2)))
        if cfg.state_dependent_bias:
            bias = np.zeros_like(err)
            sel = np.nonzero(present)[0]
            for row, idx in enumerate(sel):
                bias[row] = bias_uv(
                    cfg,
                    node_lats[idx : idx + 1],
                    node_lons[idx : idx + 1],
                    t_eh=int(times[idx]),
                )[0]
        else:
            bias = bias_uv(cfg, node_lats[present], node_lons[present])
        ideal = float(np.sqrt(np.mean((err - bias) ** 2)))
        out[lead] = (nwp_rmse, ideal)
    return out


def oracle_metrics_for_samples(
    cfg: SyntheticConfig, matchups, samples, leads: tuple[int, ...]
) -> dict[int, tuple[float, float]]:
    """oracle_metrics restricted to the exact targets of the given samples.

    Used to pin evaluation thresholds on the same target set the metric table
    will be computed on (e.g. the test split).
    """
    index = {
        (m.observation.platform_id, m.observation.time.epoch_hours): m for m in matchups
    }
    per_lead: dict[int, list[MatchupRecord]] = {lead: [] for lead in leads}
    for sample in samples:
        for tok in sample.target_tokens:
            if not tok.valid or tok.lead_hours not in per_lead:
                continue
            key = (tok.platform_id, sample.issue_time.epoch_hours + tok.lead_hours)
            m = index.get(key)
            if m is not None:
                per_lead[tok.lead_hours].append(m)
    out: dict[int, tuple[float, float]] = {}
    for lead, subset in per_lead.items():
        if subset:
            out.update(oracle_metrics(cfg, subset, (lead,)))
    return out
