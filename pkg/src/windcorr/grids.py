"""Gridded wind fields: spec, binary file format, stores, nearest sampling.

File layout (little-endian): magic ``WGRD``, u32 format version, u32 flags,
five f64 grid parameters (lat_min, lat_max, lon_min, lon_max, resolution),
two i64 epoch-hour stamps (init, valid), then the u block and the v block as
row-major float32 with latitude varying slowest.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .types import GeoCoord, TimeStamp, WindVector

GRID_MAGIC = b"WGRD"
GRID_FORMAT_VERSION = 1
FLAG_NO_OBSERVATION_FALLBACK = 1  # corrected field emitted without observations

_HEADER = struct.Struct("<4sII5dqq")

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    resolution: float

    def __post_init__(self) -> None:
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.lat_max <= self.lat_min or self.lon_max <= self.lon_min:
            raise ValueError("grid bounds must be increasing")
        for span in (self.lat_max - self.lat_min, self.lon_max - self.lon_min):
            steps = span / self.resolution
            if abs(steps - round(steps)) > 1e-9:
                raise ValueError(
                    f"span {span} not divisible by resolution {self.resolution}"
                )

    @property
    def n_lat(self) -> int:
        return round((self.lat_max - self.lat_min) / self.resolution) + 1

    @property
    def n_lon(self) -> int:
        return round((self.lon_max - self.lon_min) / self.resolution) + 1

    @property
    def n_nodes(self) -> int:
        return self.n_lat * self.n_lon

    def latitudes(self) -> np.ndarray:
        return self.lat_min + self.resolution * np.arange(self.n_lat)

    def longitudes(self) -> np.ndarray:
        return self.lon_min + self.resolution * np.arange(self.n_lon)

    def node_index(self, i_lat: int, i_lon: int) -> int:
        return i_lat * self.n_lon + i_lon


@dataclass
class GridField:
    spec: GridSpec
    init_time: TimeStamp
    valid_time: TimeStamp
    u: np.ndarray  # (n_nodes,) m/s
    v: np.ndarray
    flags: int = 0

    def __post_init__(self) -> None:
        if self.valid_time < self.init_time:
            raise ValueError("valid_time before init_time")
        if len(self.u) != self.spec.n_nodes or len(self.v) != self.spec.n_nodes:
            raise ValueError(
                f"node arrays ({len(self.u)}, {len(self.v)}) != spec count {self.spec.n_nodes}"
            )


def nearest_indices(
    spec: GridSpec, lats: np.ndarray, lons: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest node index per axis; exact half-cell ties round toward the
    lower index.  Coordinates must fall within a half-cell margin of the grid."""
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    half = 0.5 * spec.resolution + 1e-9
    if np.any(lats < spec.lat_min - half) or np.any(lats > spec.lat_max + half):
        raise DataError("latitude outside grid margin")
    if np.any(lons < spec.lon_min - half) or np.any(lons > spec.lon_max + half):
        raise DataError("longitude outside grid margin")
    vi = (lats - spec.lat_min) / spec.resolution
    vj = (lons - spec.lon_min) / spec.resolution
    i = np.clip(np.ceil(vi - 0.5).astype(np.int64), 0, spec.n_lat - 1)
    j = np.clip(np.ceil(vj - 0.5).astype(np.int64), 0, spec.n_lon - 1)
    return i, j


def nearest_grid_sample(field: GridField, coord: GeoCoord) -> WindVector:
    i, j = nearest_indices(
        field.spec, np.array([coord.latitude]), np.array([coord.longitude])
    )
    node = field.spec.node_index(int(i[0]), int(j[0]))
    return WindVector(float(field.u[node]), float(field.v[node]))


def sample_many(field: GridField, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Nearest-node (u, v) for many coordinates -> (n, 2) float64."""
    i, j = nearest_indices(field.spec, lats, lons)
    nodes = i * field.spec.n_lon + j
    return np.stack([field.u[nodes], field.v[nodes]], axis=1).astype(np.float64)


def write_field(field: GridField, path) -> None:
    header = _HEADER.pack(
        GRID_MAGIC,
        GRID_FORMAT_VERSION,
        field.flags,
        field.spec.lat_min,
        field.spec.lat_max,
        field.spec.lon_min,
        field.spec.lon_max,
        field.spec.resolution,
        field.init_time.epoch_hours,
        field.valid_time.epoch_hours,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(field.u, dtype="<f4").tobytes())
        fh.write(np.asarray(field.v, dtype="<f4").tobytes())


def read_field(path) -> GridField:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read field file {path}: {exc}") from exc
    if len(blob) < _HEADER.size or blob[:4] != GRID_MAGIC:
        raise DataError(f"{path}: not a gridded field file")
    (_, version, flags, lat_min, lat_max, lon_min, lon_max, res, init_eh, valid_eh) = (
        _HEADER.unpack_from(blob, 0)
    )
    if version != GRID_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported field format version {version}")
    spec = GridSpec(lat_min, lat_max, lon_min, lon_max, res)
    expected = _HEADER.size + 2 * 4 * spec.n_nodes
    if len(blob) != expected:
        raise DataError(f"{path}: size {len(blob)} != expected {expected} (truncated?)")
    body = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    u = body[: spec.n_nodes].astype(np.float64)
    v = body[spec.n_nodes :].astype(np.float64)
    return GridField(
        spec,
        TimeStamp.from_epoch_hours(init_eh),
        TimeStamp.from_epoch_hours(valid_eh),
        u,
        v,
        flags=flags,
    )


def forecast_filename(init_time: TimeStamp, forecast_hour: int, prefix: str = "gfs") -> str:
    return f"{prefix}_{init_time.to_datetime():%Y%m%d%H}_f{forecast_hour:03d}.wgrd"


def analysis_filename(valid_time: TimeStamp, prefix: str = "era5") -> str:
    return f"{prefix}_{valid_time.to_datetime():%Y%m%d%H}.wgrd"


class _FileCache:
    def __init__(self, maxsize: int = 8) -> None:
        self.maxsize = maxsize
        self._store: OrderedDict[str, GridField] = OrderedDict()

    def get(self, key: str):
        if key in self._store:
            self._store.move_to_end(key)
            return self._store[key]
        return None

    def put(self, key: str, value: GridField) -> None:
        self._store[key] = value
        self._store.move_to_end(key)
        while len(self._store) > self.maxsize:
            self._store.popitem(last=False)


class ForecastStore:
    """Directory of forecast fields, one file per (init_time, forecast_hour)."""

    def __init__(self, directory, prefix: str = "gfs", cache_size: int = 8) -> None:
        self.directory = Path(directory)
        self.prefix = prefix
        self._cache = _FileCache(cache_size)

    def path_for(self, init_time: TimeStamp, forecast_hour: int) -> Path:
        return self.directory / forecast_filename(init_time, forecast_hour, self.prefix)

    def has(self, init_time: TimeStamp, forecast_hour: int) -> bool:
        return self.path_for(init_time, forecast_hour).exists()

    def get(self, init_time: TimeStamp, forecast_hour: int) -> GridField | None:
        path = self.path_for(init_time, forecast_hour)
        key = str(path)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        if not path.exists():
            return None
        field = read_field(path)
        self._cache.put(key, field)
        return field

    def put(self, field: GridField, forecast_hour: int) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(field.init_time, forecast_hour)
        write_field(field, path)
        return path


class AnalysisStore:
    """Directory of analysis/reanalysis fields, one file per valid time."""

    def __init__(self, directory, prefix: str = "era5", cache_size: int = 8) -> None:
        self.directory = Path(directory)
        self.prefix = prefix
        self._cache = _FileCache(cache_size)

    def path_for(self, valid_time: TimeStamp) -> Path:
        return self.directory / analysis_filename(valid_time, self.prefix)

    def get(self, valid_time: TimeStamp) -> GridField | None:
        path = self.path_for(valid_time)
        key = str(path)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        if not path.exists():
            return None
        field = read_field(path)
        self._cache.put(key, field)
        return field

    def get_nearest(self, valid_time: TimeStamp, max_offset_h: int = 3):
        """Field at the nearest available time step within the window."""
        for offset in range(max_offset_h + 1):
            for sign in ((0,) if offset == 0 else (-1, 1)):
                field = self.get(valid_time.add_hours(sign * offset))
                if field is not None:
                    return field
        return None

    def put(self, field: GridField) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(field.valid_time)
        write_field(field, path)
        return path


def haversine_km(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Great-circle distance in km; accepts scalars or broadcastable arrays."""
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dp = p2 - p1
    dl = np.deg2rad(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    a = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def arc_degrees(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Great-circle separation expressed in degrees of arc."""
    km = haversine_km(lat1, lon1, lat2, lon2)
    return np.rad2deg(km / EARTH_RADIUS_KM)
