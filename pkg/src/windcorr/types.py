"""Shared scalar domain types: instants, coordinates, wind vectors, platforms."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)

MAX_WIND_SPEED = 150.0  # m/s, sanity bound on any single component / magnitude


def is_leap_year(year: int) -> bool:
    return year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)


@dataclass(frozen=True, order=True)
class TimeStamp:
    """A UTC instant rounded to the hour.

    Field order (year, day_of_year, hour_of_day) makes the dataclass
    ordering chronological.
    """

    year: int
    day_of_year: int
    hour_of_day: int

    def __post_init__(self) -> None:
        max_doy = 366 if is_leap_year(self.year) else 365
        if not 1 <= self.day_of_year <= max_doy:
            raise ValueError(
                f"day_of_year {self.day_of_year} out of [1, {max_doy}] for year {self.year}"
            )
        if not 0 <= self.hour_of_day <= 23:
            raise ValueError(f"hour_of_day {self.hour_of_day} out of [0, 23]")

    @classmethod
    def from_datetime(cls, dt: datetime) -> "TimeStamp":
        """Build from an on-the-hour UTC datetime (no rounding here)."""
        if dt.tzinfo is not None:
            dt = dt.astimezone(timezone.utc)
        if dt.minute or dt.second or dt.microsecond:
            raise ValueError(f"datetime {dt.isoformat()} is not on the hour")
        return cls(dt.year, dt.timetuple().tm_yday, dt.hour)

    def to_datetime(self) -> datetime:
        return datetime(self.year, 1, 1, self.hour_of_day, tzinfo=timezone.utc) + timedelta(
            days=self.day_of_year - 1
        )

    @property
    def epoch_hours(self) -> int:
        """Whole hours since 1970-01-01T00Z (negative before the epoch)."""
        return round((self.to_datetime() - _EPOCH).total_seconds() / 3600.0)

    @classmethod
    def from_epoch_hours(cls, hours: int) -> "TimeStamp":
        return cls.from_datetime(_EPOCH + timedelta(hours=int(hours)))

    def add_hours(self, hours: int) -> "TimeStamp":
        return TimeStamp.from_epoch_hours(self.epoch_hours + hours)

    def isoformat(self) -> str:
        return self.to_datetime().strftime("%Y-%m-%dT%H:00:00Z")


def round_datetime_to_hour(dt: datetime) -> datetime:
    """Round to the nearest hour; minute >= 30 rounds up."""
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc)
    else:
        dt = dt.replace(tzinfo=timezone.utc)
    base = dt.replace(minute=0, second=0, microsecond=0)
    if dt.minute >= 30:
        base += timedelta(hours=1)
    return base


def normalize_longitude(lon: float) -> float:
    """Map any finite longitude into [-180, 180)."""
    out = math.fmod(lon + 180.0, 360.0)
    if out < 0.0:
        out += 360.0
    return out - 180.0


@dataclass(frozen=True)
class GeoCoord:
    """Geographic coordinate in degrees; longitude stored in [-180, 180)."""

    latitude: float
    longitude: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.latitude) or not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude {self.latitude} out of [-90, 90]")
        if not math.isfinite(self.longitude):
            raise ValueError(f"longitude {self.longitude} is not finite")
        object.__setattr__(self, "longitude", normalize_longitude(self.longitude))


@dataclass(frozen=True)
class WindVector:
    """Horizontal 10-m wind; u eastward, v northward, in m/s."""

    u: float
    v: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError(f"non-finite wind components ({self.u}, {self.v})")
        if self.speed >= MAX_WIND_SPEED:
            raise ValueError(f"wind magnitude {self.speed:.1f} m/s exceeds sanity bound")

    @property
    def speed(self) -> float:
        return math.hypot(self.u, self.v)


class PlatformType(enum.Enum):
    SHIP = "ship"
    DRIFTING_BUOY = "drifting_buoy"
    MOORED_BUOY = "moored_buoy"
    CMAN_STATION = "cman_station"
    COASTAL_STATION = "coastal_station"
    TIDE_GAUGE = "tide_gauge"
    FIXED_PLATFORM = "fixed_platform"

    @classmethod
    def from_string(cls, value: str) -> "PlatformType":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown platform type {value!r}") from None
