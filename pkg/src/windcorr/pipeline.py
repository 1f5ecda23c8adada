"""Observation ingest, forecast-cycle colocation, sample building, splits.

The observation table is delimited text with a fixed header; times are
rounded to the hour on ingest (minute >= 30 rounds up).  Matchups pair every
observation with the forecast value chosen by the cycle-selection rule for
each lead and with the nearest reanalysis value, and are persisted one
columnar text file per month.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from .encodings import encode_time
from .errors import DataError
from .grids import AnalysisStore, ForecastStore, haversine_km, sample_many
from .model import ObservationToken, Sample, TargetToken
from .types import (
    GeoCoord,
    PlatformType,
    TimeStamp,
    WindVector,
    round_datetime_to_hour,
)

logger = logging.getLogger(__name__)

OBS_COLUMNS = ["platform_id", "platform_type", "iso_utc_time", "lat", "lon", "u", "v", "qc_flag"]

CYCLE_HOURS = 6  # forecast cycles at 00/06/12/18 UTC
MAX_LEAD = 48


@dataclass(frozen=True)
class ObservationRecord:
    platform_id: str
    platform_type: PlatformType
    time: TimeStamp
    coord: GeoCoord
    wind: WindVector


@dataclass
class MatchupRecord:
    """One observation with its per-lead forecast values and reanalysis value.

    ``nwp_u``/``nwp_v`` are indexed by lead 0..48; lead 0 is the same-cycle
    value at the observation's own hour, used for observation-side pairing.
    Missing leads are flagged, never interpolated.
    """

    observation: ObservationRecord
    nwp_u: np.ndarray  # (49,)
    nwp_v: np.ndarray
    nwp_missing: np.ndarray  # (49,) bool
    reanalysis: WindVector | None


def _parse_iso_hour(value: str, line_no: int) -> TimeStamp:
    text = value.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise DataError(f"line {line_no}: bad timestamp {value!r}: {exc}") from exc
    return TimeStamp.from_datetime(round_datetime_to_hour(dt))


def parse_observations(path, domain=None, counters: dict | None = None) -> list[ObservationRecord]:
    """Parse the observation table; validates, rounds, dedupes, and sorts.

    domain: optional (lat_min, lat_max, lon_min, lon_max) box; rows outside
    it are dropped and counted.  Rows whose qc_flag is nonzero are rejected.
    Duplicate (platform_id, hour) keeps the last row in file order.
    """
    counters = counters if counters is not None else {}
    counters.setdefault("out_of_domain", 0)
    counters.setdefault("qc_rejected", 0)
    counters.setdefault("duplicates", 0)

    by_key: dict[tuple[str, int], ObservationRecord] = {}
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read observation table {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header row") from None
        if [h.strip() for h in header] != OBS_COLUMNS:
            raise DataError(
                f"{path}: header {header} != expected columns {OBS_COLUMNS}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(OBS_COLUMNS):
                raise DataError(
                    f"line {line_no}: {len(row)} fields, expected {len(OBS_COLUMNS)}"
                )
            pid, ptype_s, iso, lat_s, lon_s, u_s, v_s, qc_s = [f.strip() for f in row]
            try:
                ptype = PlatformType.from_string(ptype_s)
            except ValueError as exc:
                raise DataError(f"line {line_no}: {exc}") from exc
            ts = _parse_iso_hour(iso, line_no)
            try:
                coord = GeoCoord(float(lat_s), float(lon_s))
                wind = WindVector(float(u_s), float(v_s))
                qc = int(qc_s)
            except ValueError as exc:
                raise DataError(f"line {line_no}: {exc}") from exc
            if qc != 0:
                counters["qc_rejected"] += 1
                continue
            if domain is not None:
                lat_min, lat_max, lon_min, lon_max = domain
                if not (lat_min <= coord.latitude <= lat_max and lon_min <= coord.longitude <= lon_max):
                    counters["out_of_domain"] += 1
                    continue
            key = (pid, ts.epoch_hours)
            if key in by_key:
                counters["duplicates"] += 1
            by_key[key] = ObservationRecord(pid, ptype, ts, coord, wind)

    if counters["out_of_domain"]:
        logger.warning("%s: dropped %d out-of-domain rows", path, counters["out_of_domain"])
    if counters["qc_rejected"]:
        logger.warning("%s: rejected %d rows by qc flag", path, counters["qc_rejected"])
    records = sorted(by_key.values(), key=lambda r: (r.time, r.platform_id))
    return records


def write_observations(records: list[ObservationRecord], path) -> None:
    """Write records in the observation-table format (inverse of parsing)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBS_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.platform_id,
                    r.platform_type.value,
                    r.time.isoformat(),
                    repr(r.coord.latitude),
                    repr(r.coord.longitude),
                    repr(r.wind.u),
                    repr(r.wind.v),
                    0,
                ]
            )


def gfs_cycle_select(target_time: TimeStamp, lead_hours: int) -> tuple[TimeStamp, int]:
    """Cycle init time and forecast hour serving ``target_time`` at this lead.

    The forecast must already exist when the correction is issued, so the
    cycle is the latest one at or before issue time = target - lead; the
    forecast hour is then lead plus the issue time's offset within the cycle.
    """
    if not 0 <= lead_hours <= MAX_LEAD:
        raise ValueError(f"lead_hours {lead_hours} out of [0, {MAX_LEAD}]")
    issue_eh = target_time.epoch_hours - lead_hours
    init_eh = (issue_eh // CYCLE_HOURS) * CYCLE_HOURS
    forecast_hour = target_time.epoch_hours - init_eh
    return TimeStamp.from_epoch_hours(init_eh), forecast_hour


def build_matchups(
    records: list[ObservationRecord],
    gfs_store: ForecastStore,
    era5_store: AnalysisStore,
) -> list[MatchupRecord]:
    """Colocate every record with forecasts for leads 0..48 and reanalysis.

    Field files are loaded once per (init, forecast hour) group; a missing
    file flags the affected leads only.
    """
    n = len(records)
    lats = np.array([r.coord.latitude for r in records])
    lons = np.array([r.coord.longitude for r in records])
    times_eh = np.array([r.time.epoch_hours for r in records], dtype=np.int64)
    nwp_u = np.full((n, MAX_LEAD + 1), np.nan)
    nwp_v = np.full((n, MAX_LEAD + 1), np.nan)
    missing = np.ones((n, MAX_LEAD + 1), dtype=bool)

    # Vectorized equivalent of gfs_cycle_select over every (record, lead).
    leads = np.arange(MAX_LEAD + 1, dtype=np.int64)
    issue_eh = times_eh[:, None] - leads[None, :]
    init_eh = (issue_eh // CYCLE_HOURS) * CYCLE_HOURS
    fh = times_eh[:, None] - init_eh
    rec_idx = np.broadcast_to(np.arange(n)[:, None], init_eh.shape).ravel()
    lead_idx = np.broadcast_to(leads[None, :], init_eh.shape).ravel()
    keys = np.stack([init_eh.ravel(), fh.ravel()], axis=1)
    order = np.lexsort((keys[:, 1], keys[:, 0]))
    keys, rec_idx, lead_idx = keys[order], rec_idx[order], lead_idx[order]
    boundaries = np.nonzero(np.any(np.diff(keys, axis=0) != 0, axis=1))[0] + 1
    starts = np.concatenate([[0], boundaries, [len(keys)]])

    for s, e in zip(starts[:-1], starts[1:]):
        init_h, fhour = int(keys[s, 0]), int(keys[s, 1])
        field = gfs_store.get(TimeStamp.from_epoch_hours(init_h), fhour)
        if field is None:
            continue
        idxs = rec_idx[s:e]
        values = sample_many(field, lats[idxs], lons[idxs])
        nwp_u[idxs, lead_idx[s:e]] = values[:, 0]
        nwp_v[idxs, lead_idx[s:e]] = values[:, 1]
        missing[idxs, lead_idx[s:e]] = False

    matchups = []
    era_groups: dict[int, list[int]] = {}
    for idx, rec in enumerate(records):
        era_groups.setdefault(rec.time.epoch_hours, []).append(idx)
    reanalysis: list[WindVector | None] = [None] * n
    for eh, idxs in sorted(era_groups.items()):
        field_ = era5_store.get_nearest(TimeStamp.from_epoch_hours(eh))
        if field_ is None:
            continue
        arr = np.array(idxs)
        values = sample_many(field_, lats[arr], lons[arr])
        for idx, (u, v) in zip(idxs, values):
            reanalysis[idx] = WindVector(float(u), float(v))

    for idx, rec in enumerate(records):
        matchups.append(
            MatchupRecord(rec, nwp_u[idx], nwp_v[idx], missing[idx], reanalysis[idx])
        )
    return matchups


def _month_key(ts: TimeStamp) -> str:
    return f"{ts.to_datetime():%Y%m}"


def matchup_columns() -> list[str]:
    cols = OBS_COLUMNS[:7] + ["era5_u", "era5_v"]
    for lead in range(MAX_LEAD + 1):
        cols += [f"u_l{lead:02d}", f"v_l{lead:02d}", f"miss_l{lead:02d}"]
    return cols


def write_matchups(matchups: list[MatchupRecord], directory) -> list[Path]:
    """Persist matchups as one columnar text file per month (append-only store;
    regenerating identical inputs rewrites identical bytes)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    by_month: dict[str, list[MatchupRecord]] = {}
    for m in matchups:
        by_month.setdefault(_month_key(m.observation.time), []).append(m)

    header = ",".join(matchup_columns())
    written = []
    for month, rows in sorted(by_month.items()):
        rows.sort(key=lambda m: (m.observation.time, m.observation.platform_id))
        path = directory / f"matchups_{month}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(header + "\n")
            for m in rows:
                r = m.observation
                parts = [
                    r.platform_id,
                    r.platform_type.value,
                    r.time.isoformat(),
                    repr(r.coord.latitude),
                    repr(r.coord.longitude),
                    repr(r.wind.u),
                    repr(r.wind.v),
                    repr(m.reanalysis.u) if m.reanalysis else "nan",
                    repr(m.reanalysis.v) if m.reanalysis else "nan",
                ]
                for lead in range(MAX_LEAD + 1):
                    if m.nwp_missing[lead]:
                        parts += ["nan", "nan", "1"]
                    else:
                        parts += [repr(float(m.nwp_u[lead])), repr(float(m.nwp_v[lead])), "0"]
                fh.write(",".join(parts) + "\n")
        written.append(path)
    return written


def read_matchups(directory) -> list[MatchupRecord]:
    directory = Path(directory)
    paths = sorted(directory.glob("matchups_*.csv"))
    if not paths:
        raise DataError(f"no matchup files under {directory}")
    expected = matchup_columns()
    matchups = []
    for path in paths:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != expected:
                raise DataError(f"{path}: unexpected matchup schema")
            for line_no, row in enumerate(reader, start=2):
                if len(row) != len(expected):
                    raise DataError(f"{path} line {line_no}: wrong field count")
                rec = ObservationRecord(
                    row[0],
                    PlatformType.from_string(row[1]),
                    _parse_iso_hour(row[2], line_no),
                    GeoCoord(float(row[3]), float(row[4])),
                    WindVector(float(row[5]), float(row[6])),
                )
                eu, ev = float(row[7]), float(row[8])
                rean = None if (np.isnan(eu) or np.isnan(ev)) else WindVector(eu, ev)
                nwp_u = np.full(MAX_LEAD + 1, np.nan)
                nwp_v = np.full(MAX_LEAD + 1, np.nan)
                miss = np.ones(MAX_LEAD + 1, dtype=bool)
                base = 9
                for lead in range(MAX_LEAD + 1):
                    if row[base + 3 * lead + 2] == "0":
                        nwp_u[lead] = float(row[base + 3 * lead])
                        nwp_v[lead] = float(row[base + 3 * lead + 1])
                        miss[lead] = False
                matchups.append(MatchupRecord(rec, nwp_u, nwp_v, miss, rean))
    matchups.sort(key=lambda m: (m.observation.time, m.observation.platform_id))
    return matchups


@dataclass
class SampleBuildStats:
    skipped_no_targets: int = 0
    skipped_no_observations: int = 0
    dropped_obs_tokens: int = 0


def build_samples(
    matchups: list[MatchupRecord],
    lead_set: tuple[int, ...],
    history_hours: int = 1,
    stats: SampleBuildStats | None = None,
) -> list[Sample]:
    """One sample per (issue time, lead) with at least one observation token.

    Observation tokens collect every observation in (t0 - history, t0], each
    paired with the forecast from the *same cycle that serves the target*
    (forecast hour = observation time - cycle init).  Target tokens are the
    observations at t0 + lead with the forecast selected by the cycle rule;
    their observed wind is the training truth.
    """
    stats = stats if stats is not None else SampleBuildStats()
    for lead in lead_set:
        if not 1 <= lead <= MAX_LEAD:
            raise ValueError(f"lead {lead} out of [1, {MAX_LEAD}]")
    by_time: dict[int, list[MatchupRecord]] = {}
    for m in matchups:
        by_time.setdefault(m.observation.time.epoch_hours, []).append(m)

    samples = []
    for t0_eh in sorted(by_time):
        issue = TimeStamp.from_epoch_hours(t0_eh)
        init_eh = (t0_eh // CYCLE_HOURS) * CYCLE_HOURS
        tf_cache: dict[int, np.ndarray] = {}

        def time_features(eh: int) -> np.ndarray:
            if eh not in tf_cache:
                tf_cache[eh] = encode_time(TimeStamp.from_epoch_hours(eh))
            return tf_cache[eh]

        obs_tokens = []
        for tb_eh in range(t0_eh - history_hours + 1, t0_eh + 1):
            for m in by_time.get(tb_eh, []):
                fh_obs = tb_eh - init_eh
                if fh_obs < 0 or fh_obs > MAX_LEAD or m.nwp_missing[fh_obs]:
                    stats.dropped_obs_tokens += 1
                    continue
                r = m.observation
                obs_tokens.append(
                    ObservationToken(
                        obs_wind=r.wind,
                        nwp_wind_at_obs=WindVector(
                            float(m.nwp_u[fh_obs]), float(m.nwp_v[fh_obs])
                        ),
                        time_features=time_features(tb_eh),
                        coord=r.coord,
                        valid=True,
                        time=r.time,
                        platform_id=r.platform_id,
                        platform_type=r.platform_type,
                    )
                )
        if not obs_tokens:
            stats.skipped_no_observations += 1
            continue

        for lead in lead_set:
            target_eh = t0_eh + lead
            target_tokens = []
            truths = []
            for m in by_time.get(target_eh, []):
                if m.nwp_missing[lead]:
                    continue
                r = m.observation
                target_tokens.append(
                    TargetToken(
                        nwp_wind_at_target=WindVector(
                            float(m.nwp_u[lead]), float(m.nwp_v[lead])
                        ),
                        lead_hours=lead,
                        time_features=time_features(target_eh),
                        coord=r.coord,
                        valid=True,
                        platform_id=r.platform_id,
                        platform_type=r.platform_type,
                    )
                )
                truths.append(r.wind)
            if not target_tokens:
                stats.skipped_no_targets += 1
                continue
            samples.append(Sample(issue, list(obs_tokens), target_tokens, truths))
    return samples


@dataclass
class SplitResult:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    val_boundary: TimeStamp | None = None
    test_boundary: TimeStamp | None = None
    spill_flagged: int = 0


def temporal_split(samples: list[Sample]) -> SplitResult:
    """Chronological 80/10/10 split on issue times.

    Boundaries sit at the 80th and 90th percentile of distinct issue times;
    a sample always belongs to the split of its issue time, and samples whose
    target time spills past the next boundary are counted as flagged.
    """
    if not samples:
        raise DataError("cannot split an empty sample list")
    times = sorted({s.issue_time.epoch_hours for s in samples})
    if len(times) < 10:
        raise DataError(f"need >= 10 distinct issue times to split, got {len(times)}")
    t80 = times[int(0.8 * len(times))]
    t90 = times[int(0.9 * len(times))]

    result = SplitResult(
        [], [], [],
        val_boundary=TimeStamp.from_epoch_hours(t80),
        test_boundary=TimeStamp.from_epoch_hours(t90),
    )
    for s in sorted(samples, key=lambda s: s.issue_time.epoch_hours):
        eh = s.issue_time.epoch_hours
        max_target = max(
            (eh + t.lead_hours for t in s.target_tokens), default=eh
        )
        if eh < t80:
            result.train.append(s)
            if max_target >= t80:
                result.spill_flagged += 1
        elif eh < t90:
            result.val.append(s)
            if max_target >= t90:
                result.spill_flagged += 1
        else:
            result.test.append(s)
    return result


@dataclass
class CorrelationTable:
    distance_thresholds_km: tuple[float, ...]
    time_windows_h: tuple[int, ...]
    pearson_r: np.ndarray  # (n_dist, n_window); NaN where the bucket is empty
    n_pairs: np.ndarray  # (n_dist, n_window) int


def correlation_analysis(
    records: list[ObservationRecord],
    distance_thresholds_km: tuple[float, ...],
    time_windows_h: tuple[int, ...],
    min_separation_h: int = 1,
) -> CorrelationTable:
    """Pearson correlation between target winds and past observations.

    For each bucket (distance <= D, separation in [min_separation, T]) every
    qualifying (past, target) record pair contributes its u components and
    its v components as two correlation points.
    """
    n = len(records)
    times = np.array([r.time.epoch_hours for r in records], dtype=np.int64)
    lats = np.array([r.coord.latitude for r in records])
    lons = np.array([r.coord.longitude for r in records])
    us = np.array([r.wind.u for r in records])
    vs = np.array([r.wind.v for r in records])

    pairs_past = []
    pairs_tgt = []
    pairs_dt = []
    pairs_dist = []
    max_window = max(time_windows_h)
    for i in range(n):  # i is the target record
        dt = times[i] - times
        eligible = (dt >= min_separation_h) & (dt <= max_window)
        if not np.any(eligible):
            continue
        idx = np.nonzero(eligible)[0]
        dist = haversine_km(lats[idx], lons[idx], lats[i], lons[i])
        pairs_past.append(idx)
        pairs_tgt.append(np.full(len(idx), i))
        pairs_dt.append(dt[idx])
        pairs_dist.append(dist)

    shape = (len(distance_thresholds_km), len(time_windows_h))
    r_table = np.full(shape, np.nan)
    n_table = np.zeros(shape, dtype=np.int64)
    if not pairs_past:
        return CorrelationTable(
            tuple(distance_thresholds_km), tuple(time_windows_h), r_table, n_table
        )
    past = np.concatenate(pairs_past)
    tgt = np.concatenate(pairs_tgt)
    dts = np.concatenate(pairs_dt)
    dists = np.concatenate(pairs_dist)

    for di, dmax in enumerate(distance_thresholds_km):
        for ti, tmax in enumerate(time_windows_h):
            sel = (dists <= dmax) & (dts <= tmax)
            if sel.sum() < 2:
                continue
            x = np.concatenate([us[past[sel]], vs[past[sel]]])
            y = np.concatenate([us[tgt[sel]], vs[tgt[sel]]])
            sx, sy = x.std(), y.std()
            if sx == 0.0 or sy == 0.0:
                continue
            r_table[di, ti] = float(
                ((x - x.mean()) * (y - y.mean())).mean() / (sx * sy)
            )
            n_table[di, ti] = int(sel.sum())
    return CorrelationTable(
        tuple(distance_thresholds_km), tuple(time_windows_h), r_table, n_table
    )
