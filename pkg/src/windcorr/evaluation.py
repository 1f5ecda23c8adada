"""Metric tables, platform stratification, spatial error maps, density analysis.

Tables use component-pooled RMSE; maps and stratification use mean absolute
wind-speed error (the magnitude of the predicted minus the observed speed),
with the vector-magnitude error available as an option.  Aggregations keep
per-cell sums so partial results merge exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .model import Sample, WindCorrector
from .training import rmse

PAPER_LEADS = (1, 2, 4, 8, 12, 18, 24, 36, 48)


def improvement(nwp_rmse: float, model_rmse: float) -> float:
    """Relative error reduction vs the forecast baseline, in percent."""
    if nwp_rmse <= 0:
        raise ValueError(f"baseline RMSE must be positive, got {nwp_rmse}")
    return (nwp_rmse - model_rmse) / nwp_rmse * 100.0


@dataclass
class EvalRecords:
    """Per-target evaluation rows as parallel arrays."""

    lead: np.ndarray  # (n,) int
    platform: np.ndarray  # (n,) str
    lat: np.ndarray
    lon: np.ndarray
    pred: np.ndarray  # (n, 2)
    nwp: np.ndarray  # (n, 2)
    era5: np.ndarray  # (n, 2), NaN when unavailable
    truth: np.ndarray  # (n, 2)

    def __len__(self) -> int:
        return len(self.lead)

    def subset(self, mask: np.ndarray) -> "EvalRecords":
        return EvalRecords(
            self.lead[mask], self.platform[mask], self.lat[mask], self.lon[mask],
            self.pred[mask], self.nwp[mask], self.era5[mask], self.truth[mask],
        )

    @staticmethod
    def concatenate(parts: list["EvalRecords"]) -> "EvalRecords":
        return EvalRecords(
            *(np.concatenate([getattr(p, name) for p in parts])
              for name in ("lead", "platform", "lat", "lon", "pred", "nwp", "era5", "truth"))
        )


def collect_eval_records(
    model: WindCorrector,
    samples: list[Sample],
    era5_lookup: dict[tuple[str, int], tuple[float, float]] | None = None,
) -> tuple[EvalRecords, int]:
    """Run the model over samples and gather per-target rows.

    Samples without observations fall back to the raw forecast; the number of
    fallbacks is returned alongside the records.
    """
    rows = {k: [] for k in ("lead", "platform", "lat", "lon")}
    pred_rows, nwp_rows, era_rows, truth_rows = [], [], [], []
    fallbacks = 0
    for sample in samples:
        if sample.target_truth is None:
            raise DataError("evaluation samples need target truth")
        preds, fell_back = model.predict_with_fallback(sample)
        fallbacks += int(fell_back)
        k = 0
        for i, tok in enumerate(sample.target_tokens):
            if not tok.valid:
                continue
            pred = preds[k]
            k += 1
            rows["lead"].append(tok.lead_hours)
            rows["platform"].append(
                tok.platform_type.value if tok.platform_type else "unknown"
            )
            rows["lat"].append(tok.coord.latitude)
            rows["lon"].append(tok.coord.longitude)
            pred_rows.append((pred.u, pred.v))
            nwp_rows.append((tok.nwp_wind_at_target.u, tok.nwp_wind_at_target.v))
            truth = sample.target_truth[i]
            truth_rows.append((truth.u, truth.v))
            era = (math.nan, math.nan)
            if era5_lookup is not None:
                target_eh = sample.issue_time.epoch_hours + tok.lead_hours
                era = era5_lookup.get((tok.platform_id, target_eh), era)
            era_rows.append(era)
    records = EvalRecords(
        lead=np.array(rows["lead"], dtype=np.int64),
        platform=np.array(rows["platform"], dtype=object),
        lat=np.array(rows["lat"], dtype=np.float64),
        lon=np.array(rows["lon"], dtype=np.float64),
        pred=np.array(pred_rows, dtype=np.float64).reshape(-1, 2),
        nwp=np.array(nwp_rows, dtype=np.float64).reshape(-1, 2),
        era5=np.array(era_rows, dtype=np.float64).reshape(-1, 2),
        truth=np.array(truth_rows, dtype=np.float64).reshape(-1, 2),
    )
    return records, fallbacks


@dataclass
class MetricRow:
    lead: int
    model_rmse: float
    nwp_rmse: float
    era5_rmse: float  # NaN when reanalysis is unavailable
    improvement_pct: float
    n_targets: int


@dataclass
class MetricTable:
    rows: list[MetricRow] = field(default_factory=list)
    absent_leads: list[int] = field(default_factory=list)

    def by_lead(self) -> dict[int, MetricRow]:
        return {r.lead: r for r in self.rows}

    def to_csv(self) -> str:
        lines = ["lead_h,model_rmse,nwp_rmse,era5_rmse,improvement_pct,n_targets"]
        for r in self.rows:
            lines.append(
                f"{r.lead},{r.model_rmse!r},{r.nwp_rmse!r},{r.era5_rmse!r},"
                f"{r.improvement_pct!r},{r.n_targets}"
            )
        return "\n".join(lines) + "\n"


def rmse_by_lead(records: EvalRecords, leads: tuple[int, ...] = PAPER_LEADS) -> MetricTable:
    """Component-pooled RMSE per lead for the model, the forecast baseline,
    and the reanalysis benchmark, plus the improvement column."""
    table = MetricTable()
    for lead in leads:
        mask = records.lead == lead
        n = int(mask.sum())
        if n == 0:
            table.absent_leads.append(lead)
            continue
        model_rmse = rmse(records.pred[mask], records.truth[mask])
        nwp_rmse = rmse(records.nwp[mask], records.truth[mask])
        era = records.era5[mask]
        has_era = np.isfinite(era).all(axis=1)
        era_rmse = (
            rmse(era[has_era], records.truth[mask][has_era]) if has_era.any() else math.nan
        )
        table.rows.append(
            MetricRow(
                lead=lead,
                model_rmse=model_rmse,
                nwp_rmse=nwp_rmse,
                era5_rmse=era_rmse,
                improvement_pct=improvement(nwp_rmse, model_rmse),
                n_targets=n,
            )
        )
    return table


def _speed_error(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.abs(
        np.linalg.norm(pred, axis=-1) - np.linalg.norm(truth, axis=-1)
    )


def _vector_error(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.linalg.norm(pred - truth, axis=-1)


def _error(pred, truth, metric: str) -> np.ndarray:
    if metric == "speed":
        return _speed_error(pred, truth)
    if metric == "vector":
        return _vector_error(pred, truth)
    raise ValueError(f"unknown error metric {metric!r}")


def stratify_by_platform(
    records: EvalRecords, metric: str = "speed"
) -> dict[tuple[str, int], tuple[float, int]]:
    """Mean (model error - baseline error) per (platform type, lead).

    Negative values mean the model beats the baseline; platform types absent
    from the records are simply absent from the result.
    """
    model_err = _error(records.pred, records.truth, metric)
    nwp_err = _error(records.nwp, records.truth, metric)
    diff = model_err - nwp_err
    out: dict[tuple[str, int], tuple[float, int]] = {}
    for ptype in sorted(set(records.platform.tolist())):
        p_mask = records.platform == ptype
        for lead in sorted(set(records.lead[p_mask].tolist())):
            mask = p_mask & (records.lead == lead)
            out[(str(ptype), int(lead))] = (float(diff[mask].mean()), int(mask.sum()))
    return out


@dataclass
class SpatialErrorGrid:
    """Per-cell error sums on a regular lat/lon cell grid.

    Cell assignment is lower-edge inclusive, upper-edge exclusive, with the
    final row/column including the top edge.  Sums (not means) are stored so
    two disjoint aggregations merge exactly.
    """

    lat_min: float
    lon_min: float
    cell_deg: float
    n_lat: int
    n_lon: int
    model_sum: np.ndarray = None
    nwp_sum: np.ndarray = None
    count: np.ndarray = None
    obs_count: np.ndarray = None
    out_of_domain: int = 0

    def __post_init__(self) -> None:
        shape = (self.n_lat, self.n_lon)
        if self.model_sum is None:
            self.model_sum = np.zeros(shape)
            self.nwp_sum = np.zeros(shape)
            self.count = np.zeros(shape, dtype=np.int64)
            self.obs_count = np.zeros(shape, dtype=np.int64)

    def cell_indices(self, lats: np.ndarray, lons: np.ndarray):
        i = np.floor((np.asarray(lats) - self.lat_min) / self.cell_deg).astype(np.int64)
        j = np.floor((np.asarray(lons) - self.lon_min) / self.cell_deg).astype(np.int64)
        top_lat = np.isclose(lats, self.lat_min + self.n_lat * self.cell_deg)
        top_lon = np.isclose(lons, self.lon_min + self.n_lon * self.cell_deg)
        i = np.where(top_lat, self.n_lat - 1, i)
        j = np.where(top_lon, self.n_lon - 1, j)
        inside = (i >= 0) & (i < self.n_lat) & (j >= 0) & (j < self.n_lon)
        return i, j, inside

    def model_mae(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.count > 0, self.model_sum / self.count, np.nan)

    def nwp_mae(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.count > 0, self.nwp_sum / self.count, np.nan)

    def difference(self) -> np.ndarray:
        """Per-cell model MAE minus baseline MAE (negative = model better)."""
        return self.model_mae() - self.nwp_mae()

    def obs_fraction(self) -> np.ndarray:
        total = self.obs_count.sum()
        if total == 0:
            return np.full(self.obs_count.shape, np.nan)
        return self.obs_count / float(total)

    def merge(self, other: "SpatialErrorGrid") -> "SpatialErrorGrid":
        for name in ("lat_min", "lon_min", "cell_deg", "n_lat", "n_lon"):
            if getattr(self, name) != getattr(other, name):
                raise ValueError("cannot merge grids with different layouts")
        return SpatialErrorGrid(
            self.lat_min, self.lon_min, self.cell_deg, self.n_lat, self.n_lon,
            model_sum=self.model_sum + other.model_sum,
            nwp_sum=self.nwp_sum + other.nwp_sum,
            count=self.count + other.count,
            obs_count=self.obs_count + other.obs_count,
            out_of_domain=self.out_of_domain + other.out_of_domain,
        )


def spatial_error_map(
    records: EvalRecords,
    domain: tuple[float, float, float, float],
    cell_deg: float = 1.0,
    metric: str = "speed",
    obs_lats: np.ndarray | None = None,
    obs_lons: np.ndarray | None = None,
) -> SpatialErrorGrid:
    """Aggregate per-cell mean absolute error for the model and the baseline.

    Out-of-domain points are counted and excluded.  Observation coordinates,
    when given, fill the per-cell observation-count layer used by the
    density analysis.
    """
    lat_min, lat_max, lon_min, lon_max = domain
    n_lat = max(1, math.ceil((lat_max - lat_min) / cell_deg - 1e-9))
    n_lon = max(1, math.ceil((lon_max - lon_min) / cell_deg - 1e-9))
    grid = SpatialErrorGrid(lat_min, lon_min, cell_deg, n_lat, n_lon)

    model_err = _error(records.pred, records.truth, metric)
    nwp_err = _error(records.nwp, records.truth, metric)
    i, j, inside = grid.cell_indices(records.lat, records.lon)
    grid.out_of_domain = int((~inside).sum())
    np.add.at(grid.model_sum, (i[inside], j[inside]), model_err[inside])
    np.add.at(grid.nwp_sum, (i[inside], j[inside]), nwp_err[inside])
    np.add.at(grid.count, (i[inside], j[inside]), 1)
    if obs_lats is not None and obs_lons is not None:
        oi, oj, o_in = grid.cell_indices(np.asarray(obs_lats), np.asarray(obs_lons))
        np.add.at(grid.obs_count, (oi[o_in], oj[o_in]), 1)
    return grid


@dataclass
class DensityTrend:
    slope: float
    intercept: float
    n_cells: int


def density_vs_improvement(
    grid: SpatialErrorGrid,
) -> tuple[np.ndarray, DensityTrend | None]:
    """Scatter of (observation fraction, error reduction) per populated cell,
    plus an ordinary-least-squares trend line.

    Error reduction is model MAE minus baseline MAE, so negative values mean
    the model improves on the baseline; with enough observation-dense cells
    the slope is expected to be negative.
    """
    frac = grid.obs_fraction()
    diff = grid.difference()
    mask = (grid.count > 0) & np.isfinite(frac) & np.isfinite(diff)
    rows = np.stack([frac[mask], diff[mask]], axis=1)
    if rows.shape[0] < 2:
        return rows, None
    x, y = rows[:, 0], rows[:, 1]
    x_mean, y_mean = x.mean(), y.mean()
    denom = ((x - x_mean) ** 2).sum()
    if denom == 0.0:
        return rows, None
    slope = float(((x - x_mean) * (y - y_mean)).sum() / denom)
    intercept = float(y_mean - slope * x_mean)
    return rows, DensityTrend(slope, intercept, rows.shape[0])
