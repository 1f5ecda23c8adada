"""Point and grid inference against field stores.

One encoder pass per issue time; targets are decoded in fixed-size chunks
whose boundaries cannot change the result because target tokens never attend
to each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encodings import encode_time, harmonic_basis_matrix
from .errors import DataError
from .grids import (
    FLAG_NO_OBSERVATION_FALLBACK,
    ForecastStore,
    GridField,
    GridSpec,
    sample_many,
)
from .model import (
    OBS_FEATURES,
    TGT_FEATURES,
    Batch,
    ObservationToken,
    Sample,
    WindCorrector,
    collate,
    featurize_sample,
)
from .pipeline import CYCLE_HOURS, MAX_LEAD, ObservationRecord
from .types import TimeStamp, WindVector


@dataclass
class InferenceContext:
    """Observation set of one issue time, encoded once and reused."""

    issue_time: TimeStamp
    init_time: TimeStamp
    obs_tokens: list[ObservationToken]
    encoded: torch.Tensor | None  # (1, No, H); None when no usable observations
    obs_mask: torch.Tensor | None
    skipped_obs: int = 0


def gather_observation_tokens(
    records: list[ObservationRecord],
    gfs_store: ForecastStore,
    issue_time: TimeStamp,
    history_hours: int = 1,
) -> tuple[list[ObservationToken], int]:
    """Pair recent observations with the same-cycle forecast at their hour.

    Observations whose pairing field is unavailable (including a negative
    forecast hour under a history window) are skipped and counted.
    """
    t0 = issue_time.epoch_hours
    init_eh = (t0 // CYCLE_HOURS) * CYCLE_HOURS
    tokens: list[ObservationToken] = []
    skipped = 0
    recent = [r for r in records if t0 - history_hours < r.time.epoch_hours <= t0]
    by_hour: dict[int, list[ObservationRecord]] = {}
    for r in recent:
        by_hour.setdefault(r.time.epoch_hours, []).append(r)
    for tb_eh in sorted(by_hour):
        fh_obs = tb_eh - init_eh
        field = (
            gfs_store.get(TimeStamp.from_epoch_hours(init_eh), fh_obs)
            if 0 <= fh_obs <= MAX_LEAD
            else None
        )
        if field is None:
            skipped += len(by_hour[tb_eh])
            continue
        group = by_hour[tb_eh]
        lats = np.array([r.coord.latitude for r in group])
        lons = np.array([r.coord.longitude for r in group])
        values = sample_many(field, lats, lons)
        tf = encode_time(TimeStamp.from_epoch_hours(tb_eh))
        for r, (u, v) in zip(group, values):
            tokens.append(
                ObservationToken(
                    obs_wind=r.wind,
                    nwp_wind_at_obs=WindVector(float(u), float(v)),
                    time_features=tf,
                    coord=r.coord,
                    valid=True,
                    time=r.time,
                    platform_id=r.platform_id,
                    platform_type=r.platform_type,
                )
            )
    return tokens, skipped


def build_context(
    model: WindCorrector,
    records: list[ObservationRecord],
    gfs_store: ForecastStore,
    issue_time: TimeStamp,
    history_hours: int = 1,
) -> InferenceContext:
    init_eh = (issue_time.epoch_hours // CYCLE_HOURS) * CYCLE_HOURS
    tokens, skipped = gather_observation_tokens(
        records, gfs_store, issue_time, history_hours
    )
    ctx = InferenceContext(
        issue_time=issue_time,
        init_time=TimeStamp.from_epoch_hours(init_eh),
        obs_tokens=tokens,
        encoded=None,
        obs_mask=None,
        skipped_obs=skipped,
    )
    if not tokens:
        return ctx
    sample = Sample(issue_time, tokens, [])
    batch = collate([featurize_sample(sample, model.config)], dtype=model.dtype)
    with torch.no_grad():
        ctx.encoded = model.encode(model.embed_observations(batch), batch.obs_mask)
    ctx.obs_mask = batch.obs_mask
    return ctx


def _target_batch(
    model: WindCorrector,
    ctx: InferenceContext,
    lats: np.ndarray,
    lons: np.ndarray,
    nwp: np.ndarray,
    lead: int,
    time_features: np.ndarray,
) -> Batch:
    n = len(lats)
    dtype = model.dtype
    cfgm = model.config
    feat = np.zeros((n, TGT_FEATURES))
    feat[:, 0:2] = nwp
    feat[:, 2] = lead / cfgm.lead_horizon
    feat[:, 3:7] = time_features
    basis = harmonic_basis_matrix(lats, lons, cfgm.harmonic_degree)
    no = ctx.obs_mask.shape[1] if ctx.obs_mask is not None else 0
    return Batch(
        obs_feat=torch.zeros(1, no, OBS_FEATURES, dtype=dtype),
        obs_basis=torch.zeros(1, no, (cfgm.harmonic_degree + 1) ** 2, dtype=dtype),
        obs_type=torch.zeros(1, no, dtype=torch.int64),
        obs_mask=ctx.obs_mask if ctx.obs_mask is not None else torch.zeros(1, 0, dtype=torch.bool),
        tgt_feat=torch.as_tensor(feat, dtype=dtype).unsqueeze(0),
        tgt_basis=torch.as_tensor(basis, dtype=dtype).unsqueeze(0),
        tgt_nwp=torch.as_tensor(nwp, dtype=dtype).unsqueeze(0),
        tgt_mask=torch.ones(1, n, dtype=torch.bool),
        truth=None,
    )


def infer_at_coords(
    model: WindCorrector,
    ctx: InferenceContext,
    lats: np.ndarray,
    lons: np.ndarray,
    lead: int,
    gfs_store: ForecastStore,
    chunk_size: int = 2048,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Corrected and baseline (u, v) at arbitrary coordinates.

    Returns (corrected (n, 2), baseline (n, 2), fallback_used).  With no
    usable observations the corrected values equal the baseline.
    """
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    target_time = ctx.issue_time.add_hours(lead)
    fh_target = target_time.epoch_hours - ctx.init_time.epoch_hours
    field = gfs_store.get(ctx.init_time, fh_target)
    if field is None:
        raise DataError(
            f"no forecast field for cycle {ctx.init_time.isoformat()} "
            f"hour {fh_target} (target {target_time.isoformat()})"
        )
    baseline = sample_many(field, lats, lons)
    if ctx.encoded is None:
        return baseline.copy(), baseline, True

    tf = encode_time(target_time)
    was_training = model.training
    model.eval()
    corrected = np.empty_like(baseline)
    try:
        with torch.no_grad():
            for start in range(0, len(lats), chunk_size):
                stop = min(start + chunk_size, len(lats))
                batch = _target_batch(
                    model, ctx, lats[start:stop], lons[start:stop],
                    baseline[start:stop], lead, tf,
                )
                out = model.correct_targets(ctx.encoded, batch)
                corrected[start:stop] = out[0].cpu().numpy()
    finally:
        model.train(was_training)
    return corrected, baseline, False


def grid_infer(
    model: WindCorrector,
    ctx: InferenceContext,
    grid_spec: GridSpec,
    lead: int,
    gfs_store: ForecastStore,
    chunk_size: int = 2048,
) -> tuple[GridField, GridField, GridField, bool]:
    """Corrected field, baseline field, and their difference on a regular grid."""
    lat_grid, lon_grid = np.meshgrid(
        grid_spec.latitudes(), grid_spec.longitudes(), indexing="ij"
    )
    lats, lons = lat_grid.ravel(), lon_grid.ravel()
    corrected, baseline, fallback = infer_at_coords(
        model, ctx, lats, lons, lead, gfs_store, chunk_size
    )
    target_time = ctx.issue_time.add_hours(lead)
    flags = FLAG_NO_OBSERVATION_FALLBACK if fallback else 0
    corrected_field = GridField(
        grid_spec, ctx.init_time, target_time, corrected[:, 0], corrected[:, 1], flags
    )
    baseline_field = GridField(
        grid_spec, ctx.init_time, target_time, baseline[:, 0], baseline[:, 1]
    )
    diff = corrected - baseline
    diff_field = GridField(
        grid_spec, ctx.init_time, target_time, diff[:, 0], diff[:, 1], flags
    )
    return corrected_field, baseline_field, diff_field, fallback
