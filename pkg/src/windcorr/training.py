"""Loss functions, optimizer schedule, epoch loop, and gradient verification."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError, NumericalError
from .model import (
    Batch,
    ModelConfig,
    ObservationToken,
    Sample,
    SampleArrays,
    TargetToken,
    WindCorrector,
    collate,
    featurize_sample,
)
from .types import GeoCoord, TimeStamp, WindVector


def vector_magnitude_loss(
    pred: torch.Tensor, truth: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean over valid targets of sqrt((du)^2 + (dv)^2); differentiable."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(truth.shape)}")
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise DataError("vector_magnitude_loss over zero valid targets")
    diff = (pred - truth) * mask.unsqueeze(-1).to(pred.dtype)
    magnitudes = torch.linalg.vector_norm(diff, dim=-1)
    return magnitudes.sum() / n_valid


def rmse(pred, truth, mask=None) -> float:
    """Component-pooled RMSE: sqrt of the mean squared error over valid
    targets and both wind components, in m/s."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if mask is None:
        m = np.ones(p.shape[:-1], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
    n_valid = int(m.sum())
    if n_valid == 0:
        raise DataError("rmse over zero valid targets")
    sq = (p - t) ** 2
    total = float(sq[m].sum())
    return math.sqrt(total / (n_valid * p.shape[-1]))


@dataclass(frozen=True)
class OptimizerConfig:
    initial_lr: float = 1e-4
    weight_decay: float = 1e-2
    restart_period: int = 10
    restart_mult: int = 2
    min_lr: float = 0.0
    max_epochs: int = 100
    early_stop_patience: int = 25
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.initial_lr <= 0 or self.restart_period <= 0 or self.restart_mult < 1:
            raise ValueError("schedule parameters must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if not 1 <= self.early_stop_patience <= self.max_epochs:
            raise ValueError("early_stop_patience must be in [1, max_epochs]")


def lr_at_epoch(cfg: OptimizerConfig, epoch: int) -> float:
    """Cosine decay with warm restarts, closed form.

    Period lengths are restart_period * restart_mult^i; within a period of
    length T at offset e the rate is
    min_lr + 0.5 (initial_lr - min_lr)(1 + cos(pi e / T)), so each restart
    boundary resets to initial_lr exactly.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    offset = epoch
    period = cfg.restart_period
    while offset >= period:
        offset -= period
        period *= cfg.restart_mult
    return cfg.min_lr + 0.5 * (cfg.initial_lr - cfg.min_lr) * (
        1.0 + math.cos(math.pi * offset / period)
    )


@dataclass
class TrainState:
    """Mutable bookkeeping for one fit() run."""

    epoch: int = 0
    best_val_rmse: float = math.inf
    best_epoch: int = -1
    epochs_since_best: int = 0
    log: list[dict] = field(default_factory=list)


def _validation_rmse(model: WindCorrector, batches: list[Batch]) -> float:
    was_training = model.training
    model.eval()
    sq_sum, count = 0.0, 0
    try:
        with torch.no_grad():
            for batch in batches:
                pred = model(batch)
                m = batch.tgt_mask
                diff = (pred - batch.truth)[m]
                sq_sum += float((diff ** 2).sum())
                count += int(m.sum()) * 2
    finally:
        model.train(was_training)
    if count == 0:
        raise DataError("validation set has zero valid targets")
    return math.sqrt(sq_sum / count)


def _make_batches(
    arrays: list[SampleArrays],
    order: np.ndarray,
    batch_size: int,
    dtype: torch.dtype,
) -> list[Batch]:
    out = []
    for start in range(0, len(order), batch_size):
        chunk = [arrays[i] for i in order[start : start + batch_size]]
        out.append(collate(chunk, dtype=dtype))
    return out


def fit(
    model: WindCorrector,
    train_samples: list[Sample],
    val_samples: list[Sample],
    cfg: OptimizerConfig,
    log_path=None,
) -> tuple[WindCorrector, list[dict]]:
    """Train with decoupled weight decay, cosine warm restarts, and early
    stopping on validation RMSE; returns the best-validation weights."""
    if not train_samples or not val_samples:
        raise DataError("fit requires non-empty train and validation splits")

    torch.manual_seed(cfg.seed)  # dropout stream
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dtype = model.dtype

    train_arrays = [featurize_sample(s, model.config) for s in train_samples]
    val_batches = _make_batches(
        [featurize_sample(s, model.config) for s in val_samples],
        np.arange(len(val_samples)),
        cfg.batch_size,
        dtype,
    )

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.initial_lr, weight_decay=cfg.weight_decay
    )
    state = TrainState()
    best_weights = copy.deepcopy(model.state_dict())
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None

    try:
        for epoch in range(cfg.max_epochs):
            state.epoch = epoch
            lr = lr_at_epoch(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr

            t0 = time.monotonic()
            model.train()
            order = shuffle_rng.permutation(len(train_arrays))
            epoch_loss, n_batches = 0.0, 0
            for batch_idx, batch in enumerate(
                _make_batches(train_arrays, order, cfg.batch_size, dtype)
            ):
                optimizer.zero_grad()
                pred = model(batch)
                loss = vector_magnitude_loss(pred, batch.truth, batch.tgt_mask)
                if not torch.isfinite(loss):
                    raise NumericalError(
                        f"non-finite training loss at epoch {epoch}, batch {batch_idx}"
                    )
                loss.backward()
                optimizer.step()
                epoch_loss += float(loss.detach())
                n_batches += 1

            val_rmse = _validation_rmse(model, val_batches)
            record = {
                "epoch": epoch,
                "train_loss": epoch_loss / max(n_batches, 1),
                "val_rmse": val_rmse,
                "lr": lr,
                "wall_time_s": time.monotonic() - t0,
            }
            state.log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()

            if val_rmse < state.best_val_rmse:
                state.best_val_rmse = val_rmse
                state.best_epoch = epoch
                state.epochs_since_best = 0
                best_weights = copy.deepcopy(model.state_dict())
            else:
                state.epochs_since_best += 1
                if state.epochs_since_best >= cfg.early_stop_patience:
                    break
    finally:
        if log_file:
            log_file.close()

    model.load_state_dict(best_weights)
    model.eval()
    return model, state.log


MICRO_CONFIG = ModelConfig(
    hidden_dim=8,
    n_heads=2,
    n_encoder_layers=2,
    n_decoder_layers=2,
    harmonic_degree=1,
    siren_hidden_layers=2,
    dropout=0.0,
    lead_horizon=48,
    max_obs_tokens=64,
)


def make_random_sample(
    rng: np.random.Generator,
    n_obs: int = 5,
    n_targets: int = 3,
    n_masked_obs: int = 0,
    n_masked_targets: int = 0,
    lead: int = 8,
) -> Sample:
    """A synthetic random sample for verification code paths."""
    issue = TimeStamp(2021, 150, 6)
    from .encodings import encode_time  # local to avoid cycle at import time

    tf_obs = encode_time(issue)
    tf_tgt = encode_time(issue.add_hours(lead))

    def coord() -> GeoCoord:
        return GeoCoord(float(rng.uniform(-60, 60)), float(rng.uniform(-170, 170)))

    def wind() -> WindVector:
        return WindVector(float(rng.normal(0, 5)), float(rng.normal(0, 5)))

    obs = [
        ObservationToken(wind(), wind(), tf_obs, coord(), valid=True, time=issue)
        for _ in range(n_obs)
    ] + [
        ObservationToken(wind(), wind(), tf_obs, coord(), valid=False, time=issue)
        for _ in range(n_masked_obs)
    ]
    tgts = [
        TargetToken(wind(), lead, tf_tgt, coord(), valid=True)
        for _ in range(n_targets)
    ] + [
        TargetToken(wind(), lead, tf_tgt, coord(), valid=False)
        for _ in range(n_masked_targets)
    ]
    truth = [wind() for _ in range(len(tgts))]
    return Sample(issue, obs, tgts, truth)


def gradient_check(
    config: ModelConfig = MICRO_CONFIG,
    n_obs: int = 5,
    n_targets: int = 3,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Analytic vs central-finite-difference gradients at double precision.

    Compares, for every parameter tensor, the backward-pass gradient of the
    vector magnitude loss against (f(p+h) - f(p-h)) / 2h; returns the worst
    per-tensor relative error (L2-norm ratio).
    """
    rng = np.random.default_rng(seed)
    model = WindCorrector(config, seed=seed, dtype=torch.float64)
    model.eval()
    sample = make_random_sample(rng, n_obs=n_obs, n_targets=n_targets)
    batch = collate([featurize_sample(sample, config)], dtype=torch.float64)

    def loss_value() -> torch.Tensor:
        return vector_magnitude_loss(model(batch), batch.truth, batch.tgt_mask)

    model.zero_grad()
    loss_value().backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }

    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                up = float(loss_value())
                flat[i] = orig - step
                down = float(loss_value())
                flat[i] = orig
                fd[i] = (up - down) / (2.0 * step)
            fd = fd.view_as(p)
            ga = analytic[name]
            denom = max(float(ga.norm()), float(fd.norm()), 1e-12)
            rel = float((ga - fd).norm()) / denom
            worst = max(worst, rel)
    return worst
