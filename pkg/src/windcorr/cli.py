"""Command-line entry point wiring the modules into reproducible workflows.

Every command resolves one YAML config, runs one pipeline stage against
stable artifact paths under the configured workspace, and records a
timestamped run directory holding the resolved config plus a manifest of
input/output hashes.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, DataError, NumericalError, WindcorrError
from .evaluation import (
    collect_eval_records,
    density_vs_improvement,
    rmse_by_lead,
    spatial_error_map,
    stratify_by_platform,
)
from .grids import AnalysisStore, ForecastStore, GridField, GridSpec, write_field
from .infer import build_context, grid_infer, infer_at_coords
from .model import WindCorrector, load_checkpoint, save_checkpoint
from .pipeline import (
    build_matchups,
    build_samples,
    parse_observations,
    read_matchups,
    temporal_split,
    write_matchups,
    write_observations,
)
from .synthetic import generate_world, oracle_metrics, oracle_metrics_for_samples
from .training import fit
from .types import TimeStamp, round_datetime_to_hour


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_input(path: Path) -> str:
    path = Path(path)
    if path.is_file():
        return _sha256_file(path)
    if path.is_dir():
        digest = hashlib.sha256()
        for child in sorted(path.rglob("*")):
            if child.is_file():
                digest.update(child.name.encode())
                digest.update(bytes.fromhex(_sha256_file(child)))
        return digest.hexdigest()
    return "missing"


class Stage:
    """One CLI invocation: artifact paths plus the run-record bookkeeping."""

    def __init__(self, command: str, cfg: RunConfig) -> None:
        self.command = command
        self.cfg = cfg
        self.t0 = time.monotonic()
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}
        self.ws = Path(cfg.workspace)
        self.ws.mkdir(parents=True, exist_ok=True)
        if cfg.torch_threads > 0:
            torch.set_num_threads(cfg.torch_threads)

    # Canonical artifact locations.
    @property
    def observations_path(self) -> Path:
        ingested = self.ws / "ingest" / "observations.csv"
        return ingested if ingested.exists() else self.ws / "observations.csv"

    @property
    def gfs_dir(self) -> Path:
        return self.ws / "fields" / "gfs"

    @property
    def era5_dir(self) -> Path:
        return self.ws / "fields" / "era5"

    @property
    def matchup_dir(self) -> Path:
        return self.ws / "matchups"

    @property
    def checkpoint_path(self) -> Path:
        return self.ws / "train" / "checkpoint_best.wcpt"

    def add_input(self, name: str, path: Path) -> None:
        self.inputs[name] = _hash_input(path)

    def add_output(self, name: str, path: Path) -> None:
        self.outputs[name] = _hash_input(path)

    def finish(self) -> Path:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S.%fZ")
        run_dir = self.ws / "runs" / f"{stamp}-{self.command}"
        run_dir.mkdir(parents=True, exist_ok=False)
        dump_config(self.cfg, run_dir / "config.yaml")
        manifest = {
            "command": self.command,
            "package_version": __version__,
            "torch_version": torch.__version__,
            "numpy_version": np.__version__,
            "seed": self.cfg.seed,
            "torch_threads": torch.get_num_threads(),
            "config_sha256": _sha256_file(run_dir / "config.yaml"),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time_s": time.monotonic() - self.t0,
            **self.extra,
        }
        with open(run_dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        return run_dir


def _load_cfg(config_path: str, seed, out_dir) -> RunConfig:
    return load_config(config_path, seed_override=seed, workspace_override=out_dir)


def _parse_issue_time(text: str) -> TimeStamp:
    value = text.strip()
    if value.endswith("Z"):
        value = value[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(value)
    except ValueError as exc:
        raise ConfigError(f"bad issue time {text!r}: {exc}") from exc
    return TimeStamp.from_datetime(round_datetime_to_hour(dt))


def config_options(f):
    f = click.option("--out", "out_dir", default=None, help="override the workspace directory")(f)
    f = click.option("--seed", type=int, default=None, help="override the config seed")(f)
    f = click.option("--config", "config_path", required=True,
                     type=click.Path(exists=False), help="YAML run configuration")(f)
    return f


@click.group()
@click.version_option(version=__version__)
def cli() -> None:
    """Observation-driven forecast wind correction pipeline."""


@cli.command()
@config_options
def synth(config_path, seed, out_dir) -> None:
    """Generate the synthetic world: observation table and field stores."""
    cfg = _load_cfg(config_path, seed, out_dir)
    stage = Stage("synth", cfg)
    paths = generate_world(cfg.synthetic, stage.ws)
    stage.add_output("observations", paths["observations"])
    stage.add_output("gfs_fields", paths["gfs"])
    stage.add_output("era5_fields", paths["era5"])
    run_dir = stage.finish()
    click.echo(f"synth: wrote {paths['observations']} and field stores ({run_dir})")


@cli.command()
@config_options
@click.option("--input", "input_path", default=None,
              help="observation table to ingest (default: workspace/observations.csv)")
def ingest(config_path, seed, out_dir, input_path) -> None:
    """Validate, round, dedupe, and sort an observation table."""
    cfg = _load_cfg(config_path, seed, out_dir)
    stage = Stage("ingest", cfg)
    src = Path(input_path) if input_path else stage.ws / "observations.csv"
    if not src.exists():
        raise DataError(f"observation table {src} does not exist")
    stage.add_input("observations_raw", src)
    counters: dict = {}
    records = parse_observations(src, domain=cfg.synthetic.domain_box, counters=counters)
    if not records:
        raise DataError(f"{src}: no usable observation rows")
    out_path = stage.ws / "ingest" / "observations.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_observations(records, out_path)
    stage.add_output("observations", out_path)
    stage.extra["counters"] = counters
    stage.extra["n_records"] = len(records)
    run_dir = stage.finish()
    click.echo(f"ingest: {len(records)} records -> {out_path} ({run_dir})")


@cli.command()
@config_options
def matchup(config_path, seed, out_dir) -> None:
    """Colocate observations with forecast and reanalysis values."""
    cfg = _load_cfg(config_path, seed, out_dir)
    stage = Stage("matchup", cfg)
    obs_path = stage.observations_path
    if not obs_path.exists():
        raise DataError(f"observation table {obs_path} does not exist (run synth/ingest)")
    stage.add_input("observations", obs_path)
    stage.add_input("gfs_fields", stage.gfs_dir)
    stage.add_input("era5_fields", stage.era5_dir)
    records = parse_observations(obs_path, domain=cfg.synthetic.domain_box)
    matchups = build_matchups(
        records, ForecastStore(stage.gfs_dir), AnalysisStore(stage.era5_dir)
    )
    written = write_matchups(matchups, stage.matchup_dir)
    stage.add_output("matchups", stage.matchup_dir)
    stage.extra["n_matchups"] = len(matchups)
    run_dir = stage.finish()
    click.echo(f"matchup: {len(matchups)} records -> {len(written)} files ({run_dir})")


def _load_split(cfg: RunConfig, stage: Stage):
    matchups = read_matchups(stage.matchup_dir)
    samples = build_samples(matchups, cfg.data.leads, cfg.data.history_hours)
    if not samples:
        raise DataError("no samples could be built from the matchup store")
    return matchups, samples, temporal_split(samples)


@cli.command()
@config_options
def split(config_path, seed, out_dir) -> None:
    """Build samples and record the chronological 80/10/10 split."""
    cfg = _load_cfg(config_path, seed, out_dir)
    stage = Stage("split", cfg)
    stage.add_input("matchups", stage.matchup_dir)
    _, samples, result = _load_split(cfg, stage)
    out_path = stage.ws / "splits" / "split.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "n_samples": len(samples),
        "train": len(result.train),
        "val": len(result.val),
        "test": len(result.test),
        "val_boundary": result.val_boundary.isoformat(),
        "test_boundary": result.test_boundary.isoformat(),
        "spill_flagged": result.spill_flagged,
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    stage.add_output("split", out_path)
    stage.extra.update(payload)
    run_dir = stage.finish()
    click.echo(
        f"split: {payload['train']}/{payload['val']}/{payload['test']} "
        f"(spill {payload['spill_flagged']}) -> {out_path} ({run_dir})"
    )


@cli.command()
@config_options
def train(config_path, seed, out_dir) -> None:
    """Train the corrector; stores the best-validation checkpoint."""
    cfg = _load_cfg(config_path, seed, out_dir)
    stage = Stage("train", cfg)
    stage.add_input("matchups", stage.matchup_dir)
    matchups, _, result = _load_split(cfg, stage)

    train_dir = stage.ws / "train"
    train_dir.mkdir(parents=True, exist_ok=True)

    # Oracle error levels on the evaluation targets, recorded before training.
    oracle_test = oracle_metrics_for_samples(cfg.synthetic, matchups, result.test, cfg.data.leads)
    oracle_all = oracle_metrics(cfg.synthetic, matchups, cfg.data.leads)
    oracle_payload = {
        "test_split": {
            str(lead): {"nwp_rmse": v[0], "ideal_corrector_rmse": v[1]}
            for lead, v in sorted(oracle_test.items())
        },
        "all_matchups": {
            str(lead): {"nwp_rmse": v[0], "ideal_corrector_rmse": v[1]}
            for lead, v in sorted(oracle_all.items())
        },
    }
    if cfg.data.leads and cfg.data.leads[0] in oracle_test:
        lead0 = cfg.data.leads[0]
        oracle_payload["threshold_rmse_at_first_lead"] = 0.6 * oracle_test[lead0][0]
    with open(train_dir / "oracle.json", "w", encoding="utf-8") as fh:
        json.dump(oracle_payload, fh, indent=2, sort_keys=True)
    stage.extra["oracle"] = oracle_payload

    model = WindCorrector(cfg.model, seed=cfg.seed)
    log_path = train_dir / "training_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    model, log = fit(model, result.train, result.val, cfg.training, log_path=log_path)
    save_checkpoint(model, stage.checkpoint_path)
    stage.add_output("checkpoint", stage.checkpoint_path)
    stage.add_output("training_log", log_path)
    stage.add_output("oracle", train_dir / "oracle.json")
    best = min(log, key=lambda r: r["val_rmse"])
    stage.extra["best_epoch"] = best["epoch"]
    stage.extra["best_val_rmse"] = best["val_rmse"]
    run_dir = stage.finish()
    click.echo(
        f"train: {len(log)} epochs, best val RMSE {best['val_rmse']:.4f} "
        f"(epoch {best['epoch']}) -> {stage.checkpoint_path} ({run_dir})"
    )


@cli.command()
@config_options
def evaluate(config_path, seed, out_dir) -> None:
    """Evaluate the checkpoint on the test split; write tables and figures."""
    from . import report

    cfg = _load_cfg(config_path, seed, out_dir)
    stage = Stage("evaluate", cfg)
    stage.add_input("matchups", stage.matchup_dir)
    stage.add_input("checkpoint", stage.checkpoint_path)
    if not stage.checkpoint_path.exists():
        raise DataError(f"checkpoint {stage.checkpoint_path} does not exist (run train)")
    matchups, _, result = _load_split(cfg, stage)
    model = load_checkpoint(stage.checkpoint_path, expected_config=cfg.model)
    if cfg.inference.dtype == "float64":
        model = model.double()
    model.eval()

    era5_lookup = {
        (m.observation.platform_id, m.observation.time.epoch_hours): (
            m.reanalysis.u,
            m.reanalysis.v,
        )
        for m in matchups
        if m.reanalysis is not None
    }
    records, fallbacks = collect_eval_records(model, result.test, era5_lookup)
    if len(records) == 0:
        raise DataError("test split produced no evaluation targets")

    eval_dir = stage.ws / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    table = rmse_by_lead(records, cfg.evaluation.table_leads)
    (eval_dir / "metrics.csv").write_text(table.to_csv(), encoding="utf-8")
    stage.add_output("metrics", eval_dir / "metrics.csv")
    report.plot_metric_table(table, eval_dir / "metrics.png")

    strat = stratify_by_platform(records, cfg.evaluation.error_metric)
    with open(eval_dir / "stratification.csv", "w", encoding="utf-8") as fh:
        fh.write("platform_type,lead_h,mean_error_diff,n_targets\n")
        for (ptype, lead), (value, n) in sorted(strat.items()):
            fh.write(f"{ptype},{lead},{value!r},{n}\n")
    stage.add_output("stratification", eval_dir / "stratification.csv")
    report.plot_platform_stratification(strat, eval_dir / "stratification.png")

    obs_records = parse_observations(stage.observations_path, domain=cfg.synthetic.domain_box)
    obs_lats = np.array([r.coord.latitude for r in obs_records])
    obs_lons = np.array([r.coord.longitude for r in obs_records])
    domain = cfg.synthetic.domain_box
    trend_lines = ["lead_h,slope,intercept,n_cells"]
    for lead in cfg.evaluation.map_leads:
        sel = records.subset(records.lead == lead)
        if len(sel) == 0:
            continue
        grid = spatial_error_map(
            sel, domain, cfg.evaluation.map_cell_deg, cfg.evaluation.error_metric,
            obs_lats=obs_lats, obs_lons=obs_lons,
        )
        model_mae, nwp_mae, frac = grid.model_mae(), grid.nwp_mae(), grid.obs_fraction()
        with open(eval_dir / f"spatial_l{lead:02d}.csv", "w", encoding="utf-8") as fh:
            fh.write("lat_cell,lon_cell,model_mae,nwp_mae,difference,count,obs_fraction\n")
            for i in range(grid.n_lat):
                for j in range(grid.n_lon):
                    lat0 = grid.lat_min + i * grid.cell_deg
                    lon0 = grid.lon_min + j * grid.cell_deg
                    fh.write(
                        f"{lat0!r},{lon0!r},{float(model_mae[i, j])!r},"
                        f"{float(nwp_mae[i, j])!r},"
                        f"{float(model_mae[i, j] - nwp_mae[i, j])!r},"
                        f"{int(grid.count[i, j])},{float(frac[i, j])!r}\n"
                    )
        # Error grids are also emitted in the gridded-field format
        # (u block = corrected MAE, v block = baseline MAE).
        cell_spec = GridSpec(
            grid.lat_min,
            grid.lat_min + (grid.n_lat - 1) * grid.cell_deg,
            grid.lon_min,
            grid.lon_min + (grid.n_lon - 1) * grid.cell_deg,
            grid.cell_deg,
        )
        anchor = result.test_boundary or result.val_boundary
        write_field(
            GridField(cell_spec, anchor, anchor.add_hours(lead),
                      model_mae.ravel(), nwp_mae.ravel()),
            eval_dir / f"spatial_l{lead:02d}.wgrd",
        )
        report.plot_spatial_error(grid, eval_dir / f"spatial_l{lead:02d}.png",
                                  title=f"lead {lead} h")
        rows, trend = density_vs_improvement(grid)
        with open(eval_dir / f"density_l{lead:02d}.csv", "w", encoding="utf-8") as fh:
            fh.write("obs_fraction,error_reduction\n")
            for x, y in rows:
                fh.write(f"{float(x)!r},{float(y)!r}\n")
        if trend is not None:
            trend_lines.append(f"{lead},{trend.slope!r},{trend.intercept!r},{trend.n_cells}")
        report.plot_density_scatter(rows, trend, eval_dir / f"density_l{lead:02d}.png",
                                    title=f"lead {lead} h")
    (eval_dir / "density_trends.csv").write_text(
        "\n".join(trend_lines) + "\n", encoding="utf-8"
    )
    stage.add_output("density_trends", eval_dir / "density_trends.csv")
    stage.extra["n_targets"] = len(records)
    stage.extra["fallback_samples"] = fallbacks
    run_dir = stage.finish()
    click.echo(f"evaluate: {len(records)} targets -> {eval_dir} ({run_dir})")
    for row in table.rows:
        click.echo(
            f"  lead {row.lead:>2d} h: model {row.model_rmse:.3f} "
            f"nwp {row.nwp_rmse:.3f} improvement {row.improvement_pct:.1f}%"
        )


def _inference_setup(cfg: RunConfig, stage: Stage, issue_time: TimeStamp):
    if not stage.checkpoint_path.exists():
        raise DataError(f"checkpoint {stage.checkpoint_path} does not exist (run train)")
    model = load_checkpoint(stage.checkpoint_path, expected_config=cfg.model)
    if cfg.inference.dtype == "float64":
        model = model.double()
    model.eval()
    obs_path = stage.observations_path
    if not obs_path.exists():
        raise DataError(f"observation table {obs_path} does not exist")
    records = parse_observations(obs_path, domain=cfg.synthetic.domain_box)
    store = ForecastStore(stage.gfs_dir)
    ctx = build_context(model, records, store, issue_time, cfg.data.history_hours)
    return model, ctx, store


@cli.command("infer-points")
@config_options
@click.option("--issue-time", required=True, help="issue time, ISO UTC (e.g. 2021-05-01T06)")
@click.option("--lead", required=True, type=int, help="lead time in hours")
@click.option("--coords", required=True,
              help="semicolon-separated lat,lon pairs, e.g. '30.0,-70.0;32.5,-68.1'")
def infer_points(config_path, seed, out_dir, issue_time, lead, coords) -> None:
    """Corrected wind at arbitrary coordinates in a single pass."""
    cfg = _load_cfg(config_path, seed, out_dir)
    stage = Stage("infer-points", cfg)
    issue = _parse_issue_time(issue_time)
    try:
        pairs = [
            tuple(float(x) for x in part.split(","))
            for part in coords.split(";")
            if part.strip()
        ]
        if not pairs or any(len(p) != 2 for p in pairs):
            raise ValueError("expected lat,lon pairs")
    except ValueError as exc:
        raise ConfigError(f"bad --coords value: {exc}") from exc
    lats = np.array([p[0] for p in pairs])
    lons = np.array([p[1] for p in pairs])
    domain = cfg.synthetic.domain_box
    if np.any(lats < domain[0]) or np.any(lats > domain[1]) or np.any(
        lons < domain[2]
    ) or np.any(lons > domain[3]):
        raise DataError("a query coordinate lies outside the configured domain")

    model, ctx, store = _inference_setup(cfg, stage, issue)
    stage.add_input("checkpoint", stage.checkpoint_path)
    t0 = time.monotonic()
    corrected, baseline, fallback = infer_at_coords(
        model, ctx, lats, lons, lead, store, cfg.inference.chunk_size
    )
    wall = time.monotonic() - t0
    out_path = stage.ws / "infer" / (
        f"points_{issue.to_datetime():%Y%m%d%H}_l{lead:02d}.csv"
    )
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("lat,lon,corrected_u,corrected_v,baseline_u,baseline_v\n")
        for k in range(len(lats)):
            fh.write(
                f"{float(lats[k])!r},{float(lons[k])!r},"
                f"{float(corrected[k, 0])!r},{float(corrected[k, 1])!r},"
                f"{float(baseline[k, 0])!r},{float(baseline[k, 1])!r}\n"
            )
    stage.add_output("points", out_path)
    stage.extra["fallback"] = fallback
    stage.extra["inference_wall_time_s"] = wall
    run_dir = stage.finish()
    click.echo(
        f"infer-points: {len(lats)} points in {wall:.3f} s -> {out_path} "
        f"{'[no-observation fallback]' if fallback else ''}({run_dir})"
    )


@cli.command("infer-grid")
@config_options
@click.option("--issue-time", required=True, help="issue time, ISO UTC")
@click.option("--lead", required=True, type=int, help="lead time in hours")
@click.option("--resolution", type=float, default=None,
              help="grid resolution in degrees (default from config)")
def infer_grid(config_path, seed, out_dir, issue_time, lead, resolution) -> None:
    """Corrected field on a regular grid, plus baseline and difference fields."""
    from . import report

    cfg = _load_cfg(config_path, seed, out_dir)
    stage = Stage("infer-grid", cfg)
    issue = _parse_issue_time(issue_time)
    res = resolution if resolution is not None else cfg.inference.grid_resolution
    domain = cfg.synthetic.domain_box
    spec = GridSpec(domain[0], domain[1], domain[2], domain[3], res)

    model, ctx, store = _inference_setup(cfg, stage, issue)
    stage.add_input("checkpoint", stage.checkpoint_path)
    t0 = time.monotonic()
    corrected, baseline, difference, fallback = grid_infer(
        model, ctx, spec, lead, store, cfg.inference.chunk_size
    )
    wall = time.monotonic() - t0
    infer_dir = stage.ws / "infer"
    infer_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{issue.to_datetime():%Y%m%d%H}_l{lead:02d}"
    for name, fld in (
        ("corrected", corrected),
        ("baseline", baseline),
        ("difference", difference),
    ):
        path = infer_dir / f"{name}_{tag}.wgrd"
        write_field(fld, path)
        stage.add_output(name, path)
    report.plot_grid_inference(
        corrected, baseline, infer_dir / f"grid_{tag}.png",
        title=f"issue {issue.isoformat()} lead {lead} h",
    )
    stage.extra["fallback"] = fallback
    stage.extra["inference_wall_time_s"] = wall
    stage.extra["n_nodes"] = spec.n_nodes
    run_dir = stage.finish()
    click.echo(
        f"infer-grid: {spec.n_nodes} nodes in {wall:.3f} s -> {infer_dir} "
        f"{'[no-observation fallback]' if fallback else ''}({run_dir})"
    )


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    except (DataError, WindcorrError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
