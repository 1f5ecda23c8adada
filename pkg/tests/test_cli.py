import json
import shutil

import numpy as np
import pytest
import torch
import yaml

from windcorr.cli import main
from windcorr.grids import read_field
from windcorr.model import ModelConfig, WindCorrector, save_checkpoint

TINY = {
    "seed": 0,
    "torch_threads": 2,
    "synthetic": {
        "duration_hours": 96,
        "n_fixed_stations": 4,
        "n_ships": 2,
        "n_rover_ships": 1,
    },
    "data": {"leads": [1, 8]},
    "model": {
        "hidden_dim": 16,
        "n_heads": 2,
        "n_encoder_layers": 1,
        "n_decoder_layers": 1,
        "harmonic_degree": 2,
        "dropout": 0.1,
    },
    "training": {"max_epochs": 2, "early_stop_patience": 2, "batch_size": 16},
    "evaluation": {"table_leads": [1, 8], "map_leads": [1]},
    "inference": {"grid_resolution": 1.0},
}


def write_config(path, workspace, **overrides):
    cfg = json.loads(json.dumps(TINY))  # deep copy
    cfg["workspace"] = str(workspace)
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh)
    return path


@pytest.fixture(scope="module")
def pipeline_ws(tmp_path_factory):
    """A tiny workspace taken through every pipeline stage once."""
    root = tmp_path_factory.mktemp("cli")
    ws = root / "ws"
    cfg_path = write_config(root / "cfg.yaml", ws)
    for cmd in ("synth", "ingest", "matchup", "split", "train", "evaluate"):
        rc = main([cmd, "--config", str(cfg_path)])
        assert rc == 0, f"{cmd} failed"
    return ws, cfg_path


def test_pipeline_artifacts_exist(pipeline_ws):
    ws, _ = pipeline_ws
    assert (ws / "observations.csv").exists()
    assert (ws / "ingest" / "observations.csv").exists()
    assert list((ws / "matchups").glob("matchups_*.csv"))
    assert (ws / "splits" / "split.json").exists()
    assert (ws / "train" / "checkpoint_best.wcpt").exists()
    assert (ws / "train" / "oracle.json").exists()
    assert (ws / "eval" / "metrics.csv").exists()
    assert (ws / "eval" / "metrics.png").exists()
    assert (ws / "eval" / "spatial_l01.csv").exists()
    assert (ws / "eval" / "spatial_l01.wgrd").exists()
    assert (ws / "eval" / "density_l01.csv").exists()


def test_run_records_have_manifests(pipeline_ws):
    ws, _ = pipeline_ws
    runs = sorted((ws / "runs").iterdir())
    assert len(runs) >= 6
    for run in runs:
        assert (run / "config.yaml").exists()
        manifest = json.loads((run / "manifest.json").read_text())
        assert "inputs" in manifest and "outputs" in manifest
        assert manifest["seed"] == 0
        assert "wall_time_s" in manifest


def test_oracle_recorded_before_training(pipeline_ws):
    ws, _ = pipeline_ws
    oracle = json.loads((ws / "train" / "oracle.json").read_text())
    assert "test_split" in oracle and "1" in oracle["test_split"]
    assert oracle["threshold_rmse_at_first_lead"] == pytest.approx(
        0.6 * oracle["test_split"]["1"]["nwp_rmse"]
    )


def test_evaluate_rerun_is_byte_identical(pipeline_ws):
    ws, cfg_path = pipeline_ws
    before = (ws / "eval" / "metrics.csv").read_bytes()
    strat_before = (ws / "eval" / "stratification.csv").read_bytes()
    rc = main(["evaluate", "--config", str(cfg_path)])
    assert rc == 0
    assert (ws / "eval" / "metrics.csv").read_bytes() == before
    assert (ws / "eval" / "stratification.csv").read_bytes() == strat_before


def test_matchup_rerun_is_byte_identical(pipeline_ws):
    ws, cfg_path = pipeline_ws
    files = sorted((ws / "matchups").glob("*.csv"))
    before = [f.read_bytes() for f in files]
    rc = main(["matchup", "--config", str(cfg_path)])
    assert rc == 0
    after = [f.read_bytes() for f in sorted((ws / "matchups").glob("*.csv"))]
    assert before == after


def test_point_matches_grid_at_node(pipeline_ws):
    ws, cfg_path = pipeline_ws
    issue = "2021-04-03T06"
    rc = main(["infer-grid", "--config", str(cfg_path), "--issue-time", issue,
               "--lead", "8", "--resolution", "1.0"])
    assert rc == 0
    grid = read_field(ws / "infer" / "corrected_2021040306_l08.wgrd")
    node_lat, node_lon = 30.0, -70.0
    rc = main(["infer-points", "--config", str(cfg_path), "--issue-time", issue,
               "--lead", "8", "--coords", f"{node_lat},{node_lon}"])
    assert rc == 0
    lines = (ws / "infer" / "points_2021040306_l08.csv").read_text().strip().split("\n")
    parts = lines[1].split(",")
    u, v = float(parts[2]), float(parts[3])
    spec = grid.spec
    node = spec.node_index(
        round(node_lat - spec.lat_min), round(node_lon - spec.lon_min)
    )
    # Grid file stores float32; compare at that precision.
    assert u == pytest.approx(grid.u[node], abs=1e-5)
    assert v == pytest.approx(grid.v[node], abs=1e-5)


def test_grid_infer_zero_head_checkpoint_gives_zero_difference(pipeline_ws, tmp_path):
    ws, cfg_path = pipeline_ws
    ws2 = tmp_path / "ws_zero"
    shutil.copytree(ws, ws2)
    model_cfg = ModelConfig(**{**TINY["model"], "lead_horizon": 48})
    model = WindCorrector(model_cfg, seed=1)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    save_checkpoint(model, ws2 / "train" / "checkpoint_best.wcpt")
    cfg2 = write_config(tmp_path / "cfg_zero.yaml", ws2)
    rc = main(["infer-grid", "--config", str(cfg2), "--issue-time", "2021-04-03T06",
               "--lead", "8", "--resolution", "1.0"])
    assert rc == 0
    diff = read_field(ws2 / "infer" / "difference_2021040306_l08.wgrd")
    assert np.all(diff.u == 0.0) and np.all(diff.v == 0.0)


def test_grid_infer_without_observations_falls_back(pipeline_ws, tmp_path):
    ws, _ = pipeline_ws
    ws2 = tmp_path / "ws_noobs"
    shutil.copytree(ws, ws2)
    header = (ws2 / "ingest" / "observations.csv").read_text().split("\n")[0]
    (ws2 / "ingest" / "observations.csv").write_text(header + "\n")
    cfg2 = write_config(tmp_path / "cfg_noobs.yaml", ws2)
    rc = main(["infer-grid", "--config", str(cfg2), "--issue-time", "2021-04-03T06",
               "--lead", "8", "--resolution", "1.0"])
    assert rc == 0
    corrected = read_field(ws2 / "infer" / "corrected_2021040306_l08.wgrd")
    baseline = read_field(ws2 / "infer" / "baseline_2021040306_l08.wgrd")
    assert corrected.flags == 1  # no-observation fallback flag in the header
    np.testing.assert_array_equal(corrected.u, baseline.u)


def test_exit_code_one_for_unknown_config_key(tmp_path):
    ws = tmp_path / "ws"
    cfg = write_config(tmp_path / "bad.yaml", ws)
    raw = yaml.safe_load(cfg.read_text())
    raw["model"]["number_of_wheels"] = 4
    cfg.write_text(yaml.safe_dump(raw))
    rc = main(["synth", "--config", str(cfg)])
    assert rc == 1


def test_exit_code_one_for_missing_config(tmp_path):
    rc = main(["synth", "--config", str(tmp_path / "absent.yaml")])
    assert rc == 1


def test_exit_code_one_for_usage_error():
    rc = main(["infer-grid"])  # missing required options
    assert rc == 1


def test_exit_code_two_for_missing_data(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml", tmp_path / "empty_ws")
    rc = main(["matchup", "--config", str(cfg)])
    assert rc == 2
    rc = main(["evaluate", "--config", str(cfg)])
    assert rc == 2


def test_exit_code_two_for_out_of_domain_point(pipeline_ws):
    _, cfg_path = pipeline_ws
    rc = main(["infer-points", "--config", str(cfg_path),
               "--issue-time", "2021-04-03T06", "--lead", "8",
               "--coords", "60.0,-70.0"])
    assert rc == 2


def test_seed_override_recorded(tmp_path):
    ws = tmp_path / "ws"
    cfg = write_config(tmp_path / "cfg.yaml", ws)
    rc = main(["synth", "--config", str(cfg), "--seed", "7"])
    assert rc == 0
    run = sorted((ws / "runs").iterdir())[-1]
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 7
