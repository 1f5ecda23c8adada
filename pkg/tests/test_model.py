import numpy as np
import pytest
import torch

from windcorr.errors import CheckpointError, NoObservationsError
from windcorr.model import (
    ModelConfig,
    Sample,
    WindCorrector,
    collate,
    featurize_sample,
    load_checkpoint,
    save_checkpoint,
)
from windcorr.training import make_random_sample


def make_model(tiny_config, seed=0, dtype=torch.float64):
    return WindCorrector(tiny_config, seed=seed, dtype=dtype)


def test_assemble_shapes_and_masks(tiny_config, rng):
    model = make_model(tiny_config)
    sample = make_random_sample(rng, n_obs=3, n_targets=2, n_masked_obs=2)
    enc, dec, obs_mask, tgt_mask = model.assemble_tokens(sample)
    assert enc.shape == (5, tiny_config.hidden_dim)
    assert dec.shape == (2, tiny_config.hidden_dim)
    np.testing.assert_array_equal(obs_mask.numpy(), [True, True, True, False, False])
    np.testing.assert_array_equal(tgt_mask.numpy(), [True, True])


def test_assemble_same_coord_same_location_embedding(tiny_config, rng):
    model = make_model(tiny_config)
    sample = make_random_sample(rng, n_obs=2, n_targets=1)
    # Force identical coordinates but different winds on the two tokens.
    tok0, tok1 = sample.obs_tokens
    object.__setattr__(tok1, "coord", tok0.coord)
    arrays = featurize_sample(sample, tiny_config)
    np.testing.assert_array_equal(arrays.obs_basis[0], arrays.obs_basis[1])
    # The embedding difference must equal the projection difference alone.
    batch = collate([arrays], dtype=torch.float64)
    emb = model.embed_observations(batch)[0]
    proj = model.obs_proj(batch.obs_feat[0])
    np.testing.assert_allclose(
        (emb[0] - emb[1]).detach(), (proj[0] - proj[1]).detach(), atol=1e-12
    )


def test_assemble_reference_projection(tiny_config, rng):
    """One fully specified token vs a straight-line recomputation of the
    assembly: projection of raw features plus the location embedding."""
    model = make_model(tiny_config)
    sample = make_random_sample(rng, n_obs=1, n_targets=1)
    enc, _, _, _ = model.assemble_tokens(sample)
    arrays = featurize_sample(sample, tiny_config)
    feat = torch.tensor(arrays.obs_feat[0], dtype=torch.float64)
    basis = torch.tensor(arrays.obs_basis[0], dtype=torch.float64)
    expected = model.obs_proj(feat) + model.location_encoder(basis)
    np.testing.assert_allclose(enc[0].detach(), expected.detach(), atol=1e-12)


def test_no_valid_observations_raises(tiny_config, rng):
    model = make_model(tiny_config)
    sample = make_random_sample(rng, n_obs=0, n_targets=2, n_masked_obs=3)
    with pytest.raises(NoObservationsError):
        model.forward_sample(sample)


def test_fallback_returns_nwp(tiny_config, rng):
    model = make_model(tiny_config)
    sample = make_random_sample(rng, n_obs=0, n_targets=2, n_masked_obs=1)
    preds, fell_back = model.predict_with_fallback(sample)
    assert fell_back
    assert [(p.u, p.v) for p in preds] == [
        (t.nwp_wind_at_target.u, t.nwp_wind_at_target.v) for t in sample.target_tokens
    ]


def test_zeroed_head_returns_baseline_exactly(tiny_config, rng):
    model = make_model(tiny_config)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    for _ in range(5):
        sample = make_random_sample(rng, n_obs=4, n_targets=3)
        preds = model.forward_sample(sample)
        for pred, tok in zip(preds, sample.target_tokens):
            assert pred.u == tok.nwp_wind_at_target.u
            assert pred.v == tok.nwp_wind_at_target.v


def test_output_order_preserved(tiny_config, rng):
    model = make_model(tiny_config)
    sample = make_random_sample(rng, n_obs=3, n_targets=5)
    preds = model.forward_sample(sample)
    assert len(preds) == 5
    batch = collate([featurize_sample(sample, tiny_config)], dtype=torch.float64)
    with torch.no_grad():
        raw = model(batch)[0]
    for i, p in enumerate(preds):
        assert p.u == pytest.approx(float(raw[i, 0]), abs=0)


def test_observation_permutation_invariance(tiny_config, rng):
    model = make_model(tiny_config)
    for _ in range(10):
        sample = make_random_sample(rng, n_obs=6, n_targets=3)
        preds = model.forward_sample(sample)
        perm = rng.permutation(6)
        shuffled = Sample(
            sample.issue_time,
            [sample.obs_tokens[i] for i in perm],
            sample.target_tokens,
            sample.target_truth,
        )
        preds_p = model.forward_sample(shuffled)
        for a, b in zip(preds, preds_p):
            assert a.u == pytest.approx(b.u, abs=1e-6)
            assert a.v == pytest.approx(b.v, abs=1e-6)


def test_padding_invariance(tiny_config, rng):
    model = make_model(tiny_config)
    sample = make_random_sample(rng, n_obs=4, n_targets=2)
    preds = model.forward_sample(sample)
    padded = make_random_sample(rng, n_obs=0, n_targets=0, n_masked_obs=3, n_masked_targets=2)
    combined = Sample(
        sample.issue_time,
        sample.obs_tokens + padded.obs_tokens,
        sample.target_tokens + padded.target_tokens,
        sample.target_truth + padded.target_truth,
    )
    preds_p = model.forward_sample(combined)
    assert len(preds_p) == len(preds)
    for a, b in zip(preds, preds_p):
        assert a.u == pytest.approx(b.u, abs=1e-6)
        assert a.v == pytest.approx(b.v, abs=1e-6)


def test_split_targets_consistency(tiny_config, rng):
    """Querying a sample's targets in two halves agrees with the single pass."""
    model = make_model(tiny_config)
    sample = make_random_sample(rng, n_obs=5, n_targets=6)
    full = model.forward_sample(sample)
    first = Sample(sample.issue_time, sample.obs_tokens, sample.target_tokens[:3])
    second = Sample(sample.issue_time, sample.obs_tokens, sample.target_tokens[3:])
    parts = model.forward_sample(first) + model.forward_sample(second)
    for a, b in zip(full, parts):
        assert a.u == pytest.approx(b.u, abs=1e-5)
        assert a.v == pytest.approx(b.v, abs=1e-5)


def test_batched_vs_single_sample_consistency(tiny_config, rng):
    model = make_model(tiny_config)
    samples = [make_random_sample(rng, n_obs=int(n), n_targets=2) for n in (3, 5, 2)]
    batch = collate([featurize_sample(s, tiny_config) for s in samples], torch.float64)
    with torch.no_grad():
        batched = model(batch)
    for i, s in enumerate(samples):
        single = model.forward_sample(s)
        for j, p in enumerate(single):
            assert p.u == pytest.approx(float(batched[i, j, 0]), abs=1e-6)
            assert p.v == pytest.approx(float(batched[i, j, 1]), abs=1e-6)


def test_obs_subsampling_cap_is_deterministic(rng):
    config = ModelConfig(
        hidden_dim=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=1,
        harmonic_degree=1, dropout=0.0, max_obs_tokens=4,
    )
    model = WindCorrector(config, seed=0, dtype=torch.float64)
    sample = make_random_sample(rng, n_obs=9, n_targets=2)
    arrays1 = featurize_sample(sample, config)
    arrays2 = featurize_sample(sample, config)
    assert arrays1.obs_feat.shape[0] == 4
    np.testing.assert_array_equal(arrays1.obs_feat, arrays2.obs_feat)
    preds = model.forward_sample(sample)
    assert len(preds) == 2


def test_checkpoint_roundtrip_bitexact(tiny_config, rng, tmp_path):
    model = WindCorrector(tiny_config, seed=7)  # float32 production dtype
    path = tmp_path / "model.wcpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    for (ka, va), (kb, vb) in zip(
        model.state_dict().items(), loaded.state_dict().items()
    ):
        assert ka == kb
        assert torch.equal(va, vb)
    sample = make_random_sample(rng, n_obs=4, n_targets=3)
    a = model.forward_sample(sample)
    b = loaded.forward_sample(sample)
    assert [(p.u, p.v) for p in a] == [(p.u, p.v) for p in b]


def test_checkpoint_truncated_file_rejected(tiny_config, tmp_path):
    model = WindCorrector(tiny_config, seed=7)
    path = tmp_path / "model.wcpt"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    truncated = tmp_path / "broken.wcpt"
    truncated.write_bytes(blob[: len(blob) - 257])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)


def test_checkpoint_corrupted_payload_rejected(tiny_config, tmp_path):
    model = WindCorrector(tiny_config, seed=7)
    path = tmp_path / "model.wcpt"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "bad.wcpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_checkpoint_not_a_checkpoint(tmp_path):
    path = tmp_path / "noise.wcpt"
    path.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_dimension_mismatch_names_both(tiny_config, tmp_path):
    model = WindCorrector(tiny_config, seed=7)
    path = tmp_path / "model.wcpt"
    save_checkpoint(model, path)
    import dataclasses

    other = dataclasses.replace(tiny_config, hidden_dim=32)
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path, expected_config=other)
    assert "16" in str(err.value) and "32" in str(err.value)


def test_ablation_flags_build_and_run(rng):
    config = ModelConfig(
        hidden_dim=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=1,
        harmonic_degree=1, dropout=0.0, max_obs_tokens=32,
        order_embedding=True, platform_encoding=True, internal_residual=True,
    )
    model = WindCorrector(config, seed=0, dtype=torch.float64)
    sample = make_random_sample(rng, n_obs=4, n_targets=2)
    preds = model.forward_sample(sample)
    assert len(preds) == 2
