"""Token assembly, the encoder/decoder correction network, and checkpoints.

Observation tokens pair an in-situ wind report with the forecast value at the
same place and hour; target tokens carry the forecast at a query coordinate
and lead time.  The network predicts a per-target correction (du, dv) and the
corrected wind is ``forecast + correction``, so a zeroed output head returns
the baseline exactly.
"""

from __future__ import annotations

import binascii
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .attention import DecoderBlock, EncoderBlock, reinit_linear_layers
from .encodings import LocationEncoder, basis_size, encode_time, harmonic_basis_matrix
from .errors import CheckpointError, NoObservationsError, NumericalError
from .types import GeoCoord, PlatformType, TimeStamp, WindVector

OBS_FEATURES = 4 + 4  # obs u, v, forecast u, v, four time features
TGT_FEATURES = 2 + 1 + 4  # forecast u, v, normalized lead, four time features

CHECKPOINT_MAGIC = b"WINDCORR"
CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ObservationToken:
    obs_wind: WindVector
    nwp_wind_at_obs: WindVector
    time_features: np.ndarray
    coord: GeoCoord
    valid: bool = True
    # Provenance used for deterministic subsampling and ablations.
    time: TimeStamp | None = None
    platform_id: str = ""
    platform_type: PlatformType | None = None


@dataclass(frozen=True)
class TargetToken:
    nwp_wind_at_target: WindVector
    lead_hours: int
    time_features: np.ndarray
    coord: GeoCoord
    valid: bool = True
    platform_id: str = ""
    platform_type: PlatformType | None = None


@dataclass
class Sample:
    """One training/inference unit anchored at a single issue time."""

    issue_time: TimeStamp
    obs_tokens: list[ObservationToken]
    target_tokens: list[TargetToken]
    target_truth: list[WindVector] | None = None

    def n_valid_obs(self) -> int:
        return sum(1 for t in self.obs_tokens if t.valid)

    def n_valid_targets(self) -> int:
        return sum(1 for t in self.target_tokens if t.valid)


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 128
    n_heads: int = 8
    n_encoder_layers: int = 8
    n_decoder_layers: int = 8
    harmonic_degree: int = 3
    siren_hidden_layers: int = 2
    siren_first_omega: float = 30.0
    siren_hidden_omega: float = 1.0
    ff_expansion: int = 4
    dropout: float = 0.1
    lead_horizon: int = 48
    max_obs_tokens: int = 4096
    # Ablation switches; all off in the baseline configuration.
    order_embedding: bool = False
    platform_encoding: bool = False
    internal_residual: bool = False

    def __post_init__(self) -> None:
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if not 0 <= self.harmonic_degree <= 10:
            raise ValueError(f"harmonic_degree {self.harmonic_degree} out of [0, 10]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} out of [0, 1)")
        if self.lead_horizon < 1 or self.max_obs_tokens < 1:
            raise ValueError("lead_horizon and max_obs_tokens must be positive")


@dataclass
class SampleArrays:
    """Numpy feature arrays for one sample, ready to batch."""

    obs_feat: np.ndarray  # (No, OBS_FEATURES)
    obs_basis: np.ndarray  # (No, basis)
    obs_type: np.ndarray  # (No,) int64
    obs_mask: np.ndarray  # (No,) bool
    tgt_feat: np.ndarray  # (Nt, TGT_FEATURES)
    tgt_basis: np.ndarray
    tgt_nwp: np.ndarray  # (Nt, 2)
    tgt_mask: np.ndarray  # (Nt,) bool
    truth: np.ndarray | None  # (Nt, 2)


def _subsample_obs(tokens: list[ObservationToken], cap: int) -> list[ObservationToken]:
    if len(tokens) <= cap:
        return tokens
    # Deterministic: most recent first, ties broken by platform id.
    def sort_key(item):
        idx, tok = item
        eh = tok.time.epoch_hours if tok.time is not None else 0
        return (-eh, tok.platform_id, idx)

    keep = sorted(enumerate(tokens), key=sort_key)[:cap]
    keep.sort(key=lambda item: item[0])  # restore original relative order
    return [tok for _, tok in keep]


def featurize_sample(sample: Sample, config: ModelConfig) -> SampleArrays:
    """Raw (un-projected) feature arrays for every token of a sample."""
    obs = _subsample_obs(sample.obs_tokens, config.max_obs_tokens)
    n_obs, n_tgt = len(obs), len(sample.target_tokens)
    b = basis_size(config.harmonic_degree)

    obs_feat = np.zeros((n_obs, OBS_FEATURES))
    obs_lat = np.zeros(n_obs)
    obs_lon = np.zeros(n_obs)
    obs_type = np.zeros(n_obs, dtype=np.int64)
    obs_mask = np.zeros(n_obs, dtype=bool)
    type_index = {t: i for i, t in enumerate(PlatformType)}
    for i, tok in enumerate(obs):
        obs_mask[i] = tok.valid
        if not tok.valid:
            continue
        obs_feat[i, 0:2] = (tok.obs_wind.u, tok.obs_wind.v)
        obs_feat[i, 2:4] = (tok.nwp_wind_at_obs.u, tok.nwp_wind_at_obs.v)
        obs_feat[i, 4:8] = tok.time_features
        obs_lat[i], obs_lon[i] = tok.coord.latitude, tok.coord.longitude
        if tok.platform_type is not None:
            obs_type[i] = type_index[tok.platform_type]
    obs_basis = (
        harmonic_basis_matrix(obs_lat, obs_lon, config.harmonic_degree)
        if n_obs
        else np.zeros((0, b))
    )

    tgt_feat = np.zeros((n_tgt, TGT_FEATURES))
    tgt_lat = np.zeros(n_tgt)
    tgt_lon = np.zeros(n_tgt)
    tgt_nwp = np.zeros((n_tgt, 2))
    tgt_mask = np.zeros(n_tgt, dtype=bool)
    for i, tok in enumerate(sample.target_tokens):
        tgt_mask[i] = tok.valid
        if not tok.valid:
            continue
        tgt_feat[i, 0:2] = (tok.nwp_wind_at_target.u, tok.nwp_wind_at_target.v)
        tgt_feat[i, 2] = tok.lead_hours / config.lead_horizon
        tgt_feat[i, 3:7] = tok.time_features
        tgt_nwp[i] = (tok.nwp_wind_at_target.u, tok.nwp_wind_at_target.v)
        tgt_lat[i], tgt_lon[i] = tok.coord.latitude, tok.coord.longitude
    tgt_basis = (
        harmonic_basis_matrix(tgt_lat, tgt_lon, config.harmonic_degree)
        if n_tgt
        else np.zeros((0, b))
    )

    truth = None
    if sample.target_truth is not None:
        truth = np.zeros((n_tgt, 2))
        for i, w in enumerate(sample.target_truth):
            if w is not None:
                truth[i] = (w.u, w.v)
    return SampleArrays(
        obs_feat, obs_basis, obs_type, obs_mask,
        tgt_feat, tgt_basis, tgt_nwp, tgt_mask, truth,
    )


@dataclass
class Batch:
    """Padded tensors for a list of samples (padding rows are masked)."""

    obs_feat: torch.Tensor
    obs_basis: torch.Tensor
    obs_type: torch.Tensor
    obs_mask: torch.Tensor
    tgt_feat: torch.Tensor
    tgt_basis: torch.Tensor
    tgt_nwp: torch.Tensor
    tgt_mask: torch.Tensor
    truth: torch.Tensor | None


def collate(arrays: list[SampleArrays], dtype: torch.dtype = torch.float32) -> Batch:
    n = len(arrays)
    max_o = max(a.obs_feat.shape[0] for a in arrays)
    max_t = max(a.tgt_feat.shape[0] for a in arrays)
    b = arrays[0].obs_basis.shape[1]

    def pad(rows, width, dst):
        for i, a in enumerate(rows):
            dst[i, : a.shape[0]] = torch.as_tensor(a, dtype=dst.dtype)

    batch = Batch(
        obs_feat=torch.zeros(n, max_o, OBS_FEATURES, dtype=dtype),
        obs_basis=torch.zeros(n, max_o, b, dtype=dtype),
        obs_type=torch.zeros(n, max_o, dtype=torch.int64),
        obs_mask=torch.zeros(n, max_o, dtype=torch.bool),
        tgt_feat=torch.zeros(n, max_t, TGT_FEATURES, dtype=dtype),
        tgt_basis=torch.zeros(n, max_t, b, dtype=dtype),
        tgt_nwp=torch.zeros(n, max_t, 2, dtype=dtype),
        tgt_mask=torch.zeros(n, max_t, dtype=torch.bool),
        truth=None if arrays[0].truth is None else torch.zeros(n, max_t, 2, dtype=dtype),
    )
    pad([a.obs_feat for a in arrays], OBS_FEATURES, batch.obs_feat)
    pad([a.obs_basis for a in arrays], b, batch.obs_basis)
    pad([a.tgt_feat for a in arrays], TGT_FEATURES, batch.tgt_feat)
    pad([a.tgt_basis for a in arrays], b, batch.tgt_basis)
    pad([a.tgt_nwp for a in arrays], 2, batch.tgt_nwp)
    for i, a in enumerate(arrays):
        batch.obs_type[i, : len(a.obs_type)] = torch.as_tensor(a.obs_type)
        batch.obs_mask[i, : len(a.obs_mask)] = torch.as_tensor(a.obs_mask)
        batch.tgt_mask[i, : len(a.tgt_mask)] = torch.as_tensor(a.tgt_mask)
        if batch.truth is not None and a.truth is not None:
            batch.truth[i, : a.truth.shape[0]] = torch.as_tensor(a.truth, dtype=dtype)
    return batch


class WindCorrector(nn.Module):
    """Masked self-attention encoder over observation pairs, cross-attention
    decoder queried at arbitrary target tokens, residual correction head."""

    def __init__(
        self,
        config: ModelConfig,
        seed: int | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.config = config
        h = config.hidden_dim
        self.obs_proj = nn.Linear(OBS_FEATURES, h, dtype=dtype)
        self.tgt_proj = nn.Linear(TGT_FEATURES, h, dtype=dtype)
        self.location_encoder = LocationEncoder(
            degree=config.harmonic_degree,
            output_dim=h,
            n_hidden_layers=config.siren_hidden_layers,
            first_omega=config.siren_first_omega,
            hidden_omega=config.siren_hidden_omega,
            dtype=dtype,
        )
        if config.order_embedding:
            self.order_embed = nn.Embedding(config.max_obs_tokens, h, dtype=dtype)
        if config.platform_encoding:
            self.type_embed = nn.Embedding(len(PlatformType), h, dtype=dtype)
        self.encoder = nn.ModuleList(
            EncoderBlock(h, config.n_heads, config.ff_expansion, config.dropout, dtype)
            for _ in range(config.n_encoder_layers)
        )
        self.encoder_norm = nn.LayerNorm(h, dtype=dtype)
        self.decoder = nn.ModuleList(
            DecoderBlock(h, config.n_heads, config.ff_expansion, config.dropout, dtype)
            for _ in range(config.n_decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(h, dtype=dtype)
        if config.internal_residual:
            self.residual_proj = nn.Linear(2, h, dtype=dtype)
        self.head = nn.Linear(h, 2, dtype=dtype)

        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
            reinit_linear_layers(self, gen)
            # Location encoder keeps its frequency-scaled init.
            self.location_encoder._init_weights(gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def embed_observations(self, batch: Batch) -> torch.Tensor:
        x = self.obs_proj(batch.obs_feat) + self.location_encoder(batch.obs_basis)
        if self.config.platform_encoding:
            x = x + self.type_embed(batch.obs_type)
        if self.config.order_embedding:
            idx = torch.arange(batch.obs_feat.shape[-2], device=x.device)
            x = x + self.order_embed(idx)
        # Padding rows carry no content into the network.
        return x * batch.obs_mask.unsqueeze(-1).to(x.dtype)

    def embed_targets(self, batch: Batch) -> torch.Tensor:
        x = self.tgt_proj(batch.tgt_feat) + self.location_encoder(batch.tgt_basis)
        return x * batch.tgt_mask.unsqueeze(-1).to(x.dtype)

    def encode(self, obs_tokens: torch.Tensor, obs_mask: torch.Tensor) -> torch.Tensor:
        x = obs_tokens
        for block in self.encoder:
            x = block(x, obs_mask)
        return self.encoder_norm(x)

    def decode(
        self,
        tgt_tokens: torch.Tensor,
        encoded: torch.Tensor,
        obs_mask: torch.Tensor,
        tgt_mask: torch.Tensor,
        tgt_nwp: torch.Tensor,
    ) -> torch.Tensor:
        t = tgt_tokens
        for block in self.decoder:
            t = block(t, encoded, kv_mask=obs_mask, target_mask=tgt_mask)
        if self.config.internal_residual:
            t = t + self.residual_proj(tgt_nwp)
        return self.decoder_norm(t)

    def correct_targets(self, encoded: torch.Tensor, batch: Batch) -> torch.Tensor:
        """Decode target tokens against an already-encoded observation set."""
        hidden = self.decode(
            self.embed_targets(batch), encoded, batch.obs_mask, batch.tgt_mask,
            batch.tgt_nwp,
        )
        delta = self.head(hidden)
        corrected = batch.tgt_nwp + delta
        picked = corrected[batch.tgt_mask]
        if picked.numel() and not bool(torch.isfinite(picked).all()):
            raise NumericalError("non-finite corrected wind in forward pass")
        return corrected

    def forward(self, batch: Batch) -> torch.Tensor:
        """Corrected wind per target token, shape (B, Nt, 2)."""
        valid_obs = batch.obs_mask.sum(dim=-1)
        if bool((valid_obs == 0).any()):
            raise NoObservationsError("a sample in the batch has zero valid observations")
        encoded = self.encode(self.embed_observations(batch), batch.obs_mask)
        return self.correct_targets(encoded, batch)

    def assemble_tokens(self, sample: Sample):
        """Single-sample token assembly: (encoder tokens, decoder tokens, masks)."""
        if sample.n_valid_obs() == 0:
            raise NoObservationsError("sample has no valid observation tokens")
        batch = collate([featurize_sample(sample, self.config)], dtype=self.dtype)
        enc = self.embed_observations(batch)[0]
        dec = self.embed_targets(batch)[0]
        return enc, dec, batch.obs_mask[0], batch.tgt_mask[0]

    def forward_sample(self, sample: Sample) -> list[WindVector]:
        """Corrected wind for each *valid* target of one sample, order preserved."""
        if sample.n_valid_obs() == 0:
            raise NoObservationsError("sample has no valid observation tokens")
        batch = collate([featurize_sample(sample, self.config)], dtype=self.dtype)
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                corrected = self.forward(batch)[0]
        finally:
            self.train(was_training)
        out = []
        for i, tok in enumerate(sample.target_tokens):
            if tok.valid:
                out.append(WindVector(float(corrected[i, 0]), float(corrected[i, 1])))
        return out

    def predict_with_fallback(self, sample: Sample) -> tuple[list[WindVector], bool]:
        """forward_sample, falling back to the raw forecast when the sample
        carries no observations."""
        try:
            return self.forward_sample(sample), False
        except NoObservationsError:
            return (
                [t.nwp_wind_at_target for t in sample.target_tokens if t.valid],
                True,
            )


def _tensor_entries(state: dict[str, torch.Tensor]) -> list[dict]:
    return [{"name": k, "shape": list(v.shape)} for k, v in state.items()]


def save_checkpoint(model: WindCorrector, path) -> None:
    """Versioned binary container; weights stored as little-endian float32."""
    state = {k: v.detach().to(torch.float32).cpu() for k, v in model.state_dict().items()}
    header = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_config": asdict(model.config),
        "tensors": _tensor_entries(state),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = io.BytesIO()
    for key in state:
        payload.write(state[key].numpy().astype("<f4").tobytes())
    payload_bytes = payload.getvalue()
    crc = binascii.crc32(payload_bytes) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_SCHEMA_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<Q", len(payload_bytes)))
        fh.write(payload_bytes)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> WindCorrector:
    """Load a checkpoint; rejects corrupt files and mismatched schemas."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    view = memoryview(blob)
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or view[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a windcorr checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: schema version {version} unsupported "
            f"(expected {CHECKPOINT_SCHEMA_VERSION})"
        )
    try:
        (header_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        header = json.loads(bytes(view[off : off + header_len]).decode("utf-8"))
        off += header_len
        (payload_len,) = struct.unpack_from("<Q", blob, off)
        off += 8
        payload = bytes(view[off : off + payload_len])
        if len(payload) != payload_len:
            raise CheckpointError(f"{path}: truncated payload")
        off += payload_len
        (crc_stored,) = struct.unpack_from("<I", blob, off)
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if binascii.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    config = ModelConfig(**header["model_config"])
    if expected_config is not None and config != expected_config:
        for key, want in asdict(expected_config).items():
            got = getattr(config, key)
            if got != want:
                raise CheckpointError(
                    f"{path}: checkpoint {key}={got} does not match configured {key}={want}"
                )
    model = WindCorrector(config)
    state = model.state_dict()
    cursor = 0
    loaded = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in state:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if tuple(state[name].shape) != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {shape} != model shape "
                f"{tuple(state[name].shape)}"
            )
        count = int(np.prod(shape)) if shape else 1
        raw = payload[cursor : cursor + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointError(f"{path}: truncated tensor data for {name!r}")
        cursor += 4 * count
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        loaded[name] = torch.from_numpy(arr)
    if cursor != payload_len:
        raise CheckpointError(f"{path}: trailing bytes in payload")
    missing = set(state) - set(loaded)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(loaded)
    model.eval()
    return model
