"""Masked scaled-dot-product attention and the blocks built from it.

Masking is hard: invalid keys receive a score of -inf before the softmax, so
they carry exactly zero weight and masked tokens can never influence valid
positions.  A query row that is attending (not itself masked) with zero valid
keys is an error, never a silent zero output.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NoValidKeysError


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    key_mask: torch.Tensor | None,
    query_mask: torch.Tensor | None = None,
    dropout_p: float = 0.0,
    training: bool = False,
    return_weights: bool = False,
):
    """Attention over the last two dims: q (..., n_q, d_k), k/v (..., n_k, d).

    key_mask: bool (..., n_k), True = valid; None means all keys valid.
    query_mask: bool (..., n_q); rows marked False are allowed to have no
    valid key and produce zero output.
    """
    d_k = q.shape[-1]
    scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(d_k)

    if key_mask is not None:
        if key_mask.sum() == 0:
            raise NoValidKeysError("all keys are masked")
        expanded = key_mask
        while expanded.dim() < scores.dim():
            expanded = expanded.unsqueeze(-2)
        scores = scores.masked_fill(~expanded, float("-inf"))
        row_has_key = expanded.any(dim=-1)  # broadcast over query rows
        if query_mask is None:
            if not bool(row_has_key.all()):
                raise NoValidKeysError("a query row has no valid key")
        else:
            qm = query_mask
            while qm.dim() < scores.dim() - 1:
                qm = qm.unsqueeze(-2)
            if bool((qm & ~row_has_key).any()):
                raise NoValidKeysError("a valid query row has no valid key")

    weights = torch.softmax(scores, dim=-1)
    # Rows with every key masked softmax to NaN; they were verified to be
    # non-attending above, so zero them out.
    weights = torch.nan_to_num(weights, nan=0.0)
    if dropout_p > 0.0 and training:
        weights = F.dropout(weights, p=dropout_p, training=True)
    out = torch.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


class MultiheadAttention(nn.Module):
    """Multi-head attention with per-head query/key/value projections.

    With ``self_only=True`` every query attends exclusively to its own key
    (a singleton softmax), which keeps token outputs independent of the rest
    of the sequence; used for decoder self-attention so that query sets can
    be split or batched arbitrarily without changing results.
    """

    def __init__(
        self,
        dim: int,
        n_heads: int,
        dropout: float = 0.0,
        self_only: bool = False,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"hidden dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.dropout = dropout
        self.self_only = self_only
        if not self_only:
            # The singleton-softmax path never scores keys against queries.
            self.q_proj = nn.Linear(dim, dim, dtype=dtype)
            self.k_proj = nn.Linear(dim, dim, dtype=dtype)
        self.v_proj = nn.Linear(dim, dim, dtype=dtype)
        self.out_proj = nn.Linear(dim, dim, dtype=dtype)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # (..., n, dim) -> (..., h, n, head_dim)
        new_shape = x.shape[:-1] + (self.n_heads, self.head_dim)
        return x.view(new_shape).transpose(-3, -2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        x = x.transpose(-3, -2).contiguous()
        return x.view(x.shape[:-2] + (self.dim,))

    def forward(
        self,
        query: torch.Tensor,
        keyvalue: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        query_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if query.shape[-1] != self.dim:
            raise ValueError(f"token dim {query.shape[-1]} != model dim {self.dim}")
        if self.self_only:
            # Singleton softmax: the sole weight is exactly 1 (dropout aside).
            v = self._split(self.v_proj(query))
            if self.dropout > 0.0 and self.training:
                keep = F.dropout(torch.ones_like(v[..., :1]), p=self.dropout, training=True)
                v = v * keep
            return self.out_proj(self._merge(v))

        if keyvalue.shape[-1] != self.dim:
            raise ValueError(f"key/value dim {keyvalue.shape[-1]} != model dim {self.dim}")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(keyvalue))
        v = self._split(self.v_proj(keyvalue))
        km = key_mask.unsqueeze(-2) if key_mask is not None else None  # over heads
        qm = query_mask.unsqueeze(-2) if query_mask is not None else None
        out = scaled_dot_attention(
            q, k, v, km, qm, dropout_p=self.dropout, training=self.training
        )
        return self.out_proj(self._merge(out))


class FeedForward(nn.Module):
    """Position-wise MLP with smooth nonlinearity and output dropout."""

    def __init__(
        self, dim: int, expansion: int = 4, dropout: float = 0.0,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, expansion * dim, dtype=dtype)
        self.fc2 = nn.Linear(expansion * dim, dim, dtype=dtype)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.fc2(F.gelu(self.fc1(x))))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + residual, pre-norm feed-forward + residual."""

    def __init__(
        self, dim: int, n_heads: int, ff_expansion: int = 4, dropout: float = 0.0,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.attn = MultiheadAttention(dim, n_heads, dropout=dropout, dtype=dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(dim, ff_expansion, dropout, dtype=dtype)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_mask=mask, query_mask=mask)
        x = x + self.ff(self.norm2(x))
        return x


class DecoderBlock(nn.Module):
    """Target self-attention, cross-attention to the encoder output, feed-forward.

    All three sublayers are pre-norm with residuals.  Target self-attention is
    restricted to each token itself so that decoding is independent per query.
    """

    def __init__(
        self, dim: int, n_heads: int, ff_expansion: int = 4, dropout: float = 0.0,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.self_attn = MultiheadAttention(
            dim, n_heads, dropout=dropout, self_only=True, dtype=dtype
        )
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)
        self.cross_attn = MultiheadAttention(dim, n_heads, dropout=dropout, dtype=dtype)
        self.norm3 = nn.LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(dim, ff_expansion, dropout, dtype=dtype)

    def forward(
        self,
        targets: torch.Tensor,
        encoded: torch.Tensor,
        kv_mask: torch.Tensor | None,
        target_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        t = targets + self.self_attn(self.norm1(targets), None)
        t = t + self.cross_attn(
            self.norm2(t), encoded, key_mask=kv_mask, query_mask=target_mask
        )
        t = t + self.ff(self.norm3(t))
        return t


def reinit_linear_layers(module: nn.Module, generator: torch.Generator) -> None:
    """Re-initialize every nn.Linear under ``module`` from ``generator``.

    Reproduces torch's default Linear init (kaiming uniform, fan-in bias
    bound) but from an explicit generator so construction is seed-exact.
    """
    for m in module.modules():
        if isinstance(m, nn.Linear):
            with torch.no_grad():
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=generator)
                if m.bias is not None:
                    fan_in = m.weight.shape[1]
                    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
                    m.bias.uniform_(-bound, bound, generator=generator)
