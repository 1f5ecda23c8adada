"""Deterministic feature encoders shared by all tokens.

Time is encoded with four cyclical features (annual and daily sine/cosine
pairs).  Location is encoded by evaluating real orthonormal spherical
harmonics at the coordinate and passing them through a small sinusoidal
network whose weights are learned with the rest of the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .types import GeoCoord, TimeStamp

MAX_HARMONIC_DEGREE = 10


def encode_time(ts: TimeStamp) -> np.ndarray:
    """Four cyclical features: [sin, cos] of the annual cycle then the daily cycle.

    The annual pair uses a fixed 366-day denominator for every year.
    """
    d = 2.0 * math.pi * ts.day_of_year / 366.0
    h = 2.0 * math.pi * ts.hour_of_day / 24.0
    return np.array([math.sin(d), math.cos(d), math.sin(h), math.cos(h)], dtype=np.float64)


def encode_time_batch(epoch_hours: np.ndarray) -> np.ndarray:
    """Vectorized encode_time over an int array of epoch hours -> (n, 4)."""
    out = np.empty((len(epoch_hours), 4), dtype=np.float64)
    for i, eh in enumerate(np.asarray(epoch_hours, dtype=np.int64)):
        out[i] = encode_time(TimeStamp.from_epoch_hours(int(eh)))
    return out


def basis_size(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass(frozen=True)
class HarmonicBasis:
    """Real spherical harmonics Y_l^m evaluated at one point, (l, m) ascending."""

    degree: int
    coefficients: np.ndarray

    def __post_init__(self) -> None:
        if len(self.coefficients) != basis_size(self.degree):
            raise ValueError(
                f"basis length {len(self.coefficients)} != {basis_size(self.degree)}"
            )
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("non-finite harmonic coefficients")


def _legendre_norm_table(degree: int) -> tuple[np.ndarray, np.ndarray]:
    # Recurrence coefficients for fully-normalized associated Legendre
    # functions (Condon-Shortley-free, 1/sqrt(4 pi) folded in).
    a = np.zeros((degree + 1, degree + 1))
    b = np.zeros((degree + 1, degree + 1))
    for m in range(degree + 1):
        for l in range(m + 2, degree + 1):
            a[l, m] = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b[l, m] = -math.sqrt(
                (2.0 * l + 1.0) * (l - 1.0 - m) * (l - 1.0 + m)
                / ((2.0 * l - 3.0) * (l * l - m * m))
            )
    return a, b


def harmonic_basis_matrix(
    lat_deg: np.ndarray, lon_deg: np.ndarray, degree: int
) -> np.ndarray:
    """Evaluate all Y_l^m for 0 <= l <= degree at many points -> (n, (degree+1)^2).

    Convention: colatitude theta = 90 deg - latitude, azimuth phi = longitude,
    real orthonormal harmonics without the Condon-Shortley phase, ordered by
    (l, m) with m ascending within each l.
    """
    if not 0 <= degree <= MAX_HARMONIC_DEGREE:
        raise ValueError(f"degree {degree} out of [0, {MAX_HARMONIC_DEGREE}]")
    lat = np.asarray(lat_deg, dtype=np.float64)
    lon = np.asarray(lon_deg, dtype=np.float64)
    theta = np.deg2rad(90.0 - lat)
    phi = np.deg2rad(lon)
    x = np.cos(theta)
    s = np.sin(theta)

    n = lat.shape[0]
    a, b = _legendre_norm_table(degree)
    # plm[l][m] holds the normalized P for all points
    plm = [[None] * (degree + 1) for _ in range(degree + 1)]
    plm[0][0] = np.full(n, 0.5 / math.sqrt(math.pi))
    for m in range(1, degree + 1):
        plm[m][m] = math.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * plm[m - 1][m - 1]
    for m in range(degree + 1):
        if m + 1 <= degree:
            plm[m + 1][m] = math.sqrt(2.0 * m + 3.0) * x * plm[m][m]
        for l in range(m + 2, degree + 1):
            plm[l][m] = a[l, m] * x * plm[l - 1][m] + b[l, m] * plm[l - 2][m]

    sqrt2 = math.sqrt(2.0)
    out = np.empty((n, basis_size(degree)), dtype=np.float64)
    for l in range(degree + 1):
        base = l * l + l
        out[:, base] = plm[l][0]
        for m in range(1, l + 1):
            out[:, base + m] = sqrt2 * plm[l][m] * np.cos(m * phi)
            out[:, base - m] = sqrt2 * plm[l][m] * np.sin(m * phi)
    return out


def harmonic_basis(coord: GeoCoord, degree: int) -> HarmonicBasis:
    """Real spherical-harmonic basis at a single coordinate."""
    values = harmonic_basis_matrix(
        np.array([coord.latitude]), np.array([coord.longitude]), degree
    )[0]
    return HarmonicBasis(degree=degree, coefficients=values)


class LocationEncoder(nn.Module):
    """Sinusoidal network over spherical-harmonic features.

    Every layer applies sin(omega * (W x + b)); the first layer uses a large
    frequency scale, later layers scale 1.  Weights are initialized uniformly
    in +-sqrt(6 / fan_in) / omega.
    """

    def __init__(
        self,
        degree: int,
        output_dim: int,
        hidden_dim: int | None = None,
        n_hidden_layers: int = 2,
        first_omega: float = 30.0,
        hidden_omega: float = 1.0,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.degree = degree
        self.input_dim = basis_size(degree)
        self.output_dim = output_dim
        hidden_dim = output_dim if hidden_dim is None else hidden_dim

        dims = [self.input_dim] + [hidden_dim] * n_hidden_layers + [output_dim]
        omegas = [first_omega] + [hidden_omega] * n_hidden_layers
        self.omegas = omegas
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=dtype) for i in range(len(omegas))
        )
        self._init_weights(generator)

    def _init_weights(self, generator: torch.Generator | None) -> None:
        for layer, omega in zip(self.layers, self.omegas):
            bound = math.sqrt(6.0 / layer.in_features) / omega
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.zero_()

    def forward(self, basis: torch.Tensor) -> torch.Tensor:
        if basis.shape[-1] != self.input_dim:
            raise ValueError(
                f"basis dim {basis.shape[-1]} != expected {self.input_dim}"
            )
        x = basis
        for layer, omega in zip(self.layers, self.omegas):
            x = torch.sin(omega * layer(x))
        return x
