"""Closed-form heat kernel W(x; s, t), its Fourier symbol and its L^p norms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidExponent
from .spd_linalg import SpdMatrix, TimePair, as_pair, det_spd, increment, inverse_spd

# exp(-745.2) is the smallest positive subnormal; anything below returns 0
UNDERFLOW_EXPONENT = -745.0


@dataclass(frozen=True)
class KernelParams:
    """Data of W(.; s, t): the increment A(t) - A(s), its inverse and determinant."""

    increment: SpdMatrix
    inverse: SpdMatrix
    determinant: float
    pair: TimePair | None = None

    @property
    def dim(self) -> int:
        return self.increment.dim

    @classmethod
    def from_matrix(cls, m, pair=None) -> "KernelParams":
        m = m if isinstance(m, SpdMatrix) else SpdMatrix(m)
        return cls(increment=m, inverse=inverse_spd(m), determinant=det_spd(m), pair=pair)

    @classmethod
    def from_path(cls, path, pair) -> "KernelParams":
        pair = as_pair(pair)
        return cls.from_matrix(increment(path, pair), pair)

    @property
    def normalization(self) -> float:
        return 1.0 / math.sqrt((4.0 * math.pi) ** self.dim * self.determinant)


def _safe_exp(z):
    z = np.asarray(z, dtype=float)
    return np.where(z < UNDERFLOW_EXPONENT, 0.0, np.exp(np.maximum(z, UNDERFLOW_EXPONENT)))


def eval_kernel(x, kp: KernelParams):
    """W(x; s, t) at one point (shape ``(n,)``) or a batch (shape ``(..., n)``).

    For ``n == 1`` a bare scalar or 1-d array of positions is also accepted.
    """
    x = np.asarray(x, dtype=float)
    n = kp.dim
    if n == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != n:
        raise ValueError(f"points must have trailing dimension {n}, got shape {x.shape}")
    quad = np.einsum("...i,ij,...j->...", x, kp.inverse.values, x)
    out = kp.normalization * _safe_exp(-0.25 * quad)
    return float(out) if out.ndim == 0 else out


def fourier_symbol(xi, kp: KernelParams):
    """exp(-<(A(t) - A(s)) xi, xi>), in (0, 1]; vectorized like :func:`eval_kernel`."""
    xi = np.asarray(xi, dtype=float)
    n = kp.dim
    if n == 1 and (xi.ndim == 0 or xi.shape[-1] != 1):
        xi = xi[..., None]
    quad = np.einsum("...i,ij,...j->...", xi, kp.increment.values, xi)
    out = _safe_exp(-quad)
    return float(out) if out.ndim == 0 else out


def kernel_lp_norm(p: float, kp: KernelParams) -> float:
    """||W(.; s, t)||_p = 1 / (p^{n/2p} ((4 pi)^n det(A(t) - A(s)))^{(p-1)/2p}); p may be ``inf``."""
    p = float(p)
    if not p >= 1.0:
        raise InvalidExponent(f"exponent must be >= 1, got {p}")
    if math.isinf(p):
        return kp.normalization
    n = kp.dim
    vol = (4.0 * math.pi) ** n * kp.determinant
    return 1.0 / (p ** (n / (2.0 * p)) * vol ** ((p - 1.0) / (2.0 * p)))
