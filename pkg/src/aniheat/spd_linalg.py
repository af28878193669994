"""Small dense SPD matrices and the accumulated diffusivity A(t).

Everything here is dense and hand-rolled on purpose: the matrices are the
spatial dimension squared (n <= 8), so Cholesky and cyclic Jacobi are cheaper
and more predictable than dispatching to LAPACK.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateInterval,
    NoConvergence,
    NotPositiveDefinite,
    QuadratureFailure,
)

MAX_DIM = 8
PIVOT_RTOL = 1e-13
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
QUAD_RTOL = 1e-10
QUAD_MAX_PANELS = 4096
DEGENERATE_GAP = 1e-14

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


class SpdMatrix:
    """Symmetric positive definite matrix, symmetrized and checked on construction.

    The entries are stored as a read-only ``(n, n)`` float array. Instances
    behave like arrays under numpy (``np.asarray(m)`` works).
    """

    __slots__ = ("values", "_chol")

    def __init__(self, entries):
        m = np.array(entries, dtype=float)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        if not 1 <= m.shape[0] <= MAX_DIM:
            raise ValueError(f"dimension must be in 1..{MAX_DIM}, got {m.shape[0]}")
        if not np.all(np.isfinite(m)):
            raise NotPositiveDefinite("matrix has non-finite entries")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        self.values = m
        chol = _cholesky_raw(m)
        chol.setflags(write=False)
        self._chol = chol

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __repr__(self):
        return f"SpdMatrix({self.values.tolist()!r})"

    @classmethod
    def identity(cls, n: int) -> "SpdMatrix":
        return cls(np.eye(n))

    @classmethod
    def diag(cls, *entries: float) -> "SpdMatrix":
        return cls(np.diag(entries))


def _as_array(m) -> np.ndarray:
    if isinstance(m, SpdMatrix):
        return m.values
    a = np.asarray(m, dtype=float)
    return a.reshape(1, 1) if a.ndim == 0 else a


def _cholesky_raw(m: np.ndarray) -> np.ndarray:
    n = m.shape[0]
    tol = PIVOT_RTOL * max(float(np.max(np.diag(m))), 0.0)
    L = np.zeros_like(m)
    for j in range(n):
        pivot = m[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > tol:
            raise NotPositiveDefinite(
                f"pivot {j} = {pivot:.3e} does not exceed tolerance {tol:.3e}"
            )
        L[j, j] = math.sqrt(pivot)
        for i in range(j + 1, n):
            L[i, j] = (m[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
    return L


def cholesky(m) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == m``.

    Raises NotPositiveDefinite when a pivot falls below
    ``1e-13 * max(diag(m))``.
    """
    if isinstance(m, SpdMatrix):
        return m._chol.copy()
    a = _as_array(m)
    return _cholesky_raw(0.5 * (a + a.T))


def det_spd(m) -> float:
    L = cholesky(m)
    return float(np.prod(np.diag(L)) ** 2)


def inverse_spd(m) -> SpdMatrix:
    L = cholesky(m)
    n = L.shape[0]
    # Linv by forward substitution, then M^{-1} = Linv^T Linv
    Linv = np.zeros_like(L)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        y = np.zeros(n)
        for i in range(n):
            y[i] = (e[i] - L[i, :i] @ y[:i]) / L[i, i]
        Linv[:, j] = y
    return SpdMatrix(Linv.T @ Linv)


def jacobi_eigenvalues(m, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.

    Iterates until the off-diagonal Frobenius norm is below ``tol`` times the
    full Frobenius norm.
    """
    a = np.array(_as_array(m), dtype=float)
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    scale = float(np.linalg.norm(a))
    if n == 1 or scale == 0.0:
        return np.sort(np.diag(a))
    for _ in range(max_sweeps):
        # summed directly: subtracting the diagonal from the total cancels
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * scale:
            return np.sort(np.diag(a))
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
    raise NoConvergence(f"Jacobi iteration did not converge in {max_sweeps} sweeps")


def min_eigenvalue(m) -> float:
    lam = float(jacobi_eigenvalues(m)[0])
    if not lam > 0.0:
        raise NotPositiveDefinite(f"smallest eigenvalue {lam:.3e} is not positive")
    return lam


# ---------------------------------------------------------------------------
# quadrature


def _gl_panel(fn, a: float, b: float) -> np.ndarray:
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    total = None
    for x, w in zip(_GL_NODES, _GL_WEIGHTS):
        v = np.asarray(fn(mid + half * x), dtype=float) * w
        total = v if total is None else total + v
    return half * total


def integrate(
    fn: Callable[[float], np.ndarray],
    a: float,
    b: float,
    breakpoints: Sequence[float] = (),
    rtol: float = QUAD_RTOL,
    max_panels: int = QUAD_MAX_PANELS,
) -> np.ndarray:
    """Adaptive composite Gauss-Legendre integral of an array-valued function.

    Panels are first split at every breakpoint strictly inside ``(a, b)``;
    each panel is bisected until the 10-point rule on the panel and on its two
    halves agree entrywise to ``rtol`` relative (plus a tiny absolute floor
    for entries that integrate to zero).
    """
    if b < a:
        return -integrate(fn, b, a, breakpoints, rtol, max_panels)
    edges = [a] + sorted(x for x in breakpoints if a < x < b) + [b]
    stack = [(lo, hi, _gl_panel(fn, lo, hi)) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]
    if not stack:
        return np.zeros_like(np.asarray(fn(a), dtype=float))
    total = None
    panels = len(stack)
    while stack:
        lo, hi, coarse = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = _gl_panel(fn, lo, mid), _gl_panel(fn, mid, hi)
        fine = left + right
        err = np.abs(fine - coarse)
        floor = 1e-15 * max(float(np.max(np.abs(fine))), 1e-300) * (hi - lo) / (b - a)
        if np.all(err <= rtol * np.abs(fine) + floor) or hi - lo < 1e-15 * max(1.0, abs(b)):
            total = fine if total is None else total + fine
            continue
        panels += 1
        if panels > max_panels:
            raise QuadratureFailure(
                f"tolerance {rtol:g} not reached on [{a:g}, {b:g}] within {max_panels} panels"
            )
        stack.append((lo, mid, left))
        stack.append((mid, hi, right))
    return total


# ---------------------------------------------------------------------------
# time pairs and diffusivity paths


@dataclass(frozen=True)
class TimePair:
    s: float
    t: float

    def __post_init__(self):
        if self.s < 0 or self.t < 0:
            raise ValueError(f"times must be nonnegative, got ({self.s}, {self.t})")
        if self.s > self.t:
            raise ValueError(f"need s <= t, got ({self.s}, {self.t})")

    @property
    def strict(self) -> bool:
        return self.s < self.t


def as_pair(pair) -> TimePair:
    return pair if isinstance(pair, TimePair) else TimePair(float(pair[0]), float(pair[1]))


@dataclass(frozen=True)
class PointMass:
    """Singular component ``weight * matrix * delta(t - time)`` of a coefficient."""

    time: float
    weight: float
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


@dataclass(eq=False)
class DiffusivityPath:
    """Time-dependent coefficient ``t -> a(t)``.

    Use the constructors :meth:`constant`, :meth:`smooth` and :meth:`piecewise`.
    ``point_masses`` only make sense for singular targets that are later
    mollified; they enter :func:`accumulate` as jumps of A(t).
    """

    dim: int
    kind: str
    evaluator: Callable[[float], np.ndarray]
    antiderivative: Callable[[float], np.ndarray] | None = None
    jump_times: tuple = ()
    point_masses: tuple = ()
    pieces: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        jt = tuple(float(x) for x in self.jump_times)
        if any(x <= 0 for x in jt) or any(b <= a for a, b in zip(jt, jt[1:])):
            raise ValueError(f"jump times must be positive and strictly increasing: {jt}")
        self.jump_times = jt

    @classmethod
    def constant(cls, m) -> "DiffusivityPath":
        mat = SpdMatrix(m).values
        return cls(
            dim=mat.shape[0],
            kind="constant",
            evaluator=lambda t: mat,
            antiderivative=lambda t: t * mat,
            pieces=(mat,),
        )

    @classmethod
    def smooth(cls, fn, dim: int, antiderivative=None) -> "DiffusivityPath":
        return cls(dim=dim, kind="smooth", evaluator=fn, antiderivative=antiderivative)

    @classmethod
    def piecewise(cls, matrices, jump_times, point_masses=()) -> "DiffusivityPath":
        """Right-continuous piecewise-constant path: ``matrices[k]`` on ``[t_k, t_{k+1})``."""
        mats = tuple(SpdMatrix(m).values for m in matrices)
        jt = tuple(float(x) for x in jump_times)
        if len(mats) != len(jt) + 1:
            raise ValueError("need exactly one more matrix than jump times")
        dim = mats[0].shape[0]
        masses = tuple(p if isinstance(p, PointMass) else PointMass(*p) for p in point_masses)
        edges = np.array(jt)

        def evaluate(t):
            return mats[int(np.searchsorted(edges, t, side="right"))]

        def antiderivative(t):
            total = np.zeros((dim, dim))
            lo = 0.0
            for k, m in enumerate(mats):
                hi = jt[k] if k < len(jt) else math.inf
                if t <= lo:
                    break
                total = total + (min(t, hi) - lo) * m
                lo = hi
            for pm in masses:
                if pm.time < t:
                    total = total + pm.weight * pm.matrix
            return total

        kind = "piecewise" if not masses else "singular"
        return cls(
            dim=dim,
            kind=kind,
            evaluator=evaluate,
            antiderivative=antiderivative,
            jump_times=jt,
            point_masses=masses,
            pieces=mats,
        )

    def matrix(self, t: float) -> np.ndarray:
        """Symmetrized value a(t) without the SPD check (quadrature hot path)."""
        m = np.asarray(self.evaluator(float(t)), dtype=float)
        m = m.reshape(self.dim, self.dim)
        return 0.5 * (m + m.T)

    def evaluate(self, t: float) -> SpdMatrix:
        return SpdMatrix(self.matrix(t))

    def breakpoints(self) -> tuple:
        return tuple(sorted(set(self.jump_times) | {pm.time for pm in self.point_masses}))


def accumulate(path: DiffusivityPath, t: float) -> np.ndarray:
    """A(t), the entrywise integral of a over [0, t]."""
    t = float(t)
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    if t == 0.0:
        return np.zeros((path.dim, path.dim))
    cached = path._cache.get(t)
    if cached is not None:
        return cached
    if path.antiderivative is not None:
        out = np.asarray(path.antiderivative(t), dtype=float).reshape(path.dim, path.dim)
    else:
        out = integrate(path.matrix, 0.0, t, path.jump_times)
    out = 0.5 * (out + out.T)
    out.setflags(write=False)
    if len(path._cache) < 4096:
        path._cache[t] = out
    return out


def increment(path: DiffusivityPath, pair) -> SpdMatrix:
    """A(t) - A(s) for s < t, verified SPD."""
    pair = as_pair(pair)
    if pair.t - pair.s < DEGENERATE_GAP:
        raise DegenerateInterval(f"interval ({pair.s}, {pair.t}) is shorter than {DEGENERATE_GAP}")
    if path.antiderivative is not None:
        diff = accumulate(path, pair.t) - accumulate(path, pair.s)
    else:
        # integrate directly over [s, t]; avoids cancellation for short intervals
        diff = integrate(path.matrix, pair.s, pair.t, path.jump_times)
    return SpdMatrix(diff)
