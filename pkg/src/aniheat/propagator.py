"""Pseudo-spectral application of W_{s,t} on a periodic grid, Duhamel solves,
PDE residuals and grid norms.

The box ``[-L/2, L/2)^n`` stands in for R^n. Propagation multiplies the
discrete Fourier coefficients by the exact symbol exp(-<(A(t) - A(s)) xi, xi>) on the grid
frequencies, so the semigroup law and mass conservation hold to roundoff.

Nyquist convention: a frequency index equal to -N/2 has no partner of opposite
sign, so cross terms ``xi_i xi_j`` (i != j) and odd-order derivatives treat the
Nyquist component as zero. This keeps every multiplier Hermitian (real output)
and keeps the quadratic form linear in the increment (exact semigroup).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import AniheatError, GridMismatch, InvalidExponent, NonUniformTimes, OrderTooHigh, SpectralLeakage
from .kernel import KernelParams, UNDERFLOW_EXPONENT, eval_kernel
from .spd_linalg import DiffusivityPath, as_pair, det_spd, increment, inverse_spd

LEAKAGE_RTOL = 1e-12
MAX_DERIVATIVE_ORDER = 4


@dataclass(frozen=True)
class Grid:
    dim: int
    n_points: int
    length: float

    def __post_init__(self):
        N = self.n_points
        if N < 8 or N & (N - 1):
            raise ValueError(f"points per axis must be a power of two >= 8, got {N}")
        if not self.length > 0:
            raise ValueError(f"box length must be positive, got {self.length}")
        if not 1 <= self.dim <= 8:
            raise ValueError(f"dimension must be in 1..8, got {self.dim}")

    @property
    def spacing(self) -> float:
        return self.length / self.n_points

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    @property
    def shape(self) -> tuple:
        return (self.n_points,) * self.dim

    def axis(self) -> np.ndarray:
        return -0.5 * self.length + self.spacing * np.arange(self.n_points)

    def coordinates(self) -> list:
        """Broadcastable coordinate arrays, one per axis."""
        x = self.axis()
        return [x.reshape([-1 if k == i else 1 for k in range(self.dim)]) for i in range(self.dim)]

    def points(self) -> np.ndarray:
        """All grid points as an array of shape ``shape + (dim,)``."""
        return np.stack(np.meshgrid(*([self.axis()] * self.dim), indexing="ij"), axis=-1)

    def frequencies(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_points, d=self.spacing)

    def _broadcast(self, v: np.ndarray, i: int) -> np.ndarray:
        return v.reshape([-1 if k == i else 1 for k in range(self.dim)])

    def _frequencies_odd(self) -> np.ndarray:
        xi = self.frequencies()
        xi[self.n_points // 2] = 0.0
        return xi

    def quadratic_form(self, m) -> np.ndarray:
        """<m xi, xi> on the grid frequencies (Nyquist convention above)."""
        m = np.asarray(m, dtype=float)
        xi = self.frequencies()
        xo = self._frequencies_odd()
        out = np.zeros(self.shape)
        for i in range(self.dim):
            out = out + m[i, i] * self._broadcast(xi * xi, i)
            for j in range(i + 1, self.dim):
                if m[i, j] != 0.0:
                    out = out + 2.0 * m[i, j] * self._broadcast(xo, i) * self._broadcast(xo, j)
        return out

    def derivative_multiplier(self, beta: Sequence[int]) -> np.ndarray:
        """Fourier multiplier of d^beta, i.e. prod_i (i xi_i)^{beta_i}."""
        out = np.ones(self.shape, dtype=complex)
        xi = self.frequencies()
        xo = self._frequencies_odd()
        for i, b in enumerate(beta):
            if b:
                base = xo if b % 2 else xi
                out = out * self._broadcast((1j * base) ** b, i)
        return out


@dataclass(frozen=True, eq=False)
class GridField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.size != self.grid.n_points ** self.grid.dim:
            raise GridMismatch(f"expected {self.grid.n_points ** self.grid.dim} values, got {v.size}")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: Grid) -> "GridField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "GridField":
        """Sample ``fn(*coords)`` where coords are broadcastable axis arrays."""
        return cls(grid, np.broadcast_to(fn(*grid.coordinates()), grid.shape))

    def __add__(self, other):
        _check_same_grid(self, other)
        return GridField(self.grid, self.values + other.values)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return GridField(self.grid, self.values - other.values)

    def __mul__(self, c):
        return GridField(self.grid, self.values * float(c))

    __rmul__ = __mul__

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))


def _check_same_grid(a: GridField, b: GridField):
    if a.grid != b.grid:
        raise GridMismatch(f"grids differ: {a.grid} vs {b.grid}")


@dataclass(frozen=True)
class DeltaDatum:
    """Dirac mass ``weight * delta_0`` as an initial datum on ``grid``."""

    grid: Grid
    weight: float = 1.0


@dataclass(frozen=True)
class SeminormIndex:
    alpha: tuple
    beta: tuple

    def __post_init__(self):
        a, b = tuple(int(x) for x in self.alpha), tuple(int(x) for x in self.beta)
        if len(a) != len(b):
            raise ValueError("alpha and beta must have the same length")
        if any(x < 0 for x in a + b):
            raise ValueError("multi-index entries must be nonnegative")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @property
    def label(self) -> str:
        return "x^" + "".join(map(str, self.alpha)) + "_d^" + "".join(map(str, self.beta))


class Trajectory:
    """Append-only sequence of states at strictly increasing times on one grid."""

    def __init__(self, times=(), states=()):
        self.times: list = []
        self.states: list = []
        for t, u in zip(times, states, strict=True):
            self.append(t, u)

    def append(self, t: float, u: GridField):
        t = float(t)
        if t < 0 or (self.times and t <= self.times[-1]):
            raise ValueError(f"times must be nonnegative and strictly increasing, got {t}")
        if self.states and u.grid != self.states[0].grid:
            raise GridMismatch("all trajectory states must share one grid")
        self.times.append(t)
        self.states.append(u)

    @property
    def grid(self) -> Grid:
        return self.states[0].grid

    def __len__(self):
        return len(self.times)

    def __iter__(self):
        return iter(zip(self.times, self.states))

    def _combine(self, other: "Trajectory", op) -> "Trajectory":
        if list(self.times) != list(other.times):
            raise GridMismatch("trajectories are stored at different times")
        return Trajectory(self.times, [op(a, b) for a, b in zip(self.states, other.states)])

    def __add__(self, other: "Trajectory") -> "Trajectory":
        return self._combine(other, lambda a, b: a + b)

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        return self._combine(other, lambda a, b: a - b)

    def __mul__(self, c) -> "Trajectory":
        return Trajectory(self.times, [u * c for u in self.states])

    __rmul__ = __mul__

    def sup(self) -> float:
        return max(u.sup() for u in self.states)


# ---------------------------------------------------------------------------
# spectral operations


def _real_or_raise(z: np.ndarray, reference: float) -> np.ndarray:
    leak = float(np.max(np.abs(z.imag))) if z.size else 0.0
    if leak > LEAKAGE_RTOL * max(reference, 1e-300):
        raise SpectralLeakage(f"imaginary residue {leak:.3e} exceeds {LEAKAGE_RTOL:g} of field norm {reference:.3e}")
    return z.real


def symbol_on_grid(grid: Grid, m) -> np.ndarray:
    """exp(-<m xi, xi>) on the grid frequencies, underflow flushed to 0."""
    q = -grid.quadratic_form(m)
    return np.where(q < UNDERFLOW_EXPONENT, 0.0, np.exp(np.maximum(q, UNDERFLOW_EXPONENT)))


def apply_symbol(u: GridField, symbol: np.ndarray) -> GridField:
    spec = np.fft.fftn(u.values) * symbol
    return GridField(u.grid, _real_or_raise(np.fft.ifftn(spec), u.sup()))


def apply_propagator(u: GridField, pair, path: DiffusivityPath) -> GridField:
    """W_{s,t} u; the identity when s == t."""
    pair = as_pair(pair)
    if pair.s == pair.t:
        return u
    inc = increment(path, pair)
    return apply_symbol(u, symbol_on_grid(u.grid, inc.values))


def spectral_derivative(u: GridField, beta: Sequence[int]) -> GridField:
    if len(beta) != u.grid.dim:
        raise ValueError(f"beta must have {u.grid.dim} entries")
    if not any(beta):
        return u
    mult = u.grid.derivative_multiplier(beta)
    spec = np.fft.fftn(u.values) * mult
    # roundoff in the imaginary part scales with the largest multiplier entry
    return GridField(u.grid, _real_or_raise(np.fft.ifftn(spec), u.sup() * float(np.max(np.abs(mult)))))


def apply_operator(u: GridField, a) -> GridField:
    """L u = sum_ij a_ij d_i d_j u, spectrally."""
    mult = u.grid.quadratic_form(a)
    spec = -np.fft.fftn(u.values) * mult
    return GridField(u.grid, _real_or_raise(np.fft.ifftn(spec), u.sup() * float(np.max(np.abs(mult)))))


def sample_kernel(grid: Grid, path: DiffusivityPath, pair, weight: float = 1.0) -> GridField:
    kp = KernelParams.from_path(path, pair)
    return GridField(grid, weight * eval_kernel(grid.points(), kp))


# ---------------------------------------------------------------------------
# Duhamel


def duhamel_nodes(t: float, path: DiffusivityPath, nodes: int) -> tuple:
    """Composite Gauss-Legendre nodes and weights on [0, t], split at jump times."""
    if nodes < 1:
        raise ValueError("nodes must be >= 1")
    x, w = np.polynomial.legendre.leggauss(nodes)
    edges = [0.0] + [b for b in path.breakpoints() if 0.0 < b < t] + [t]
    s_all, w_all = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        s_all.append(0.5 * (lo + hi) + 0.5 * (hi - lo) * x)
        w_all.append(0.5 * (hi - lo) * w)
    return np.concatenate(s_all), np.concatenate(w_all)


def _as_field(v, grid: Grid) -> GridField:
    return v if isinstance(v, GridField) else GridField(grid, v)


def duhamel_solve(
    u0,
    source: Callable[[float], GridField] | None,
    t: float,
    path: DiffusivityPath,
    nodes: int = 8,
) -> GridField:
    """u(t) = W_{0,t} u0 + int_0^t W_{s,t} f(s) ds.

    ``u0`` is a :class:`GridField` or a :class:`DeltaDatum`; ``source`` may be
    None for f = 0.
    """
    t = float(t)
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    if isinstance(u0, DeltaDatum):
        grid = u0.grid
        out = sample_kernel(grid, path, (0.0, t), u0.weight)
    else:
        grid = u0.grid
        out = apply_propagator(u0, (0.0, t), path)
    if source is None:
        return out
    acc = np.array(out.values)
    for s, w in zip(*duhamel_nodes(t, path, nodes)):
        f = _as_field(source(float(s)), grid)
        acc += w * apply_propagator(f, (float(s), t), path).values
    return GridField(grid, acc)


def solve_trajectory(
    u0,
    times: Sequence[float],
    path: DiffusivityPath,
    source: Callable[[float], GridField] | None = None,
    nodes: int = 8,
) -> Trajectory:
    """States at ``times``. Homogeneous runs step with the semigroup law.

    A library error raised while computing a state gets the attribute ``t``
    naming that state's time.
    """
    times = [float(t) for t in times]
    if not times:
        raise ValueError("time grid is empty")
    traj = Trajectory()
    prev_t, prev = None, None
    for t in times:
        if t == 0.0:
            if isinstance(u0, DeltaDatum):
                raise ValueError("a delta initial datum cannot be stored at t = 0")
            state = u0
        else:
            try:
                if source is not None:
                    state = duhamel_solve(u0, source, t, path, nodes)
                elif prev is None:
                    state = duhamel_solve(u0, None, t, path)
                else:
                    state = apply_propagator(prev, (prev_t, t), path)
            except AniheatError as exc:
                exc.t = t
                raise
        traj.append(t, state)
        prev_t, prev = t, state
    return traj


def pde_residual(
    traj: Trajectory,
    index: int,
    source: Callable[[float], GridField] | None,
    path: DiffusivityPath,
) -> GridField:
    """Centered-difference residual d_t u - L_t u - f at an interior time index."""
    if not 0 < index < len(traj) - 1:
        raise IndexError(f"index {index} has no neighbours in a trajectory of length {len(traj)}")
    t_prev, t, t_next = traj.times[index - 1 : index + 2]
    dt = t - t_prev
    if abs((t_next - t) - dt) > 1e-12:
        raise NonUniformTimes(f"steps {dt!r} and {t_next - t!r} differ")
    u = traj.states[index]
    dudt = (traj.states[index + 1].values - traj.states[index - 1].values) / (t_next - t_prev)
    res = dudt - apply_operator(u, path.matrix(t)).values
    if source is not None:
        res = res - _as_field(source(t), u.grid).values
    return GridField(u.grid, res)


# ---------------------------------------------------------------------------
# norms


def lq_norm(u: GridField, q: float) -> float:
    q = float(q)
    if not q >= 1.0:
        raise InvalidExponent(f"exponent must be >= 1, got {q}")
    a = np.abs(u.values)
    if math.isinf(q):
        return float(np.max(a))
    if q == 1.0:
        return float(u.grid.cell_volume * np.sum(a))
    # scale by the max to keep |u|^q representable
    m = float(np.max(a))
    if m == 0.0:
        return 0.0
    return m * float(u.grid.cell_volume * np.sum((a / m) ** q)) ** (1.0 / q)


def seminorm(u: GridField, idx: SeminormIndex) -> float:
    """max over the grid of |x^alpha d^beta u|."""
    if len(idx.alpha) != u.grid.dim:
        raise ValueError(f"multi-indices must have {u.grid.dim} entries")
    if max(idx.beta, default=0) > MAX_DERIVATIVE_ORDER:
        raise OrderTooHigh(f"derivative order {max(idx.beta)} exceeds {MAX_DERIVATIVE_ORDER}")
    v = spectral_derivative(u, idx.beta).values
    for x, a in zip(u.grid.coordinates(), idx.alpha):
        if a:
            v = v * x ** a
    return float(np.max(np.abs(v)))


def positivity_min(u: GridField) -> float:
    return float(np.min(u.values))


def gaussian_field(grid: Grid, covariance, mean=None, mass: float = 1.0) -> GridField:
    """Samples of ``mass`` times the normal density N(mean, covariance)."""
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    mean = np.zeros(grid.dim) if mean is None else np.asarray(mean, dtype=float)
    pts = grid.points() - mean
    inv = inverse_spd(cov).values
    quad = np.einsum("...i,ij,...j->...", pts, inv, pts)
    norm = mass / math.sqrt((2.0 * math.pi) ** grid.dim * det_spd(cov))
    return GridField(grid, norm * np.exp(-0.5 * quad))
