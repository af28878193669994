"""Checkable forms of the operator, energy and decay estimates."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InadmissibleExponents, InvalidExponent, ZeroAccumulation
from .kernel import KernelParams, kernel_lp_norm
from .propagator import GridField, Trajectory, apply_propagator, duhamel_nodes, lq_norm
from .spd_linalg import DiffusivityPath, integrate, min_eigenvalue

BOUND_RTOL = 1e-8


def _recip(x: float) -> float:
    return 0.0 if math.isinf(x) else 1.0 / x


@dataclass(frozen=True)
class ExponentTriple:
    """(p, q, r) in [1, inf]^3 with 1/p + 1/q = 1/r + 1."""

    p: float
    q: float
    r: float

    def __post_init__(self):
        for name in "pqr":
            v = float(getattr(self, name))
            if not v >= 1.0:
                raise InvalidExponent(f"{name} = {v} is below 1")
            object.__setattr__(self, name, v)
        gap = _recip(self.p) + _recip(self.q) - _recip(self.r) - 1.0
        if abs(gap) > 1e-12:
            raise InvalidExponent(f"1/p + 1/q - 1/r - 1 = {gap:.3e} for {self}")

    @classmethod
    def from_qr(cls, q: float, r: float) -> "ExponentTriple":
        """Complete (q, r) with the p forced by the Young relation (needs r >= q)."""
        inv_p = 1.0 + _recip(r) - _recip(q)
        if not 0.0 <= inv_p <= 1.0 + 1e-15:
            raise InvalidExponent(f"no admissible p for q={q}, r={r}")
        p = math.inf if inv_p <= 0.0 else 1.0 / min(inv_p, 1.0)
        return cls(p, q, r)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "ExponentTriple":
        a = rng.uniform(0.0, 1.0)          # 1/q
        b = rng.uniform(0.0, a)            # 1/r <= 1/q
        q = math.inf if a == 0.0 else 1.0 / a
        r = math.inf if b == 0.0 else 1.0 / b
        return cls.from_qr(q, r)


@dataclass(frozen=True)
class BoundRow:
    t: float
    lhs: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.lhs

    @property
    def satisfied(self) -> bool:
        return self.lhs <= self.bound * (1.0 + BOUND_RTOL)


def write_bound_csv(path, rows: Sequence[BoundRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "lhs", "bound", "margin", "satisfied"])
        for row in rows:
            w.writerow([repr(row.t), repr(row.lhs), repr(row.bound), repr(row.margin), str(row.satisfied).lower()])


def young_bound(tr: ExponentTriple, pair, path: DiffusivityPath) -> float:
    """Operator-norm bound of W_{s,t}: L^q -> L^r, equal to ||W(.; s, t)||_p."""
    return kernel_lp_norm(tr.p, KernelParams.from_path(path, pair))


def check_young(v: GridField, tr: ExponentTriple, pair, path: DiffusivityPath) -> BoundRow:
    lhs = lq_norm(apply_propagator(v, pair, path), tr.r)
    vq = lq_norm(v, tr.q)
    bound = young_bound(tr, pair, path) * vq if vq > 0 else 0.0
    t = pair[1] if isinstance(pair, tuple) else pair.t
    return BoundRow(float(t), lhs, bound)


@dataclass(frozen=True)
class EnergyTrace:
    times: np.ndarray
    values: np.ndarray
    p: float

    def is_nonincreasing(self, rtol: float = 1e-10) -> bool:
        v = self.values
        return bool(np.all(v[1:] <= v[:-1] * (1.0 + rtol)))


def energy_trace(traj: Trajectory, p: float) -> EnergyTrace:
    """E(t_k) = ||u(t_k)||_p^p for every stored state."""
    p = float(p)
    if not 1.0 < p < math.inf:
        raise InvalidExponent(f"energy exponent must lie in (1, inf), got {p}")
    vals = np.array([lq_norm(u, p) ** p for u in traj.states])
    return EnergyTrace(np.array(traj.times, dtype=float), vals, p)


def norm_estimate(u0: GridField, source, t: float, path: DiffusivityPath, nodes: int, q: float) -> float:
    """Right-hand side ||u0||_q + int_0^t ||f(s)||_q ds, using the solver's s-nodes."""
    total = lq_norm(u0, q)
    if source is None or t == 0:
        return total
    for s, w in zip(*duhamel_nodes(t, path, nodes)):
        f = source(float(s))
        total += w * lq_norm(f if isinstance(f, GridField) else GridField(u0.grid, f), q)
    return total


# ---------------------------------------------------------------------------
# decay


@dataclass
class DecayData:
    """Lower-eigenvalue data of a path: F(t) = int_0^t lambda_min(a(tau)) dtau.

    ``alpha`` and its conjugate ``beta`` are the Hoelder pair applied to the
    source term; ``gamma`` is an optional positive lower bound on lambda_min.
    """

    path: DiffusivityPath
    alpha: float = 2.0
    gamma: float | None = None

    def __post_init__(self):
        if not 1.0 < self.alpha < math.inf:
            raise InvalidExponent(f"alpha must lie in (1, inf), got {self.alpha}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        self._lower_cache: dict = {}

    @property
    def beta(self) -> float:
        return self.alpha / (self.alpha - 1.0)

    @property
    def dim(self) -> int:
        return self.path.dim

    def lambda_min(self, tau: float) -> float:
        return min_eigenvalue(self.path.matrix(tau))

    def lower_integral_between(self, s: float, t: float) -> float:
        """F(t) - F(s), integrated directly over [s, t]."""
        if t <= s:
            return 0.0
        if self.path.kind == "constant":
            return self.lambda_min(0.0) * (t - s)
        return float(integrate(self.lambda_min, s, t, self.path.breakpoints()))

    def lower_integral(self, t: float) -> float:
        t = float(t)
        if t not in self._lower_cache:
            self._lower_cache[t] = self.lower_integral_between(0.0, t)
        return self._lower_cache[t]


@dataclass(frozen=True)
class DecayBound:
    value: float
    simplified: float | None = None


def decay_constant(p: float, n: int) -> float:
    """C = 1 / (p^{n/2p} (4 pi)^{n(p-1)/2p})."""
    if math.isinf(p):
        return (4.0 * math.pi) ** (-n / 2.0)
    return 1.0 / (p ** (n / (2.0 * p)) * (4.0 * math.pi) ** (n * (p - 1.0) / (2.0 * p)))


def _decay_exponent(p: float, n: int) -> float:
    return n / 2.0 if math.isinf(p) else n * (p - 1.0) / (2.0 * p)


def _singular_integral(t: float, kappa: float, dd: DecayData) -> float:
    """int_0^t (F(t) - F(s))^{-kappa} ds for 0 <= kappa < 1.

    Substituting s = t - v^m with m = 1/(1 - kappa) gives the bounded integrand
    m * (mean of lambda_min over [t - w, t])^{-kappa} with w = v^m, because the
    Jacobian power v^{m-1} cancels w^{-kappa} exactly.
    """
    if kappa == 0.0:
        return t
    m = 1.0 / (1.0 - kappa)
    top = t ** (1.0 / m)

    def integrand(v):
        s = t - v ** m
        w = t - s  # the width actually represented in floating point
        mean = dd.lambda_min(t) if w <= 0.0 else dd.lower_integral_between(s, t) / w
        return m * mean ** (-kappa)

    kinks = [(t - b) ** (1.0 / m) for b in dd.path.breakpoints() if 0.0 < b < t]
    return float(integrate(integrand, 0.0, top, kinks, rtol=1e-9))


def decay_bound(
    t: float,
    tr: ExponentTriple,
    dd: DecayData,
    u0_q_norm: float,
    f_beta_norm: float = 0.0,
) -> DecayBound:
    """Bound on ||u(t)||_r from the lower eigenvalue integral F.

    value = C F(t)^{-k} ||u0||_q + C ||f||_{L^beta L^q} (int_0^t (F(t)-F(s))^{-k alpha} ds)^{1/alpha}
    with k = n(p-1)/2p. With ``dd.gamma`` set and no source the simplified
    form C gamma^{-k} t^{-k} ||u0||_q is returned as well.
    """
    n = dd.dim
    p = tr.p
    k = _decay_exponent(p, n)
    if not k * dd.alpha < 1.0:
        raise InadmissibleExponents(f"n(p-1)alpha = {2 * p * k * dd.alpha:.6g} is not below 2p = {2 * p:.6g}")
    lower = dd.lower_integral(t)
    if not lower > 0:
        raise ZeroAccumulation(f"F({t}) = {lower} is not positive")
    const = decay_constant(p, n)
    value = const * lower ** (-k) * u0_q_norm
    if f_beta_norm > 0:
        value += const * f_beta_norm * _singular_integral(t, k * dd.alpha, dd) ** (1.0 / dd.alpha)
    simplified = None
    if dd.gamma is not None and f_beta_norm == 0:
        simplified = const * dd.gamma ** (-k) * t ** (-k) * u0_q_norm
    return DecayBound(value, simplified)


def source_beta_norm(source: Callable, t: float, path: DiffusivityPath, nodes: int, q: float, beta: float) -> float:
    """|| ||f(.)||_q ||_{L^beta(0, t)} by the Duhamel s-quadrature."""
    if source is None:
        return 0.0
    total = 0.0
    for s, w in zip(*duhamel_nodes(t, path, nodes)):
        total += w * lq_norm(source(float(s)), q) ** beta
    return total ** (1.0 / beta)
