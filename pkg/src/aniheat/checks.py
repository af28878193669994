"""Invariant checks shared by ``aniheat verify`` and the acceptance suite.

Low-level helpers return raw numbers (errors, slopes, tail masses); the
battery at the bottom turns them into pass/fail rows for one scenario.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc

from .errors import AniheatError
from .estimates import (
    DecayData,
    ExponentTriple,
    check_young,
    decay_bound,
    energy_trace,
    norm_estimate,
    source_beta_norm,
)
from .kernel import KernelParams, eval_kernel, kernel_lp_norm
from .propagator import (
    DeltaDatum,
    Grid,
    GridField,
    apply_propagator,
    lq_norm,
    pde_residual,
    solve_trajectory,
)
from .spd_linalg import DiffusivityPath, increment
from .veryweak import fit_growth_slope

TAIL_TOL = 1e-12
MASS_TOL = 1e-8
SEMIGROUP_TOL = 1e-12
NORM_IDENTITY_RTOL = 1e-6
ESTIMATE_RTOL = 1e-10
POSITIVITY_RTOL = 1e-12
RESIDUAL_SLOPE = (1.9, 2.1)
DELTA_MIN_SLOPE = 0.9
DELTA_EPS = (1e-1, 1e-2, 1e-3, 1e-4)


# ---------------------------------------------------------------------------
# helpers


def gaussian_tail(grid: Grid, covariance, mean=None) -> float:
    """Union bound on the mass of N(mean, covariance) outside the box."""
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    mean = np.zeros(grid.dim) if mean is None else np.asarray(mean, dtype=float)
    total = 0.0
    for i in range(grid.dim):
        d = 0.5 * grid.length - abs(mean[i])
        if d <= 0:
            return 1.0
        total += float(erfc(d / math.sqrt(2.0 * cov[i, i])))
    return total


def field_edge_fraction(u: GridField) -> float:
    """Share of the L^1 mass of ``u`` outside the central half of the box."""
    a = np.abs(u.values)
    total = float(a.sum())
    if total == 0.0:
        return 0.0
    inner = np.ones(u.grid.shape, dtype=bool)
    for i, x in enumerate(u.grid.coordinates()):
        inner &= np.abs(x) < 0.25 * u.grid.length
    return float(a[~inner].sum()) / total


def band_limited_field(grid: Grid, rng: np.random.Generator, max_mode: int | None = None) -> GridField:
    """Random real trigonometric polynomial with modes |k_i| <= max_mode, sup norm 1."""
    max_mode = grid.n_points // 8 if max_mode is None else max_mode
    spec = np.zeros(grid.shape, dtype=complex)
    idx = tuple(np.r_[0 : max_mode + 1, -max_mode:0] for _ in range(grid.dim))
    block = rng.normal(size=(2 * max_mode + 1,) * grid.dim) + 1j * rng.normal(size=(2 * max_mode + 1,) * grid.dim)
    spec[np.ix_(*idx)] = block
    v = np.fft.ifftn(spec).real
    return GridField(grid, v / np.max(np.abs(v)))


def local_rule(covariance, half_width: float = 10.0, per_sigma: float = 2.0) -> tuple:
    """Riemann nodes and weights adapted to N(0, covariance).

    Nodes lie on a lattice along the eigenvectors, spaced sigma_i / per_sigma
    out to +-half_width sigma_i on each principal axis.
    """
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    lam, Q = np.linalg.eigh(cov)
    sig = np.sqrt(lam)
    m = int(math.ceil(half_width * per_sigma))
    base = np.arange(-m, m + 1) / per_sigma
    mesh = np.meshgrid(*[s * base for s in sig], indexing="ij")
    Y = np.stack([g.ravel() for g in mesh], axis=-1)
    return Y @ Q.T, float(np.prod(sig / per_sigma))


def riemann_mass(grid: Grid, kp: KernelParams) -> float:
    return float(np.sum(eval_kernel(grid.points(), kp)) * grid.cell_volume)


def norm_identity_error(kp: KernelParams, p: float) -> float:
    """Relative gap between kernel_lp_norm and direct quadrature of |W|^p."""
    exact = kernel_lp_norm(p, kp)
    cov = 2.0 * kp.increment.values
    if math.isinf(p):
        pts, _ = local_rule(cov)
        direct = float(np.max(eval_kernel(pts, kp)))
    else:
        pts, w = local_rule(cov / p)
        direct = float(np.sum(eval_kernel(pts, kp) ** p) * w) ** (1.0 / p)
    return abs(direct - exact) / exact


def semigroup_error(u: GridField, path: DiffusivityPath, r: float, s: float, t: float) -> float:
    """sup |W_{s,t} W_{r,s} u - W_{r,t} u| relative to sup |u|."""
    composed = apply_propagator(apply_propagator(u, (r, s), path), (s, t), path)
    direct = apply_propagator(u, (r, t), path)
    return (composed - direct).sup() / max(u.sup(), 1e-300)


def residual_study(u0, path: DiffusivityPath, t_c: float, dt0: float, halvings: int = 4) -> tuple:
    """Residual sup norms at t_c for dt0 / 2^k, and their log-log slope."""
    dts, res = [], []
    for k in range(halvings + 1):
        dt = dt0 / 2**k
        traj = solve_trajectory(u0, [t_c - dt, t_c, t_c + dt], path)
        dts.append(dt)
        res.append(pde_residual(traj, 1, None, path).sup())
    dts, res = np.array(dts), np.array(res)
    slope = float(np.polyfit(np.log(dts), np.log(res), 1)[0])
    return slope, dts, res


def probe_function(dim: int) -> Callable:
    """Smooth Gaussian bump off the origin, so both delta-limit terms matter."""
    c = np.full(dim, 0.5 / math.sqrt(dim))

    def phi(x):
        d = np.asarray(x) - c
        return np.exp(-0.5 * np.sum(d * d, axis=-1))

    return phi


def delta_limit_errors(path: DiffusivityPath, anchor: float, side: str, eps_list=DELTA_EPS, phi=None) -> np.ndarray:
    """|<W(.; s, s + e), phi> - phi(0)| (side "forward", s = anchor) or
    |<W(.; t - e, t), phi> - phi(0)| (side "backward", t = anchor)."""
    phi = phi or probe_function(path.dim)
    phi0 = float(phi(np.zeros(path.dim)))
    errs = []
    for e in eps_list:
        pair = (anchor, anchor + e) if side == "forward" else (anchor - e, anchor)
        kp = KernelParams.from_path(path, pair)
        pts, w = local_rule(2.0 * kp.increment.values)
        errs.append(abs(float(np.sum(eval_kernel(pts, kp) * phi(pts)) * w) - phi0))
    return np.array(errs)


def delta_limit_slope(errors: np.ndarray, eps_list=DELTA_EPS) -> float:
    return -fit_growth_slope(np.asarray(eps_list), errors)[0]


# ---------------------------------------------------------------------------
# battery


@dataclass
class CheckResult:
    name: str
    status: str  # "pass", "fail" or "skip"
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status != "fail"


@dataclass
class Scenario:
    grid: Grid
    path: DiffusivityPath
    initial: object  # GridField or DeltaDatum
    times: Sequence[float]
    source: Callable | None = None
    nodes: int = 8
    norm_exponents: Sequence[float] = (1.0, 2.0, math.inf)
    energy_exponents: Sequence[float] = (1.5, 2.0, 3.0, 4.0)
    decay: dict | None = None
    initial_gaussian: tuple | None = None  # (covariance, mean) when known in closed form
    source_gaussian: tuple | None = None
    nonnegative_data: bool = False
    warnings: list = field(default_factory=list)


def scenario_tail(sc: Scenario) -> float:
    """Bound on solution mass beyond the box at the final time."""
    T = max(sc.times)
    # increment() verifies that the accumulated coefficient is SPD, so a collapsing coefficient raises here
    acc = increment(sc.path, (0.0, T)).values if T > 0 else np.zeros((sc.grid.dim,) * 2)
    tails = []
    if isinstance(sc.initial, DeltaDatum):
        tails.append(gaussian_tail(sc.grid, 2.0 * acc))
    elif sc.initial_gaussian is not None:
        cov, mean = sc.initial_gaussian
        tails.append(gaussian_tail(sc.grid, np.asarray(cov) + 2.0 * acc, mean))
    else:
        # data of unknown shape: edge mass plus kernel spread past a quarter box
        quarter = Grid(sc.grid.dim, sc.grid.n_points, 0.5 * sc.grid.length)
        tails.append(field_edge_fraction(sc.initial) + gaussian_tail(quarter, 2.0 * acc))
    if sc.source_gaussian is not None:
        cov, mean = sc.source_gaussian
        tails.append(gaussian_tail(sc.grid, np.asarray(cov) + 2.0 * acc, mean))
    return max(tails)


def _default_alpha(p: float, n: int) -> float | None:
    k = n / 2.0 if math.isinf(p) else n * (p - 1.0) / (2.0 * p)
    if k == 0:
        return 2.0
    if 1.0 / k <= 1.0:
        return None
    return 0.5 * (1.0 + 1.0 / k) if 1.0 / k < 3.0 else 2.0


def run_battery(sc: Scenario, rng: np.random.Generator) -> list:
    """Run every check on one scenario; the returned rows never raise."""
    rows = []

    def guarded(name, fn):
        try:
            rows.append(fn())
        except AniheatError as exc:
            rows.append(CheckResult(name, "fail", f"{type(exc).__name__}: {exc}"))

    times = [float(t) for t in sc.times]
    positive = [t for t in times if t > 0]
    T = max(times)
    n = sc.grid.dim

    def tail():
        val = scenario_tail(sc)
        if val > TAIL_TOL:
            sc.warnings.append(f"tail mass bound {val:.3e} exceeds {TAIL_TOL:g}: enlarge the box")
            return CheckResult("tail", "fail", f"tail mass bound {val:.3e} > {TAIL_TOL:g}")
        return CheckResult("tail", "pass", f"tail mass bound {val:.3e}")

    def mass():
        if not positive:
            return CheckResult("mass", "skip", "no positive time")
        probes = [T] + ([positive[0]] if isinstance(sc.initial, DeltaDatum) else [])
        worst = max(abs(riemann_mass(sc.grid, KernelParams.from_path(sc.path, (0.0, t))) - 1.0) for t in probes)
        return CheckResult("mass", "pass" if worst <= MASS_TOL else "fail", f"|mass - 1| = {worst:.3e}")

    def semigroup():
        if T <= 0:
            return CheckResult("semigroup", "skip", "no positive time")
        worst = 0.0
        for _ in range(10):
            r, s, t = np.sort(rng.uniform(0.0, T, size=3))
            if t - s < 1e-6 or s - r < 1e-6:
                continue
            worst = max(worst, semigroup_error(band_limited_field(sc.grid, rng), sc.path, r, s, t))
        return CheckResult("semigroup", "pass" if worst <= SEMIGROUP_TOL else "fail", f"max rel error {worst:.3e}")

    def residual():
        if not positive:
            return CheckResult("residual", "skip", "no positive time")
        t_c = positive[len(positive) // 2]
        u0 = sc.initial
        slope, dts, res = residual_study(u0, sc.path, t_c, t_c / 8.0)
        lo, hi = RESIDUAL_SLOPE
        ok = lo <= slope <= hi
        return CheckResult("residual", "pass" if ok else "fail", f"slope {slope:.3f} at t={t_c:g}, residual {res[-1]:.2e}")

    def norm_identity():
        if T <= 0:
            return CheckResult("norm_identity", "skip", "no positive time")
        kp = KernelParams.from_path(sc.path, (0.0, T))
        worst = max(norm_identity_error(kp, p) for p in (1.0, 1.5, 2.0, 3.0, math.inf))
        ok = worst <= NORM_IDENTITY_RTOL
        return CheckResult("norm_identity", "pass" if ok else "fail", f"max rel error {worst:.3e}")

    def young():
        if T <= 0:
            return CheckResult("young", "skip", "no positive time")
        fields = [band_limited_field(sc.grid, rng) for _ in range(3)]
        if isinstance(sc.initial, GridField):
            fields.append(sc.initial)
        bad, worst = 0, -math.inf
        for k in range(20):
            tr = ExponentTriple.random(rng)
            row = check_young(fields[k % len(fields)], tr, (0.0, T), sc.path)
            bad += not row.satisfied
            if row.bound > 0:
                worst = max(worst, row.lhs / row.bound - 1.0)
        return CheckResult("young", "pass" if bad == 0 else "fail", f"{bad} violations, max lhs/bound - 1 = {worst:.3e}")

    traj_box = {}

    def solve():
        if "traj" not in traj_box:
            traj_box["traj"] = solve_trajectory(sc.initial, times, sc.path, sc.source, sc.nodes)
        return traj_box["traj"]

    def energy():
        if sc.source is not None:
            return CheckResult("energy", "skip", "energy monotonicity needs f = 0")
        traj = solve()
        bad = [p for p in sc.energy_exponents if not energy_trace(traj, p).is_nonincreasing(ESTIMATE_RTOL)]
        return CheckResult("energy", "fail" if bad else "pass", f"increasing for p in {bad}" if bad else "nonincreasing")

    def norm_est():
        if isinstance(sc.initial, DeltaDatum):
            return CheckResult("norm_estimate", "skip", "delta datum has no finite L^q norm")
        traj = solve()
        bad, worst = 0, -math.inf
        for q in sc.norm_exponents:
            for t, u in traj:
                lhs = lq_norm(u, q)
                rhs = norm_estimate(sc.initial, sc.source, t, sc.path, sc.nodes, q)
                bad += lhs > rhs * (1.0 + ESTIMATE_RTOL)
                worst = max(worst, lhs - rhs)
        return CheckResult("norm_estimate", "fail" if bad else "pass", f"{bad} violations, max lhs - rhs = {worst:.3e}")

    def decay():
        if isinstance(sc.initial, DeltaDatum):
            return CheckResult("decay", "skip", "delta datum has no finite L^q norm")
        opts = dict(sc.decay or {})
        q, r = float(opts.get("q", 1.0)), float(opts.get("r", 2.0))
        tr = ExponentTriple.from_qr(q, r)
        alpha = opts.get("alpha") or _default_alpha(tr.p, n)
        if alpha is None:
            return CheckResult("decay", "skip", f"no admissible alpha for p={tr.p:g}, n={n}")
        dd = DecayData(sc.path, float(alpha), opts.get("gamma"))
        traj = solve()
        u0q = lq_norm(sc.initial, q)
        bad = 0
        for t, u in traj:
            if t <= 0:
                continue
            fb = source_beta_norm(sc.source, t, sc.path, sc.nodes, q, dd.beta)
            b = decay_bound(t, tr, dd, u0q, fb)
            lhs = lq_norm(u, r)
            bad += lhs > b.value * (1.0 + 1e-8)
            if b.simplified is not None:
                bad += lhs > b.simplified * (1.0 + 1e-8)
        return CheckResult("decay", "fail" if bad else "pass", f"{bad} violations over {len(positive)} times")

    def positivity():
        if not sc.nonnegative_data:
            return CheckResult("positivity", "skip", "data not known to be nonnegative")
        traj = solve()
        worst = min(float(np.min(u.values)) / max(u.sup(), 1e-300) for u in traj.states)
        ok = worst >= -POSITIVITY_RTOL
        return CheckResult("positivity", "pass" if ok else "fail", f"min / sup = {worst:.3e}")

    def delta_limits():
        if T <= 0:
            return CheckResult("delta_limits", "skip", "no positive time")
        eps = [e for e in DELTA_EPS if e <= T]
        if len(eps) < 3:
            return CheckResult("delta_limits", "skip", "final time too small for the eps ladder")
        slopes = [
            delta_limit_slope(delta_limit_errors(sc.path, times[0], "forward", eps), eps),
            delta_limit_slope(delta_limit_errors(sc.path, T, "backward", eps), eps),
        ]
        ok = min(slopes) >= DELTA_MIN_SLOPE
        return CheckResult("delta_limits", "pass" if ok else "fail", f"slopes {slopes[0]:.3f} / {slopes[1]:.3f}")

    for name, fn in [
        ("tail", tail),
        ("mass", mass),
        ("semigroup", semigroup),
        ("residual", residual),
        ("norm_identity", norm_identity),
        ("young", young),
        ("energy", energy),
        ("norm_estimate", norm_est),
        ("decay", decay),
        ("positivity", positivity),
        ("delta_limits", delta_limits),
    ]:
        guarded(name, fn)
    return rows


def format_table(rows: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in rows)
    return "\n".join(f"{r.name:<{width}}  {r.status.upper():<4}  {r.detail}" for r in rows)
