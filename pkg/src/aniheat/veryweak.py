"""Asymptotic scales, epsilon-nets and their classification, coefficient
mollification, per-epsilon solution nets and consistency checks.

The directed index set is a finite sample of real exponents; the default
scale is ``eps ** -ell``. A net is judged on a log-spaced epsilon grid, so
"negligible" always means negligible up to the most negative sampled exponent.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateFit, GridMismatch, NetMemberFailure, NotNormalizable, NotPositiveDefinite
from .propagator import (
    Grid,
    GridField,
    SeminormIndex,
    Trajectory,
    lq_norm,
    seminorm,
    solve_trajectory,
)
from .spd_linalg import DiffusivityPath, cholesky, jacobi_eigenvalues

log = logging.getLogger(__name__)

DEFAULT_EXPONENTS = (-6.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 6.0)
FIT_SKIP = 2
SPD_MARGIN = 1e-10
# a ratio counts as o(1) on the grid when it strictly decreases and its
# fitted power law decays at least this fast
LITTLE_O_SLOPE = 1e-2


def default_epsilons(count: int = 12, start: float = 1e-1, stop: float = 1e-4) -> np.ndarray:
    return np.logspace(math.log10(start), math.log10(stop), count)


def power_scale(ell: float, eps):
    return np.asarray(eps, dtype=float) ** (-ell)


# ---------------------------------------------------------------------------
# asymptotic scales


@dataclass(frozen=True)
class AsymptoticScale:
    exponents: tuple = DEFAULT_EXPONENTS
    scale_fn: Callable = power_scale

    def __post_init__(self):
        object.__setattr__(self, "exponents", tuple(sorted(float(e) for e in self.exponents)))

    def __call__(self, ell: float, eps):
        return np.asarray(self.scale_fn(ell, eps), dtype=float)

    @property
    def tested_order(self) -> float:
        """Decay order certified by "negligible": -(most negative exponent)."""
        return -self.exponents[0]


def _log_slope(eps: np.ndarray, values: np.ndarray) -> float:
    """Least-squares slope of log(values) against log(1/eps)."""
    x = np.log(1.0 / eps)
    y = np.log(values)
    return float(np.polyfit(x, y, 1)[0])


def _is_little_o_one(eps: np.ndarray, ratio: np.ndarray) -> bool:
    """ratio(eps) -> 0 as eps -> 0, judged on a decreasing eps grid."""
    if np.all(ratio == 0):
        return True
    if np.any(ratio < 0) or not np.all(np.isfinite(ratio)):
        return False
    steps_ok = np.all((ratio[1:] < ratio[:-1]) | (ratio[1:] == 0))
    if not steps_ok:
        return False
    pos = ratio > 0
    if pos.sum() < 2:
        return True
    return _log_slope(eps[pos], ratio[pos]) < -LITTLE_O_SLOPE


def _is_big_o_one(ratio: np.ndarray) -> bool:
    return bool(np.all(ratio[1:] <= ratio[:-1] * (1.0 + 1e-9)))


@dataclass
class ScaleReport:
    condition1: bool
    condition2: bool
    witnesses: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    out_of_window: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.condition1 and self.condition2


def validate_scale(scale: AsymptoticScale, eps_grid) -> ScaleReport:
    """Check both scale conditions on a sampled epsilon grid.

    Condition 1: l < j implies s_l = o(s_j).
    Condition 2: for each pair (l, j) some sampled h has s_h = o(s_l s_j).
    A pair whose product s_l s_j is already O(s_min) for the smallest
    sampled exponent needs a witness below the sampled window; such pairs are
    listed in ``out_of_window`` instead of failing. If no pair is checkable,
    condition 2 fails (empty witness set).
    """
    eps = np.sort(np.asarray(eps_grid, dtype=float))[::-1]
    if eps.size < 8:
        raise ValueError("need at least 8 epsilon samples")
    ex = scale.exponents
    vals = {ell: scale(ell, eps) for ell in ex}
    report = ScaleReport(True, True)
    for i, ell in enumerate(ex):
        for j in ex[i + 1 :]:
            ratio = vals[ell] / vals[j]
            if not _is_little_o_one(eps, ratio):
                report.condition1 = False
                report.failures.append(("condition1", ell, j))
    checked = 0
    lowest = vals[ex[0]]
    for i, ell in enumerate(ex):
        for j in ex[i:]:
            prod = vals[ell] * vals[j]
            if _is_big_o_one(prod / lowest):
                report.out_of_window.append((ell, j))
                continue
            checked += 1
            witness = next((h for h in reversed(ex) if _is_little_o_one(eps, vals[h] / prod)), None)
            if witness is None:
                report.condition2 = False
                report.failures.append(("condition2", ell, j))
            else:
                report.witnesses[(ell, j)] = witness
    if checked == 0:
        report.condition2 = False
        report.failures.append(("condition2", "empty witness set"))
    return report


# ---------------------------------------------------------------------------
# nets and their classification


@dataclass
class Net:
    """Members indexed by a decreasing epsilon grid in (0, 1)."""

    epsilons: np.ndarray
    members: list

    def __post_init__(self):
        eps = np.asarray(self.epsilons, dtype=float)
        if eps.ndim != 1 or len(eps) != len(self.members):
            raise GridMismatch("epsilon grid and members differ in length")
        if np.any(eps <= 0) or np.any(eps >= 1):
            raise ValueError("epsilons must lie in (0, 1)")
        order = np.argsort(-eps)
        self.epsilons = eps[order]
        self.members = [self.members[k] for k in order]

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(zip(self.epsilons, self.members))

    def map(self, fn) -> "Net":
        return Net(self.epsilons, [fn(e, m) for e, m in self])

    def __add__(self, other: "Net") -> "Net":
        _check_same_eps(self, other)
        return Net(self.epsilons, [a + b for a, b in zip(self.members, other.members)])

    def __sub__(self, other: "Net") -> "Net":
        _check_same_eps(self, other)
        return Net(self.epsilons, [a - b for a, b in zip(self.members, other.members)])


def _check_same_eps(a: Net, b: Net):
    if len(a) != len(b) or not np.allclose(a.epsilons, b.epsilons, rtol=1e-14, atol=0):
        raise GridMismatch("nets are sampled on different epsilon grids")


def constant_net(value, epsilons) -> Net:
    return Net(np.asarray(epsilons), [value] * len(epsilons))


def scaled_net(value, epsilons, power: float) -> Net:
    """Members eps**power * value (value a scalar, GridField or Trajectory)."""
    eps = np.asarray(epsilons, dtype=float)
    return Net(eps, [_scale_member(value, e ** power) for e in eps])


def _scale_member(value, c):
    if isinstance(value, Trajectory):
        return Trajectory(value.times, [c * u for u in value.states])
    return c * value


Seminorm = tuple  # (label, fn: member -> float)


def default_family(dim: int, max_order: int = 2) -> list:
    """L^inf, L^1, L^2 and every x^alpha d^beta seminorm with |alpha| + |beta| <= max_order."""
    fam = [
        ("Linf", lambda u: lq_norm(u, math.inf)),
        ("L1", lambda u: lq_norm(u, 1.0)),
        ("L2", lambda u: lq_norm(u, 2.0)),
    ]
    for idx in _multi_indices(2 * dim, max_order):
        if sum(idx) == 0:
            continue
        si = SeminormIndex(idx[:dim], idx[dim:])
        fam.append((si.label, lambda u, si=si: seminorm(u, si)))
    return fam


def _multi_indices(length: int, order: int):
    if length == 0:
        yield ()
        return
    for k in range(order + 1):
        for rest in _multi_indices(length - 1, order - k):
            yield (k,) + rest


def sup_family() -> list:
    return [("Linf", lambda u: lq_norm(u, math.inf))]


def _member_value(member, fn) -> float:
    if isinstance(member, Trajectory):
        return max(fn(u) for u in member.states)
    if isinstance(member, GridField):
        return fn(member)
    return abs(float(member))


def seminorm_table(net: Net, family=None) -> dict:
    """label -> array of seminorm values over the epsilon grid.

    Trajectory members take the sup over their stored times; scalar members
    use the absolute value (family ignored).
    """
    first = net.members[0]
    if not isinstance(first, (GridField, Trajectory)):
        return {"abs": np.array([abs(float(m)) for m in net.members])}
    if family is None:
        dim = first.grid.dim
        family = default_family(dim)
    return {label: np.array([_member_value(m, fn) for m in net.members]) for label, fn in family}


def fit_growth_slope(eps, values) -> tuple:
    """(slope, residual) of log N against log(1/eps); N ~ c eps^-slope."""
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    pos = values > 0
    if not np.any(pos):
        raise DegenerateFit("all seminorm values are zero")
    if pos.sum() < 2:
        raise DegenerateFit("fewer than two nonzero seminorm values")
    x = np.log(1.0 / eps[pos])
    y = np.log(values[pos])
    coef, res, *_ = np.polyfit(x, y, 1, full=True)
    resid = math.sqrt(float(res[0]) / pos.sum()) if len(res) else 0.0
    return float(coef[0]), resid


@dataclass
class NetClassification:
    verdict: str
    slopes: dict
    residuals: dict
    verdicts: dict
    witnesses: dict
    tested_order: float

    def describe(self) -> str:
        if self.verdict == "negligible":
            return f"negligible up to tested order {self.tested_order:g}"
        if self.verdict == "moderate":
            ell = min(self.witnesses.values())
            return f"moderate (witness exponent {ell:g})"
        return "neither moderate nor negligible on the sampled grid"


def classify_table(eps, table: dict, scale: AsymptoticScale) -> NetClassification:
    eps = np.asarray(eps, dtype=float)
    if eps.size < 8:
        raise ValueError("need at least 8 epsilon samples")
    if math.log10(eps.max() / eps.min()) < 3 - 1e-9:
        raise ValueError("epsilon grid must span at least 3 decades")
    win = slice(FIT_SKIP, None)
    e = eps[win]
    slopes, residuals, verdicts, witnesses = {}, {}, {}, {}
    for label, vals in table.items():
        v = np.asarray(vals, dtype=float)[win]
        try:
            slopes[label], residuals[label] = fit_growth_slope(e, v)
        except DegenerateFit:
            slopes[label], residuals[label] = -math.inf, 0.0
        if all(_is_little_o_one(e, v / scale(ell, e)) for ell in scale.exponents):
            verdicts[label] = "negligible"
            witnesses[label] = scale.exponents[-1]
            continue
        good = [ell for ell in scale.exponents if _is_little_o_one(e, scale(ell, e) * v)]
        if good:
            verdicts[label] = "moderate"
            witnesses[label] = max(good)
        else:
            verdicts[label] = "neither"
    kinds = set(verdicts.values())
    if kinds == {"negligible"}:
        verdict = "negligible"
    elif "neither" in kinds:
        verdict = "neither"
    else:
        verdict = "moderate"
    return NetClassification(verdict, slopes, residuals, verdicts, witnesses, scale.tested_order)


def classify_net(net: Net, scale: AsymptoticScale | None = None, family=None) -> NetClassification:
    """Fit growth slopes per seminorm and decide moderate / negligible / neither.

    The two largest epsilons are left out of fits and verdicts. Seminorms
    that vanish identically are negligible with slope ``-inf``.
    """
    scale = scale or AsymptoticScale()
    return classify_table(net.epsilons, seminorm_table(net, family), scale)


# ---------------------------------------------------------------------------
# mollification

_BUMP_X, _BUMP_W = np.polynomial.legendre.leggauss(160)


def _bump_raw(z):
    z = np.asarray(z, dtype=float)
    inside = np.abs(z) < 1.0
    out = np.zeros_like(z)
    zi = z[inside]
    out[inside] = np.exp(-1.0 / (1.0 - zi * zi))
    return out


_BUMP_MASS = float(np.sum(_BUMP_W * _bump_raw(_BUMP_X)))


@dataclass(frozen=True)
class MollifierSpec:
    """Unit-mass profile psi; psi_eps(t) = psi(t / eps) / eps."""

    profile: str = "gaussian"

    def __post_init__(self):
        if self.profile not in ("gaussian", "bump"):
            raise ValueError(f"unknown mollifier profile {self.profile!r}")
        mass = float(np.sum(_BUMP_W * self.density(_BUMP_X))) if self.profile == "bump" else self._gaussian_mass()
        if abs(mass - 1.0) > 1e-12:
            raise NotNormalizable(f"{self.profile} profile has mass {mass!r}")

    @staticmethod
    def _gaussian_mass() -> float:
        x, w = np.polynomial.hermite_e.hermegauss(60)
        return float(np.sum(w)) / math.sqrt(2.0 * math.pi)

    def density(self, z):
        z = np.asarray(z, dtype=float)
        if self.profile == "gaussian":
            return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        return _bump_raw(z) / _BUMP_MASS

    @property
    def peak(self) -> float:
        return float(self.density(0.0))

    def cdf(self, z):
        """Psi(z) = int_{-inf}^z psi."""
        z = np.asarray(z, dtype=float)
        if self.profile == "gaussian":
            return ndtr(z)
        zc = np.clip(z, -1.0, 1.0)
        half = 0.5 * (zc + 1.0)
        nodes = -1.0 + half[..., None] * (_BUMP_X + 1.0)
        return np.sum(half[..., None] * _BUMP_W * self.density(nodes), axis=-1)

    def cdf_integral(self, z):
        """G(z) = int_{-inf}^z Psi = int (z - w) psi(w) dw over w < z."""
        z = np.asarray(z, dtype=float)
        if self.profile == "gaussian":
            return z * ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        zc = np.clip(z, -1.0, 1.0)
        half = 0.5 * (zc + 1.0)
        nodes = -1.0 + half[..., None] * (_BUMP_X + 1.0)
        inner = np.sum(half[..., None] * _BUMP_W * (zc[..., None] - nodes) * self.density(nodes), axis=-1)
        # beyond the support Psi = 1, so G grows like z
        return np.where(z >= 1.0, z, inner)

    def nodes(self) -> tuple:
        """Quadrature nodes z_i and weights w_i with sum w_i g(z_i) ~ int psi g."""
        if self.profile == "gaussian":
            x, w = np.polynomial.hermite_e.hermegauss(60)
            return x, w / math.sqrt(2.0 * math.pi)
        return _BUMP_X, _BUMP_W * self.density(_BUMP_X)


def _spd_repaired(m: np.ndarray, repairs: list, t: float) -> np.ndarray:
    try:
        cholesky(m)
        return m
    except NotPositiveDefinite:
        lam = float(jacobi_eigenvalues(m)[0])
        shift = max(0.0, SPD_MARGIN - lam)
        repairs.append((t, shift))
        log.warning("SPD repair of mollified coefficient at t=%.6g: shift %.3e", t, shift)
        return m + shift * np.eye(m.shape[0])


def mollify_coefficient(path: DiffusivityPath, m: MollifierSpec, eps: float) -> DiffusivityPath:
    """a_eps = a * psi_eps, in closed form for piecewise-constant paths and
    point masses, by quadrature against psi otherwise.

    The coefficient is extended to t < 0 by its value at 0 (piecewise) or by
    its own evaluator (smooth paths). Repairs of the SPD property are logged
    and recorded on the returned path as ``path.repairs``.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if path.kind == "constant":
        return path
    repairs: list = []
    dim = path.dim
    if path.kind in ("piecewise", "singular"):
        mats = path.pieces
        jumps = np.array(path.jump_times)
        deltas = [mats[k + 1] - mats[k] for k in range(len(jumps))]
        masses = path.point_masses

        def raw(t):
            out = np.array(mats[0], dtype=float)
            for tk, d in zip(jumps, deltas):
                out = out + d * float(m.cdf((t - tk) / eps))
            for pm in masses:
                out = out + pm.weight * pm.matrix * float(m.density((t - pm.time) / eps)) / eps
            return out

        def antiderivative(t):
            out = t * np.array(mats[0], dtype=float)
            for tk, d in zip(jumps, deltas):
                out = out + d * eps * float(m.cdf_integral((t - tk) / eps) - m.cdf_integral(-tk / eps))
            for pm in masses:
                out = out + pm.weight * pm.matrix * float(m.cdf((t - pm.time) / eps) - m.cdf(-pm.time / eps))
            return out

        kind_breaks = ()
    else:
        z, w = m.nodes()
        base = path

        def raw(t):
            return sum(wi * base.matrix(t - eps * zi) for zi, wi in zip(z, w))

        antiderivative = None
        if base.antiderivative is not None:

            def antiderivative(t):
                return sum(
                    wi * (np.asarray(base.antiderivative(t - eps * zi)) - np.asarray(base.antiderivative(-eps * zi)))
                    for zi, wi in zip(z, w)
                )

        kind_breaks = ()

    def evaluate(t):
        a = raw(t)
        return _spd_repaired(0.5 * (a + a.T), repairs, t)

    out = DiffusivityPath(
        dim=dim,
        kind="mollified",
        evaluator=evaluate,
        antiderivative=antiderivative,
        jump_times=kind_breaks,
    )
    out.repairs = repairs
    out.eps = eps
    return out


def mollified_coefficient_net(path: DiffusivityPath, m: MollifierSpec, epsilons) -> Net:
    eps = np.asarray(epsilons, dtype=float)
    return Net(eps, [mollify_coefficient(path, m, float(e)) for e in eps])


# ---------------------------------------------------------------------------
# solution nets


def solve_net(
    coeff: Net,
    u0: Net,
    f: Net | None,
    t_grid: Sequence[float],
    nodes: int = 8,
    threads: int = 1,
) -> Net:
    """One Duhamel trajectory per epsilon. A failing member raises
    :class:`NetMemberFailure` carrying its epsilon."""
    _check_same_eps(coeff, u0)
    if f is not None:
        _check_same_eps(coeff, f)
    sources = f.members if f is not None else [None] * len(coeff)

    def one(k):
        eps = float(coeff.epsilons[k])
        try:
            return solve_trajectory(u0.members[k], t_grid, coeff.members[k], sources[k], nodes)
        except Exception as exc:  # attribute the failure to its member
            raise NetMemberFailure(eps, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            members = list(pool.map(one, range(len(coeff))))
    else:
        members = [one(k) for k in range(len(coeff))]
    return Net(coeff.epsilons, members)


@dataclass
class ConsistencyReport:
    epsilons: np.ndarray
    times: list
    distances: np.ndarray  # (n_eps, n_times) sup-norm distances
    slope: float
    monotone: bool
    final_distance: float
    threshold: float

    @property
    def max_distances(self) -> np.ndarray:
        return self.distances.max(axis=1)

    @property
    def passed(self) -> bool:
        return self.monotone and self.final_distance <= self.threshold


def consistency_check(
    sol_net: Net,
    reference: Trajectory,
    threshold: float = 1e-3,
    slack: float = 0.05,
) -> ConsistencyReport:
    """Sup-norm distance of every member to a classical reference trajectory.

    ``slope`` is the least-squares slope of log(max-over-time distance)
    against log(eps) on the asymptotic window (positive means convergence);
    ``threshold`` is relative to the reference's sup norm.
    """
    times = list(reference.times)
    rows = []
    for _, traj in sol_net:
        if list(traj.times) != times:
            raise GridMismatch("member time grid differs from the reference")
        if traj.grid != reference.grid:
            raise GridMismatch("member spatial grid differs from the reference")
        rows.append([(u - r).sup() for u, r in zip(traj.states, reference.states)])
    d = np.array(rows)
    dmax = d.max(axis=1)
    win = slice(FIT_SKIP, None)
    try:
        slope, _ = fit_growth_slope(sol_net.epsilons[win], dmax[win])
        slope = -slope
    except DegenerateFit:
        slope = math.inf
    monotone = bool(np.all(dmax[1:] <= dmax[:-1] * (1.0 + slack)))
    scale = max(u.sup() for u in reference.states)
    return ConsistencyReport(
        epsilons=sol_net.epsilons,
        times=times,
        distances=d,
        slope=slope,
        monotone=monotone,
        final_distance=float(dmax[-1]),
        threshold=threshold * scale,
    )


def uniqueness_probe(
    coeff: Net,
    t_grid: Sequence[float],
    grid: Grid,
    scale: AsymptoticScale | None = None,
    u0: Net | None = None,
    f: Net | None = None,
    family=None,
    nodes: int = 8,
) -> tuple:
    """Solve with zero data (optionally plus perturbation nets) and classify.

    Returns ``(classification, solution_net)``; zero data must come out
    negligible.
    """
    zero = GridField.zeros(grid)
    u0 = u0 if u0 is not None else constant_net(zero, coeff.epsilons)
    sol = solve_net(coeff, u0, f, t_grid, nodes)
    return classify_net(sol, scale, family or sup_family()), sol


# ---------------------------------------------------------------------------
# serialization


def write_net(out_dir, name: str, sol_net: Net, classification: NetClassification, family=None) -> dict:
    """Write per-member fields, a seminorm CSV and a JSON manifest.

    Returns a mapping from written path (relative to ``out_dir``) to sha256.
    """
    from .fieldio import sha256_file, write_field

    out = Path(out_dir)
    (out / name).mkdir(parents=True, exist_ok=True)
    written = {}
    members = []
    for k, (eps, traj) in enumerate(sol_net):
        files = []
        for j, (t, u) in enumerate(traj):
            rel = f"{name}/member{k:02d}_t{j:03d}.ahgf"
            written[rel] = write_field(out / rel, u)
            files.append({"t": t, "path": rel})
        members.append({"eps": float(eps), "fields": files})
    table = seminorm_table(sol_net, family)
    rel = f"{name}/seminorms.csv"
    with open(out / rel, "w") as fh:
        labels = list(table)
        fh.write(",".join(["eps"] + labels) + "\n")
        for k, eps in enumerate(sol_net.epsilons):
            fh.write(",".join([repr(float(eps))] + [repr(float(table[l][k])) for l in labels]) + "\n")
    written[rel] = sha256_file(out / rel)
    manifest = {
        "epsilons": [float(e) for e in sol_net.epsilons],
        "members": members,
        "seminorm_table": rel,
        "classification": {
            "verdict": classification.verdict,
            "description": classification.describe(),
            "tested_order": classification.tested_order,
            "per_seminorm": {
                label: {
                    "verdict": classification.verdicts[label],
                    "slope": _json_float(classification.slopes[label]),
                    "residual": classification.residuals[label],
                    "witness": classification.witnesses.get(label),
                }
                for label in classification.verdicts
            },
        },
    }
    rel = f"{name}/net_manifest.json"
    (out / rel).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written[rel] = sha256_file(out / rel)
    return written


def _json_float(x: float):
    return x if math.isfinite(x) else str(x)
