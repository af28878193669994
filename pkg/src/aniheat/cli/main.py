"""``aniheat`` command line: solve, net and verify subcommands.

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import __version__
from ..checks import CheckResult, Scenario, format_table, run_battery, scenario_tail, TAIL_TOL
from ..errors import AniheatError, FieldFormatError, NetMemberFailure
from ..estimates import (
    BoundRow,
    DecayData,
    ExponentTriple,
    decay_bound,
    energy_trace,
    norm_estimate,
    source_beta_norm,
    write_bound_csv,
)
from ..fieldio import sha256_file, write_field, write_field_csv
from ..propagator import DeltaDatum, lq_norm, solve_trajectory
from ..veryweak import (
    FIT_SKIP,
    MollifierSpec,
    Net,
    classify_net,
    consistency_check,
    constant_net,
    default_family,
    fit_growth_slope,
    mollify_coefficient,
    solve_net,
    uniqueness_probe,
    validate_scale,
    write_net,
)
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("aniheat")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class NumericalFailure(Exception):
    def __init__(self, operation: str, cause: Exception, t=None, eps=None):
        where = []
        if eps is not None:
            where.append(f"eps={eps:g}")
        if t is not None:
            where.append(f"t={t:g}")
        loc = f" ({', '.join(where)})" if where else ""
        super().__init__(f"numerical failure in {operation}{loc}: {type(cause).__name__}: {cause}")


def _label(q: float) -> str:
    return "inf" if math.isinf(q) else f"{q:g}"


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# output bookkeeping


class Outputs:
    """Collects written files and their checksums for the run manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict = {}
        self.warnings: list = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, rel: str):
        self.files[rel] = sha256_file(self.root / rel)

    def write_csv(self, rel: str, header, rows):
        with open(self.path(rel), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        self.record(rel)

    def write_json(self, rel: str, obj):
        self.path(rel).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        self.record(rel)

    def warn(self, msg: str):
        log.warning(msg)
        self.warnings.append(msg)

    def manifest(self, cfg: ExperimentConfig, command: str, seed: int, started: str):
        body = {
            "tool": "aniheat",
            "version": __version__,
            "command": command,
            "config_sha256": cfg.sha256(),
            "seed": seed,
            "started": started,
            "finished": _now(),
            "outputs": dict(sorted(self.files.items())),
            "warnings": self.warnings,
        }
        (self.root / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# scenario construction


def build_scenario(cfg: ExperimentConfig, eps: float | None = None, verify_checksum: bool = True) -> Scenario:
    grid = cfg.grid()
    if cfg.coefficient_uses_eps and eps is None:
        eps = float(cfg.epsilons()[0])
    mollifier = MollifierSpec(cfg.net_options()["mollifier"])
    path = cfg.base_path(eps, mollifier)
    initial = cfg.initial(verify_checksum)
    src_spec = cfg.raw.get("source", {"kind": "zero"})
    init_spec = cfg.raw["initial"]
    init_gauss = None
    if init_spec["kind"] == "gaussian":
        init_gauss = (init_spec["covariance"], init_spec.get("mean"))
    src_gauss = None
    if src_spec["kind"] == "separable" and src_spec["space"]["kind"] == "gaussian":
        src_gauss = (src_spec["space"]["covariance"], src_spec["space"].get("mean"))
    source = cfg.source()
    nonneg = _nonnegative(initial, init_spec) and _nonnegative_source(cfg, source)
    return Scenario(
        grid=grid,
        path=path,
        initial=initial,
        times=cfg.times,
        source=source,
        nodes=cfg.nodes,
        norm_exponents=cfg.norm_exponents(),
        energy_exponents=cfg.energy_exponents(),
        decay=_decay_opts(cfg),
        initial_gaussian=init_gauss,
        source_gaussian=src_gauss,
        nonnegative_data=nonneg,
    )


def _nonnegative(u, spec) -> bool:
    if isinstance(u, DeltaDatum):
        return u.weight >= 0
    return bool(np.all(u.values >= 0))


def _nonnegative_source(cfg, source) -> bool:
    if source is None:
        return True
    times = cfg.times
    probe = np.linspace(0.0, max(times), 33)
    return all(np.all(source(float(s)).values >= 0) for s in probe)


def _decay_opts(cfg):
    d = cfg.raw.get("decay")
    if d is None:
        return None
    out = dict(d)
    out["q"] = math.inf if d["q"] == "inf" else float(d["q"])
    out["r"] = math.inf if d["r"] == "inf" else float(d["r"])
    return out


def _warn_tail(sc: Scenario, out: Outputs):
    try:
        tail = scenario_tail(sc)
    except AniheatError as exc:
        raise NumericalFailure("tail bound", exc, t=max(sc.times)) from exc
    if tail > TAIL_TOL:
        out.warn(f"tail mass bound {tail:.3e} exceeds {TAIL_TOL:g}; enlarge the box")


def _solve(sc: Scenario, operation: str, eps=None):
    try:
        return solve_trajectory(sc.initial, sc.times, sc.path, sc.source, sc.nodes)
    except AniheatError as exc:
        raise NumericalFailure(operation, exc, t=getattr(exc, "t", None), eps=eps) from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(cfg: ExperimentConfig, out: Outputs, args) -> int:
    sc = build_scenario(cfg)
    _warn_tail(sc, out)
    traj = _solve(sc, "solve")
    for j, (t, u) in enumerate(traj):
        rel = f"fields/u_{j:03d}.ahgf"
        out.files[rel] = write_field(out.path(rel), u)
        if sc.grid.dim == 1:
            rel = f"fields/u_{j:03d}.csv"
            write_field_csv(out.path(rel), u)
            out.record(rel)
        log.info("t=%g  sup=%.6e", t, u.sup())

    qs = list(sc.norm_exponents)
    rows = [[_fmt(t)] + [_fmt(lq_norm(u, q)) for q in qs] + [_fmt(float(np.min(u.values)))] for t, u in traj]
    out.write_csv("norms.csv", ["t"] + [f"L{_label(q)}" for q in qs] + ["min"], rows)

    ps = list(sc.energy_exponents)
    traces = [energy_trace(traj, p) for p in ps]
    rows = [[_fmt(t)] + [_fmt(tr.values[k]) for tr in traces] for k, t in enumerate(traj.times)]
    out.write_csv("energy.csv", ["t"] + [f"E{_label(p)}" for p in ps], rows)
    if sc.source is None:
        for tr in traces:
            if not tr.is_nonincreasing():
                out.warn(f"energy E_{_label(tr.p)} increases on the time grid")

    if not isinstance(sc.initial, DeltaDatum):
        for q in qs:
            try:
                bound_rows = [
                    BoundRow(t, lq_norm(u, q), norm_estimate(sc.initial, sc.source, t, sc.path, sc.nodes, q))
                    for t, u in traj
                ]
            except AniheatError as exc:
                raise NumericalFailure(f"norm estimate (q={_label(q)})", exc) from exc
            rel = f"bounds_norm_q{_label(q)}.csv"
            write_bound_csv(out.path(rel), bound_rows)
            out.record(rel)
            if not all(r.satisfied for r in bound_rows):
                out.warn(f"norm estimate violated for q={_label(q)}")
        if sc.decay is not None:
            _write_decay(sc, traj, out)
    return EXIT_OK


def _write_decay(sc: Scenario, traj, out: Outputs):
    opts = sc.decay
    try:
        tr = ExponentTriple.from_qr(opts["q"], opts["r"])
        dd = DecayData(sc.path, float(opts.get("alpha", 2.0)), opts.get("gamma"))
    except ValueError as exc:
        raise ConfigError(f"decay: {exc}") from None
    u0q = lq_norm(sc.initial, tr.q)
    rows, simple = [], []
    for t, u in traj:
        if t <= 0:
            continue
        try:
            fb = source_beta_norm(sc.source, t, sc.path, sc.nodes, tr.q, dd.beta)
            b = decay_bound(t, tr, dd, u0q, fb)
        except ValueError as exc:
            raise ConfigError(f"decay: {exc}") from None
        except AniheatError as exc:
            raise NumericalFailure("decay bound", exc, t=t) from exc
        lhs = lq_norm(u, tr.r)
        rows.append(BoundRow(t, lhs, b.value))
        if b.simplified is not None:
            simple.append(BoundRow(t, lhs, b.simplified))
    for rel, rr in (("bounds_decay.csv", rows), ("bounds_decay_gamma.csv", simple)):
        if rr:
            write_bound_csv(out.path(rel), rr)
            out.record(rel)
            if not all(r.satisfied for r in rr):
                out.warn(f"decay bound violated in {rel}")


def _coefficient_net(cfg: ExperimentConfig, profile: str, epsilons) -> Net:
    mollifier = MollifierSpec(profile)
    members = []
    base = None if cfg.coefficient_uses_eps else cfg.base_path(None, mollifier)
    for e in epsilons:
        e = float(e)
        try:
            if base is None:
                members.append(cfg.base_path(e, mollifier))
            else:
                members.append(mollify_coefficient(base, mollifier, e))
        except AniheatError as exc:
            raise NumericalFailure("coefficient mollification", exc, eps=e) from exc
    return Net(np.asarray(epsilons), members)


def _solve_net(coeff: Net, u0: Net, f, times, nodes, threads, operation):
    try:
        return solve_net(coeff, u0, f, times, nodes, threads)
    except NetMemberFailure as exc:
        cause = exc.cause
        raise NumericalFailure(operation, cause, t=getattr(cause, "t", None), eps=exc.eps) from exc


def _repairs(coeff: Net) -> list:
    out = []
    for e, path in coeff:
        for t, shift in getattr(path, "repairs", []):
            out.append(f"SPD repair at eps={e:g}, t={t:g}: shift {shift:.3e}")
    return out


def _json_num(x):
    x = float(x)
    return x if math.isfinite(x) else str(x)


def cmd_net(cfg: ExperimentConfig, out: Outputs, args) -> int:
    sc = build_scenario(cfg)
    _warn_tail(sc, out)
    opts = cfg.net_options()
    eps = cfg.epsilons()
    scale = cfg.scale()
    family = default_family(sc.grid.dim, cfg.seminorm_order())
    threads = max(1, int(args.threads))
    times = sc.times
    report = {"epsilons": [float(e) for e in eps], "scale_exponents": list(scale.exponents)}

    srep = validate_scale(scale, eps)
    report["scale"] = {"condition1": srep.condition1, "condition2": srep.condition2, "failures": srep.failures}
    if not srep.passed:
        out.warn("configured scale fails the asymptotic-scale conditions on this eps grid")

    coeff = _coefficient_net(cfg, opts["mollifier"], eps)
    u0 = constant_net(sc.initial, eps)
    f = constant_net(sc.source, eps) if sc.source is not None else None
    sol = _solve_net(coeff, u0, f, times, sc.nodes, threads, "net solve")
    try:
        cls = classify_net(sol, scale, family)
    except AniheatError as exc:
        raise NumericalFailure("classification", exc) from exc
    for rel, digest in write_net(out.root, "net", sol, cls, family).items():
        out.files[rel] = digest
    report["classification"] = _classification_json(cls)
    for w in _repairs(coeff):
        out.warn(w)

    if "second_mollifier" in opts:
        coeff2 = _coefficient_net(cfg, opts["second_mollifier"], eps)
        sol2 = _solve_net(coeff2, u0, f, times, sc.nodes, threads, "second-mollifier net solve")
        diff = sol - sol2
        d = np.array([traj.sup() for _, traj in diff])
        rows = [[_fmt(e), _fmt(v)] for e, v in zip(eps, d)]
        out.write_csv("mollifier_difference.csv", ["eps", "sup_distance"], rows)
        try:
            slope = -fit_growth_slope(diff.epsilons[FIT_SKIP:], d[FIT_SKIP:])[0]
        except AniheatError:
            slope = math.inf
        report["mollifier_difference"] = {
            "profiles": [opts["mollifier"], opts["second_mollifier"]],
            "decay_slope": _json_num(slope),
            "decays": bool(slope > 0),
        }
        for w in _repairs(coeff2):
            out.warn(w)

    if opts["reference"] and not cfg.coefficient_uses_eps and not isinstance(sc.initial, DeltaDatum):
        ref = _solve(sc, "reference solve")
        rep = consistency_check(sol, ref, opts["consistency_threshold"])
        rows = [[_fmt(e)] + [_fmt(x) for x in row] for e, row in zip(rep.epsilons, rep.distances)]
        out.write_csv("consistency.csv", ["eps"] + [f"t={t!r}" for t in rep.times], rows)
        report["consistency"] = {
            "slope": _json_num(rep.slope),
            "monotone": rep.monotone,
            "final_distance": rep.final_distance,
            "threshold": rep.threshold,
            "passed": rep.passed,
        }

    if opts["uniqueness_probe"]:
        try:
            pcls, _ = uniqueness_probe(coeff, times, sc.grid, scale, family=family, nodes=sc.nodes)
        except NetMemberFailure as exc:
            raise NumericalFailure("uniqueness probe", exc.cause, eps=exc.eps) from exc
        report["uniqueness_probe"] = {"verdict": pcls.verdict, "description": pcls.describe()}

    out.write_json("report.json", report)
    print(f"solution net: {cls.describe()}")
    if "consistency" in report:
        c = report["consistency"]
        print(f"consistency: slope {c['slope']}, {'pass' if c['passed'] else 'fail'}")
    if "uniqueness_probe" in report:
        print(f"uniqueness probe: {report['uniqueness_probe']['description']}")
    return EXIT_OK


def _classification_json(cls) -> dict:
    return {
        "verdict": cls.verdict,
        "description": cls.describe(),
        "tested_order": cls.tested_order,
        "slopes": {k: _json_num(v) for k, v in cls.slopes.items()},
        "verdicts": cls.verdicts,
    }


def cmd_verify(cfg: ExperimentConfig, out: Outputs | None, args) -> int:
    rows = []
    checksum_ok = True
    for spec in _datum_specs(cfg):
        if "sha256" in spec:
            actual = sha256_file(cfg.resolve(spec["path"]))
            ok = actual == spec["sha256"]
            checksum_ok &= ok
            detail = spec["path"] if ok else f"{spec['path']}: expected {spec['sha256'][:12]}, found {actual[:12]}"
            rows.append(CheckResult("checksum", "pass" if ok else "fail", detail))
    if not rows:
        rows.append(CheckResult("checksum", "skip", "no checksummed inputs"))
    try:
        sc = build_scenario(cfg, verify_checksum=False)
    except FieldFormatError as exc:
        rows.append(CheckResult("load", "fail", str(exc)))
        sc = None
    if sc is not None:
        rows.extend(run_battery(sc, np.random.default_rng(args.seed_value)))
    print(format_table(rows))
    failed = [r.name for r in rows if not r.ok]
    if out is not None:
        out.write_csv("verify.csv", ["check", "status", "detail"], [[r.name, r.status, r.detail] for r in rows])
        if sc is not None:
            for w in sc.warnings:
                out.warn(w)
    print("all checks passed" if not failed else f"failed: {', '.join(failed)}")
    return EXIT_OK if not failed else EXIT_VERIFY


def _datum_specs(cfg: ExperimentConfig) -> list:
    specs = []
    if cfg.raw["initial"]["kind"] == "file":
        specs.append(cfg.raw["initial"])
    src = cfg.raw.get("source", {"kind": "zero"})
    if src["kind"] == "separable" and src["space"]["kind"] == "file":
        specs.append(src["space"])
    return specs


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aniheat", description="Anisotropic heat equation experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "classical Duhamel solve with norm, energy and bound CSVs",
        "net": "epsilon-net solve, moderateness classification and consistency report",
        "verify": "run the invariant battery and print a pass/fail table",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, metavar="PATH", help="JSON experiment configuration")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides output_dir)")
        p.add_argument("--threads", type=int, default=1, metavar="K", help="workers for per-eps solves")
        p.add_argument("--seed", type=int, metavar="U64", help="seed for random test fields (overrides config)")
        p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    started = _now()
    try:
        cfg = ExperimentConfig.load(args.config)
        seed = args.seed if args.seed is not None else cfg.seed
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed {seed} is not an unsigned 64-bit integer")
        args.seed_value = seed
        if args.out is not None:
            root = Path(args.out)
        elif args.command == "verify":
            root = None
        else:
            root = cfg.resolve(cfg.output_dir)
        out = Outputs(root) if root is not None else None
        handler = {"solve": cmd_solve, "net": cmd_net, "verify": cmd_verify}[args.command]
        status = handler(cfg, out, args)
        if out is not None:
            out.manifest(cfg, args.command, seed, started)
        return status
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FieldFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AniheatError as exc:
        print(f"error: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
