"""Experiment configuration: JSON schema, validation and scenario builders."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from ..errors import AniheatError, FieldFormatError
from ..fieldio import read_field, sha256_file
from ..propagator import DeltaDatum, Grid, gaussian_field
from ..spd_linalg import DiffusivityPath, PointMass, SpdMatrix
from ..veryweak import AsymptoticScale, DEFAULT_EXPONENTS, MollifierSpec, default_epsilons
from .expr import Expression, ExpressionError

SCHEMA_VERSION = 1


class ConfigError(AniheatError):
    pass


_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}, "minItems": 1}
_entry = {"type": ["number", "string"]}
_exponent = {"anyOf": [{"type": "number", "minimum": 1}, {"const": "inf"}]}

_datum_variants = [
    {
        "type": "object",
        "properties": {
            "kind": {"const": "gaussian"},
            "mean": {"type": "array", "items": {"type": "number"}},
            "covariance": _matrix,
            "mass": {"type": "number"},
        },
        "required": ["kind", "covariance"],
        "additionalProperties": False,
    },
    {
        "type": "object",
        "properties": {"kind": {"const": "delta"}, "weight": {"type": "number"}},
        "required": ["kind"],
        "additionalProperties": False,
    },
    {
        "type": "object",
        "properties": {
            "kind": {"const": "file"},
            "path": {"type": "string"},
            "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        },
        "required": ["kind", "path"],
        "additionalProperties": False,
    },
]

SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "grid": {
            "type": "object",
            "properties": {
                "dim": {"type": "integer", "minimum": 1, "maximum": 8},
                "points": {"type": "integer", "minimum": 8},
                "length": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["dim", "points", "length"],
            "additionalProperties": False,
        },
        "coefficient": {
            "oneOf": [
                {
                    "type": "object",
                    "properties": {"kind": {"const": "constant"}, "matrix": _matrix},
                    "required": ["kind", "matrix"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "kind": {"const": "rotated"},
                        "eigenvalues": {"type": "array", "items": _entry, "minItems": 1},
                        "angles": {"type": "array", "items": _entry},
                        "constants": {"type": "object", "additionalProperties": {"type": "number"}},
                    },
                    "required": ["kind", "eigenvalues"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "kind": {"const": "piecewise"},
                        "matrices": {"type": "array", "items": _matrix, "minItems": 1},
                        "jump_times": {"type": "array", "items": {"type": "number"}},
                        "point_masses": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "properties": {
                                    "time": {"type": "number", "exclusiveMinimum": 0},
                                    "weight": {"type": "number", "minimum": 0},
                                    "matrix": _matrix,
                                },
                                "required": ["time", "weight", "matrix"],
                                "additionalProperties": False,
                            },
                        },
                    },
                    "required": ["kind", "matrices", "jump_times"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "kind": {"const": "expression"},
                        "entries": {"type": "array", "items": {"type": "array", "items": _entry}, "minItems": 1},
                        "constants": {"type": "object", "additionalProperties": {"type": "number"}},
                    },
                    "required": ["kind", "entries"],
                    "additionalProperties": False,
                },
            ]
        },
        "initial": {"oneOf": _datum_variants},
        "source": {
            "oneOf": [
                {
                    "type": "object",
                    "properties": {"kind": {"const": "zero"}},
                    "required": ["kind"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "kind": {"const": "separable"},
                        "time": _entry,
                        "space": {"oneOf": [_datum_variants[0], _datum_variants[2]]},
                    },
                    "required": ["kind", "time", "space"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "kind": {"const": "files"},
                        "times": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                        "paths": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    },
                    "required": ["kind", "times", "paths"],
                    "additionalProperties": False,
                },
            ]
        },
        "times": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "nodes": {"type": "integer", "minimum": 1, "maximum": 64},
        "norm_exponents": {"type": "array", "items": _exponent},
        "energy_exponents": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 1}},
        "decay": {
            "type": "object",
            "properties": {
                "q": _exponent,
                "r": _exponent,
                "alpha": {"type": "number", "exclusiveMinimum": 1},
                "gamma": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["q", "r"],
            "additionalProperties": False,
        },
        "scale": {
            "type": "object",
            "properties": {"exponents": {"type": "array", "items": {"type": "number"}, "minItems": 1}},
            "additionalProperties": False,
        },
        "epsilons": {
            "oneOf": [
                {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
                {
                    "type": "object",
                    "properties": {
                        "start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "stop": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "count": {"type": "integer", "minimum": 2},
                    },
                    "additionalProperties": False,
                },
            ]
        },
        "seminorms": {
            "type": "object",
            "properties": {"max_order": {"type": "integer", "minimum": 0, "maximum": 4}},
            "additionalProperties": False,
        },
        "net": {
            "type": "object",
            "properties": {
                "mollifier": {"enum": ["gaussian", "bump"]},
                "second_mollifier": {"enum": ["gaussian", "bump"]},
                "reference": {"type": "boolean"},
                "uniqueness_probe": {"type": "boolean"},
                "consistency_threshold": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "verify": {
            "type": "object",
            "properties": {
                "samples": {"type": "integer", "minimum": 1},
                "residual_dt": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "output_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    },
    "required": ["version", "grid", "coefficient", "initial", "times"],
    "additionalProperties": False,
}


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path

    # ----- loading

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config error at {where}: {exc.message}") from None
        cfg = cls(copy.deepcopy(raw), Path(base_dir))
        cfg._validate()
        return cfg

    def _validate(self):
        times = self.raw["times"]
        if not times:
            raise ConfigError("time grid is empty")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("time grid must be strictly increasing")
        g = self.raw["grid"]
        N = g["points"]
        if N & (N - 1):
            raise ConfigError(f"grid points per axis must be a power of two, got {N}")
        if self.raw["initial"]["kind"] == "delta" and times[0] == 0:
            raise ConfigError("a delta initial datum needs a time grid starting above 0")
        for ref in self._file_refs():
            if not ref.exists():
                raise ConfigError(f"referenced file {ref} does not exist")
        try:
            self.grid()
            self._check_coefficient()
            self._check_datum(self.raw["initial"])
        except ConfigError:
            raise
        except (ValueError, ExpressionError, AniheatError) as exc:
            raise ConfigError(f"config error: {exc}") from None

    def _check_coefficient(self, samples: int = 513):
        """Build the coefficient and sample a(t) on [0, T] for positive definiteness.

        Epsilon families are sampled at the largest and smallest configured eps.
        """
        epsilons = [None]
        if self.coefficient_uses_eps:
            e = self.epsilons()
            epsilons = [float(e.max()), float(e.min())]
        T = max(self.times)
        for eps in epsilons:
            path = self.base_path(eps)
            if path.kind != "smooth" or T <= 0:
                continue
            ts = np.union1d(np.linspace(0.0, T, samples), [b for b in path.breakpoints() if b <= T])
            for t in ts:
                lam = float(np.linalg.eigvalsh(path.matrix(t))[0])
                if not lam > 0:
                    at = "" if eps is None else f" (eps={eps:g})"
                    raise ConfigError(f"coefficient is not positive definite at t={t:g}{at}: eigenvalue {lam:.3e}")

    def _file_refs(self):
        refs = []
        if self.raw["initial"]["kind"] == "file":
            refs.append(self.resolve(self.raw["initial"]["path"]))
        src = self.raw.get("source", {"kind": "zero"})
        if src["kind"] == "files":
            refs.extend(self.resolve(p) for p in src["paths"])
        elif src["kind"] == "separable" and src["space"]["kind"] == "file":
            refs.append(self.resolve(src["space"]["path"]))
        return refs

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    # ----- simple accessors

    @property
    def times(self) -> list:
        return [float(t) for t in self.raw["times"]]

    @property
    def nodes(self) -> int:
        return int(self.raw.get("nodes", 8))

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def output_dir(self) -> str:
        return self.raw.get("output_dir", "out")

    def norm_exponents(self) -> list:
        return [_exp(q) for q in self.raw.get("norm_exponents", [1, 2, "inf"])]

    def energy_exponents(self) -> list:
        return [float(p) for p in self.raw.get("energy_exponents", [1.5, 2, 3, 4])]

    def scale(self) -> AsymptoticScale:
        ex = self.raw.get("scale", {}).get("exponents", list(DEFAULT_EXPONENTS))
        return AsymptoticScale(tuple(ex))

    def epsilons(self) -> np.ndarray:
        e = self.raw.get("epsilons")
        if e is None:
            return default_epsilons()
        if isinstance(e, list):
            return np.array(sorted(e, reverse=True), dtype=float)
        return default_epsilons(e.get("count", 12), e.get("start", 1e-1), e.get("stop", 1e-4))

    def net_options(self) -> dict:
        opts = {"mollifier": "gaussian", "reference": True, "uniqueness_probe": True, "consistency_threshold": 1e-3}
        opts.update(self.raw.get("net", {}))
        return opts

    def seminorm_order(self) -> int:
        return int(self.raw.get("seminorms", {}).get("max_order", 2))

    # ----- builders

    def grid(self) -> Grid:
        g = self.raw["grid"]
        try:
            return Grid(g["dim"], g["points"], float(g["length"]))
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from None

    @property
    def coefficient_uses_eps(self) -> bool:
        spec = self.raw["coefficient"]
        if spec["kind"] not in ("expression", "rotated"):
            return False
        return any(e.uses_eps for e in self._expressions(spec, None))

    def _expressions(self, spec, mollifier):
        consts = spec.get("constants", {})
        if spec["kind"] == "expression":
            items = [x for row in spec["entries"] for x in row]
        else:
            items = list(spec["eigenvalues"]) + list(spec.get("angles", []))
        return [Expression(repr(float(x)) if not isinstance(x, str) else x, consts, mollifier) for x in items]

    def base_path(self, eps: float | None = None, mollifier: MollifierSpec | None = None) -> DiffusivityPath:
        """The configured coefficient; ``eps`` is required for epsilon families."""
        spec = self.raw["coefficient"]
        n = self.raw["grid"]["dim"]
        kind = spec["kind"]
        if kind == "constant":
            m = np.asarray(spec["matrix"], dtype=float)
            _check_shape(m, n, "coefficient matrix")
            return DiffusivityPath.constant(m)
        if kind == "piecewise":
            mats = [np.asarray(m, dtype=float) for m in spec["matrices"]]
            for m in mats:
                _check_shape(m, n, "coefficient matrix")
            masses = []
            for pm in spec.get("point_masses", []):
                E = np.asarray(pm["matrix"], dtype=float)
                _check_shape(E, n, "point-mass matrix")
                masses.append(PointMass(pm["time"], pm["weight"], E))
            return DiffusivityPath.piecewise(mats, spec["jump_times"], masses)
        exprs = self._expressions(spec, mollifier)
        if any(e.uses_eps for e in exprs) and eps is None:
            # validation pass: evaluate with a representative eps
            eps_eval = 0.1
        else:
            eps_eval = eps
        if kind == "expression":
            rows = spec["entries"]
            if len(rows) != n or any(len(r) != n for r in rows):
                raise ConfigError(f"coefficient entries must be {n}x{n}")

            def fn(t):
                return np.array([e(t, eps_eval) for e in exprs]).reshape(n, n)

        else:
            lam = exprs[:n]
            ang = exprs[n:]
            if len(spec["eigenvalues"]) != n:
                raise ConfigError(f"need {n} eigenvalues")
            if len(ang) not in (0, n * (n - 1) // 2):
                raise ConfigError(f"need {n * (n - 1) // 2} rotation angles (one per coordinate plane)")

            def fn(t):
                R = _rotation(n, [a(t, eps_eval) for a in ang])
                return R @ np.diag([l(t, eps_eval) for l in lam]) @ R.T

        breaks = set()
        if eps_eval is not None:
            for e in exprs:
                for c in e.centers:
                    breaks.update(x for x in (c - 10 * eps_eval, c, c + 10 * eps_eval) if x > 0)
        if not any(e.uses_t for e in exprs):
            return DiffusivityPath.constant(fn(0.0))
        # spikes of mollified terms sit between these breakpoints so quadrature sees them
        path = DiffusivityPath(dim=n, kind="smooth", evaluator=fn, jump_times=tuple(sorted(breaks)))
        return path

    def _check_datum(self, spec):
        n = self.raw["grid"]["dim"]
        if spec["kind"] == "gaussian":
            cov = np.asarray(spec["covariance"], dtype=float)
            _check_shape(cov, n, "covariance")
            try:
                SpdMatrix(cov)
            except AniheatError as exc:
                raise ConfigError(f"covariance is not SPD: {exc}") from None
            if "mean" in spec and len(spec["mean"]) != n:
                raise ConfigError(f"mean must have {n} entries")

    def datum(self, spec, verify_checksum: bool = True):
        grid = self.grid()
        kind = spec["kind"]
        if kind == "gaussian":
            return gaussian_field(grid, spec["covariance"], spec.get("mean"), spec.get("mass", 1.0))
        if kind == "delta":
            return DeltaDatum(grid, float(spec.get("weight", 1.0)))
        path = self.resolve(spec["path"])
        if verify_checksum and "sha256" in spec:
            actual = sha256_file(path)
            if actual != spec["sha256"]:
                raise FieldFormatError(f"checksum mismatch for {path}: expected {spec['sha256']}, found {actual}")
        u = read_field(path)
        if u.grid != grid:
            raise ConfigError(f"field {path} is on {u.grid}, config grid is {grid}")
        return u

    def initial(self, verify_checksum: bool = True):
        return self.datum(self.raw["initial"], verify_checksum)

    def source(self):
        """A callable s -> GridField, or None for f = 0."""
        spec = self.raw.get("source", {"kind": "zero"})
        if spec["kind"] == "zero":
            return None
        if spec["kind"] == "separable":
            g = Expression(spec["time"]) if isinstance(spec["time"], str) else Expression(repr(float(spec["time"])))
            v = self.datum(spec["space"])
            return lambda s: float(g(s)) * v
        times = [float(x) for x in spec["times"]]
        if len(times) != len(spec["paths"]):
            raise ConfigError("source times and paths differ in length")
        fields = [self.datum({"kind": "file", "path": p}) for p in spec["paths"]]
        return _interpolated_source(times, fields)


def _interpolated_source(times, fields):
    def f(s):
        if s <= times[0]:
            return fields[0]
        if s >= times[-1]:
            return fields[-1]
        k = int(np.searchsorted(times, s, side="right")) - 1
        w = (s - times[k]) / (times[k + 1] - times[k])
        return (1.0 - w) * fields[k] + w * fields[k + 1]

    return f


def _rotation(n, angles):
    R = np.eye(n)
    if not angles:
        return R
    k = 0
    for i in range(n):
        for j in range(i + 1, n):
            c, s = math.cos(angles[k]), math.sin(angles[k])
            G = np.eye(n)
            G[i, i] = G[j, j] = c
            G[i, j], G[j, i] = -s, s
            R = R @ G
            k += 1
    return R


def _check_shape(m, n, what):
    if m.shape != (n, n):
        raise ConfigError(f"{what} must be {n}x{n}, got {m.shape}")


def _exp(q):
    return math.inf if q == "inf" else float(q)
