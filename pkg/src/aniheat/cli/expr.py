"""Tiny arithmetic grammar for coefficient entries.

Allowed: numbers, ``t``, ``eps``, ``pi``, user constants, ``+ - * / **``,
unary minus, and the functions ``exp``, ``sin``, ``cos``, ``sqrt``,
``mollified_step(t, t0)`` and ``mollified_delta(t, t0)``. The last two need
``eps`` and use the configured mollifier profile.
"""
from __future__ import annotations

import ast
import math
import operator

from ..veryweak import MollifierSpec

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_PLAIN = {"exp": math.exp, "sin": math.sin, "cos": math.cos, "sqrt": math.sqrt}
_MOLLIFIED = ("mollified_step", "mollified_delta")


class ExpressionError(ValueError):
    pass


class Expression:
    """A parsed entry expression; call as ``expr(t, eps)``."""

    def __init__(self, source, constants=None, mollifier: MollifierSpec | None = None):
        self.source = str(source)
        self.constants = dict(constants or {})
        self.mollifier = mollifier or MollifierSpec("gaussian")
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {self.source!r}: {exc.msg}") from None
        self.uses_eps = False
        self.uses_t = False
        self.centers: list = []
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ExpressionError(f"only numeric literals allowed in {self.source!r}")
        elif isinstance(node, ast.Name):
            if node.id == "eps":
                self.uses_eps = True
            elif node.id == "t":
                self.uses_t = True
            elif node.id != "pi" and node.id not in self.constants:
                raise ExpressionError(f"unknown name {node.id!r} in {self.source!r}")
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            self._check(node.operand)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
            name = node.func.id
            if name in _PLAIN:
                if len(node.args) != 1:
                    raise ExpressionError(f"{name} takes one argument")
            elif name in _MOLLIFIED:
                if len(node.args) != 2:
                    raise ExpressionError(f"{name} takes two arguments (t, t0)")
                self.uses_eps = True
                try:
                    self.centers.append(float(ast.literal_eval(node.args[1])))
                except ValueError:
                    pass
            else:
                raise ExpressionError(f"unknown function {name!r} in {self.source!r}")
            for a in node.args:
                self._check(a)
        else:
            raise ExpressionError(f"unsupported syntax {type(node).__name__} in {self.source!r}")

    def __call__(self, t: float, eps: float | None = None) -> float:
        return float(self._eval(self._tree, t, eps))

    def _eval(self, node, t, eps):
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            if node.id == "t":
                return t
            if node.id == "eps":
                if eps is None:
                    raise ExpressionError(f"{self.source!r} needs eps but none was given")
                return eps
            if node.id == "pi":
                return math.pi
            return self.constants[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, t, eps), self._eval(node.right, t, eps))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, t, eps))
        name = node.func.id
        args = [self._eval(a, t, eps) for a in node.args]
        if name in _PLAIN:
            return _PLAIN[name](*args)
        if eps is None:
            raise ExpressionError(f"{name} needs eps")
        z = (args[0] - args[1]) / eps
        if name == "mollified_step":
            return float(self.mollifier.cdf(z))
        return float(self.mollifier.density(z)) / eps


def value_or_expression(v, constants=None, mollifier=None):
    """Numbers pass through as constant callables; strings are parsed."""
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        c = float(v)
        e = Expression(repr(c), constants, mollifier)
        return e
    return Expression(v, constants, mollifier)


def is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)
