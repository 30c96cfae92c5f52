"""Small arithmetic language used by system files and ``expr{...}`` scalar nodes.

Expressions are parsed with :mod:`ast` and compiled into closures over numpy
arrays.  Only a whitelisted subset of Python syntax is accepted:

* literals, declared variable names
* ``+ - * / **`` and unary ``-``/``+``
* calls ``abs(a)``, ``min(a, b, ...)``, ``max(a, b, ...)``, ``pow(a, b)``,
  ``exp(a)`` and ``sq_over_1p(a)`` (``a**2 / (1 + a**2)``)

Operands are always evaluated left to right, so trajectories are reproducible
bit for bit on any IEEE-754 platform.
"""

from __future__ import annotations

import ast
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np

Evaluator = Callable[[Mapping[str, np.ndarray]], np.ndarray]


class ExprError(ValueError):
    """Raised for malformed expressions or failed evaluations."""


def _sq_over_1p(t):
    t2 = t * t
    return t2 / (1.0 + t2)


_UNARY = {
    "abs": np.abs,
    "exp": np.exp,
    "sq_over_1p": _sq_over_1p,
}


def _fail(node: ast.AST, text: str, msg: str) -> ExprError:
    col = getattr(node, "col_offset", 0)
    return ExprError(f"{msg} at column {col + 1} in {text!r}")


def _build(node: ast.AST, text: str, variables: frozenset) -> Evaluator:
    if isinstance(node, ast.Expression):
        return _build(node.body, text, variables)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise _fail(node, text, "only numeric literals are allowed")
        value = float(node.value)
        return lambda env: value
    if isinstance(node, ast.Name):
        name = node.id
        if name not in variables:
            raise _fail(node, text, f"unknown variable {name!r}")
        return lambda env: env[name]
    if isinstance(node, ast.UnaryOp):
        inner = _build(node.operand, text, variables)
        if isinstance(node.op, ast.USub):
            return lambda env: -inner(env)
        if isinstance(node.op, ast.UAdd):
            return inner
        raise _fail(node, text, "unsupported unary operator")
    if isinstance(node, ast.BinOp):
        left = _build(node.left, text, variables)
        right = _build(node.right, text, variables)
        op = node.op
        if isinstance(op, ast.Add):
            return lambda env: left(env) + right(env)
        if isinstance(op, ast.Sub):
            return lambda env: left(env) - right(env)
        if isinstance(op, ast.Mult):
            return lambda env: left(env) * right(env)
        if isinstance(op, ast.Pow):
            return lambda env: np.power(left(env), right(env))
        if isinstance(op, ast.Div):
            def div(env):
                a = left(env)
                b = right(env)
                if np.any(np.asarray(b) == 0.0):
                    raise ExprError(f"division by zero in {text!r}")
                return a / b
            return div
        raise _fail(node, text, "unsupported binary operator")
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.keywords:
            raise _fail(node, text, "unsupported call")
        fname = node.func.id
        args = [_build(a, text, variables) for a in node.args]
        if fname in _UNARY:
            if len(args) != 1:
                raise _fail(node, text, f"{fname}() takes one argument")
            fn, (arg,) = _UNARY[fname], args
            return lambda env: fn(arg(env))
        if fname == "pow":
            if len(args) != 2:
                raise _fail(node, text, "pow() takes two arguments")
            a, b = args
            return lambda env: np.power(a(env), b(env))
        if fname in ("min", "max"):
            if len(args) < 2:
                raise _fail(node, text, f"{fname}() needs at least two arguments")
            red = np.minimum if fname == "min" else np.maximum

            def reduce_(env, args=args, red=red):
                acc = args[0](env)
                for a in args[1:]:
                    acc = red(acc, a(env))
                return acc
            return reduce_
        raise _fail(node, text, f"unknown function {fname!r}")
    raise _fail(node, text, f"unsupported syntax {type(node).__name__}")


@lru_cache(maxsize=512)
def compile_expr(text: str, variables: tuple[str, ...]) -> Evaluator:
    """Compile ``text`` into an evaluator taking a ``{name: array}`` mapping."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExprError(f"syntax error at column {exc.offset} in {text!r}") from None
    return _build(tree, text, frozenset(variables))


def referenced_names(text: str) -> set[str]:
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExprError(f"syntax error at column {exc.offset} in {text!r}") from None
    return {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)} - {
        "abs", "min", "max", "pow", "exp", "sq_over_1p"}
