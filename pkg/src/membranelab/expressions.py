"""Tiny closed-form expression grammar for config files.

Supports numbers, the coordinate names x (and y in 2D), pi, arithmetic
(+ - * / **), abs, min, max, sqrt, sin, cos, exp, and piecewise via
where(condition, a, b) with a single comparison.  Parsed through the ast
module against a strict whitelist; nothing is ever executed, so configs
stay fully auditable.
"""

from __future__ import annotations

import ast

import numpy as np

__all__ = ["ExpressionError", "compile_expression"]


class ExpressionError(ValueError):
    pass


_FUNCTIONS = {
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "where": np.where,
}

_CONSTANTS = {"pi": np.pi, "e": np.e}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}

_CMPOPS = {
    ast.Lt: np.less,
    ast.LtE: np.less_equal,
    ast.Gt: np.greater,
    ast.GtE: np.greater_equal,
}


def compile_expression(text: str, variables: tuple = ("x",)):
    """Compile an expression to a vectorized callable of the named variables."""
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse expression {text!r}: {exc.msg}") from exc
    _check(tree.body, variables, text)

    def evaluate(*args):
        if len(args) != len(variables):
            raise ExpressionError(f"expression expects {variables}, got {len(args)} args")
        env = dict(zip(variables, (np.asarray(a, dtype=float) for a in args)))
        out = _eval(tree.body, env)
        return np.broadcast_to(np.asarray(out, dtype=float),
                               np.broadcast(*args).shape if len(args) > 1
                               else np.shape(args[0])).copy()

    evaluate.source = text
    return evaluate


def _check(node, variables, text):
    if isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExpressionError(f"non-numeric constant in {text!r}")
        return
    if isinstance(node, ast.Name):
        if node.id not in variables and node.id not in _CONSTANTS:
            raise ExpressionError(f"unknown name {node.id!r} in {text!r}")
        return
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        _check(node.left, variables, text)
        _check(node.right, variables, text)
        return
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        _check(node.operand, variables, text)
        return
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ExpressionError(f"unknown function in {text!r}")
        if node.keywords:
            raise ExpressionError("keyword arguments are not part of the grammar")
        for arg in node.args:
            _check(arg, variables, text)
        return
    if isinstance(node, ast.Compare):
        if len(node.ops) != 1 or type(node.ops[0]) not in _CMPOPS:
            raise ExpressionError(f"unsupported comparison in {text!r}")
        _check(node.left, variables, text)
        _check(node.comparators[0], variables, text)
        return
    raise ExpressionError(f"unsupported syntax {type(node).__name__} in {text!r}")


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env.get(node.id, _CONSTANTS.get(node.id))
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        val = _eval(node.operand, env)
        return -val if isinstance(node.op, ast.USub) else +val
    if isinstance(node, ast.Call):
        return _FUNCTIONS[node.func.id](*(_eval(a, env) for a in node.args))
    if isinstance(node, ast.Compare):
        return _CMPOPS[type(node.ops[0])](_eval(node.left, env),
                                          _eval(node.comparators[0], env))
    raise ExpressionError("unreachable")
