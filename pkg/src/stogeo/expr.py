"""Arithmetic grammar for config expressions.

Allowed: numbers, ``+ - * / ^`` (``**`` too), parentheses, ``sin cos exp
log`` and the variables ``t, x0, x1, ...``.  Parsing goes through Python's
``ast`` with a whitelist and produces a sympy expression, so derivatives are
exact.
"""

from __future__ import annotations

import ast
import re

import numpy as np
import sympy

from .errors import ConfigError

_FUNCS = {"sin": sympy.sin, "cos": sympy.cos, "exp": sympy.exp, "log": sympy.log}
_VAR = re.compile(r"^x(\d+)$")

T = sympy.Symbol("t", real=True)


def xsym(i):
    return sympy.Symbol(f"x{i}", real=True)


def parse_expression(text, dim=None):
    """Parse ``text`` into a sympy expression in ``t, x0..``."""
    if isinstance(text, (int, float)):
        return sympy.Float(text) if isinstance(text, float) else sympy.Integer(text)
    try:
        tree = ast.parse(str(text).replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression '{text}': {exc.msg}") from None

    def conv(node):
        if isinstance(node, ast.Expression):
            return conv(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return sympy.nsimplify(node.value) if isinstance(node.value, int) else sympy.Float(node.value)
        if isinstance(node, ast.Name):
            if node.id == "t":
                return T
            m = _VAR.match(node.id)
            if m:
                i = int(m.group(1))
                if dim is not None and i >= dim:
                    raise ConfigError(f"variable {node.id} exceeds dimension {dim}")
                return xsym(i)
            if node.id == "pi":
                return sympy.pi
            raise ConfigError(f"unknown name '{node.id}' in '{text}'")
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = conv(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp):
            a, b = conv(node.left), conv(node.right)
            if isinstance(node.op, ast.Add):
                return a + b
            if isinstance(node.op, ast.Sub):
                return a - b
            if isinstance(node.op, ast.Mult):
                return a * b
            if isinstance(node.op, ast.Div):
                return a / b
            if isinstance(node.op, ast.Pow):
                return a ** b
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
                and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords):
            return _FUNCS[node.func.id](conv(node.args[0]))
        raise ConfigError(f"unsupported syntax in '{text}'")

    return conv(tree)


def symbols(dim):
    return [xsym(i) for i in range(dim)]


def lambdify_field(expr, dim):
    """Batched numpy function ``f(t, x)`` with ``x`` of shape ``(..., dim)``.

    ``expr`` may be a scalar expression, a list (vector) or a nested list
    (matrix); the output gets the matching trailing shape.
    """
    xs = symbols(dim)
    arr = np.array(expr, dtype=object)
    shape = arr.shape
    flat = [sympy.sympify(e) for e in arr.ravel()]
    funcs = [sympy.lambdify((T, *xs), e, "numpy") for e in flat]

    def f(t, x):
        x = np.asarray(x, float)
        args = [x[..., i] for i in range(dim)]
        base = x.shape[:-1]
        vals = [np.broadcast_to(np.asarray(fn(t, *args), float), base) for fn in funcs]
        if not shape:
            return np.array(vals[0], float)
        return np.stack(vals, axis=-1).reshape(base + shape)

    return f
