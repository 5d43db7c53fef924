"""Small arithmetic grammar for profiles and initial data read from config.ini.

Only numbers, the declared variables, ``+ - * / **``, unary minus and a fixed
set of numpy functions are accepted. Expressions compile to vectorised
callables.
"""
import ast
import logging

import numpy as np

from packages.errors import ConfigError

logger = logging.getLogger(__name__)

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
    "arctan": np.arctan,
    "min": np.minimum,
    "max": np.maximum,
    "where": np.where,
}
CONSTANTS = {"pi": np.pi}

_BINARY = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}
_COMPARE = {
    ast.Lt: np.less,
    ast.LtE: np.less_equal,
    ast.Gt: np.greater,
    ast.GtE: np.greater_equal,
}


def _check(node, variables, source):
    if isinstance(node, ast.Expression):
        return _check(node.body, variables, source)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return
    if isinstance(node, ast.Name):
        if node.id not in variables and node.id not in CONSTANTS:
            raise ConfigError(f"Unknown name '{node.id}' in expression '{source}'", expression=source)
        return
    if isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
        _check(node.left, variables, source)
        _check(node.right, variables, source)
        return
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        _check(node.operand, variables, source)
        return
    if isinstance(node, ast.Compare) and len(node.ops) == 1 and type(node.ops[0]) in _COMPARE:
        _check(node.left, variables, source)
        _check(node.comparators[0], variables, source)
        return
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in FUNCTIONS:
        if node.keywords:
            raise ConfigError(f"Keyword arguments are not allowed in '{source}'", expression=source)
        for arg in node.args:
            _check(arg, variables, source)
        return
    raise ConfigError(f"Unsupported syntax '{type(node).__name__}' in expression '{source}'", expression=source)


def _evaluate(node, env):
    if isinstance(node, ast.Expression):
        return _evaluate(node.body, env)
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else CONSTANTS[node.id]
    if isinstance(node, ast.BinOp):
        return _BINARY[type(node.op)](_evaluate(node.left, env), _evaluate(node.right, env))
    if isinstance(node, ast.UnaryOp):
        value = _evaluate(node.operand, env)
        return -value if isinstance(node.op, ast.USub) else value
    if isinstance(node, ast.Compare):
        return _COMPARE[type(node.ops[0])](_evaluate(node.left, env), _evaluate(node.comparators[0], env))
    return FUNCTIONS[node.func.id](*[_evaluate(arg, env) for arg in node.args])


def compile_expression(source, variables=("s",)):
    """
    Compile an arithmetic expression into a vectorised function.

    Parameters:
    source (str): Expression text, e.g. ``s*(s-3)``.
    variables (tuple): Names the expression may use, in call order.

    Returns:
    callable: Function of len(variables) array arguments returning an ndarray.
    """
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"Cannot parse expression '{source}': {exc.msg}", expression=source) from exc
    _check(tree, set(variables), source)
    logger.debug("Compiled expression %r in variables %s", source, variables)

    def function(*args):
        env = {name: np.asarray(value, dtype=float) for name, value in zip(variables, args)}
        result = _evaluate(tree, env)
        shape = np.broadcast(*env.values()).shape if env else ()
        return np.broadcast_to(np.asarray(result, dtype=float), shape).copy()

    return function
