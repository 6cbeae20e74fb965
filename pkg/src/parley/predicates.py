"""Payload assertion expressions.

Assertions are written in a small Python-expression subset ("pyexpr-like"):
comparisons (including chains), ``and``/``or``/``not``, integer arithmetic with
``+ - * /`` (division is floor division), the builtin ``size(x)`` giving the
byte length of a string or data value, integer and quoted string literals, and
the keyword constants ``true``/``false``. Anything else is rejected at compile
time.

Evaluation is total: type errors, unbound variables, and division by zero
produce an :class:`EvalError` value instead of raising, so a monitor can turn
them into verdicts without exception handling on the hot path.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass
from typing import Mapping, Union

BUILTIN_FUNCTIONS = frozenset({"size"})
KEYWORD_CONSTANTS = {"true": True, "false": False}


class PredicateSyntaxError(ValueError):
    """Raised when an assertion source is not in the supported subset."""


@dataclass(frozen=True)
class EvalError:
    """A failed evaluation; ``detail`` says what went wrong."""

    detail: str


EvalResult = Union[bool, EvalError]

_ALLOWED_CMPOPS = (ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.Eq, ast.NotEq)
_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div)


def _check_node(node: ast.AST, source: str) -> None:
    if isinstance(node, ast.Expression):
        _check_node(node.body, source)
    elif isinstance(node, ast.BoolOp):
        for value in node.values:
            _check_node(value, source)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.Not, ast.USub)):
            raise PredicateSyntaxError(f"unsupported operator in {source!r}")
        _check_node(node.operand, source)
    elif isinstance(node, ast.BinOp):
        if not isinstance(node.op, _ALLOWED_BINOPS):
            raise PredicateSyntaxError(f"unsupported operator in {source!r}")
        _check_node(node.left, source)
        _check_node(node.right, source)
    elif isinstance(node, ast.Compare):
        for op in node.ops:
            if not isinstance(op, _ALLOWED_CMPOPS):
                raise PredicateSyntaxError(f"unsupported comparison in {source!r}")
        _check_node(node.left, source)
        for cmp in node.comparators:
            _check_node(cmp, source)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in BUILTIN_FUNCTIONS:
            raise PredicateSyntaxError(f"only size(...) calls are allowed in {source!r}")
        if len(node.args) != 1 or node.keywords:
            raise PredicateSyntaxError(f"size takes exactly one argument in {source!r}")
        _check_node(node.args[0], source)
    elif isinstance(node, ast.Name):
        pass
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, str, bool)) or isinstance(node.value, float):
            raise PredicateSyntaxError(f"unsupported literal {node.value!r} in {source!r}")
    else:
        raise PredicateSyntaxError(
            f"unsupported syntax ({type(node).__name__}) in {source!r}"
        )


def _free_names(tree: ast.Expression) -> frozenset:
    # ast.walk yields parents before children, so every callee Name is marked
    # before it is visited as a Name node.
    names = set()
    callees = set()
    for child in ast.walk(tree):
        if isinstance(child, ast.Call) and isinstance(child.func, ast.Name):
            callees.add(id(child.func))
        if isinstance(child, ast.Name) and id(child) not in callees:
            names.add(child.id)
    names -= set(KEYWORD_CONSTANTS)
    names -= BUILTIN_FUNCTIONS
    return frozenset(names)


@dataclass(frozen=True)
class CompiledPredicate:
    source: str
    free_vars: frozenset
    _tree: ast.Expression

    def eval(self, env: Mapping) -> EvalResult:
        try:
            value = _eval_node(self._tree.body, env)
        except _EvalFailure as exc:
            return EvalError(exc.detail)
        if not isinstance(value, bool):
            return EvalError(f"assertion is not boolean: {self.source!r}")
        return value


def compile_predicate(source: str) -> CompiledPredicate:
    """Parse and validate an assertion source; raises PredicateSyntaxError."""
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise PredicateSyntaxError(f"bad assertion {source!r}: {exc.msg}") from None
    _check_node(tree, source)
    return CompiledPredicate(source, _free_names(tree), tree)


def free_variables(source: str) -> frozenset:
    return compile_predicate(source).free_vars


def evaluate(source: str, env: Mapping) -> EvalResult:
    """One-shot compile and evaluate; syntax problems become EvalError."""
    try:
        pred = compile_predicate(source)
    except PredicateSyntaxError as exc:
        return EvalError(str(exc))
    return pred.eval(env)


class _EvalFailure(Exception):
    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


def _size(value) -> int:
    if isinstance(value, bytes):
        return len(value)
    if isinstance(value, str):
        return len(value.encode("utf-8"))
    raise _EvalFailure(f"size() needs a string or data value, got {_type_name(value)}")


def _type_name(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, str):
        return "string"
    if isinstance(value, bytes):
        return "data"
    return type(value).__name__


def _require_int(value, context: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise _EvalFailure(f"{context} needs int operands, got {_type_name(value)}")
    return value


def _require_bool(value, context: str) -> bool:
    if not isinstance(value, bool):
        raise _EvalFailure(f"{context} needs bool operands, got {_type_name(value)}")
    return value


def _eval_node(node: ast.AST, env: Mapping):
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.Name):
        if node.id in KEYWORD_CONSTANTS:
            return KEYWORD_CONSTANTS[node.id]
        try:
            return env[node.id]
        except KeyError:
            raise _EvalFailure(f"unbound variable: {node.id}") from None
    if isinstance(node, ast.Call):
        return _size(_eval_node(node.args[0], env))
    if isinstance(node, ast.BoolOp):
        # Short-circuit left to right; unevaluated operands never fail.
        is_and = isinstance(node.op, ast.And)
        for value in node.values:
            result = _require_bool(_eval_node(value, env), "and/or")
            if is_and and not result:
                return False
            if not is_and and result:
                return True
        return is_and
    if isinstance(node, ast.UnaryOp):
        if isinstance(node.op, ast.Not):
            return not _require_bool(_eval_node(node.operand, env), "not")
        return -_require_int(_eval_node(node.operand, env), "unary minus")
    if isinstance(node, ast.BinOp):
        left = _require_int(_eval_node(node.left, env), "arithmetic")
        right = _require_int(_eval_node(node.right, env), "arithmetic")
        if isinstance(node.op, ast.Add):
            return left + right
        if isinstance(node.op, ast.Sub):
            return left - right
        if isinstance(node.op, ast.Mult):
            return left * right
        if right == 0:
            raise _EvalFailure("division by zero")
        return left // right
    if isinstance(node, ast.Compare):
        left = _eval_node(node.left, env)
        for op, comparator in zip(node.ops, node.comparators):
            right = _eval_node(comparator, env)
            if not _compare(op, left, right):
                return False
            left = right
        return True
    raise _EvalFailure(f"unsupported syntax at evaluation: {type(node).__name__}")


def _compare(op: ast.cmpop, left, right) -> bool:
    if isinstance(op, (ast.Eq, ast.NotEq)):
        if _type_name(left) != _type_name(right):
            raise _EvalFailure(
                f"cannot compare {_type_name(left)} with {_type_name(right)}"
            )
        return (left == right) if isinstance(op, ast.Eq) else (left != right)
    ordered = (int, str)
    if isinstance(left, bool) or isinstance(right, bool):
        raise _EvalFailure("ordering is not defined for bool")
    if not isinstance(left, ordered) or _type_name(left) != _type_name(right):
        raise _EvalFailure(
            f"cannot order {_type_name(left)} against {_type_name(right)}"
        )
    if isinstance(op, ast.Lt):
        return left < right
    if isinstance(op, ast.LtE):
        return left <= right
    if isinstance(op, ast.Gt):
        return left > right
    return left >= right
