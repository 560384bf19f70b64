"""Small expression grammar for outcome functionals and covariate maps.

Expressions are parsed with :mod:`ast` and evaluated elementwise over a
batch of histories.  Allowed names are ``L{k}`` (first component of block
``k``), ``L{k}_{i}`` (component ``i``, 1-based) and ``A{k}``.  Allowed
functions are ``exp``, ``log``, ``expit``, ``sqrt``, ``abs``, ``ind``,
``min`` and ``max``; comparisons evaluate to 0/1 floats.
"""
from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_NAME = re.compile(r"^(L|A)(\d+)(?:_(\d+))?$")

_FUNCS: dict[str, Callable] = {
    "exp": np.exp,
    "log": np.log,
    "expit": expit,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "ind": lambda x: np.asarray(x, dtype=float) != 0,
    "min": np.minimum,
    "max": np.maximum,
}

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
    ast.Eq: np.equal,
    ast.NotEq: np.not_equal,
}


class ExpressionError(ValueError):
    """Raised for expressions outside the grammar or referencing unknown names."""


@dataclass(frozen=True)
class Ref:
    kind: str  # "L" or "A"
    time: int
    comp: int  # 0-based component for L, 0 for A


def parse_name(name: str) -> Ref:
    m = _NAME.match(name)
    if m is None:
        raise ExpressionError(f"unknown name {name!r}")
    kind, t, c = m.group(1), int(m.group(2)), m.group(3)
    if t < 1:
        raise ExpressionError(f"timepoints are 1-based, got {name!r}")
    if kind == "A" and c is not None:
        raise ExpressionError(f"treatments have no components: {name!r}")
    comp = int(c) - 1 if c is not None else 0
    if comp < 0:
        raise ExpressionError(f"components are 1-based, got {name!r}")
    return Ref(kind, t, comp)


class Expression:
    """A compiled elementwise expression.

    Parameters
    ----------
    source : str
        Expression text, e.g. ``"L2 * A1"`` or ``"ind(L1_2 > 0)"``.
    """

    def __init__(self, source: str):
        self.source = str(source).strip()
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {self.source!r}: {exc.msg}") from None
        self._tree = tree.body
        self.refs: tuple[Ref, ...] = tuple(sorted(set(self._collect(self._tree)),
                                                  key=lambda r: (r.kind, r.time, r.comp)))

    def _collect(self, node):
        if isinstance(node, ast.Name):
            if node.id in _FUNCS:
                raise ExpressionError(f"function {node.id!r} used as a value")
            yield parse_name(node.id)
        elif isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ExpressionError(f"only numeric constants allowed in {self.source!r}")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ExpressionError(f"operator not allowed in {self.source!r}")
            yield from self._collect(node.left)
            yield from self._collect(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ExpressionError(f"operator not allowed in {self.source!r}")
            yield from self._collect(node.operand)
        elif isinstance(node, ast.Compare):
            for op in node.ops:
                if type(op) not in _CMPOPS:
                    raise ExpressionError(f"comparison not allowed in {self.source!r}")
            yield from self._collect(node.left)
            for c in node.comparators:
                yield from self._collect(c)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
                raise ExpressionError(f"function not allowed in {self.source!r}")
            if node.keywords:
                raise ExpressionError(f"keyword arguments not allowed in {self.source!r}")
            for a in node.args:
                yield from self._collect(a)
        else:
            raise ExpressionError(f"construct {type(node).__name__} not allowed in {self.source!r}")

    @property
    def max_l_time(self) -> int:
        return max((r.time for r in self.refs if r.kind == "L"), default=0)

    @property
    def max_a_time(self) -> int:
        return max((r.time for r in self.refs if r.kind == "A"), default=0)

    def evaluate(self, L: Sequence[np.ndarray], A: np.ndarray | None, n: int | None = None) -> np.ndarray:
        """Evaluate on a batch.

        Parameters
        ----------
        L : sequence of (n, d_k) arrays
            Covariate blocks ``L_1, L_2, ...`` available to the expression.
        A : (n, m) int array or None
            Treatment columns ``A_1..A_m``.
        n : int, optional
            Batch size, needed only when no block is available.

        Returns
        -------
        (n,) float array
        """
        if n is None:
            n = L[0].shape[0] if len(L) else A.shape[0]
        env: dict[Ref, np.ndarray] = {}
        for r in self.refs:
            if r.kind == "L":
                if r.time > len(L):
                    raise ExpressionError(f"{self.source!r} reads L{r.time} beyond available history")
                block = L[r.time - 1]
                if r.comp >= block.shape[1]:
                    raise ExpressionError(f"{self.source!r} reads component {r.comp + 1} of L{r.time}")
                env[r] = block[:, r.comp].astype(float)
            else:
                if A is None or r.time > A.shape[1]:
                    raise ExpressionError(f"{self.source!r} reads A{r.time} beyond available history")
                env[r] = A[:, r.time - 1].astype(float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = self._eval(self._tree, env)
        out = np.asarray(out, dtype=float)
        if out.ndim == 0:
            out = np.full(n, float(out))
        return out

    def _eval(self, node, env):
        if isinstance(node, ast.Name):
            return env[parse_name(node.id)]
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, env)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Compare):
            left = self._eval(node.left, env)
            result = None
            for op, comp in zip(node.ops, node.comparators):
                right = self._eval(comp, env)
                cur = _CMPOPS[type(op)](left, right)
                result = cur if result is None else np.logical_and(result, cur)
                left = right
            return np.asarray(result, dtype=float)
        if isinstance(node, ast.Call):
            args = [self._eval(a, env) for a in node.args]
            return np.asarray(_FUNCS[node.func.id](*args), dtype=float)
        raise ExpressionError(f"cannot evaluate {ast.dump(node)}")  # pragma: no cover

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"


class Basis:
    """A covariate map given as a list of expressions, one per column.

    Parameters
    ----------
    terms : sequence of str
        Column expressions; ``"1"`` is the constant column.
    """

    def __init__(self, terms: Sequence[str]):
        if len(terms) == 0:
            raise ExpressionError("a basis needs at least one term")
        self.terms = tuple(str(t).strip() for t in terms)
        self.exprs = tuple(Expression(t) for t in self.terms)

    @property
    def dim(self) -> int:
        return len(self.terms)

    @property
    def has_constant(self) -> bool:
        ones = {_normalize("1"), _normalize("1.0")}
        return any(_normalize(t) in ones for t in self.terms)

    def matrix(self, L: Sequence[np.ndarray], A: np.ndarray | None) -> np.ndarray:
        n = L[0].shape[0]
        return np.column_stack([e.evaluate(L, A, n) for e in self.exprs])

    def contains(self, other: "Basis") -> bool:
        """True when every column of ``other`` is also a column of this basis."""
        mine = {_normalize(t) for t in self.terms}
        return all(_normalize(t) in mine for t in other.terms)

    def to_list(self) -> list[str]:
        return list(self.terms)

    def __repr__(self) -> str:
        return f"Basis({list(self.terms)!r})"


def _normalize(term: str) -> str:
    return ast.dump(ast.parse(term, mode="eval"))
