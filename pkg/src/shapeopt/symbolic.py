"""Immutable symbolic tensor expressions and their directional derivatives.

Expressions are trees of scalar-, vector- (length 2) or matrix- (2x2) valued
nodes. They are built once, shared freely (differentiation reuses subtrees)
and never mutated. Three groups of operations live here:

* ``diff`` -- directional differentiation with respect to the spatial
  coordinates, the deformation-gradient symbol, a named parameter or a grid
  function.
* ``pullback`` / ``diff_shape`` -- rewriting an integrand to the reference
  configuration and differentiating it with respect to the domain shape.
* ``evaluate`` -- numeric evaluation against an :class:`EvalContext`, with
  numpy broadcasting so that whole batches of points (and basis functions)
  are handled in one sweep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Union

import numpy as np

__all__ = [
    "Expr",
    "ScalarConst",
    "TensorConst",
    "Coordinate",
    "Position",
    "Parameter",
    "DeformationGradient",
    "NormalVector",
    "TangentVector",
    "TrialRef",
    "TestRef",
    "GridFuncRef",
    "GradOf",
    "ShapeError",
    "DifferentiationError",
    "EvaluationError",
    "PullbackError",
    "VolumeRegion",
    "BoundaryRegion",
    "FormTerm",
    "vol",
    "bnd",
    "X",
    "coord",
    "identity_matrix",
    "vec2",
    "as_expr",
    "diff",
    "simplify",
    "substitute_shape_identity",
    "replace_functions",
    "pullback",
    "diff_shape",
    "diff_shape_twice",
    "evaluate",
    "EvalContext",
    "tree_dump",
    "contains_node",
]

SCALAR = ()
VECTOR = (2,)
MATRIX = (2, 2)


class ShapeError(ValueError):
    """Value shapes of child expressions do not fit the requested node."""


class DifferentiationError(ValueError):
    """Differentiation with respect to an unsupported node or direction."""


class EvaluationError(RuntimeError):
    """The evaluation context cannot supply a value for some node."""


class PullbackError(ValueError):
    """Integrand cannot be pulled back (e.g. it was pulled back already)."""


def _shape_name(shape):
    return {SCALAR: "scalar", VECTOR: "vector", MATRIX: "matrix"}[shape]


class Expr:
    """Base class of all expression nodes.

    Nodes are immutable; ``shape`` is the value shape (``()``, ``(2,)`` or
    ``(2, 2)``).  Equality and hashing are by identity, which lets shared
    subtrees act as cache keys during evaluation.
    """

    __slots__ = ("shape",)

    def __init__(self, shape):
        object.__setattr__(self, "shape", shape)

    def __setattr__(self, name, value):
        raise AttributeError("expressions are immutable")

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return Add(self, as_expr(other, self.shape))

    def __radd__(self, other):
        return Add(as_expr(other, self.shape), self)

    def __sub__(self, other):
        return Sub(self, as_expr(other, self.shape))

    def __rsub__(self, other):
        return Sub(as_expr(other, self.shape), self)

    def __neg__(self):
        return Neg(self)

    def __mul__(self, other):
        other = as_expr(other)
        return _mul_dispatch(self, other)

    def __rmul__(self, other):
        return _mul_dispatch(as_expr(other), self)

    def __truediv__(self, other):
        other = as_expr(other)
        if other.shape != SCALAR:
            raise ShapeError("can only divide by a scalar expression")
        if isinstance(other, ScalarConst):
            return Mul(ScalarConst(1.0 / other.value), self)
        return Mul(Pow(other, -1.0), self)

    def __pow__(self, exponent):
        return Pow(self, exponent)

    def __getitem__(self, idx):
        if self.shape == VECTOR:
            return Component(self, idx)
        if self.shape == MATRIX:
            i, j = idx
            return Entry(self, i, j)
        raise ShapeError("cannot index a scalar expression")

    def children(self) -> tuple:
        return ()

    def label(self) -> str:
        return type(self).__name__

    def __repr__(self):
        kids = ", ".join(repr(c) for c in self.children())
        return f"{self.label()}({kids})" if kids else self.label()


def _mul_dispatch(a: Expr, b: Expr) -> Expr:
    if a.shape == SCALAR:
        return Mul(a, b)
    if b.shape == SCALAR:
        return Mul(b, a)
    if a.shape == MATRIX and b.shape == VECTOR:
        return MatVec(a, b)
    if a.shape == MATRIX and b.shape == MATRIX:
        return MatMat(a, b)
    if a.shape == VECTOR and b.shape == VECTOR:
        return InnerProduct(a, b)
    raise ShapeError(
        f"no product of {_shape_name(a.shape)} and {_shape_name(b.shape)}"
    )


def as_expr(value, shape=None) -> Expr:
    """Wrap numbers/arrays as constant expressions; pass expressions through."""
    if isinstance(value, Expr):
        return value
    if np.isscalar(value):
        return ScalarConst(float(value))
    arr = np.asarray(value, dtype=float)
    if arr.shape in (VECTOR, MATRIX):
        return TensorConst(arr)
    if shape is not None and arr.shape == shape:
        return TensorConst(arr)
    raise ShapeError(f"cannot interpret array of shape {arr.shape} as expression")


# ---------------------------------------------------------------------------
# leaf nodes
# ---------------------------------------------------------------------------


class ScalarConst(Expr):
    __slots__ = ("value",)

    def __init__(self, value: float):
        super().__init__(SCALAR)
        object.__setattr__(self, "value", float(value))

    def label(self):
        return f"const {self.value:g}"


class TensorConst(Expr):
    """Constant vector or matrix."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values, dtype=float)
        if arr.shape not in (VECTOR, MATRIX):
            raise ShapeError(f"tensor constant must be (2,) or (2,2), got {arr.shape}")
        super().__init__(arr.shape)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def label(self):
        return f"const {self.values.tolist()}"


class Coordinate(Expr):
    """A single spatial coordinate (index 0 or 1)."""

    __slots__ = ("index",)

    def __init__(self, index: int):
        if index not in (0, 1):
            raise ShapeError("coordinate index must be 0 or 1")
        super().__init__(SCALAR)
        object.__setattr__(self, "index", int(index))

    def label(self):
        return f"coordinate {'xy'[self.index]}"


class Position(Expr):
    """The spatial point as a 2-vector; components are the coordinates."""

    __slots__ = ()

    def __init__(self):
        super().__init__(VECTOR)

    def label(self):
        return "position"


class Parameter(Expr):
    """Named scalar parameter, bound at evaluation time."""

    __slots__ = ("name",)

    def __init__(self, name: str):
        super().__init__(SCALAR)
        object.__setattr__(self, "name", str(name))

    def label(self):
        return f"parameter {self.name}"


class DeformationGradient(Expr):
    """Symbolic Jacobian of the domain transformation.

    Acts purely as a differentiation symbol: it always evaluates to the
    identity matrix.  Shape derivatives arise by differentiating with
    respect to this symbol.
    """

    __slots__ = ()

    def __init__(self):
        super().__init__(MATRIX)

    def label(self):
        return "defgrad"


class NormalVector(Expr):
    """Outward unit normal, available on boundary regions only."""

    __slots__ = ()

    def __init__(self):
        super().__init__(VECTOR)

    def label(self):
        return "normal"


class TangentVector(Expr):
    """Unit tangent along the boundary, available on boundary regions only."""

    __slots__ = ()

    def __init__(self):
        super().__init__(VECTOR)

    def label(self):
        return "tangent"


def _vshape(vdim: int):
    if vdim == 1:
        return SCALAR
    if vdim == 2:
        return VECTOR
    raise ShapeError("value dimension must be 1 or 2")


class _FuncRef(Expr):
    """Common base of trial/test/grid-function references."""

    __slots__ = ("space", "vdim")

    def __init__(self, space, vdim: int):
        super().__init__(_vshape(vdim))
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "vdim", int(vdim))


class TrialRef(_FuncRef):
    def label(self):
        return f"trial (vdim={self.vdim})"


class TestRef(_FuncRef):
    def label(self):
        return f"test (vdim={self.vdim})"


class GridFuncRef(Expr):
    __slots__ = ("gridfunc", "vdim")

    def __init__(self, gridfunc, vdim: int):
        super().__init__(_vshape(vdim))
        object.__setattr__(self, "gridfunc", gridfunc)
        object.__setattr__(self, "vdim", int(vdim))

    def label(self):
        return f"gridfunc (vdim={self.vdim})"


FunctionRef = Union[TrialRef, TestRef, GridFuncRef]


class GradOf(Expr):
    """Reference-configuration gradient of a function reference.

    For a scalar function this is the column gradient; for a 2-vector
    function it is the matrix ``G`` with ``G[i, j] = d u_j / d x_i``.  The
    ``traced`` flag records that the gradient is restricted to a boundary.
    """

    __slots__ = ("func", "traced")

    def __init__(self, func: Expr, traced: bool = False):
        if not isinstance(func, (TrialRef, TestRef, GridFuncRef)):
            raise ShapeError("gradient only of trial/test/grid functions")
        shape = VECTOR if func.shape == SCALAR else MATRIX
        super().__init__(shape)
        object.__setattr__(self, "func", func)
        object.__setattr__(self, "traced", bool(traced))

    def children(self):
        return (self.func,)

    def label(self):
        return "grad" + (" (traced)" if self.traced else "")


# ---------------------------------------------------------------------------
# composite nodes
# ---------------------------------------------------------------------------


class _Binary(Expr):
    __slots__ = ("left", "right")

    def __init__(self, shape, left: Expr, right: Expr):
        super().__init__(shape)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def children(self):
        return (self.left, self.right)


class _Unary(Expr):
    __slots__ = ("operand",)

    def __init__(self, shape, operand: Expr):
        super().__init__(shape)
        object.__setattr__(self, "operand", operand)

    def children(self):
        return (self.operand,)


class Add(_Binary):
    def __init__(self, a, b):
        if a.shape != b.shape:
            raise ShapeError("addition needs matching shapes")
        super().__init__(a.shape, a, b)

    def label(self):
        return "add"


class Sub(_Binary):
    def __init__(self, a, b):
        if a.shape != b.shape:
            raise ShapeError("subtraction needs matching shapes")
        super().__init__(a.shape, a, b)

    def label(self):
        return "sub"


class Neg(_Unary):
    def __init__(self, a):
        super().__init__(a.shape, a)

    def label(self):
        return "neg"


class Mul(_Binary):
    """Scalar times anything."""

    def __init__(self, scalar, other):
        if scalar.shape != SCALAR:
            raise ShapeError("first factor of Mul must be scalar")
        super().__init__(other.shape, scalar, other)

    def label(self):
        return "mul"


class MatVec(_Binary):
    def __init__(self, mat, vec):
        if mat.shape != MATRIX or vec.shape != VECTOR:
            raise ShapeError("MatVec needs matrix and vector")
        super().__init__(VECTOR, mat, vec)

    def label(self):
        return "matvec"


class MatMat(_Binary):
    def __init__(self, a, b):
        if a.shape != MATRIX or b.shape != MATRIX:
            raise ShapeError("MatMat needs two matrices")
        super().__init__(MATRIX, a, b)

    def label(self):
        return "matmat"


class Transpose(_Unary):
    def __init__(self, a):
        if a.shape != MATRIX:
            raise ShapeError("transpose of non-matrix")
        super().__init__(MATRIX, a)

    def label(self):
        return "transpose"


class Inverse(_Unary):
    def __init__(self, a):
        if a.shape != MATRIX:
            raise ShapeError("inverse of non-square-matrix")
        super().__init__(MATRIX, a)

    def label(self):
        return "inverse"


class Det(_Unary):
    def __init__(self, a):
        if a.shape != MATRIX:
            raise ShapeError("determinant of non-square-matrix")
        super().__init__(SCALAR, a)

    def label(self):
        return "det"


class Trace(_Unary):
    def __init__(self, a):
        if a.shape != MATRIX:
            raise ShapeError("trace of non-square-matrix")
        super().__init__(SCALAR, a)

    def label(self):
        return "trace"


class InnerProduct(_Binary):
    """Euclidean inner product of two vectors or Frobenius product of matrices."""

    def __init__(self, a, b):
        if a.shape != b.shape or a.shape == SCALAR:
            raise ShapeError("inner product needs two vectors or two matrices")
        super().__init__(SCALAR, a, b)

    def label(self):
        return "inner"


class OuterProduct(_Binary):
    def __init__(self, a, b):
        if a.shape != VECTOR or b.shape != VECTOR:
            raise ShapeError("outer product needs two vectors")
        super().__init__(MATRIX, a, b)

    def label(self):
        return "outer"


class Norm(_Unary):
    def __init__(self, a):
        if a.shape != VECTOR:
            raise ShapeError("norm of non-vector")
        super().__init__(SCALAR, a)

    def label(self):
        return "norm"


class Pow(_Unary):
    __slots__ = ("exponent",)

    def __init__(self, base, exponent):
        if base.shape != SCALAR:
            raise ShapeError("power of non-scalar")
        super().__init__(SCALAR, base)
        object.__setattr__(self, "exponent", float(exponent))

    def label(self):
        return f"pow {self.exponent:g}"


class Exp(_Unary):
    def __init__(self, a):
        if a.shape != SCALAR:
            raise ShapeError("exp of non-scalar")
        super().__init__(SCALAR, a)

    def label(self):
        return "exp"


class Sqrt(_Unary):
    def __init__(self, a):
        if a.shape != SCALAR:
            raise ShapeError("sqrt of non-scalar")
        super().__init__(SCALAR, a)

    def label(self):
        return "sqrt"


class Component(_Unary):
    __slots__ = ("index",)

    def __init__(self, vec, index):
        if vec.shape != VECTOR:
            raise ShapeError("component of non-vector")
        if index not in (0, 1):
            raise ShapeError("component index must be 0 or 1")
        super().__init__(SCALAR, vec)
        object.__setattr__(self, "index", int(index))

    def label(self):
        return f"component {self.index}"


class Entry(_Unary):
    __slots__ = ("row", "col")

    def __init__(self, mat, row, col):
        if mat.shape != MATRIX:
            raise ShapeError("entry of non-matrix")
        if row not in (0, 1) or col not in (0, 1):
            raise ShapeError("entry indices must be 0 or 1")
        super().__init__(SCALAR, mat)
        object.__setattr__(self, "row", int(row))
        object.__setattr__(self, "col", int(col))

    def label(self):
        return f"entry {self.row},{self.col}"


# convenience constructors --------------------------------------------------


def X() -> Position:
    return Position()


def coord(index: int) -> Coordinate:
    return Coordinate(index)


def identity_matrix() -> TensorConst:
    return TensorConst(np.eye(2))


def vec2(a, b) -> Expr:
    """Vector expression from two scalar expressions."""
    a = as_expr(a)
    b = as_expr(b)
    if a.shape != SCALAR or b.shape != SCALAR:
        raise ShapeError("vec2 needs two scalar expressions")
    return Add(
        Mul(a, TensorConst([1.0, 0.0])),
        Mul(b, TensorConst([0.0, 1.0])),
    )


def grad(func: FunctionRef, traced: bool = False) -> GradOf:
    return GradOf(func, traced)


def div(func: FunctionRef, traced: bool = False) -> Expr:
    g = GradOf(func, traced)
    if g.shape != MATRIX:
        raise ShapeError("divergence needs a vector-valued function")
    return Trace(g)


def sqrt(e) -> Sqrt:
    return Sqrt(as_expr(e))


def exp(e) -> Exp:
    return Exp(as_expr(e))


def norm(e) -> Norm:
    return Norm(as_expr(e))


# ---------------------------------------------------------------------------
# tree utilities
# ---------------------------------------------------------------------------


def contains_node(expr: Expr, kind) -> bool:
    stack = [expr]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, kind):
            return True
        stack.extend(node.children())
    return False


def tree_dump(expr: Expr) -> str:
    """Indented one-node-per-line dump (stable; used for golden tests)."""
    lines = []

    def walk(node, depth):
        lines.append("  " * depth + node.label())
        for child in node.children():
            walk(child, depth + 1)

    walk(expr, 0)
    return "\n".join(lines)


def _zero(shape) -> Expr:
    if shape == SCALAR:
        return ScalarConst(0.0)
    return TensorConst(np.zeros(shape))


def _is_zero(expr: Expr) -> bool:
    if isinstance(expr, ScalarConst):
        return expr.value == 0.0
    if isinstance(expr, TensorConst):
        return not expr.values.any()
    return False


def _is_one(expr: Expr) -> bool:
    return isinstance(expr, ScalarConst) and expr.value == 1.0


def _is_identity(expr: Expr) -> bool:
    return (
        isinstance(expr, TensorConst)
        and expr.shape == MATRIX
        and np.array_equal(expr.values, np.eye(2))
    )


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

_DIFF_VARS = (Position, Coordinate, DeformationGradient, Parameter, GridFuncRef)


def _matches_var(node: Expr, var: Expr) -> bool:
    if isinstance(var, Position):
        return isinstance(node, Position)
    if isinstance(var, Coordinate):
        return isinstance(node, Coordinate) and node.index == var.index
    if isinstance(var, DeformationGradient):
        return isinstance(node, DeformationGradient)
    if isinstance(var, Parameter):
        return isinstance(node, Parameter) and node.name == var.name
    if isinstance(var, GridFuncRef):
        return isinstance(node, GridFuncRef) and node.gridfunc is var.gridfunc
    return False


def diff(expr: Expr, var: Expr, direction: Expr) -> Expr:
    """Directional derivative of ``expr`` at ``var`` in ``direction``.

    The result is the raw derivative tree; run :func:`simplify` to prune the
    zero branches that the product rule leaves behind.  Trial, test and grid
    functions are treated as independent of the spatial variables, so their
    spatial derivative is the zero tree.
    """
    if not isinstance(var, _DIFF_VARS):
        raise DifferentiationError(
            f"cannot differentiate with respect to {var.label()}"
        )
    direction = as_expr(direction, var.shape)
    if direction.shape != var.shape:
        raise DifferentiationError(
            f"direction shape {_shape_name(direction.shape)} does not match "
            f"variable shape {_shape_name(var.shape)}"
        )
    if isinstance(var, GridFuncRef) and not isinstance(
        direction, (TrialRef, TestRef, GridFuncRef)
    ):
        raise DifferentiationError(
            "direction for a grid-function derivative must itself be a "
            "trial/test/grid function"
        )
    memo: dict[int, Expr] = {}
    return _diff(expr, var, direction, memo)


def _diff(node: Expr, var: Expr, direction: Expr, memo) -> Expr:
    key = id(node)
    hit = memo.get(key)
    if hit is not None:
        return hit
    result = _diff_node(node, var, direction, memo)
    memo[key] = result
    return result


def _diff_node(node: Expr, var: Expr, direction: Expr, memo) -> Expr:
    if _matches_var(node, var):
        return direction

    spatial = isinstance(var, (Position, Coordinate))

    # leaves
    if isinstance(node, (ScalarConst, TensorConst, Parameter)):
        return _zero(node.shape)
    if isinstance(node, (NormalVector, TangentVector, DeformationGradient)):
        return _zero(node.shape)
    if isinstance(node, Coordinate):
        if isinstance(var, Position):
            return Component(direction, node.index)
        return _zero(SCALAR)
    if isinstance(node, Position):
        if isinstance(var, Coordinate):
            basis = np.zeros(2)
            basis[var.index] = 1.0
            return Mul(direction, TensorConst(basis))
        return _zero(VECTOR)
    if isinstance(node, (TrialRef, TestRef, GridFuncRef)):
        # spatial dependency of finite element functions is omitted
        return _zero(node.shape)
    if isinstance(node, GradOf):
        if isinstance(var, GridFuncRef) and _matches_var(node.func, var):
            return GradOf(direction, node.traced)
        return _zero(node.shape)

    # composites
    if isinstance(node, Add):
        return Add(
            _diff(node.left, var, direction, memo),
            _diff(node.right, var, direction, memo),
        )
    if isinstance(node, Sub):
        return Sub(
            _diff(node.left, var, direction, memo),
            _diff(node.right, var, direction, memo),
        )
    if isinstance(node, Neg):
        return Neg(_diff(node.operand, var, direction, memo))
    if isinstance(node, Mul):
        a, b = node.left, node.right
        if isinstance(a, ScalarConst):
            return Mul(a, _diff(b, var, direction, memo))
        if isinstance(b, ScalarConst):
            return Mul(_diff(a, var, direction, memo), b)
        return Add(
            Mul(_diff(a, var, direction, memo), b),
            Mul(a, _diff(b, var, direction, memo)),
        )
    if isinstance(node, MatVec):
        return Add(
            MatVec(_diff(node.left, var, direction, memo), node.right),
            MatVec(node.left, _diff(node.right, var, direction, memo)),
        )
    if isinstance(node, MatMat):
        return Add(
            MatMat(_diff(node.left, var, direction, memo), node.right),
            MatMat(node.left, _diff(node.right, var, direction, memo)),
        )
    if isinstance(node, InnerProduct):
        return Add(
            InnerProduct(_diff(node.left, var, direction, memo), node.right),
            InnerProduct(node.left, _diff(node.right, var, direction, memo)),
        )
    if isinstance(node, OuterProduct):
        return Add(
            OuterProduct(_diff(node.left, var, direction, memo), node.right),
            OuterProduct(node.left, _diff(node.right, var, direction, memo)),
        )
    if isinstance(node, Transpose):
        return Transpose(_diff(node.operand, var, direction, memo))
    if isinstance(node, Inverse):
        inv = Inverse(node.operand)
        dop = _diff(node.operand, var, direction, memo)
        return Neg(MatMat(MatMat(inv, dop), inv))
    if isinstance(node, Det):
        dop = _diff(node.operand, var, direction, memo)
        return Mul(Det(node.operand), Trace(MatMat(Inverse(node.operand), dop)))
    if isinstance(node, Trace):
        return Trace(_diff(node.operand, var, direction, memo))
    if isinstance(node, Norm):
        dop = _diff(node.operand, var, direction, memo)
        # (v . dv) / |v|; the reciprocal errors at evaluation near |v| = 0
        return Mul(InnerProduct(node.operand, dop), Pow(Norm(node.operand), -1.0))
    if isinstance(node, Pow):
        dop = _diff(node.operand, var, direction, memo)
        factor = Mul(ScalarConst(node.exponent), Pow(node.operand, node.exponent - 1.0))
        return Mul(factor, dop)
    if isinstance(node, Exp):
        return Mul(Exp(node.operand), _diff(node.operand, var, direction, memo))
    if isinstance(node, Sqrt):
        dop = _diff(node.operand, var, direction, memo)
        return Mul(Mul(ScalarConst(0.5), Pow(node.operand, -0.5)), dop)
    if isinstance(node, Component):
        return Component(_diff(node.operand, var, direction, memo), node.index)
    if isinstance(node, Entry):
        return Entry(_diff(node.operand, var, direction, memo), node.row, node.col)

    raise DifferentiationError(f"no differentiation rule for {node.label()}")


# ---------------------------------------------------------------------------
# simplification and substitution
# ---------------------------------------------------------------------------


def simplify(expr: Expr) -> Expr:
    """Conservative, value-preserving pruning.

    Removes zero additions, one/zero multiplications, folds determinant and
    inverse of the identity and drops product nodes with a structurally zero
    factor.  No floating-point sums are reassociated.
    """
    memo: dict[int, Expr] = {}
    return _simplify(expr, memo)


def _simplify(node: Expr, memo) -> Expr:
    key = id(node)
    hit = memo.get(key)
    if hit is not None:
        return hit
    result = _simplify_node(node, memo)
    memo[key] = result
    return result


def _simplify_node(node: Expr, memo) -> Expr:
    if isinstance(node, Add):
        a = _simplify(node.left, memo)
        b = _simplify(node.right, memo)
        if _is_zero(a):
            return b
        if _is_zero(b):
            return a
        return Add(a, b)
    if isinstance(node, Sub):
        a = _simplify(node.left, memo)
        b = _simplify(node.right, memo)
        if _is_zero(b):
            return a
        if _is_zero(a):
            return Neg(b)
        return Sub(a, b)
    if isinstance(node, Neg):
        a = _simplify(node.operand, memo)
        if _is_zero(a):
            return a
        if isinstance(a, Neg):
            return a.operand
        return Neg(a)
    if isinstance(node, Mul):
        a = _simplify(node.left, memo)
        b = _simplify(node.right, memo)
        if _is_zero(a) or _is_zero(b):
            return _zero(node.shape)
        if _is_one(a):
            return b
        if _is_one(b):
            return a
        return Mul(a, b)
    if isinstance(node, MatVec):
        m = _simplify(node.left, memo)
        v = _simplify(node.right, memo)
        if _is_zero(m) or _is_zero(v):
            return _zero(VECTOR)
        if _is_identity(m):
            return v
        return MatVec(m, v)
    if isinstance(node, MatMat):
        a = _simplify(node.left, memo)
        b = _simplify(node.right, memo)
        if _is_zero(a) or _is_zero(b):
            return _zero(MATRIX)
        if _is_identity(a):
            return b
        if _is_identity(b):
            return a
        return MatMat(a, b)
    if isinstance(node, InnerProduct):
        a = _simplify(node.left, memo)
        b = _simplify(node.right, memo)
        if _is_zero(a) or _is_zero(b):
            return ScalarConst(0.0)
        return InnerProduct(a, b)
    if isinstance(node, OuterProduct):
        a = _simplify(node.left, memo)
        b = _simplify(node.right, memo)
        if _is_zero(a) or _is_zero(b):
            return _zero(MATRIX)
        return OuterProduct(a, b)
    if isinstance(node, Transpose):
        a = _simplify(node.operand, memo)
        if isinstance(a, TensorConst):
            return TensorConst(a.values.T)
        if _is_zero(a):
            return a
        return Transpose(a)
    if isinstance(node, Inverse):
        a = _simplify(node.operand, memo)
        if _is_identity(a):
            return a
        return Inverse(a)
    if isinstance(node, Det):
        a = _simplify(node.operand, memo)
        if _is_identity(a):
            return ScalarConst(1.0)
        return Det(a)
    if isinstance(node, Trace):
        a = _simplify(node.operand, memo)
        if _is_zero(a):
            return ScalarConst(0.0)
        if isinstance(a, TensorConst):
            return ScalarConst(float(np.trace(a.values)))
        return Trace(a)
    if isinstance(node, Norm):
        a = _simplify(node.operand, memo)
        if _is_zero(a):
            return ScalarConst(0.0)
        return Norm(a)
    if isinstance(node, Pow):
        a = _simplify(node.operand, memo)
        if node.exponent == 1.0:
            return a
        return Pow(a, node.exponent)
    if isinstance(node, Exp):
        return Exp(_simplify(node.operand, memo))
    if isinstance(node, Sqrt):
        return Sqrt(_simplify(node.operand, memo))
    if isinstance(node, Component):
        a = _simplify(node.operand, memo)
        if isinstance(a, TensorConst):
            return ScalarConst(float(a.values[node.index]))
        if _is_zero(a):
            return ScalarConst(0.0)
        return Component(a, node.index)
    if isinstance(node, Entry):
        a = _simplify(node.operand, memo)
        if isinstance(a, TensorConst):
            return ScalarConst(float(a.values[node.row, node.col]))
        if _is_zero(a):
            return ScalarConst(0.0)
        return Entry(a, node.row, node.col)
    return node


def _rebuild(node: Expr, new_children) -> Expr:
    """Reconstruct a composite node with replaced children."""
    if isinstance(node, Add):
        return Add(*new_children)
    if isinstance(node, Sub):
        return Sub(*new_children)
    if isinstance(node, Neg):
        return Neg(*new_children)
    if isinstance(node, Mul):
        return Mul(*new_children)
    if isinstance(node, MatVec):
        return MatVec(*new_children)
    if isinstance(node, MatMat):
        return MatMat(*new_children)
    if isinstance(node, InnerProduct):
        return InnerProduct(*new_children)
    if isinstance(node, OuterProduct):
        return OuterProduct(*new_children)
    if isinstance(node, Transpose):
        return Transpose(*new_children)
    if isinstance(node, Inverse):
        return Inverse(*new_children)
    if isinstance(node, Det):
        return Det(*new_children)
    if isinstance(node, Trace):
        return Trace(*new_children)
    if isinstance(node, Norm):
        return Norm(*new_children)
    if isinstance(node, Pow):
        return Pow(new_children[0], node.exponent)
    if isinstance(node, Exp):
        return Exp(*new_children)
    if isinstance(node, Sqrt):
        return Sqrt(*new_children)
    if isinstance(node, Component):
        return Component(new_children[0], node.index)
    if isinstance(node, Entry):
        return Entry(new_children[0], node.row, node.col)
    if isinstance(node, GradOf):
        return GradOf(new_children[0], node.traced)
    raise TypeError(f"cannot rebuild {node.label()}")


def _transform(expr: Expr, fn, memo) -> Expr:
    """Bottom-up rewrite: ``fn(node)`` may return a replacement or None."""
    key = id(expr)
    hit = memo.get(key)
    if hit is not None:
        return hit
    replacement = fn(expr)
    if replacement is not None:
        memo[key] = replacement
        return replacement
    kids = expr.children()
    if kids:
        new_kids = tuple(_transform(c, fn, memo) for c in kids)
        if any(n is not o for n, o in zip(new_kids, kids)):
            result = _rebuild(expr, new_kids)
        else:
            result = expr
    else:
        result = expr
    memo[key] = result
    return result


def substitute_shape_identity(expr: Expr) -> Expr:
    """Replace the deformation-gradient symbol by the identity matrix."""

    def fn(node):
        if isinstance(node, DeformationGradient):
            return identity_matrix()
        return None

    return _transform(expr, fn, {})


def replace_functions(expr: Expr, mapping: Mapping[int, FunctionRef]) -> Expr:
    """Swap function references (key: ``id(ref)``), keeping gradients wrapped."""

    def fn(node):
        if isinstance(node, (TrialRef, TestRef, GridFuncRef)):
            return mapping.get(id(node))
        if isinstance(node, GradOf):
            new_func = mapping.get(id(node.func))
            if new_func is not None:
                return GradOf(new_func, node.traced)
        return None

    return _transform(expr, fn, {})


# ---------------------------------------------------------------------------
# form terms and the shape-differentiation rewrites
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VolumeRegion:
    """Volume integration region; ``markers=None`` means every subdomain."""

    markers: Optional[frozenset] = None


@dataclass(frozen=True)
class BoundaryRegion:
    """Boundary integration region; ``markers=None`` means every marker."""

    markers: Optional[frozenset] = None


@dataclass(frozen=True)
class FormTerm:
    """A scalar integrand tagged with its integration region."""

    integrand: Expr
    region: Union[VolumeRegion, BoundaryRegion]
    bonus_quad_order: int = 0

    def __post_init__(self):
        if self.integrand.shape != SCALAR:
            raise ShapeError("integrand must be scalar-valued")
        if self.bonus_quad_order < 0:
            raise ValueError("bonus quadrature order must be non-negative")
        if isinstance(self.region, VolumeRegion) and contains_node(
            self.integrand, (NormalVector, TangentVector)
        ):
            raise ShapeError(
                "normal/tangent vectors may only appear in boundary integrands"
            )


def _as_markers(markers) -> Optional[frozenset]:
    if markers is None:
        return None
    if isinstance(markers, str):
        return frozenset([markers])
    return frozenset(markers)


def vol(integrand, markers=None, bonus_quad_order: int = 0) -> FormTerm:
    return FormTerm(as_expr(integrand), VolumeRegion(_as_markers(markers)), bonus_quad_order)


def bnd(integrand, markers=None, bonus_quad_order: int = 0) -> FormTerm:
    return FormTerm(as_expr(integrand), BoundaryRegion(_as_markers(markers)), bonus_quad_order)


def pullback(term: FormTerm) -> FormTerm:
    """Rewrite an integrand to the transported configuration.

    Gradients pick up the transposed inverse deformation gradient, volume
    elements the determinant and boundary elements additionally the norm of
    the transformed normal.
    """
    if contains_node(term.integrand, DeformationGradient):
        raise PullbackError("integrand already contains the deformation gradient")

    F = DeformationGradient()
    inv_t = Transpose(Inverse(F))

    def fn(node):
        if isinstance(node, GradOf):
            if node.shape == VECTOR:
                return MatVec(inv_t, node)
            return MatMat(inv_t, node)
        return None

    integrand = _transform(term.integrand, fn, {})
    if isinstance(term.region, VolumeRegion):
        integrand = Mul(integrand, Det(F))
    else:
        weight = Mul(Det(F), Norm(MatVec(inv_t, NormalVector())))
        integrand = Mul(integrand, weight)
    return FormTerm(integrand, term.region, term.bonus_quad_order)


def _shape_direction_pair(field: FunctionRef, traced: bool):
    if field.shape != VECTOR:
        raise DifferentiationError(
            "shape differentiation direction must be a 2-vector field"
        )
    # Jacobian of the field: J[i, j] = d field_i / d x_j
    return field, Transpose(GradOf(field, traced))


def _shape_diff_integrand(integrand: Expr, field: FunctionRef, traced: bool) -> Expr:
    v, jac = _shape_direction_pair(field, traced)
    return Add(
        diff(integrand, Position(), v),
        diff(integrand, DeformationGradient(), jac),
    )


def diff_shape(term: FormTerm, field: FunctionRef) -> FormTerm:
    """Shape derivative of a form term in the direction of a vector field.

    Pulls the integrand back, differentiates with respect to the spatial
    point and the deformation gradient, then freezes the deformation
    gradient at the identity.  Applying it twice yields the symmetric second
    derivative because trial/test functions carry no spatial dependency.
    """
    traced = isinstance(term.region, BoundaryRegion)
    pulled = pullback(term)
    d = _shape_diff_integrand(pulled.integrand, field, traced)
    d = simplify(substitute_shape_identity(d))
    return FormTerm(d, term.region, max(term.bonus_quad_order, 2))


def diff_shape_twice(term: FormTerm, inner: FunctionRef, outer: FunctionRef) -> FormTerm:
    """Second shape derivative with both directions differentiated before the
    deformation gradient is frozen at the identity."""
    traced = isinstance(term.region, BoundaryRegion)
    pulled = pullback(term)
    d1 = _shape_diff_integrand(pulled.integrand, inner, traced)
    d2 = _shape_diff_integrand(d1, outer, traced)
    d2 = simplify(substitute_shape_identity(d2))
    return FormTerm(d2, term.region, max(term.bonus_quad_order, 2))


def diff_term(term: FormTerm, var: Expr, direction: Expr) -> FormTerm:
    """Termwise :func:`diff`, preserving region and quadrature bonus."""
    return FormTerm(
        diff(term.integrand, var, direction), term.region, term.bonus_quad_order
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

_TINY = 1e-300


class EvalContext:
    """Numeric bindings for expression leaves.

    All arrays share broadcast-compatible leading (batch) axes; value axes
    trail.  ``functions`` maps a binding key -- the space object for
    trial/test references, the grid function object for grid-function
    references -- to a ``(value, gradient)`` pair of arrays.
    """

    __slots__ = ("coords", "normal", "tangent", "params", "functions")

    def __init__(self, coords=None, normal=None, tangent=None, params=None,
                 functions=None):
        self.coords = None if coords is None else np.asarray(coords, dtype=float)
        self.normal = None if normal is None else np.asarray(normal, dtype=float)
        self.tangent = None if tangent is None else np.asarray(tangent, dtype=float)
        self.params = dict(params or {})
        self.functions = dict(functions or {})

    def _lookup(self, node):
        if isinstance(node, (TrialRef, TestRef)):
            key = ("trial" if isinstance(node, TrialRef) else "test", id(node.space))
        else:
            key = ("gridfunc", id(node.gridfunc))
        entry = self.functions.get(key)
        if entry is None:
            raise EvaluationError(f"unbound function reference: {node.label()}")
        return entry

    @staticmethod
    def trial_key(space):
        return ("trial", id(space))

    @staticmethod
    def test_key(space):
        return ("test", id(space))

    @staticmethod
    def gridfunc_key(gf):
        return ("gridfunc", id(gf))


def _broadcast_scalar(s, value_rank: int):
    if value_rank == 0:
        return s
    s = np.asarray(s)
    return s[(...,) + (None,) * value_rank]


def evaluate(expr: Expr, ctx: EvalContext):
    """Evaluate an expression over the batch described by ``ctx``.

    Returns an array whose trailing axes equal ``expr.shape``; shared
    subtrees are evaluated once per call.
    """
    memo: dict[int, np.ndarray] = {}
    return _eval(expr, ctx, memo)


def _eval(node: Expr, ctx: EvalContext, memo):
    key = id(node)
    hit = memo.get(key)
    if hit is not None:
        return hit
    result = _eval_node(node, ctx, memo)
    memo[key] = result
    return result


def _eval_node(node: Expr, ctx: EvalContext, memo):
    if isinstance(node, ScalarConst):
        return node.value
    if isinstance(node, TensorConst):
        return node.values
    if isinstance(node, Coordinate):
        if ctx.coords is None:
            raise EvaluationError("no coordinates in evaluation context")
        return ctx.coords[..., node.index]
    if isinstance(node, Position):
        if ctx.coords is None:
            raise EvaluationError("no coordinates in evaluation context")
        return ctx.coords
    if isinstance(node, Parameter):
        try:
            return ctx.params[node.name]
        except KeyError:
            raise EvaluationError(f"parameter '{node.name}' is unbound") from None
    if isinstance(node, DeformationGradient):
        return np.eye(2)
    if isinstance(node, NormalVector):
        if ctx.normal is None:
            raise EvaluationError("normal vector requested outside a boundary context")
        return ctx.normal
    if isinstance(node, TangentVector):
        if ctx.tangent is None:
            raise EvaluationError("tangent vector requested outside a boundary context")
        return ctx.tangent
    if isinstance(node, (TrialRef, TestRef, GridFuncRef)):
        return ctx._lookup(node)[0]
    if isinstance(node, GradOf):
        return ctx._lookup(node.func)[1]

    if isinstance(node, Add):
        return _eval(node.left, ctx, memo) + _eval(node.right, ctx, memo)
    if isinstance(node, Sub):
        return _eval(node.left, ctx, memo) - _eval(node.right, ctx, memo)
    if isinstance(node, Neg):
        return -_eval(node.operand, ctx, memo)
    if isinstance(node, Mul):
        s = _eval(node.left, ctx, memo)
        t = _eval(node.right, ctx, memo)
        return _broadcast_scalar(s, len(node.shape)) * t
    if isinstance(node, MatVec):
        m = _eval(node.left, ctx, memo)
        v = _eval(node.right, ctx, memo)
        return np.einsum("...ij,...j->...i", m, v)
    if isinstance(node, MatMat):
        return _eval(node.left, ctx, memo) @ _eval(node.right, ctx, memo)
    if isinstance(node, Transpose):
        return np.swapaxes(_eval(node.operand, ctx, memo), -1, -2)
    if isinstance(node, Inverse):
        m = np.asarray(_eval(node.operand, ctx, memo), dtype=float)
        det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
        if np.any(np.abs(det) < _TINY):
            raise EvaluationError("singular matrix in Inverse")
        out = np.empty(m.shape, dtype=float)
        out[..., 0, 0] = m[..., 1, 1]
        out[..., 0, 1] = -m[..., 0, 1]
        out[..., 1, 0] = -m[..., 1, 0]
        out[..., 1, 1] = m[..., 0, 0]
        return out / det[..., None, None]
    if isinstance(node, Det):
        m = _eval(node.operand, ctx, memo)
        return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    if isinstance(node, Trace):
        m = _eval(node.operand, ctx, memo)
        return m[..., 0, 0] + m[..., 1, 1]
    if isinstance(node, InnerProduct):
        a = _eval(node.left, ctx, memo)
        b = _eval(node.right, ctx, memo)
        if node.left.shape == VECTOR:
            return np.einsum("...i,...i->...", a, b)
        return np.einsum("...ij,...ij->...", a, b)
    if isinstance(node, OuterProduct):
        a = _eval(node.left, ctx, memo)
        b = _eval(node.right, ctx, memo)
        return np.einsum("...i,...j->...ij", a, b)
    if isinstance(node, Norm):
        v = _eval(node.operand, ctx, memo)
        return np.sqrt(np.einsum("...i,...i->...", v, v))
    if isinstance(node, Pow):
        base = np.asarray(_eval(node.operand, ctx, memo), dtype=float)
        p = node.exponent
        if p < 0 and np.any(np.abs(base) < _TINY):
            raise EvaluationError(
                "negative power of a (numerically) vanishing quantity; "
                "this usually signals differentiation of a norm at zero"
            )
        if p != int(p) and np.any(base < 0):
            raise EvaluationError("fractional power of a negative quantity")
        return np.power(base, p)
    if isinstance(node, Exp):
        return np.exp(_eval(node.operand, ctx, memo))
    if isinstance(node, Sqrt):
        a = np.asarray(_eval(node.operand, ctx, memo), dtype=float)
        if np.any(a < -1e-12):
            raise EvaluationError("square root of a negative quantity")
        return np.sqrt(np.maximum(a, 0.0))
    if isinstance(node, Component):
        return _eval(node.operand, ctx, memo)[..., node.index]
    if isinstance(node, Entry):
        return _eval(node.operand, ctx, memo)[..., node.row, node.col]

    raise EvaluationError(f"no evaluation rule for {node.label()}")
