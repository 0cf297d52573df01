"""Shape-derivative orchestration: state/adjoint solves, first- and
second-order derivatives, material derivatives and the Newton operator.

A :class:`ShapeProblem` bundles a cost functional, an optional PDE residual
(linear in its test function), the state/adjoint grid functions and a vector
field space for shape directions.  Derivatives can be built in two modes:

* ``semi``  -- the integrands are pulled back explicitly and differentiated
  with respect to the spatial point and the deformation-gradient symbol;
* ``full``  -- the untransformed integrands go through ``diff_shape``, which
  performs the pullback internally.

Both modes assemble the same vectors up to roundoff; the verification module
audits exactly that.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from . import symbolic as sym
from .fem import (
    FESpace,
    GridFunction,
    assemble_bilinear,
    assemble_linear,
    integrate,
    solve_dirichlet,
)
from .linalg import SolverError

__all__ = [
    "ShapeProblem",
    "MaterialDerivatives",
    "solve_state",
    "solve_adjoint",
    "cost_value",
    "first_order",
    "second_order_unconstrained",
    "material_derivatives",
    "second_order_constrained",
    "newton_operator",
]


@dataclass
class ShapeProblem:
    """Cost functional, optional PDE constraint, and the fields they live on."""

    mesh: object
    vec: FESpace
    cost: List[sym.FormTerm]
    equation: List[sym.FormTerm] = dataclass_field(default_factory=list)
    fes: Optional[FESpace] = None
    state: Optional[GridFunction] = None
    adjoint: Optional[GridFunction] = None

    def __post_init__(self):
        if self.vec.vdim != 2:
            raise ValueError("shape-direction space must be 2-vector valued")
        if self.equation:
            if self.fes is None:
                raise ValueError("constrained problems need a state space")
            if self.state is None:
                self.state = GridFunction(self.fes)
            if self.adjoint is None:
                self.adjoint = GridFunction(self.fes)

    @property
    def constrained(self) -> bool:
        return bool(self.equation)


@dataclass
class MaterialDerivatives:
    """Sensitivities of state and adjoint with respect to a shape direction."""

    du: GridFunction
    dp: GridFunction


# ---------------------------------------------------------------------------
# term manipulation helpers
# ---------------------------------------------------------------------------


def _replace_test_with(term: sym.FormTerm, space, replacement) -> sym.FormTerm:
    """Substitute every test function of ``space`` by ``replacement``."""

    def fn(node):
        if isinstance(node, sym.TestRef) and node.space is space:
            return replacement
        if isinstance(node, sym.GradOf) and isinstance(node.func, sym.TestRef) \
                and node.func.space is space:
            return sym.GradOf(replacement, node.traced)
        return None

    integrand = sym._transform(term.integrand, fn, {})
    return sym.FormTerm(integrand, term.region, term.bonus_quad_order)


def lagrangian_terms(prob: ShapeProblem) -> List[sym.FormTerm]:
    """Cost plus the PDE residual with the adjoint in the test slot."""
    terms = list(prob.cost)
    if prob.constrained:
        padj = prob.adjoint.ref()
        terms += [_replace_test_with(t, prob.fes, padj) for t in prob.equation]
    return terms


def _semi_shape_terms(terms, direction) -> List[sym.FormTerm]:
    """Explicitly pulled-back terms differentiated in a shape direction."""
    out = []
    for t in terms:
        traced = isinstance(t.region, sym.BoundaryRegion)
        pulled = sym.pullback(t)
        jac = sym.Transpose(sym.GradOf(direction, traced))
        d = sym.Add(
            sym.diff(pulled.integrand, sym.Position(), direction),
            sym.diff(pulled.integrand, sym.DeformationGradient(), jac),
        )
        out.append(sym.FormTerm(sym.simplify(d), t.region, max(t.bonus_quad_order, 2)))
    return out


def _operator_terms(prob: ShapeProblem) -> List[sym.FormTerm]:
    u = prob.state.ref()
    trial = prob.fes.trial()
    return [
        sym.FormTerm(
            sym.simplify(sym.diff(t.integrand, u, trial)), t.region, t.bonus_quad_order
        )
        for t in prob.equation
    ]


# ---------------------------------------------------------------------------
# state / adjoint
# ---------------------------------------------------------------------------


def solve_state(prob: ShapeProblem, max_newton: int = 3):
    """Solve the (linear) state equation; the residual drops to solver level.

    Implemented as Newton steps on the residual, which solves affine
    problems exactly in one step from any initial guess.
    """
    if not prob.constrained:
        return
    fes = prob.fes
    A = assemble_bilinear(_operator_terms(prob), fes, fes)
    scale = 0.0
    for _ in range(max_newton):
        r = assemble_linear(prob.equation, fes)
        rnorm = np.linalg.norm(r[fes.free_dofs])
        scale = max(scale, rnorm, 1e-30)
        if rnorm <= 1e-12 * scale:
            break
        delta = solve_dirichlet(A, -r, fes.free_dofs)
        prob.state.vec += delta
    else:
        r = assemble_linear(prob.equation, fes)
        if np.linalg.norm(r[fes.free_dofs]) > 1e-10 * scale:
            raise SolverError("state residual did not reach solver tolerance")


def solve_adjoint(prob: ShapeProblem):
    """Adjoint from the transposed state operator and the cost derivative."""
    if not prob.constrained:
        return
    fes = prob.fes
    u = prob.state.ref()
    w = fes.test()
    dcost = [
        sym.FormTerm(sym.simplify(sym.diff(t.integrand, u, w)), t.region,
                     t.bonus_quad_order)
        for t in prob.cost
    ]
    b = assemble_linear(dcost, fes)
    A = assemble_bilinear(_operator_terms(prob), fes, fes)
    prob.adjoint.vec[:] = solve_dirichlet(A, -b, fes.free_dofs, transpose=True)


def cost_value(prob: ShapeProblem) -> float:
    return integrate(prob.cost, prob.mesh)


# ---------------------------------------------------------------------------
# first order
# ---------------------------------------------------------------------------


def first_order(prob: ShapeProblem, mode: str = "full") -> np.ndarray:
    """Assembled shape-derivative vector over the direction space.

    Pairing the result with the coefficients of a direction field gives the
    directional shape derivative of the reduced cost.
    """
    terms = lagrangian_terms(prob)
    V = prob.vec.test()
    if mode == "full":
        dterms = [sym.diff_shape(t, V) for t in terms]
    elif mode == "semi":
        dterms = _semi_shape_terms(terms, V)
    else:
        raise ValueError("mode must be 'semi' or 'full'")
    return assemble_linear(dterms, prob.vec)


# ---------------------------------------------------------------------------
# second order, unconstrained
# ---------------------------------------------------------------------------


def second_order_unconstrained(prob: ShapeProblem) -> sp.csr_matrix:
    """Full second-derivative matrix of an unconstrained functional.

    ``apply(V, W) = V . (H @ W)``; the matrix is symmetric up to roundoff.
    """
    if prob.constrained:
        raise ValueError("use the constrained evaluation for PDE problems")
    V = prob.vec.test()
    W = prob.vec.trial()
    dterms = [sym.diff_shape_twice(t, W, V) for t in prob.cost]
    return assemble_bilinear(dterms, prob.vec, prob.vec)


# ---------------------------------------------------------------------------
# material derivatives and constrained second order
# ---------------------------------------------------------------------------


def _shape_diff_data_terms(terms, direction_gf) -> List[sym.FormTerm]:
    """Shape derivative of already-differentiated (pulled-back) terms in the
    direction of a stored grid function."""
    out = []
    for t in terms:
        traced = isinstance(t.region, sym.BoundaryRegion)
        ref = direction_gf.ref()
        jac = sym.Transpose(sym.GradOf(ref, traced))
        d = sym.Add(
            sym.diff(t.integrand, sym.Position(), ref),
            sym.diff(t.integrand, sym.DeformationGradient(), jac),
        )
        out.append(sym.FormTerm(sym.simplify(d), t.region, max(t.bonus_quad_order, 2)))
    return out


def material_derivatives(prob: ShapeProblem, direction: GridFunction) -> MaterialDerivatives:
    """Sensitivities of state and adjoint under a shape direction.

    Solves the 2x2 block system built from second derivatives of the
    pulled-back Lagrangian; the right-hand side carries the shape
    differentiation in the given direction.
    """
    if not prob.constrained:
        raise ValueError("material derivatives need a PDE constraint")
    fes = prob.fes
    u = prob.state.ref()
    p = prob.adjoint.ref()
    u_test, u_trial = fes.test(), fes.trial()

    pulled = [sym.pullback(t) for t in lagrangian_terms(prob)]

    def d(term, var, direction_):
        return sym.FormTerm(
            sym.simplify(sym.diff(term.integrand, var, direction_)),
            term.region,
            term.bonus_quad_order,
        )

    du_terms = [d(t, u, u_test) for t in pulled]
    dp_terms = [d(t, p, u_test) for t in pulled]

    a11 = assemble_bilinear([d(t, u, u_trial) for t in du_terms], fes, fes)
    a12 = assemble_bilinear([d(t, p, u_trial) for t in du_terms], fes, fes)
    a21 = assemble_bilinear([d(t, u, u_trial) for t in dp_terms], fes, fes)

    r1 = assemble_linear(_shape_diff_data_terms(du_terms, direction), fes)
    r2 = assemble_linear(_shape_diff_data_terms(dp_terms, direction), fes)

    K = sp.bmat(
        [[a11, a12], [a21, None]], format="csr"
    )
    rhs = -np.concatenate([r1, r2])
    free = np.concatenate([fes.free_dofs, fes.free_dofs])
    sol = solve_dirichlet(K, rhs, free)
    n = fes.ndof
    return MaterialDerivatives(
        du=GridFunction(fes, sol[:n]),
        dp=GridFunction(fes, sol[n:]),
    )


def second_order_constrained(
    prob: ShapeProblem,
    direction_v: GridFunction,
    direction_w: GridFunction,
    md: Optional[MaterialDerivatives] = None,
) -> float:
    """Second shape derivative of the reduced cost in directions (V, W).

    Evaluates the pure shape block plus the state/adjoint sensitivity terms;
    ``md`` must belong to ``direction_v`` (it is computed when omitted).
    """
    if not prob.constrained:
        H = second_order_unconstrained(prob)
        return float(direction_v.vec @ (H @ direction_w.vec))
    if md is None:
        md = material_derivatives(prob, direction_v)
    terms = lagrangian_terms(prob)
    V_test = prob.vec.test()
    W_trial = prob.vec.trial()

    h11 = assemble_bilinear(
        [sym.diff_shape_twice(t, W_trial, V_test) for t in terms], prob.vec, prob.vec
    )
    dshape_test = [sym.diff_shape(t, V_test) for t in terms]
    u = prob.state.ref()
    p = prob.adjoint.ref()
    u_trial = prob.fes.trial()

    def d(term, var):
        return sym.FormTerm(
            sym.simplify(sym.diff(term.integrand, var, u_trial)),
            term.region,
            term.bonus_quad_order,
        )

    h12 = assemble_bilinear([d(t, u) for t in dshape_test], prob.fes, prob.vec)
    h13 = assemble_bilinear([d(t, p) for t in dshape_test], prob.fes, prob.vec)

    val = direction_w.vec @ (h11 @ direction_v.vec)
    val += direction_w.vec @ (h12 @ md.du.vec)
    val += direction_w.vec @ (h13 @ md.dp.vec)
    return float(val)


# ---------------------------------------------------------------------------
# Newton operator
# ---------------------------------------------------------------------------


def _regularization_terms(prob: ShapeProblem, delta: float, kind: str):
    phi = prob.vec.trial()
    psi = prob.vec.test()
    if kind == "tangential":
        tau = sym.TangentVector()
        integrand = sym.Mul(
            sym.ScalarConst(delta),
            sym.Mul(sym.InnerProduct(phi, tau), sym.InnerProduct(psi, tau)),
        )
        return [sym.bnd(integrand)]
    if kind == "h1":
        integrand = sym.Mul(
            sym.ScalarConst(delta),
            sym.Add(
                sym.InnerProduct(sym.GradOf(phi), sym.GradOf(psi)),
                sym.InnerProduct(phi, psi),
            ),
        )
        return [sym.vol(integrand)]
    raise ValueError("regularization must be 'tangential' or 'h1'")


def newton_operator(prob: ShapeProblem, delta: float, regularization: str = "tangential"):
    """Assemble the regularized shape-Newton system.

    Returns ``(matrix, rhs, free_mask)``.  For constrained problems the
    unknowns are the shape direction followed by the state and adjoint
    sensitivities; for unconstrained problems only the shape block remains.
    With tangential regularization the shape block is solved on boundary
    dofs only, with the H1 variant on all of them.
    """
    vec = prob.vec
    terms = lagrangian_terms(prob)
    phi = vec.trial()
    psi = vec.test()

    b11_terms = [sym.diff_shape_twice(t, phi, psi) for t in terms]
    b11_terms += _regularization_terms(prob, delta, regularization)
    b11 = assemble_bilinear(b11_terms, vec, vec)
    rhs_vec = -assemble_linear([sym.diff_shape(t, psi) for t in terms], vec)

    if regularization == "tangential":
        vec_free = vec.boundary_dofs()
    else:
        vec_free = vec.free_dofs.copy()

    if not prob.constrained:
        return b11, rhs_vec, vec_free

    fes = prob.fes
    u = prob.state.ref()
    p = prob.adjoint.ref()
    u1, u_test = fes.trial(), fes.test()

    def dterm(term, var, direction):
        return sym.FormTerm(
            sym.simplify(sym.diff(term.integrand, var, direction)),
            term.region,
            term.bonus_quad_order,
        )

    dshape_psi = [sym.diff_shape(t, psi) for t in terms]
    b12 = assemble_bilinear([dterm(t, u, u1) for t in dshape_psi], fes, vec)
    b13 = assemble_bilinear([dterm(t, p, u1) for t in dshape_psi], fes, vec)

    du_test = [dterm(t, u, u_test) for t in terms]
    dp_test = [dterm(t, p, u_test) for t in terms]
    b21 = assemble_bilinear(
        [sym.diff_shape(t, phi) for t in du_test], vec, fes
    )
    b31 = assemble_bilinear(
        [sym.diff_shape(t, phi) for t in dp_test], vec, fes
    )
    b22 = assemble_bilinear([dterm(t, u, u1) for t in du_test], fes, fes)
    b23 = assemble_bilinear([dterm(t, p, u1) for t in du_test], fes, fes)
    b32 = assemble_bilinear([dterm(t, u, u1) for t in dp_test], fes, fes)

    K = sp.bmat(
        [
            [b11, b12, b13],
            [b21, b22, b23],
            [b31, b32, None],
        ],
        format="csr",
    )
    rhs = np.concatenate([rhs_vec, np.zeros(fes.ndof), np.zeros(fes.ndof)])
    free = np.concatenate([vec_free, fes.free_dofs, fes.free_dofs])
    return K, rhs, free
