"""Shape gradients, descent/Newton loops and the space-time specials.

Shape modifications accumulate in a persistent deformation grid function;
mesh nodes are only moved when node-move mode is switched on explicitly.
The gradient norm used for line search and termination is the norm induced
by the selected inner product, ``|g|_H = sqrt(g . dJ)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from . import symbolic as sym
from .fem import FESpace, GridFunction, assemble_bilinear, assemble_linear, solve_dirichlet
from .linalg import SolverError, cholesky_solve
from .mesh import InvertedElementError, smooth
from .shapecalc import (
    ShapeProblem,
    cost_value,
    first_order,
    newton_operator,
    solve_adjoint,
    solve_state,
)

__all__ = [
    "H1InnerProduct",
    "ElasticityInnerProduct",
    "ElasticityCRInnerProduct",
    "OptConfig",
    "OptHistory",
    "HistoryRow",
    "assemble_inner_product",
    "shape_gradient",
    "gradient_norm",
    "off_conformality_residual",
    "extend_boundary_field",
    "gradient_descent",
    "newton_loop",
    "restricted_first_order",
    "time_average_field",
    "embed_x_field",
    "OptimizationError",
]


class OptimizationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# inner products
# ---------------------------------------------------------------------------


def _eps(g):
    return sym.Mul(sym.ScalarConst(0.5), sym.Add(g, sym.Transpose(g)))


def _cr_factors(g):
    # conformality defect of a 2D field: (d_y V_y - d_x V_x, d_y V_x + d_x V_y)
    return (
        sym.Sub(sym.Entry(g, 1, 1), sym.Entry(g, 0, 0)),
        sym.Add(sym.Entry(g, 1, 0), sym.Entry(g, 0, 1)),
    )


@dataclass(frozen=True)
class H1InnerProduct:
    """Full-gradient H1 metric for shape gradients."""

    def form_terms(self, space: FESpace) -> List[sym.FormTerm]:
        w, v = space.trial(), space.test()
        gw, gv = sym.GradOf(w), sym.GradOf(v)
        return [sym.vol(sym.InnerProduct(gw, gv) + sym.InnerProduct(w, v))]


@dataclass(frozen=True)
class ElasticityInnerProduct:
    """Linearized-elasticity metric (symmetric gradients plus mass)."""

    def form_terms(self, space: FESpace) -> List[sym.FormTerm]:
        w, v = space.trial(), space.test()
        ew, ev = _eps(sym.GradOf(w)), _eps(sym.GradOf(v))
        return [sym.vol(sym.InnerProduct(ew, ev) + sym.InnerProduct(w, v))]


@dataclass(frozen=True)
class ElasticityCRInnerProduct:
    """Elasticity metric plus a Cauchy-Riemann penalty (2D only).

    The penalty pushes the gradient field towards conformal maps, which
    preserve mesh quality during large shape changes.
    """

    gamma_cr: float = 10.0

    def __post_init__(self):
        if self.gamma_cr < 0:
            raise ValueError("penalty weight must be non-negative")

    def form_terms(self, space: FESpace) -> List[sym.FormTerm]:
        w, v = space.trial(), space.test()
        gw, gv = sym.GradOf(w), sym.GradOf(v)
        ew, ev = _eps(gw), _eps(gv)
        a_w, b_w = _cr_factors(gw)
        a_v, b_v = _cr_factors(gv)
        penalty = sym.Mul(
            sym.ScalarConst(self.gamma_cr),
            sym.Add(sym.Mul(a_w, a_v), sym.Mul(b_w, b_v)),
        )
        return [sym.vol(sym.InnerProduct(ew, ev) + sym.InnerProduct(w, v) + penalty)]


def assemble_inner_product(ip, space: FESpace) -> sp.csr_matrix:
    return assemble_bilinear(ip.form_terms(space), space, space)


def shape_gradient(dj: np.ndarray, ip, space: FESpace,
                   matrix: Optional[sp.csr_matrix] = None) -> GridFunction:
    """Riesz representative of the derivative vector in the chosen metric.

    The negative of the returned field is a descent direction whenever the
    derivative vector is nonzero.
    """
    A = assemble_inner_product(ip, space) if matrix is None else matrix
    g = GridFunction(space)
    free = space.free_dofs
    x = np.zeros(space.ndof)
    idx = np.where(free)[0]
    sub = A[idx][:, idx]
    try:
        x[idx] = cholesky_solve(sub, dj[idx])
    except SolverError as exc:
        raise OptimizationError(f"inner product solve failed: {exc}") from exc
    g.vec[:] = x
    return g


def gradient_norm(g: GridFunction, dj: np.ndarray) -> float:
    """Inner-product norm of the shape gradient, sqrt((g, g)_H) = sqrt(g . dJ)."""
    val = float(g.vec @ dj)
    return float(np.sqrt(max(val, 0.0)))


def off_conformality_residual(g: GridFunction) -> float:
    """Integral of the squared Cauchy-Riemann defect of a vector field."""
    from .fem import integrate

    ref = g.ref()
    a, b = _cr_factors(sym.GradOf(ref))
    return integrate(sym.vol(sym.Mul(a, a) + sym.Mul(b, b)), g.space.mesh)


# ---------------------------------------------------------------------------
# boundary extension
# ---------------------------------------------------------------------------


def extend_boundary_field(gf_bnd: GridFunction, space: FESpace) -> GridFunction:
    """Harmonic-elasticity extension of a boundary field into the interior.

    Boundary dofs are kept exactly; interior dofs minimize the extension
    energy of the form grad(u)+grad(u)^T : grad(v) plus a mass term.
    """
    if gf_bnd.space is not space:
        raise OptimizationError("boundary field must live on the extension space")
    u, v = space.trial(), space.test()
    gu, gv = sym.GradOf(u), sym.GradOf(v)
    form = [sym.vol(sym.InnerProduct(sym.Add(gu, sym.Transpose(gu)), gv)
                    + sym.InnerProduct(u, v))]
    A = assemble_bilinear(form, space, space)
    out = GridFunction(space, gf_bnd.vec)
    interior = ~space.boundary_dofs()
    r = -(A @ out.vec)
    out.vec += solve_dirichlet(A, r, interior)
    return out


# ---------------------------------------------------------------------------
# histories and configuration
# ---------------------------------------------------------------------------


@dataclass
class HistoryRow:
    iteration: int
    cost: float
    grad_norm: float
    alpha: float
    accepted: bool


@dataclass
class OptHistory:
    rows: List[HistoryRow] = dataclass_field(default_factory=list)
    initial_cost: float = float("nan")
    converged: bool = False
    message: str = ""
    deformation: Optional[GridFunction] = None

    def add(self, iteration, cost, grad_norm, alpha, accepted):
        self.rows.append(HistoryRow(iteration, cost, grad_norm, alpha, accepted))

    def accepted_rows(self) -> List[HistoryRow]:
        return [r for r in self.rows if r.accepted]

    @property
    def final_cost(self) -> float:
        acc = self.accepted_rows()
        return acc[-1].cost if acc else self.initial_cost

    @property
    def final_grad_norm(self) -> float:
        return self.rows[-1].grad_norm if self.rows else float("nan")

    @property
    def iterations(self) -> int:
        return len(self.accepted_rows())

    def to_csv(self, path: str):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "J", "gradnorm", "alpha", "accepted"])
            for r in self.rows:
                writer.writerow(
                    [r.iteration, repr(r.cost), repr(r.grad_norm), repr(r.alpha),
                     int(r.accepted)]
                )


@dataclass
class OptConfig:
    alpha0: float = 1.0
    alpha_incr: float = 1.2
    alpha_decr: float = 0.5
    gamma: float = 1e-4
    n_max: int = 100
    eps_grad: float = 1e-7
    alpha_cap: float = 1e4
    alpha_floor: float = 1e-14
    move_nodes: bool = False
    smooth_sweeps: int = 1

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("Armijo constant must lie in (0, 1)")
        if self.alpha_incr < 1.0:
            raise ValueError("step increase factor must be >= 1")
        if not (0.0 < self.alpha_decr < 1.0):
            raise ValueError("step decrease factor must lie in (0, 1)")


# ---------------------------------------------------------------------------
# solve-and-evaluate helpers
# ---------------------------------------------------------------------------


def _resolve_and_cost(prob: ShapeProblem) -> float:
    if prob.constrained:
        solve_state(prob)
    return cost_value(prob)


def _with_deformation(prob: ShapeProblem, deformation: Optional[GridFunction]):
    if deformation is None:
        prob.mesh.unset_deformation()
    else:
        prob.mesh.set_deformation(deformation)


# ---------------------------------------------------------------------------
# gradient descent (accept/reject step control)
# ---------------------------------------------------------------------------


def gradient_descent(prob: ShapeProblem, ip, cfg: OptConfig,
                     callback=None) -> OptHistory:
    """First-order loop: shape gradient, trial step, accept/reject.

    A trial step is accepted when the re-solved cost satisfies the decrease
    condition ``J_new < J - gamma * alpha * |g|_H^2``; steps that invert the
    deformation count as rejections.  On return the accumulated deformation
    is active on the mesh.
    """
    vec = prob.vec
    gfset = GridFunction(vec)
    history = OptHistory()
    alpha = cfg.alpha0

    _with_deformation(prob, gfset)
    j_old = _resolve_and_cost(prob)
    history.initial_cost = j_old

    for it in range(cfg.n_max):
        _with_deformation(prob, gfset)
        if prob.constrained:
            solve_state(prob)
            solve_adjoint(prob)
        dj = first_order(prob, "full")
        ip_matrix = assemble_inner_product(ip, vec)
        g = shape_gradient(dj, ip, vec, matrix=ip_matrix)
        gnorm = gradient_norm(g, dj)
        if gnorm <= cfg.eps_grad:
            history.converged = True
            history.message = f"gradient norm {gnorm:.3e} below tolerance"
            break
        if callback is not None:
            callback(it, gfset, j_old, gnorm)

        accepted = False
        while alpha > cfg.alpha_floor:
            candidate = GridFunction(vec, gfset.vec - alpha * g.vec)
            try:
                _with_deformation(prob, candidate)
                j_new = _resolve_and_cost(prob)
            except InvertedElementError:
                history.add(it, j_old, gnorm, alpha, False)
                alpha *= cfg.alpha_decr
                continue
            if j_new < j_old - cfg.gamma * alpha * gnorm * gnorm:
                gfset = candidate
                j_old = j_new
                history.add(it, j_new, gnorm, alpha, True)
                alpha = min(alpha * cfg.alpha_incr, cfg.alpha_cap)
                accepted = True
                break
            history.add(it, j_new, gnorm, alpha, False)
            alpha *= cfg.alpha_decr
        if not accepted:
            history.message = "line search failed: step size underflow"
            break
        if cfg.move_nodes:
            _with_deformation(prob, None)
            prob.mesh.move_nodes(gfset)
            smooth(prob.mesh, cfg.smooth_sweeps)
            gfset = GridFunction(vec)
            j_old = _resolve_and_cost(prob)
    else:
        history.message = "iteration limit reached"

    _with_deformation(prob, gfset)
    history.deformation = gfset
    return history


# ---------------------------------------------------------------------------
# Newton loop (full steps, no line search)
# ---------------------------------------------------------------------------


def newton_loop(prob: ShapeProblem, delta: float, cfg: OptConfig,
                regularization: str = "tangential",
                norm_ip=None, callback=None) -> OptHistory:
    """Second-order loop with regularized shape-Newton steps.

    Full steps without line search; a safeguard aborts after three
    consecutive cost increases.  Termination uses the H1 gradient norm of
    the first-order derivative (configurable via ``norm_ip``).
    """
    vec = prob.vec
    if norm_ip is None:
        norm_ip = H1InnerProduct()
    gfset = GridFunction(vec)
    history = OptHistory()
    increases = 0
    j_prev = None

    for it in range(cfg.n_max + 1):
        _with_deformation(prob, gfset)
        if prob.constrained:
            solve_state(prob)
            solve_adjoint(prob)
        j_cur = cost_value(prob)
        if it == 0:
            history.initial_cost = j_cur
        dj = first_order(prob, "full")
        g = shape_gradient(dj, norm_ip, vec)
        gnorm = gradient_norm(g, dj)
        history.add(it, j_cur, gnorm, 1.0, True)
        if callback is not None:
            callback(it, gfset, j_cur, gnorm)
        if gnorm <= cfg.eps_grad:
            history.converged = True
            history.message = f"gradient norm {gnorm:.3e} below tolerance"
            break
        if j_prev is not None and j_cur > j_prev:
            increases += 1
            if increases >= 3:
                history.message = "aborted: cost increased three times in a row"
                break
        else:
            increases = 0
        j_prev = j_cur
        if it == cfg.n_max:
            history.message = "iteration limit reached"
            break

        K, rhs, free = newton_operator(prob, delta, regularization)
        try:
            sol = solve_dirichlet(K, rhs, free)
        except SolverError as exc:
            raise OptimizationError(
                f"singular Newton system (delta={delta}): {exc}"
            ) from exc
        step = GridFunction(vec, sol[: vec.ndof])
        if regularization == "tangential":
            step = extend_boundary_field(step, vec)
        gfset = GridFunction(vec, gfset.vec + step.vec)

    _with_deformation(prob, gfset)
    history.deformation = gfset
    return history


# ---------------------------------------------------------------------------
# space-time specials: x-restricted derivative and time averaging
# ---------------------------------------------------------------------------


def restricted_first_order(prob: ShapeProblem, vec_scalar: FESpace) -> np.ndarray:
    """Shape derivative for deformations of the first coordinate only.

    The 2D mesh is read as a space-time cylinder whose second coordinate is
    fixed; the direction field is scalar.  The derivative pairs the spatial
    coordinate slot with the field and the first Jacobian row with its
    gradient.
    """
    if prob.mesh.grid_info is None:
        raise OptimizationError(
            "the restricted derivative needs a tensor-product space-time mesh"
        )
    if vec_scalar.vdim != 1:
        raise OptimizationError("direction space must be scalar-valued")
    v = vec_scalar.test()
    terms = []
    from .shapecalc import lagrangian_terms

    for t in lagrangian_terms(prob):
        if not isinstance(t.region, sym.VolumeRegion):
            raise OptimizationError("space-time terms must be volume terms")
        pulled = sym.pullback(t)
        # dF/dt for x-only motion: first row is the gradient of the field
        jac = sym.OuterProduct(sym.TensorConst([1.0, 0.0]), sym.GradOf(v))
        d = sym.Add(
            sym.diff(pulled.integrand, sym.Coordinate(0), v),
            sym.diff(pulled.integrand, sym.DeformationGradient(), jac),
        )
        terms.append(sym.FormTerm(sym.simplify(d), t.region, max(t.bonus_quad_order, 2)))
    return assemble_linear(terms, vec_scalar)


def time_average_field(wt: GridFunction) -> GridFunction:
    """Average a scalar space-time field over the time axis.

    Uses trapezoidal column quadrature on the tensor grid (exact for the
    piecewise-linear restriction along vertical grid lines) and returns a
    field constant in the time coordinate.
    """
    space = wt.space
    info = space.mesh.grid_info
    if info is None:
        raise OptimizationError("time averaging needs a tensor-product mesh")
    if space.vdim != 1 or space.order != 1:
        raise OptimizationError("time averaging expects a scalar order-1 field")
    ys = info.ys
    T = ys[-1] - ys[0]
    weights = np.zeros(len(ys))
    dy = np.diff(ys)
    weights[:-1] += 0.5 * dy
    weights[1:] += 0.5 * dy
    out = GridFunction(space)
    vals = wt.vec[info.vertex_ids]  # (nx+1, ny+1); vertex dofs lead
    averages = (vals * weights[None, :]).sum(axis=1) / T
    out.vec[info.vertex_ids] = averages[:, None]
    return out


def embed_x_field(scalar_gf: GridFunction, vec_space: FESpace) -> GridFunction:
    """Lift a scalar order-1 field W(x, t) to the vector field (W, 0)."""
    if vec_space.vdim != 2 or vec_space.order != scalar_gf.space.order:
        raise OptimizationError("vector space must match the scalar space order")
    out = GridFunction(vec_space)
    out.vec[0::2] = scalar_gf.vec
    return out
