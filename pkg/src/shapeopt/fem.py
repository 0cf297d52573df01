"""H1 finite element spaces, grid functions, quadrature and assembly.

Assembly evaluates the symbolic integrand over whole element batches via
numpy broadcasting.  The batch axes are ``(element, quadrature point, test
basis, trial basis)``; value axes trail.  An active mesh deformation is
honored by mapping points, weights, gradients and boundary normals through
the deformation Jacobian, which keeps integration on the deformed
configuration equal to integrating the pulled-back integrand on the
reference mesh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.special import roots_jacobi, roots_legendre

from . import symbolic as sym
from .linalg import cholesky_solve, lu_solve
from .mesh import InvertedElementError, Mesh2D

__all__ = [
    "FESpace",
    "GridFunction",
    "QuadratureRule",
    "quadrature_rule",
    "assemble_linear",
    "assemble_bilinear",
    "integrate",
    "project",
    "solve_dirichlet",
    "AssemblyError",
    "export_matrix",
]

MAX_QUAD_DEGREE = 10
_CHUNK_BUDGET = 3_000_000  # floats per intermediate array, per chunk


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


class QuadratureRule(NamedTuple):
    tri_points: np.ndarray   # (Q, 2) on the unit reference triangle
    tri_weights: np.ndarray  # (Q,), sums to 1/2
    edge_points: np.ndarray  # (Qe,) on [0, 1]
    edge_weights: np.ndarray  # (Qe,), sums to 1


@lru_cache(maxsize=None)
def quadrature_rule(order: int) -> QuadratureRule:
    """Rule exact for polynomials of the given total degree.

    Triangle points come from a Duffy-collapsed Gauss-Legendre x Gauss-Jacobi
    product, edge points from Gauss-Legendre; degree 0 degenerates to the
    midpoint rule.
    """
    if order < 0:
        raise ValueError("quadrature order must be non-negative")
    if order > MAX_QUAD_DEGREE:
        raise ValueError(f"unsupported quadrature order {order} (max {MAX_QUAD_DEGREE})")
    n = max(1, (order + 2) // 2)
    xg, wg = roots_legendre(n)
    xi = 0.5 * (xg + 1.0)        # [0, 1]
    wxi = 0.5 * wg
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    eta = 0.5 * (xj + 1.0)
    weta = 0.25 * wj             # absorbs the (1 - eta) area factor

    pts = np.empty((n * n, 2))
    wts = np.empty(n * n)
    k = 0
    for a, wa in zip(xi, wxi):
        for b, wb in zip(eta, weta):
            pts[k] = (a * (1.0 - b), b)
            wts[k] = wa * wb
            k += 1

    return QuadratureRule(pts, wts, xi.copy(), wxi.copy())


# ---------------------------------------------------------------------------
# reference bases
# ---------------------------------------------------------------------------


def _p1_basis(pts):
    pts = np.asarray(pts, dtype=float)
    xi, eta = pts[..., 0], pts[..., 1]
    vals = np.stack([1.0 - xi - eta, xi, eta], axis=-1)
    grads = np.broadcast_to(
        np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]),
        pts.shape[:-1] + (3, 2),
    ).copy()
    return vals, grads


def _p2_basis(pts):
    pts = np.asarray(pts, dtype=float)
    xi, eta = pts[..., 0], pts[..., 1]
    lam = [1.0 - xi - eta, xi, eta]
    dlam = [np.array([-1.0, -1.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    vals = []
    grads = []
    for i in range(3):
        vals.append(lam[i] * (2.0 * lam[i] - 1.0))
        grads.append((4.0 * lam[i] - 1.0)[..., None] * dlam[i])
    for a, b in ((0, 1), (1, 2), (2, 0)):
        vals.append(4.0 * lam[a] * lam[b])
        grads.append(4.0 * (lam[a][..., None] * dlam[b] + lam[b][..., None] * dlam[a]))
    return np.stack(vals, axis=-1), np.stack(grads, axis=-2)


def _basis(order: int, pts):
    if order == 1:
        return _p1_basis(pts)
    if order == 2:
        return _p2_basis(pts)
    raise AssemblyError("finite element order must be 1 or 2")


_LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))
_REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


# ---------------------------------------------------------------------------
# spaces and grid functions
# ---------------------------------------------------------------------------


class FESpace:
    """Continuous H1 space of order 1 or 2, scalar or 2-vector valued.

    Scalar dofs are vertex values followed (order 2) by edge-midpoint values.
    Vector dofs interleave the two components per scalar dof, so the global
    dof of component ``c`` of scalar dof ``k`` is ``2 k + c``.
    """

    def __init__(self, mesh: Mesh2D, order: int = 1, vdim: int = 1,
                 dirichlet: Union[None, str, Iterable[str]] = None):
        if order not in (1, 2):
            raise AssemblyError("order must be 1 or 2")
        if vdim not in (1, 2):
            raise AssemblyError("value dimension must be 1 or 2")
        self.mesh = mesh
        self.order = order
        self.vdim = vdim
        if dirichlet is None:
            self.dirichlet = frozenset()
        elif isinstance(dirichlet, str):
            self.dirichlet = frozenset([dirichlet]) if dirichlet else frozenset()
        else:
            self.dirichlet = frozenset(dirichlet)

        self._mesh_version = mesh.version
        self._build()

    def _build(self):
        mesh = self.mesh
        edge_ids: Dict[Tuple[int, int], int] = {}
        tri_edges = np.empty((mesh.nt, 3), dtype=np.int64)
        for t, tri in enumerate(mesh.triangles):
            for k, (la, lb) in enumerate(_LOCAL_EDGES):
                key = (min(tri[la], tri[lb]), max(tri[la], tri[lb]))
                if key not in edge_ids:
                    edge_ids[key] = len(edge_ids)
                tri_edges[t, k] = edge_ids[key]
        self.n_edges = len(edge_ids)
        self._edge_ids = edge_ids

        self.n_scalar = mesh.nv + (self.n_edges if self.order == 2 else 0)
        self.ndof = self.vdim * self.n_scalar

        if self.order == 1:
            self.eldofs_scalar = mesh.triangles.copy()
        else:
            self.eldofs_scalar = np.hstack([mesh.triangles, mesh.nv + tri_edges])

        if self.vdim == 2:
            el = self.eldofs_scalar
            inter = np.empty((el.shape[0], 2 * el.shape[1]), dtype=np.int64)
            inter[:, 0::2] = 2 * el
            inter[:, 1::2] = 2 * el + 1
            self.eldofs = inter
        else:
            self.eldofs = self.eldofs_scalar

        free_scalar = np.ones(self.n_scalar, dtype=bool)
        for edge, marker in zip(mesh.bnd_edges, mesh.bnd_markers):
            if marker in self.dirichlet:
                free_scalar[edge[0]] = False
                free_scalar[edge[1]] = False
                if self.order == 2:
                    key = (min(edge), max(edge))
                    free_scalar[mesh.nv + self._edge_ids[key]] = False
        if self.vdim == 2:
            self.free_dofs = np.repeat(free_scalar, 2)
        else:
            self.free_dofs = free_scalar

    def _check_version(self):
        if self._mesh_version != self.mesh.version:
            self._mesh_version = self.mesh.version
            self._build()

    def boundary_dofs(self, markers=None) -> np.ndarray:
        """Mask of dofs supported on (marked) boundary edges."""
        mask_scalar = np.zeros(self.n_scalar, dtype=bool)
        for edge, marker in zip(self.mesh.bnd_edges, self.mesh.bnd_markers):
            if markers is not None and marker not in markers:
                continue
            mask_scalar[edge[0]] = True
            mask_scalar[edge[1]] = True
            if self.order == 2:
                key = (min(edge), max(edge))
                mask_scalar[self.mesh.nv + self._edge_ids[key]] = True
        return np.repeat(mask_scalar, 2) if self.vdim == 2 else mask_scalar

    # -- symbolic handles ---------------------------------------------------
    def trial(self) -> sym.TrialRef:
        return sym.TrialRef(self, self.vdim)

    def test(self) -> sym.TestRef:
        return sym.TestRef(self, self.vdim)


class GridFunction:
    """Coefficient vector over a finite element space."""

    def __init__(self, space: FESpace, vec: Optional[np.ndarray] = None):
        self.space = space
        if vec is None:
            self.vec = np.zeros(space.ndof)
        else:
            vec = np.asarray(vec, dtype=float)
            if vec.shape != (space.ndof,):
                raise AssemblyError("coefficient vector length does not match space")
            self.vec = vec.copy()

    def ref(self) -> sym.GridFuncRef:
        return sym.GridFuncRef(self, self.space.vdim)

    def copy(self) -> "GridFunction":
        return GridFunction(self.space, self.vec)

    def vertex_values(self) -> np.ndarray:
        """Values at mesh vertices (vertex dofs are the leading scalar dofs)."""
        nv = self.space.mesh.nv
        if self.space.vdim == 2:
            return self.vec[: 2 * nv].reshape(nv, 2)
        return self.vec[:nv].copy()


# ---------------------------------------------------------------------------
# integrand inspection
# ---------------------------------------------------------------------------


def _collect_refs(expr: sym.Expr):
    trial_spaces, test_spaces, gridfuncs = [], [], []
    stack = [expr]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, sym.TrialRef):
            if node.space not in trial_spaces:
                trial_spaces.append(node.space)
        elif isinstance(node, sym.TestRef):
            if node.space not in test_spaces:
                test_spaces.append(node.space)
        elif isinstance(node, sym.GridFuncRef):
            if node.gridfunc not in gridfuncs:
                gridfuncs.append(node.gridfunc)
        stack.extend(node.children())
    return trial_spaces, test_spaces, gridfuncs


def _term_degree(term: sym.FormTerm, mesh: Mesh2D, *spaces) -> int:
    orders = [1]
    for s in spaces:
        if s is not None:
            orders.append(s.order)
    _, _, gfs = _collect_refs(term.integrand)
    for gf in gfs:
        orders.append(gf.space.order)
    if mesh.deformation is not None:
        orders.append(mesh.deformation.space.order)
    return 2 * max(orders) + term.bonus_quad_order


def _as_terms(terms) -> List[sym.FormTerm]:
    if isinstance(terms, sym.FormTerm):
        return [terms]
    return list(terms)


# ---------------------------------------------------------------------------
# batched geometry / context construction
# ---------------------------------------------------------------------------


def _vector_basis(vals, grads):
    """Interleave a scalar basis into a 2-vector basis.

    vals (..., L) -> (..., 2L, 2); grads (..., L, 2) -> (..., 2L, 2, 2) with
    grad[..., 2l+c, i, j] = d_i(phi_l) * delta(j, c).
    """
    L = vals.shape[-1]
    vvals = np.zeros(vals.shape[:-1] + (2 * L, 2))
    vvals[..., 0::2, 0] = vals
    vvals[..., 1::2, 1] = vals
    vgrads = np.zeros(grads.shape[:-2] + (2 * L, 2, 2))
    vgrads[..., 0::2, :, 0] = grads
    vgrads[..., 1::2, :, 1] = grads
    return vvals, vgrads


def _deformation_fields(mesh, elems, ref_pts):
    """Deformation value and material gradient at reference points.

    ref_pts is (Q, 2) (same points for every element) or (E, Q, 2).
    Returns value (E, Q, 2) and jacobian F = I + dV (E, Q, 2, 2).
    """
    gf = mesh.deformation
    geom = mesh.geometry()
    vals, grads = _basis(gf.space.order, ref_pts)  # (..., L), (..., L, 2)
    inv_jac_t = np.swapaxes(geom.inv_jac[elems], -1, -2)  # (E, 2, 2)
    coeffs = gf.vec[gf.space.eldofs[elems]]  # (E, 2L)
    co = np.stack([coeffs[:, 0::2], coeffs[:, 1::2]], axis=-1)  # (E, L, 2)
    if vals.ndim == 1 + 1:  # (Q, L): shared points
        value = np.einsum("ql,elc->eqc", vals, co)
        grad_ref = np.einsum("qld,elc->eqdc", grads, co)
    else:  # (E, Q, L)
        value = np.einsum("eql,elc->eqc", vals, co)
        grad_ref = np.einsum("eqld,elc->eqdc", grads, co)
    # material gradient (nabla (x) V): d_i V_c
    grad_mat = np.einsum("eid,eqdc->eqic", inv_jac_t, grad_ref)
    jac_def = np.swapaxes(grad_mat, -1, -2) + np.eye(2)
    return value, jac_def


def _inv_t_2x2(m):
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 1, 0]
    out[..., 1, 0] = -m[..., 0, 1]
    return out / det[..., None, None], det


def _bind_function(ctx_funcs, key, source, space_or_gf, vals, grads_phys, axis):
    """Place basis/grid-function arrays on the (E, Q, T, U) batch axes."""
    if axis == "test":
        expand = lambda a: a[:, :, :, None, ...]
    elif axis == "trial":
        expand = lambda a: a[:, :, None, :, ...]
    else:
        expand = lambda a: a[:, :, None, None, ...]
    ctx_funcs[key] = (expand(vals), expand(grads_phys))


class _RegionData(NamedTuple):
    ctx: sym.EvalContext
    weights: np.ndarray           # (E, Q) including all metric factors
    test_dofs: Optional[np.ndarray]
    trial_dofs: Optional[np.ndarray]


def _volume_chunks(mesh, term, test_space, trial_space, degree, chunk):
    geom = mesh.geometry()
    markers = term.region.markers
    if markers is None:
        elems_all = np.arange(mesh.nt)
    else:
        elems_all = np.array(
            [t for t, m in enumerate(mesh.tri_markers) if m in markers], dtype=np.int64
        )
    rule = quadrature_rule(degree)
    qp, qw = rule.tri_points, rule.tri_weights
    _, _, gfs = _collect_refs(term.integrand)

    for start in range(0, len(elems_all), chunk):
        elems = elems_all[start : start + chunk]
        E = len(elems)
        if E == 0:
            continue
        jac = geom.jac[elems]
        det = geom.det[elems]
        inv_jac_t = np.swapaxes(geom.inv_jac[elems], -1, -2)  # (E, 2, 2)
        coords = geom.origin[elems][:, None, :] + np.einsum(
            "eij,qj->eqi", jac, qp
        )  # (E, Q, 2)
        if mesh.deformation is not None:
            dval, jdef = _deformation_fields(mesh, elems, qp)
            det_def = jdef[..., 0, 0] * jdef[..., 1, 1] - jdef[..., 0, 1] * jdef[..., 1, 0]
            if np.any(det_def <= 0.0):
                raise InvertedElementError(
                    "active deformation has non-positive Jacobian determinant"
                )
            coords = coords + dval
            weights = qw[None, :] * det[:, None] * det_def
            inv_def_t, _ = _inv_t_2x2(jdef)
            # physical gradient operator: F^{-T} J^{-T}
            grad_op = np.einsum("eqij,ejk->eqik", inv_def_t, inv_jac_t)
        else:
            weights = np.broadcast_to(qw[None, :] * det[:, None], (E, len(qw))).copy()
            grad_op = np.broadcast_to(inv_jac_t[:, None], (E, len(qw), 2, 2))

        funcs = {}

        def bind_space(space, axis, key):
            vals, grads_ref = _basis(space.order, qp)  # (Q, L), (Q, L, 2)
            gphys = np.einsum("eqij,qlj->eqli", grad_op, grads_ref)  # (E, Q, L, 2)
            vals_b = np.broadcast_to(vals[None], (E,) + vals.shape)
            if space.vdim == 2:
                vv, gg = _vector_basis(vals_b, gphys)
                _bind_function(funcs, key, None, space, vv, gg, axis)
            else:
                _bind_function(funcs, key, None, space, vals_b, gphys, axis)
            return space.eldofs[elems]

        test_dofs = trial_dofs = None
        if test_space is not None:
            test_dofs = bind_space(test_space, "test", sym.EvalContext.test_key(test_space))
        if trial_space is not None:
            trial_dofs = bind_space(
                trial_space, "trial", sym.EvalContext.trial_key(trial_space)
            )
        for gf in gfs:
            if gf.space.mesh is not mesh:
                raise AssemblyError("grid function lives on a different mesh")
            vals, grads_ref = _basis(gf.space.order, qp)
            gphys = np.einsum("eqij,qlj->eqli", grad_op, grads_ref)
            codofs = gf.vec[gf.space.eldofs[elems]]
            if gf.space.vdim == 2:
                co = np.stack([codofs[:, 0::2], codofs[:, 1::2]], axis=-1)  # (E,L,2)
                value = np.einsum("ql,elc->eqc", vals, co)
                gval = np.einsum("eqli,elc->eqic", gphys, co)
            else:
                value = np.einsum("ql,el->eq", vals, codofs)
                gval = np.einsum("eqli,el->eqi", gphys, codofs)
            _bind_function(funcs, sym.EvalContext.gridfunc_key(gf), None, gf, value, gval, "gf")

        ctx = sym.EvalContext(coords=coords[:, :, None, None, :], functions=funcs)
        yield _RegionData(ctx, weights, test_dofs, trial_dofs)


def _boundary_chunks(mesh, term, test_space, trial_space, degree, chunk):
    geom = mesh.geometry()
    markers = term.region.markers
    if markers is None:
        edges_all = np.arange(mesh.nbe)
    else:
        edges_all = np.array(
            [i for i, m in enumerate(mesh.bnd_markers) if m in markers], dtype=np.int64
        )
    rule = quadrature_rule(degree)
    s, sw = rule.edge_points, rule.edge_weights
    _, _, gfs = _collect_refs(term.integrand)

    for start in range(0, len(edges_all), chunk):
        edges = edges_all[start : start + chunk]
        E = len(edges)
        if E == 0:
            continue
        parents = geom.edge_parent[edges]
        l0 = geom.edge_local[edges, 0]
        l1 = geom.edge_local[edges, 1]
        r0 = _REF_VERTICES[l0]  # (E, 2)
        r1 = _REF_VERTICES[l1]
        ref_pts = r0[:, None, :] + s[None, :, None] * (r1 - r0)[:, None, :]  # (E,Q,2)

        jac = geom.jac[parents]
        inv_jac_t = np.swapaxes(geom.inv_jac[parents], -1, -2)
        coords = geom.origin[parents][:, None, :] + np.einsum(
            "eij,eqj->eqi", jac, ref_pts
        )
        edge_vec = geom.edge_vec[edges]      # (E, 2), length included
        normal_mat = geom.edge_normal[edges]

        if mesh.deformation is not None:
            dval, jdef = _deformation_fields(mesh, parents, ref_pts)
            det_def = jdef[..., 0, 0] * jdef[..., 1, 1] - jdef[..., 0, 1] * jdef[..., 1, 0]
            if np.any(det_def <= 0.0):
                raise InvertedElementError(
                    "active deformation has non-positive Jacobian determinant"
                )
            coords = coords + dval
            dvec = np.einsum("eqij,ej->eqi", jdef, edge_vec)  # deformed edge direction
            dlen = np.linalg.norm(dvec, axis=-1)
            weights = sw[None, :] * dlen
            tangent = dvec / dlen[..., None]
            inv_def_t, _ = _inv_t_2x2(jdef)
            nrm = np.einsum("eqij,ej->eqi", inv_def_t, normal_mat)
            normal = nrm / np.linalg.norm(nrm, axis=-1)[..., None]
            grad_op = np.einsum("eqij,ejk->eqik", inv_def_t, inv_jac_t)
        else:
            elen = geom.edge_length[edges]
            weights = np.broadcast_to(sw[None, :] * elen[:, None], (E, len(sw))).copy()
            tangent = np.broadcast_to(
                geom.edge_tangent[edges][:, None, :], (E, len(sw), 2)
            )
            normal = np.broadcast_to(normal_mat[:, None, :], (E, len(sw), 2))
            grad_op = np.broadcast_to(inv_jac_t[:, None], (E, len(sw), 2, 2))

        funcs = {}

        def bind_space(space, axis, key):
            vals, grads_ref = _basis(space.order, ref_pts)  # (E,Q,L), (E,Q,L,2)
            gphys = np.einsum("eqij,eqlj->eqli", grad_op, grads_ref)
            if space.vdim == 2:
                vv, gg = _vector_basis(vals, gphys)
                _bind_function(funcs, key, None, space, vv, gg, axis)
            else:
                _bind_function(funcs, key, None, space, vals, gphys, axis)
            return space.eldofs[parents]

        test_dofs = trial_dofs = None
        if test_space is not None:
            test_dofs = bind_space(test_space, "test", sym.EvalContext.test_key(test_space))
        if trial_space is not None:
            trial_dofs = bind_space(
                trial_space, "trial", sym.EvalContext.trial_key(trial_space)
            )
        for gf in gfs:
            if gf.space.mesh is not mesh:
                raise AssemblyError("grid function lives on a different mesh")
            vals, grads_ref = _basis(gf.space.order, ref_pts)
            gphys = np.einsum("eqij,eqlj->eqli", grad_op, grads_ref)
            codofs = gf.vec[gf.space.eldofs[parents]]
            if gf.space.vdim == 2:
                co = np.stack([codofs[:, 0::2], codofs[:, 1::2]], axis=-1)
                value = np.einsum("eql,elc->eqc", vals, co)
                gval = np.einsum("eqli,elc->eqic", gphys, co)
            else:
                value = np.einsum("eql,el->eq", vals, codofs)
                gval = np.einsum("eqli,el->eqi", gphys, codofs)
            _bind_function(funcs, sym.EvalContext.gridfunc_key(gf), None, gf, value, gval, "gf")

        ctx = sym.EvalContext(
            coords=coords[:, :, None, None, :],
            normal=normal[:, :, None, None, :],
            tangent=tangent[:, :, None, None, :],
            functions=funcs,
        )
        yield _RegionData(ctx, weights, test_dofs, trial_dofs)


def _chunk_size(degree, n_test, n_trial):
    q = max(1, ((degree + 2) // 2)) ** 2
    per_elem = q * max(1, n_test) * max(1, n_trial) * 4
    return max(16, _CHUNK_BUDGET // per_elem)


def _chunks_for(mesh, term, test_space, trial_space):
    degree = _term_degree(term, mesh, test_space, trial_space)
    n_test = 0 if test_space is None else (3 if test_space.order == 1 else 6) * test_space.vdim
    n_trial = 0 if trial_space is None else (3 if trial_space.order == 1 else 6) * trial_space.vdim
    chunk = _chunk_size(degree, n_test, n_trial)
    if isinstance(term.region, sym.VolumeRegion):
        return _volume_chunks(mesh, term, test_space, trial_space, degree, chunk)
    return _boundary_chunks(mesh, term, test_space, trial_space, degree, chunk)


def _validate_spaces(term, test_space, trial_space):
    trials, tests, _ = _collect_refs(term.integrand)
    if test_space is None and tests:
        raise AssemblyError("integrand references a test function but none expected")
    if test_space is not None and any(s is not test_space for s in tests):
        raise AssemblyError("test functions of a foreign space in integrand")
    if trial_space is None and trials:
        raise AssemblyError("integrand references a trial function but none expected")
    if trial_space is not None and any(s is not trial_space for s in trials):
        raise AssemblyError("trial functions of a foreign space in integrand")


def _zeroed(funcs, key):
    out = dict(funcs)
    val, grad = funcs[key]
    out[key] = (np.zeros_like(val), np.zeros_like(grad))
    return out


def _scaled(funcs, key, factor):
    out = dict(funcs)
    val, grad = funcs[key]
    out[key] = (factor * val, factor * grad)
    return out


def _check_linearity(term, data: _RegionData, key, what):
    vals = sym.evaluate(term.integrand, data.ctx)
    ctx0 = sym.EvalContext(
        coords=data.ctx.coords, normal=data.ctx.normal, tangent=data.ctx.tangent,
        params=data.ctx.params, functions=_zeroed(data.ctx.functions, key),
    )
    ctx2 = sym.EvalContext(
        coords=data.ctx.coords, normal=data.ctx.normal, tangent=data.ctx.tangent,
        params=data.ctx.params, functions=_scaled(data.ctx.functions, key, 2.0),
    )
    zero = np.max(np.abs(np.broadcast_to(sym.evaluate(term.integrand, ctx0), vals.shape)))
    doubled = np.max(np.abs(sym.evaluate(term.integrand, ctx2) - 2.0 * vals))
    scale = max(1.0, float(np.max(np.abs(vals))))
    if zero > 1e-9 * scale or doubled > 1e-9 * scale:
        raise AssemblyError(f"integrand is not linear in the {what} function")


# ---------------------------------------------------------------------------
# public assembly API
# ---------------------------------------------------------------------------


def assemble_linear(terms, test_space: FESpace) -> np.ndarray:
    """Assemble form terms, each linear in one test function, into a vector."""
    test_space._check_version()
    out = np.zeros(test_space.ndof)
    for term in _as_terms(terms):
        if sym._is_zero(term.integrand):
            continue
        _validate_spaces(term, test_space, None)
        mesh = test_space.mesh
        first = True
        for data in _chunks_for(mesh, term, test_space, None):
            if first:
                _check_linearity(term, data, sym.EvalContext.test_key(test_space), "test")
                first = False
            vals = sym.evaluate(term.integrand, data.ctx)  # (E, Q, T, 1)
            vals = np.broadcast_to(vals, data.weights.shape + (data.test_dofs.shape[1], 1))
            contrib = np.einsum("eqt,eq->et", vals[..., 0], data.weights)
            np.add.at(out, data.test_dofs, contrib)
    return out


def assemble_bilinear(terms, trial_space: FESpace, test_space: FESpace) -> sp.csr_matrix:
    """Assemble bilinear form terms into a CSR matrix (rows = test dofs)."""
    trial_space._check_version()
    test_space._check_version()
    rows, cols, vals_acc = [], [], []
    for term in _as_terms(terms):
        if sym._is_zero(term.integrand):
            continue
        _validate_spaces(term, test_space, trial_space)
        mesh = test_space.mesh
        if trial_space.mesh is not mesh:
            raise AssemblyError("trial and test spaces live on different meshes")
        first = True
        for data in _chunks_for(mesh, term, test_space, trial_space):
            if first:
                _check_linearity(term, data, sym.EvalContext.test_key(test_space), "test")
                _check_linearity(term, data, sym.EvalContext.trial_key(trial_space), "trial")
                first = False
            vals = sym.evaluate(term.integrand, data.ctx)  # (E, Q, T, U)
            E, Q = data.weights.shape
            T = data.test_dofs.shape[1]
            U = data.trial_dofs.shape[1]
            vals = np.broadcast_to(vals, (E, Q, T, U))
            local = np.einsum("eqtu,eq->etu", vals, data.weights)
            rows.append(np.broadcast_to(data.test_dofs[:, :, None], (E, T, U)).ravel())
            cols.append(np.broadcast_to(data.trial_dofs[:, None, :], (E, T, U)).ravel())
            vals_acc.append(local.ravel())
    if rows:
        mat = sp.coo_matrix(
            (np.concatenate(vals_acc), (np.concatenate(rows), np.concatenate(cols))),
            shape=(test_space.ndof, trial_space.ndof),
        ).tocsr()
    else:
        mat = sp.csr_matrix((test_space.ndof, trial_space.ndof))
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def integrate(terms, mesh: Mesh2D) -> float:
    """Numerically integrate form terms (no trial/test functions allowed)."""
    total = 0.0
    for term in _as_terms(terms):
        if sym._is_zero(term.integrand):
            continue
        trials, tests, _ = _collect_refs(term.integrand)
        if trials or tests:
            raise AssemblyError("cannot integrate an expression with trial/test functions")
        for data in _chunks_for(mesh, term, None, None):
            vals = sym.evaluate(term.integrand, data.ctx)
            vals = np.broadcast_to(vals, data.weights.shape + (1, 1))
            total += float(np.einsum("eq,eq->", vals[..., 0, 0], data.weights))
    return total


def project(space: FESpace, expr) -> GridFunction:
    """Global L2 best-approximation of an expression onto the space."""
    expr = sym.as_expr(expr)
    if expr.shape != (() if space.vdim == 1 else (2,)):
        raise AssemblyError("expression shape does not match space value dimension")
    trials, tests, _ = _collect_refs(expr)
    if trials or tests:
        raise AssemblyError("cannot project an expression with trial/test functions")
    u, w = space.trial(), space.test()
    if space.vdim == 1:
        mass = sym.vol(u * w)
        rhs = sym.vol(expr * w)
    else:
        mass = sym.vol(sym.InnerProduct(u, w))
        rhs = sym.vol(sym.InnerProduct(expr, w))
    M = assemble_bilinear([mass], space, space)
    b = assemble_linear([rhs], space)
    gf = GridFunction(space)
    gf.vec[:] = cholesky_solve(M, b)
    return gf


def solve_dirichlet(A: sp.spmatrix, b: np.ndarray, free: np.ndarray,
                    transpose: bool = False) -> np.ndarray:
    """Solve on the free-dof sub-block; constrained entries stay zero."""
    free = np.asarray(free, dtype=bool)
    if A.shape[0] != A.shape[1] or A.shape[0] != len(free) or len(b) != len(free):
        raise AssemblyError("inconsistent system/mask sizes")
    x = np.zeros(len(b))
    idx = np.where(free)[0]
    if len(idx) == 0:
        return x
    sub = A.tocsr()[idx][:, idx]
    x[idx] = lu_solve(sub, b[idx], transpose=transpose)
    return x


def export_matrix(A: sp.spmatrix, path: str):
    """MatrixMarket ASCII dump, for debugging outside the process."""
    scipy.io.mmwrite(path, A)
