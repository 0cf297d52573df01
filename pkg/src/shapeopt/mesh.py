"""Straight-edged triangular meshes with named boundaries and deformations.

A mesh can carry an *active deformation*: a 2-vector grid function whose
field is added to every integration point without moving the stored node
coordinates.  All assembly and integration then happens on the deformed
configuration by an internal change of variables.  Alternatively the nodes
can be moved for real (``move_nodes``) and relaxed (``smooth``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import Delaunay

__all__ = [
    "Mesh2D",
    "MeshError",
    "InvertedElementError",
    "QualityReport",
    "generate_disk",
    "generate_rect",
    "smooth",
    "save_mesh",
    "load_mesh",
    "write_vtk",
]


class MeshError(ValueError):
    pass


class InvertedElementError(RuntimeError):
    """A deformation or node move produced a non-positive Jacobian."""


@dataclass
class QualityReport:
    min_angle_before: float
    max_angle_before: float
    min_angle_after: float
    max_angle_after: float
    sweeps: int
    moved_vertices: int


@dataclass
class StructuredGridInfo:
    """Tensor-product layout of a rectangle mesh (needed for time averaging)."""

    xs: np.ndarray
    ys: np.ndarray
    vertex_ids: np.ndarray  # (nx+1, ny+1)


class Mesh2D:
    """Triangle mesh: vertices, positively oriented triangles, marked boundary."""

    def __init__(self, vertices, triangles, tri_markers, bnd_edges, bnd_markers,
                 validate: bool = True):
        self.vertices = np.array(vertices, dtype=float)
        self.triangles = np.array(triangles, dtype=np.int64)
        self.tri_markers = list(tri_markers)
        self.bnd_edges = np.array(bnd_edges, dtype=np.int64)
        self.bnd_markers = list(bnd_markers)
        self.deformation = None
        self.grid_info: Optional[StructuredGridInfo] = None
        self._version = 0
        self._geom_cache = None
        if validate:
            self.validate()

    # -- basic queries ----------------------------------------------------
    @property
    def nv(self) -> int:
        return len(self.vertices)

    @property
    def nt(self) -> int:
        return len(self.triangles)

    @property
    def nbe(self) -> int:
        return len(self.bnd_edges)

    @property
    def version(self) -> int:
        return self._version

    def boundary_marker_names(self) -> List[str]:
        seen = []
        for m in self.bnd_markers:
            if m not in seen:
                seen.append(m)
        return seen

    def boundary_edges_with_marker(self, marker: str) -> np.ndarray:
        idx = [i for i, m in enumerate(self.bnd_markers) if m == marker]
        return self.bnd_edges[idx]

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )

    def validate(self):
        if self.nv < 3 or self.nt < 1:
            raise MeshError("mesh needs at least one triangle")
        if self.triangles.min() < 0 or self.triangles.max() >= self.nv:
            raise MeshError("triangle refers to a missing vertex")
        areas = self.signed_areas()
        if np.any(areas <= 0):
            raise MeshError("all triangles must be positively oriented")
        if len(self.tri_markers) != self.nt or len(self.bnd_markers) != self.nbe:
            raise MeshError("marker lists do not match element counts")
        # every boundary edge borders exactly one triangle, and the boundary
        # edge set must coincide with the set of single-triangle edges
        edge_count: Dict[Tuple[int, int], int] = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edge_count[key] = edge_count.get(key, 0) + 1
        hull = {e for e, c in edge_count.items() if c == 1}
        declared = {(min(a, b), max(a, b)) for a, b in self.bnd_edges}
        if hull != declared:
            raise MeshError("boundary edges must be exactly the one-triangle edges")
        # closed loops: every boundary vertex touches exactly two boundary edges
        touch: Dict[int, int] = {}
        for a, b in self.bnd_edges:
            touch[a] = touch.get(a, 0) + 1
            touch[b] = touch.get(b, 0) + 1
        if any(c != 2 for c in touch.values()):
            raise MeshError("boundary edges do not form closed loops")

    # -- deformation ------------------------------------------------------
    def set_deformation(self, gridfunc):
        """Integrate on the configuration ``x + V(x)`` without moving nodes."""
        space = gridfunc.space
        if space.mesh is not self:
            raise MeshError("deformation grid function lives on a different mesh")
        if space.vdim != 2:
            raise MeshError("deformation must be a 2-vector field")
        if space.order not in (1, 2):
            raise MeshError("deformation order must be 1 or 2")
        self.deformation = gridfunc

    def unset_deformation(self):
        self.deformation = None

    def move_nodes(self, gridfunc):
        """Displace every vertex by the field; abort unchanged on inversion."""
        space = gridfunc.space
        if space.mesh is not self or space.vdim != 2:
            raise MeshError("displacement must be a 2-vector field on this mesh")
        disp = gridfunc.vertex_values()
        new_vertices = self.vertices + disp
        p = new_vertices[self.triangles]
        areas = 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )
        if np.any(areas <= 0):
            raise InvertedElementError("node move would invert an element")
        self.vertices = new_vertices
        self.deformation = None
        self._touch()

    def _touch(self):
        self._version += 1
        self._geom_cache = None

    # -- cached affine geometry (reference configuration) ------------------
    def geometry(self) -> "MeshGeometry":
        if self._geom_cache is None:
            self._geom_cache = MeshGeometry(self)
        return self._geom_cache


class MeshGeometry:
    """Per-element affine maps and boundary-edge adjacency, cached per mesh."""

    def __init__(self, mesh: Mesh2D):
        pts = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
        p0 = pts[:, 0]
        # x(xi) = p0 + J @ xi with columns (p1 - p0), (p2 - p0)
        self.jac = np.stack([pts[:, 1] - p0, pts[:, 2] - p0], axis=-1)
        self.det = np.linalg.det(self.jac)
        self.inv_jac = np.linalg.inv(self.jac)
        self.origin = p0

        # boundary edge -> (parent triangle, local endpoint indices)
        edge_to_tri: Dict[Tuple[int, int], Tuple[int, int, int]] = {}
        for t, tri in enumerate(mesh.triangles):
            for la, lb in ((0, 1), (1, 2), (2, 0)):
                a, b = tri[la], tri[lb]
                edge_to_tri[(min(a, b), max(a, b))] = (t, la, lb)
        parents = []
        locals_ = []
        for a, b in mesh.bnd_edges:
            t, la, lb = edge_to_tri[(min(a, b), max(a, b))]
            tri = mesh.triangles[t]
            local = {tri[i]: i for i in range(3)}
            parents.append(t)
            locals_.append((local[a], local[b]))
        self.edge_parent = np.array(parents, dtype=np.int64)
        self.edge_local = np.array(locals_, dtype=np.int64)

        # outward material normal and tangent per boundary edge
        va = mesh.vertices[mesh.bnd_edges[:, 0]]
        vb = mesh.vertices[mesh.bnd_edges[:, 1]]
        tang = vb - va
        normal = np.stack([tang[:, 1], -tang[:, 0]], axis=-1)
        centroid = mesh.vertices[mesh.triangles[self.edge_parent]].mean(axis=1)
        mid = 0.5 * (va + vb)
        flip = np.einsum("ei,ei->e", normal, mid - centroid) < 0
        normal[flip] *= -1.0
        self.edge_vec = tang  # unnormalized, carries the edge length
        length = np.linalg.norm(tang, axis=1)
        self.edge_length = length
        self.edge_tangent = tang / length[:, None]
        self.edge_normal = normal / np.linalg.norm(normal, axis=1)[:, None]


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def generate_disk(center: Sequence[float], radius: float, maxh: float,
                  marker: str = "circle") -> Mesh2D:
    """Quasi-uniform triangulation of a disk.

    Boundary nodes are equally spaced on the circle; interior nodes sit on
    concentric rings and are triangulated by Delaunay.  Fully deterministic.
    """
    if radius <= 0 or maxh <= 0:
        raise MeshError("radius and maxh must be positive")
    cx, cy = float(center[0]), float(center[1])

    # straight edges replace curved ones, so the boundary is resolved finer
    # than the interior to keep the polygonal geometry error subordinate
    n_bnd = max(16, int(math.ceil(2.0 * math.pi * radius / (0.6 * maxh))))
    n_rings = max(2, int(round(radius / (maxh * math.sqrt(3.0) / 2.0))))
    dr = radius / n_rings

    points = [(cx, cy)]
    for k in range(1, n_rings + 1):
        r = k * dr
        m = max(6, int(round(n_bnd * k / n_rings)))
        if k == n_rings:
            m = n_bnd
        # stagger alternate rings for better-shaped triangles
        offset = 0.5 * (2.0 * math.pi / m) if k % 2 == 0 else 0.0
        for i in range(m):
            a = 2.0 * math.pi * i / m + offset
            points.append((cx + r * math.cos(a), cy + r * math.sin(a)))
    pts = np.array(points)
    first_bnd = len(pts) - n_bnd

    tri = Delaunay(pts)
    simplices = tri.simplices.copy()
    # enforce positive orientation
    p = pts[simplices]
    areas = 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )
    swap = areas < 0
    simplices[swap] = simplices[swap][:, [0, 2, 1]]
    keep = np.abs(areas) > 1e-14 * radius * radius
    simplices = simplices[keep]

    bnd_edges = [
        (first_bnd + i, first_bnd + (i + 1) % n_bnd) for i in range(n_bnd)
    ]
    mesh = Mesh2D(
        pts,
        simplices,
        ["default"] * len(simplices),
        bnd_edges,
        [marker] * len(bnd_edges),
    )
    return mesh


def generate_rect(x_range: Sequence[float], y_range: Sequence[float],
                  maxh: float) -> Mesh2D:
    """Tensor-product rectangle mesh, each cell split along one diagonal.

    Cells are sized so the diagonal stays below ``maxh``.  Boundary markers
    are ``left``, ``right``, ``bottom`` and ``top``.
    """
    x0, x1 = map(float, x_range)
    y0, y1 = map(float, y_range)
    if not (x1 > x0 and y1 > y0 and maxh > 0):
        raise MeshError("degenerate rectangle or maxh")
    nx = max(1, int(math.ceil(math.sqrt(2.0) * (x1 - x0) / maxh)))
    ny = max(1, int(math.ceil(math.sqrt(2.0) * (y1 - y0) / maxh)))

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    vid = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.stack([xx.ravel(), yy.ravel()], axis=-1)

    tris = []
    for i in range(nx):
        for j in range(ny):
            v00, v10 = vid[i, j], vid[i + 1, j]
            v01, v11 = vid[i, j + 1], vid[i + 1, j + 1]
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))

    bnd_edges = []
    bnd_markers = []
    for j in range(ny):
        bnd_edges.append((vid[0, j], vid[0, j + 1]))
        bnd_markers.append("left")
        bnd_edges.append((vid[nx, j], vid[nx, j + 1]))
        bnd_markers.append("right")
    for i in range(nx):
        bnd_edges.append((vid[i, 0], vid[i + 1, 0]))
        bnd_markers.append("bottom")
        bnd_edges.append((vid[i, ny], vid[i + 1, ny]))
        bnd_markers.append("top")

    mesh = Mesh2D(vertices, tris, ["default"] * len(tris), bnd_edges, bnd_markers)
    mesh.grid_info = StructuredGridInfo(xs=xs, ys=ys, vertex_ids=vid)
    return mesh


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


def _triangle_angles(p: np.ndarray) -> np.ndarray:
    """Interior angles (degrees) of triangles given as (..., 3, 2) points."""
    angles = []
    for i in range(3):
        a = p[..., (i + 1) % 3, :] - p[..., i, :]
        b = p[..., (i + 2) % 3, :] - p[..., i, :]
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        cosv = np.clip(np.einsum("...i,...i->...", a, b) / (na * nb), -1.0, 1.0)
        angles.append(np.degrees(np.arccos(cosv)))
    return np.stack(angles, axis=-1)


def smooth(mesh: Mesh2D, n_sweeps: int = 1) -> QualityReport:
    """Laplacian smoothing of interior vertices with per-move rollback.

    A vertex move is kept only if the minimum interior angle over its
    incident triangles does not decrease (and no element inverts), so the
    global minimum angle never drops.  Boundary vertices stay fixed.
    """
    boundary_vertices = set(int(v) for e in mesh.bnd_edges for v in e)
    incident: Dict[int, List[int]] = {}
    neighbors: Dict[int, set] = {}
    for t, tri in enumerate(mesh.triangles):
        for v in tri:
            incident.setdefault(int(v), []).append(t)
            neighbors.setdefault(int(v), set()).update(int(w) for w in tri if w != v)

    def angles_of(tris, verts):
        return _triangle_angles(verts[mesh.triangles[tris]])

    all_angles = _triangle_angles(mesh.vertices[mesh.triangles])
    min_before, max_before = float(all_angles.min()), float(all_angles.max())

    verts = mesh.vertices.copy()
    moved = 0
    for _ in range(max(0, n_sweeps)):
        for v in range(mesh.nv):
            if v in boundary_vertices or v not in neighbors:
                continue
            tris = incident[v]
            old = verts[v].copy()
            old_angles = angles_of(tris, verts)
            candidate = np.mean([verts[w] for w in sorted(neighbors[v])], axis=0)
            verts[v] = candidate
            p = verts[mesh.triangles[tris]]
            areas = 0.5 * (
                (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
            )
            if np.any(areas <= 0) or angles_of(tris, verts).min() < old_angles.min():
                verts[v] = old
            elif not np.allclose(candidate, old, rtol=0.0, atol=0.0):
                moved += 1

    mesh.vertices = verts
    mesh._touch()
    all_angles = _triangle_angles(mesh.vertices[mesh.triangles])
    return QualityReport(
        min_angle_before=min_before,
        max_angle_before=max_before,
        min_angle_after=float(all_angles.min()),
        max_angle_after=float(all_angles.max()),
        sweeps=n_sweeps,
        moved_vertices=moved,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_mesh(mesh: Mesh2D, path: str):
    """ASCII format: 'nv nt nbe' header, coordinates, triangles, edges."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.nv} {mesh.nt} {mesh.nbe}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x!r} {y!r}\n")
        for tri, m in zip(mesh.triangles, mesh.tri_markers):
            fh.write(f"{tri[0]} {tri[1]} {tri[2]} {m}\n")
        for edge, m in zip(mesh.bnd_edges, mesh.bnd_markers):
            fh.write(f"{edge[0]} {edge[1]} {m}\n")


def load_mesh(path: str) -> Mesh2D:
    with open(path) as fh:
        tokens = fh.readline().split()
        if len(tokens) != 3:
            raise MeshError("bad mesh header")
        nv, nt, nbe = map(int, tokens)
        vertices = [tuple(map(float, fh.readline().split())) for _ in range(nv)]
        triangles, tri_markers = [], []
        for _ in range(nt):
            parts = fh.readline().split()
            triangles.append(tuple(map(int, parts[:3])))
            tri_markers.append(parts[3])
        edges, bnd_markers = [], []
        for _ in range(nbe):
            parts = fh.readline().split()
            edges.append(tuple(map(int, parts[:2])))
            bnd_markers.append(parts[2])
    return Mesh2D(vertices, triangles, tri_markers, edges, bnd_markers)


def write_vtk(mesh: Mesh2D, path: str, point_fields: Optional[Dict[str, np.ndarray]] = None):
    """Legacy ASCII VTK export of the mesh and optional per-vertex fields."""
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nmesh\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.nv} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x!r} {y!r} 0.0\n")
        fh.write(f"CELLS {mesh.nt} {4 * mesh.nt}\n")
        for tri in mesh.triangles:
            fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
        fh.write(f"CELL_TYPES {mesh.nt}\n")
        fh.write("5\n" * mesh.nt)
        if point_fields:
            fh.write(f"POINT_DATA {mesh.nv}\n")
            for name, data in point_fields.items():
                arr = np.asarray(data, dtype=float)
                if arr.ndim == 1:
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for val in arr:
                        fh.write(f"{val!r}\n")
                else:
                    fh.write(f"VECTORS {name} double\n")
                    for vx, vy in arr:
                        fh.write(f"{vx!r} {vy!r} 0.0\n")
