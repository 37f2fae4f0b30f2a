"""Lagrange FEM on the bounded box coupled to the four scaled traces.

The box ``[-b, b]^2`` (minus an optional sound-soft obstacle) carries a P1 or
P2 field. Its outer sides are closed by the Robin pairing with the traces,
and the traces are tied to the field on the inner square ``[-a, a]^2``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .hsm_assembly import (
    HsmSystem,
    NumericalFailure,
    QuadratureSpec,
    assemble_block_system,
    assemble_galerkin,
    data_operator,
)
from .kernels import kernel_lambda
from .linalg import lu_solve
from .scaling_geometry import WaveParams, global_coords, local_coords, tau, tau_prime
from .trace_space import TraceBasis, TraceGridSpec, TraceVector, basis_from_vertices, build_space, section_vertices

SIGMA_A = tuple(f"sigma_a{j}" for j in range(4))
SIGMA_B = tuple(f"sigma_b{j}" for j in range(4))
EDGE_TAGS = ("obstacle",) + SIGMA_B + SIGMA_A
MESH_HEADER = "hsm-mesh v1"
DENSE_LIMIT = 4000
NODE_TOL = 1e-9

PointFunction = Callable[[NDArray, NDArray], ArrayLike]


class MeshError(ValueError):
    """Malformed mesh, missing tags or misaligned nodes."""


class MaterialError(ValueError):
    """Material data violate the support or positivity requirements."""


# Mesh ------------------------------------------------------------------------


def _signed_areas(vertices: NDArray, triangles: NDArray) -> NDArray:
    p0, p1, p2 = (vertices[triangles[:, i]] for i in range(3))
    d1, d2 = p1 - p0, p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _unique_edges(triangles: NDArray) -> tuple[NDArray, NDArray]:
    """Sorted unique edges and, per triangle, the edge index of (01, 12, 20)."""
    local = np.stack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=1)
    flat = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(flat, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


@dataclass(frozen=True)
class Mesh2D:
    vertices: NDArray[np.float64]
    triangles: NDArray[np.intp]
    region_tags: NDArray[np.intp]
    edge_tags: Mapping[str, NDArray[np.intp]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=float)
        t = np.asarray(self.triangles, dtype=np.intp)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "region_tags", np.asarray(self.region_tags, dtype=np.intp))
        tags = {k: np.asarray(e, dtype=np.intp).reshape(-1, 2) for k, e in self.edge_tags.items()}
        object.__setattr__(self, "edge_tags", tags)
        self.validate()

    def validate(self) -> None:
        v, t = self.vertices, self.triangles
        if v.ndim != 2 or v.shape[1] != 2 or t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("vertices must be (n, 2) and triangles (m, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle references a missing vertex")
        if self.region_tags.shape != (len(t),):
            raise MeshError("one region tag per triangle is required")
        areas = _signed_areas(v, t)
        if np.any(areas <= 0):
            raise MeshError(f"triangle {int(np.argmin(areas))} is not positively oriented")
        edges, inverse = _unique_edges(t)
        counts = np.bincount(inverse.ravel(), minlength=len(edges))
        if np.any(counts > 2):
            raise MeshError("non-conforming mesh: an edge is shared by more than two triangles")
        known = {tuple(e) for e in edges}
        for name, tagged in self.edge_tags.items():
            if name not in EDGE_TAGS:
                raise MeshError(f"unknown edge tag {name!r}")
            for e in np.sort(tagged, axis=1):
                if tuple(e) not in known:
                    raise MeshError(f"tagged edge {tuple(e)} ({name}) is not a mesh edge")

    @property
    def edges(self) -> NDArray[np.intp]:
        return _unique_edges(self.triangles)[0]

    def boundary_edges(self) -> NDArray[np.intp]:
        edges, inverse = _unique_edges(self.triangles)
        return edges[np.bincount(inverse.ravel(), minlength=len(edges)) == 1]

    def tagged(self, name: str) -> NDArray[np.intp]:
        return self.edge_tags.get(name, np.zeros((0, 2), dtype=np.intp))

    def has_obstacle(self) -> bool:
        return len(self.tagged("obstacle")) > 0

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{MESH_HEADER}\n{len(self.vertices)}\n")
            fh.writelines(f"{float(x)!r} {float(y)!r}\n" for x, y in self.vertices)
            fh.write(f"{len(self.triangles)}\n")
            fh.writelines(f"{i} {j} {k} {r}\n" for (i, j, k), r in zip(self.triangles, self.region_tags))
            rows = [(i, j, name) for name, e in self.edge_tags.items() for i, j in e]
            fh.write(f"{len(rows)}\n")
            fh.writelines(f"{i} {j} {name}\n" for i, j, name in rows)

    @classmethod
    def read(cls, path: str | Path) -> "Mesh2D":
        try:
            with open(path) as fh:
                lines = [ln.strip() for ln in fh if ln.strip()]
        except OSError as exc:
            raise MeshError(f"cannot read mesh file {path}: {exc}") from exc
        if not lines or lines[0] != MESH_HEADER:
            raise MeshError(f"missing header {MESH_HEADER!r}")
        try:
            pos = 1
            nv = int(lines[pos])
            verts = np.array([[float(x) for x in ln.split()] for ln in lines[pos + 1 : pos + 1 + nv]])
            pos += 1 + nv
            nt = int(lines[pos])
            rows = np.array([[int(x) for x in ln.split()] for ln in lines[pos + 1 : pos + 1 + nt]], dtype=np.intp)
            pos += 1 + nt
            ne = int(lines[pos])
            tags: dict[str, list[tuple[int, int]]] = {}
            for ln in lines[pos + 1 : pos + 1 + ne]:
                i, j, name = ln.split()
                tags.setdefault(name, []).append((int(i), int(j)))
            if len(verts) != nv or len(rows) != nt or sum(map(len, tags.values())) != ne:
                raise MeshError("mesh file is truncated")
        except (ValueError, IndexError) as exc:
            raise MeshError(f"malformed mesh file: {exc}") from exc
        rows = rows.reshape(-1, 4)
        return cls(verts.reshape(-1, 2), rows[:, :3], rows[:, 3], {k: np.array(v) for k, v in tags.items()})


def _tag_lines(vertices: NDArray, edges: NDArray, level: float, prefix: str, tol: float) -> dict[str, NDArray]:
    """Edges lying on ``{y1 = level, |y2| <= level}`` in each frame ``j``."""
    out = {}
    for j in range(4):
        y1, y2 = local_coords(j, vertices[:, 0], vertices[:, 1])
        on = (np.abs(y1 - level) <= tol) & (np.abs(y2) <= level + tol)
        out[f"{prefix}{j}"] = edges[on[edges[:, 0]] & on[edges[:, 1]]]
    return out


def structured_mesh(
    a: float,
    b: float,
    h: float,
    *,
    obstacle_radius: float | None = None,
) -> Mesh2D:
    """Triangulated box ``[-b, b]^2`` with grid lines through ``+-a``.

    With an obstacle, the inner square is replaced by a ring of layers between
    its boundary and an inscribed polygon of the disk. Polygon vertices are the
    radial projections of the square's boundary nodes, so ``h`` also sets the
    obstacle resolution.
    """
    if not (0 < a < b and h > 0):
        raise MeshError("need 0 < a < b and h > 0")
    xs = section_vertices(a, b, h)
    n = xs.size
    idx = np.arange(n * n).reshape(n, n)  # idx[i, k] -> (xs[i], xs[k])
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    verts = [np.column_stack([X.ravel(), Y.ravel()])]
    tol = 1e-9 * b
    cells = []
    for i in range(n - 1):
        for k in range(n - 1):
            xc, yc = 0.5 * (xs[i] + xs[i + 1]), 0.5 * (xs[k] + xs[k + 1])
            if obstacle_radius is not None and abs(xc) < a and abs(yc) < a:
                continue
            n00, n10, n11, n01 = idx[i, k], idx[i + 1, k], idx[i + 1, k + 1], idx[i, k + 1]
            if xc * yc > 0:
                cells += [(n00, n10, n11), (n00, n11, n01)]
            else:
                cells += [(n00, n10, n01), (n10, n11, n01)]
    obstacle_edges = np.zeros((0, 2), dtype=np.intp)
    if obstacle_radius is not None:
        r = float(obstacle_radius)
        if not 0 < r < a:
            raise MeshError("the obstacle must lie strictly inside the inner square")
        ia = np.flatnonzero(np.abs(xs + a) <= tol)[0]
        ib = np.flatnonzero(np.abs(xs - a) <= tol)[0]
        ring = (
            [idx[i, ia] for i in range(ia, ib)]
            + [idx[ib, k] for k in range(ia, ib)]
            + [idx[i, ib] for i in range(ib, ia, -1)]
            + [idx[ia, k] for k in range(ib, ia, -1)]
        )
        square = verts[0][ring]
        m = len(ring)
        circle = r * square / np.linalg.norm(square, axis=1)[:, None]
        layers = max(2, math.ceil((a * math.sqrt(2) - r) / h))
        base = n * n
        ring_ids = np.empty((layers + 1, m), dtype=np.intp)
        new = []
        for ell in range(layers):
            pts = circle + (ell / layers) * (square - circle)
            ring_ids[ell] = base + len(new) * m + np.arange(m)
            new.append(pts)
        ring_ids[layers] = ring
        verts += new
        for ell in range(layers):
            for q in range(m):
                p0, p1 = ring_ids[ell, q], ring_ids[ell, (q + 1) % m]
                p2, p3 = ring_ids[ell + 1, (q + 1) % m], ring_ids[ell + 1, q]
                cells += [(p0, p1, p2), (p0, p2, p3)]
        obstacle_edges = np.column_stack([ring_ids[0], np.roll(ring_ids[0], -1)])
    vertices = np.vstack(verts)
    tris = np.array(cells, dtype=np.intp)
    if obstacle_radius is not None:
        used = np.zeros(len(vertices), dtype=bool)
        used[tris.ravel()] = True
        remap = np.cumsum(used) - 1
        vertices, tris, obstacle_edges = vertices[used], remap[tris], remap[obstacle_edges]
    flip = _signed_areas(vertices, tris) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    centroids = vertices[tris].mean(axis=1)
    region = ((np.abs(centroids[:, 0]) < a) & (np.abs(centroids[:, 1]) < a)).astype(np.intp)
    edges = _unique_edges(tris)[0]
    tags = {"obstacle": obstacle_edges}
    tags.update(_tag_lines(vertices, edges, b, "sigma_b", tol))
    tags.update(_tag_lines(vertices, edges, a, "sigma_a", tol))
    return Mesh2D(vertices, tris, region, tags)


# Finite element space ---------------------------------------------------------

# Symmetric 6-point rule, exact for degree 4, on the reference triangle (area 1/2).
_TRI_A, _TRI_B = 0.445948490915965, 0.091576213509771
_TRI_WA, _TRI_WB = 0.223381589678011, 0.109951743655322
TRI_BARY = np.array(
    [
        [_TRI_A, _TRI_A, 1 - 2 * _TRI_A],
        [_TRI_A, 1 - 2 * _TRI_A, _TRI_A],
        [1 - 2 * _TRI_A, _TRI_A, _TRI_A],
        [_TRI_B, _TRI_B, 1 - 2 * _TRI_B],
        [_TRI_B, 1 - 2 * _TRI_B, _TRI_B],
        [1 - 2 * _TRI_B, _TRI_B, _TRI_B],
    ]
)
TRI_WEIGHTS = np.array([_TRI_WA] * 3 + [_TRI_WB] * 3)  # sum to 1; multiply by area


def lagrange_values(degree: int, bary: NDArray) -> NDArray:
    """Shape functions at barycentric points, order (v0, v1, v2[, e01, e12, e20])."""
    l0, l1, l2 = bary[..., 0], bary[..., 1], bary[..., 2]
    if degree == 1:
        return np.stack([l0, l1, l2], axis=-1)
    return np.stack(
        [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], axis=-1
    )


def lagrange_bary_derivatives(degree: int, bary: NDArray) -> NDArray:
    """Derivatives of the shape functions with respect to ``(l0, l1, l2)``: ``(..., nloc, 3)``."""
    shape = bary.shape[:-1]
    if degree == 1:
        return np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
    l0, l1, l2 = bary[..., 0], bary[..., 1], bary[..., 2]
    z = np.zeros(shape)
    rows = [
        [4 * l0 - 1, z, z],
        [z, 4 * l1 - 1, z],
        [z, z, 4 * l2 - 1],
        [4 * l1, 4 * l0, z],
        [z, 4 * l2, 4 * l1],
        [4 * l2, z, 4 * l0],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def edge_shape_values(degree: int, xi: NDArray) -> NDArray:
    """1D traces on an edge, order (start, end[, midpoint])."""
    if degree == 1:
        return np.stack([1 - xi, xi], axis=-1)
    return np.stack([(1 - xi) * (1 - 2 * xi), xi * (2 * xi - 1), 4 * xi * (1 - xi)], axis=-1)


@dataclass
class FemSpace:
    mesh: Mesh2D
    degree: int

    def __post_init__(self) -> None:
        if self.degree not in (1, 2):
            raise ValueError("FEM degree must be 1 or 2")
        nv = len(self.mesh.vertices)
        self.edges, edge_of = _unique_edges(self.mesh.triangles)
        if self.degree == 1:
            self.cell_dofs = self.mesh.triangles.copy()
            self.nodes = self.mesh.vertices.copy()
        else:
            self.cell_dofs = np.hstack([self.mesh.triangles, nv + edge_of])
            mids = 0.5 * (self.mesh.vertices[self.edges[:, 0]] + self.mesh.vertices[self.edges[:, 1]])
            self.nodes = np.vstack([self.mesh.vertices, mids])
        self._edge_index = {tuple(e): i for i, e in enumerate(self.edges)}
        self._tree = cKDTree(self.nodes)
        self._cell_tree = cKDTree(self.mesh.vertices[self.mesh.triangles].mean(axis=1))
        p = self.mesh.vertices[self.mesh.triangles]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are edge vectors
        self._jac_inv = np.linalg.inv(jac)
        self._area = 0.5 * np.abs(np.linalg.det(jac))

    @property
    def ndofs(self) -> int:
        return len(self.nodes)

    def edge_dofs(self, edges: NDArray) -> NDArray[np.intp]:
        """Dofs of each edge in order (start, end[, midpoint])."""
        edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
        if self.degree == 1:
            return edges.copy()
        mids = [len(self.mesh.vertices) + self._edge_index[tuple(sorted(e))] for e in edges]
        return np.column_stack([edges, mids])

    def find_node(self, x: NDArray, tol: float = NODE_TOL) -> NDArray[np.intp]:
        """Dof index at each point; ``-1`` when no node lies within ``tol``."""
        dist, ids = self._tree.query(np.asarray(x, dtype=float).reshape(-1, 2))
        ids = np.asarray(ids, dtype=np.intp)
        ids[dist > tol * max(1.0, float(np.abs(self.nodes).max()))] = -1
        return ids

    def gradients_bary(self) -> NDArray:
        """Gradients of the barycentric coordinates per triangle, ``(nt, 3, 2)``."""
        g12 = self._jac_inv  # rows: grad l1, grad l2
        g0 = -g12.sum(axis=1, keepdims=True)
        return np.concatenate([g0, g12], axis=1)

    def locate(self, x1: NDArray, x2: NDArray, k: int = 12) -> tuple[NDArray[np.intp], NDArray]:
        """Containing triangle (``-1`` if none) and barycentric coordinates per point."""
        pts = np.column_stack([np.ravel(x1), np.ravel(x2)]).astype(float)
        kk = min(k, len(self.mesh.triangles))
        _, cand = self._cell_tree.query(pts, k=kk)
        cand = np.asarray(cand).reshape(len(pts), kk)
        p0 = self.mesh.vertices[self.mesh.triangles[:, 0]]
        cell = np.full(len(pts), -1, dtype=np.intp)
        bary = np.zeros((len(pts), 3))
        tol = 1e-10
        for c in range(kk):
            todo = cell < 0
            if not todo.any():
                break
            t = cand[todo, c]
            lam = np.einsum("nij,nj->ni", self._jac_inv[t], pts[todo] - p0[t])
            full = np.column_stack([1 - lam.sum(axis=1), lam])
            ok = np.all(full >= -tol, axis=1)
            sel = np.flatnonzero(todo)[ok]
            cell[sel] = t[ok]
            bary[sel] = full[ok]
        return cell, bary


@dataclass
class FemField:
    space: FemSpace
    values: NDArray[np.complex128]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != (self.space.ndofs,):
            raise ValueError(f"expected {self.space.ndofs} values, got {self.values.shape}")

    def contains(self, x1: NDArray, x2: NDArray) -> NDArray[np.bool_]:
        return self.space.locate(x1, x2)[0] >= 0

    def evaluate(self, x1: NDArray, x2: NDArray) -> NDArray[np.complex128]:
        cell, bary = self.space.locate(x1, x2)
        if np.any(cell < 0):
            raise ValueError("point outside the meshed domain")
        phi = lagrange_values(self.space.degree, bary)
        return np.einsum("ni,ni->n", phi, self.values[self.space.cell_dofs[cell]])

    def gradient(self, x1: NDArray, x2: NDArray, cells: NDArray | None = None) -> NDArray[np.complex128]:
        """Gradient ``(n, 2)``; ``cells`` selects the triangle explicitly (one-sided limits)."""
        pts = np.column_stack([np.ravel(x1), np.ravel(x2)]).astype(float)
        if cells is None:
            cells, bary = self.space.locate(pts[:, 0], pts[:, 1])
            if np.any(cells < 0):
                raise ValueError("point outside the meshed domain")
        else:
            cells = np.asarray(cells, dtype=np.intp)
            p0 = self.space.mesh.vertices[self.space.mesh.triangles[cells, 0]]
            lam = np.einsum("nij,nj->ni", self.space._jac_inv[cells], pts - p0)
            bary = np.column_stack([1 - lam.sum(axis=1), lam])
        dphi = lagrange_bary_derivatives(self.space.degree, bary)  # (n, nloc, 3)
        grads = np.einsum("nim,nmd->nid", dphi, self.space.gradients_bary()[cells])
        return np.einsum("nid,ni->nd", grads, self.values[self.space.cell_dofs[cells]])

    def recovered_gradient(self) -> NDArray[np.complex128]:
        """Nodal gradients ``(ndofs, 2)`` averaged over incident triangles, weighted by area."""
        space = self.space
        nloc = space.cell_dofs.shape[1]
        ref = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]])[:nloc]
        dphi = lagrange_bary_derivatives(space.degree, ref)  # (node, nloc, 3)
        grads = np.einsum("pim,tmd->tpid", dphi, space.gradients_bary())
        local = np.einsum("tpid,ti->tpd", grads, self.values[space.cell_dofs])
        w = np.repeat(space._area[:, None], nloc, axis=1)
        total = np.zeros((space.ndofs, 2), dtype=np.complex128)
        weight = np.zeros(space.ndofs)
        np.add.at(total, space.cell_dofs.ravel(), (local * w[..., None]).reshape(-1, 2))
        np.add.at(weight, space.cell_dofs.ravel(), w.ravel())
        return total / weight[:, None]

    def to_vtk(self, path: str | Path, title: str = "hsm fem field") -> None:
        """Legacy VTK with vertex values (P2 midpoints are not written)."""
        mesh = self.space.mesh
        nv, nt = len(mesh.vertices), len(mesh.triangles)
        vals = self.values[:nv]
        with open(path, "w") as fh:
            fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
            fh.write(f"POINTS {nv} double\n")
            fh.writelines(f"{x!r} {y!r} 0.0\n" for x, y in mesh.vertices)
            fh.write(f"CELLS {nt} {4 * nt}\n")
            fh.writelines(f"3 {i} {j} {k}\n" for i, j, k in mesh.triangles)
            fh.write(f"CELL_TYPES {nt}\n")
            fh.writelines("5\n" for _ in range(nt))
            fh.write(f"POINT_DATA {nv}\n")
            for name, part in (("Re", vals.real), ("Im", vals.imag)):
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.writelines(f"{float(v)!r}\n" for v in part)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("x,y,re,im\n")
            for (x, y), v in zip(self.space.nodes, self.values):
                fh.write(f"{x!r},{y!r},{v.real!r},{v.imag!r}\n")


# Materials and assembly ----------------------------------------------------------


@dataclass(frozen=True)
class MaterialField:
    """Per-region ``rho`` (region 0 is the exterior of the inner square) and a source ``f``."""

    rho: Mapping[int, float] = field(default_factory=lambda: {0: 1.0, 1: 1.0})
    f: PointFunction | None = None
    rho_min: float = 1e-8

    def rho_of(self, regions: NDArray) -> NDArray[np.float64]:
        try:
            return np.array([float(self.rho[int(r)]) for r in regions])
        except KeyError as exc:
            raise MaterialError(f"no rho given for region {exc.args[0]}") from exc

    def validate(self, mesh: Mesh2D) -> None:
        values = self.rho_of(mesh.region_tags)
        if np.any(values < self.rho_min):
            raise MaterialError("rho must stay above its positive lower bound")
        if np.any(values[mesh.region_tags == 0] != 1.0):
            raise MaterialError("rho must equal 1 outside the inner square")


def _cell_quadrature(space: FemSpace):
    mesh = space.mesh
    p = mesh.vertices[mesh.triangles]
    x = np.einsum("gi,tid->tgd", TRI_BARY, p)
    w = space._area[:, None] * TRI_WEIGHTS[None, :]
    return x, w


def _scatter(space: FemSpace, local: NDArray) -> sp.csr_matrix:
    dofs = space.cell_dofs
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(space.ndofs, space.ndofs)).tocsr()


def stiffness_and_mass(space: FemSpace, weight: NDArray | None = None) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Stiffness and (optionally per-triangle weighted) mass matrices."""
    phi = lagrange_values(space.degree, TRI_BARY)  # (g, nloc)
    dphi = lagrange_bary_derivatives(space.degree, TRI_BARY)  # (g, nloc, 3)
    grads = np.einsum("gim,tmd->tgid", dphi, space.gradients_bary())
    _, w = _cell_quadrature(space)
    k_loc = np.einsum("tg,tgid,tgjd->tij", w, grads, grads)
    ww = w if weight is None else w * weight[:, None]
    m_loc = np.einsum("tg,gi,gj->tij", ww, phi, phi)
    return _scatter(space, k_loc), _scatter(space, m_loc)


def boundary_mass(space: FemSpace, edges: NDArray) -> sp.csr_matrix:
    xi, w = np.polynomial.legendre.leggauss(4)
    xi, w = 0.5 * (xi + 1), 0.5 * w
    phi = edge_shape_values(space.degree, xi)
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    dofs = space.edge_dofs(edges)
    length = np.linalg.norm(space.mesh.vertices[edges[:, 1]] - space.mesh.vertices[edges[:, 0]], axis=1)
    local = length[:, None, None] * np.einsum("g,gi,gj->ij", w, phi, phi)[None]
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(space.ndofs, space.ndofs)).tocsr()


def _require_tags(mesh: Mesh2D, names: tuple[str, ...]) -> None:
    missing = [n for n in names if len(mesh.tagged(n)) == 0]
    if missing:
        raise MeshError(f"mesh lacks tagged edges for {', '.join(missing)}")


def assemble_fem(
    space: FemSpace, materials: MaterialField, params: WaveParams
) -> tuple[sp.csr_matrix, NDArray[np.complex128]]:
    """``stiffness - k^2 rho-mass - i k boundary mass`` and the load vector of ``f``."""
    params.require_general_case()
    mesh = space.mesh
    _require_tags(mesh, SIGMA_B + SIGMA_A)
    materials.validate(mesh)
    rho = materials.rho_of(mesh.region_tags)
    stiff, mass = stiffness_and_mass(space, rho)
    robin = boundary_mass(space, np.vstack([mesh.tagged(n) for n in SIGMA_B]))
    k = params.k
    matrix = (stiff - k**2 * mass - 1j * k * robin).tocsr()
    load = np.zeros(space.ndofs, dtype=np.complex128)
    if materials.f is not None:
        x, w = _cell_quadrature(space)
        fv = np.asarray(materials.f(x[..., 0], x[..., 1]), dtype=np.complex128)
        outside = mesh.region_tags == 0
        scale = float(np.abs(fv).max(initial=0.0))
        if scale > 0 and np.abs(fv[outside]).max(initial=0.0) > 1e-12 * scale:
            raise MaterialError("the source must vanish outside the inner square")
        phi = lagrange_values(space.degree, TRI_BARY)
        local = np.einsum("tg,tg,gi->ti", w, fv, phi)
        np.add.at(load, space.cell_dofs.ravel(), local.ravel())
    return matrix, load


def _side_vertices(space: FemSpace, j: int, tag: str) -> NDArray:
    edges = space.mesh.tagged(tag)
    ids = np.unique(edges.ravel())
    _, t = local_coords(j, space.mesh.vertices[ids, 0], space.mesh.vertices[ids, 1])
    return np.sort(np.asarray(t, dtype=float))


def _map_side_nodes(space: FemSpace, j: int, level: float, t: NDArray, what: str) -> NDArray[np.intp]:
    x1, x2 = global_coords(j, np.full(t.shape, level), t)
    pts = np.column_stack([x1, x2])
    ids = space.find_node(pts)
    if np.any(ids < 0):
        bad = pts[np.flatnonzero(ids < 0)[0]]
        raise MeshError(f"{what}: no FEM node at ({bad[0]:.12g}, {bad[1]:.12g})")
    return ids


def assemble_lambda_coupling(
    basis: TraceBasis,
    space: FemSpace,
    params: WaveParams,
    quad: QuadratureSpec = QuadratureSpec(),
    *,
    threads: int = 1,
) -> list[sp.csr_matrix]:
    """Per side ``j``, the ``(n_fem, ndofs)`` pairing of the Robin trace with FEM test functions on the outer side."""
    params.require_general_case()
    _require_tags(space.mesh, SIGMA_B)
    a, b = params.a, params.b

    def kernel(t: NDArray, s: NDArray) -> NDArray:
        return kernel_lambda(params, b - a, t - tau(params, s)) * tau_prime(params, s)

    cache: dict[bytes, NDArray] = {}
    out = []
    for j in range(4):
        verts = _side_vertices(space, j, SIGMA_B[j])
        if verts.size < 2 or abs(verts[0] + b) > NODE_TOL or abs(verts[-1] - b) > NODE_TOL:
            raise MeshError(f"outer side {j} does not span [-b, b]")
        key = np.round(verts, 12).tobytes()
        if key not in cache:
            side = basis_from_vertices(verts, space.degree, a)
            block = assemble_galerkin(
                basis,
                kernel,
                np.ones(side.n_elements, dtype=bool),
                np.ones(basis.n_elements, dtype=bool),
                quad.panel_order,
                threads=threads,
                test_basis=side,
            )
            cache[key] = (side, block)
        side, block = cache[key]
        rows = _map_side_nodes(space, j, b, side.nodes, f"outer side {j}")
        coo = sp.coo_matrix(block)
        out.append(sp.csr_matrix((coo.data, (rows[coo.row], coo.col)), shape=(space.ndofs, basis.ndofs)))
    return out


def assemble_trace_matching(basis: TraceBasis, space: FemSpace) -> list[sp.csr_matrix]:
    """Per side ``j``, the injection ``(n_inner, n_fem)`` of FEM nodal values on the inner-square side."""
    _require_tags(space.mesh, SIGMA_A)
    t = basis.nodes[basis.inner_dofs]
    out = []
    for j in range(4):
        cols = _map_side_nodes(space, j, basis.a, t, f"inner side {j}")
        out.append(sp.csr_matrix((np.ones(t.size), (np.arange(t.size), cols)), shape=(t.size, space.ndofs)))
    return out


# Coupled system --------------------------------------------------------------------


@dataclass
class CoupledSystem:
    space: FemSpace
    trace: HsmSystem
    fem_matrix: sp.csr_matrix
    load: NDArray[np.complex128]
    lambda_blocks: list[sp.csr_matrix]
    matching: list[sp.csr_matrix]
    dirichlet_dofs: NDArray[np.intp]
    dirichlet_values: NDArray[np.complex128]
    timings: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        basis = self.trace.basis
        free, inner = basis.free_dofs, basis.inner_dofs
        self.fem_free = np.setdiff1d(np.arange(self.space.ndofs), self.dirichlet_dofs)
        self.lam_free = sp.hstack([blk[:, free] for blk in self.lambda_blocks]).tocsr()
        lam_inner = sp.hstack([blk[:, inner] for blk in self.lambda_blocks]).tocsr()
        self.match = sp.vstack(self.matching).tocsr()
        self.fem_block = (self.fem_matrix - lam_inner @ self.match).tocsr()
        self.data_op = data_operator(self.trace)
        ff = self.fem_free
        self.B = self.fem_block[ff][:, ff].tocsc()
        self.C = -self.lam_free[ff]
        self.E = self.match[:, ff]
        self.A = self.trace.matrix
        ud = np.zeros(self.space.ndofs, dtype=np.complex128)
        ud[self.dirichlet_dofs] = self.dirichlet_values
        self.rhs_fem = (self.load - self.fem_block @ ud)[ff]
        self.rhs_trace = self.data_op @ (self.match @ ud)
        self._ud = ud

    @property
    def size(self) -> int:
        return self.fem_free.size + self.A.shape[0]

    def dense_matrix(self) -> NDArray[np.complex128]:
        top = np.hstack([self.B.toarray(), self.C.toarray()])
        bottom = np.hstack([-self.data_op @ self.E.toarray(), self.A])
        return np.vstack([top, bottom])

    def rhs(self) -> NDArray[np.complex128]:
        return np.concatenate([self.rhs_fem, self.rhs_trace])

    def apply(self, u: NDArray, phi: NDArray) -> NDArray[np.complex128]:
        top = self.B @ u + self.C @ phi
        bottom = -self.data_op @ (self.E @ u) + self.A @ phi
        return np.concatenate([top, bottom])

    def _solve_schur(self) -> tuple[NDArray, NDArray]:
        lu = spla.splu(self.B)
        w = lu.solve(self.E.T.toarray().astype(np.complex128), trans="T")  # B^-T E^T
        schur = self.A + self.data_op @ (w.T @ self.C.toarray())
        rhs = self.rhs_trace + self.data_op @ (w.T @ self.rhs_fem)
        phi = lu_solve(schur, rhs)
        u = lu.solve(self.rhs_fem - self.C @ phi)
        return u, phi

    def solve(self, method: str = "auto", tol: float = 1e-10) -> tuple[FemField, TraceVector]:
        start = time.perf_counter()
        if method == "auto":
            method = "dense" if self.size <= DENSE_LIMIT else "schur"
        nf = self.fem_free.size
        rhs = self.rhs()
        if np.linalg.norm(rhs) == 0.0:
            u, phi = np.zeros(nf, dtype=np.complex128), np.zeros(self.A.shape[0], dtype=np.complex128)
            res = 0.0
        else:
            if method == "dense":
                x = lu_solve(self.dense_matrix(), rhs)
                u, phi = x[:nf], x[nf:]
            elif method == "schur":
                u, phi = self._solve_schur()
            else:
                raise ValueError(f"unknown solver {method!r}")
            res = float(np.linalg.norm(self.apply(u, phi) - rhs) / np.linalg.norm(rhs))
        self.timings.update(solve=time.perf_counter() - start, residual=res)
        if not res <= tol:
            raise NumericalFailure(f"coupled residual {res:.3e} exceeds {tol:.1e}")
        values = self._ud.copy()
        values[self.fem_free] = u
        basis = self.trace.basis
        coeffs = np.zeros((4, basis.ndofs), dtype=np.complex128)
        coeffs[:, basis.free_dofs] = phi.reshape(4, -1)
        inner_vals = (self.match @ values).reshape(4, -1)
        coeffs[:, basis.inner_dofs] = inner_vals
        return FemField(self.space, values), TraceVector(basis, coeffs)


def dirichlet_data(space: FemSpace, g: PointFunction | None) -> tuple[NDArray[np.intp], NDArray[np.complex128]]:
    """Obstacle dofs and nodal values of ``g`` there."""
    edges = space.mesh.tagged("obstacle")
    if len(edges) == 0:
        if g is not None:
            raise ValueError("obstacle data given but the mesh has no obstacle")
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.complex128)
    if g is None:
        raise ValueError("the mesh has an obstacle but no boundary data was given")
    dofs = np.unique(space.edge_dofs(edges).ravel())
    x = space.nodes[dofs]
    return dofs, np.asarray(g(x[:, 0], x[:, 1]), dtype=np.complex128) * np.ones(dofs.size)


def assemble_coupled_system(
    params: WaveParams,
    spec: TraceGridSpec,
    quad: QuadratureSpec,
    mesh: Mesh2D,
    materials: MaterialField,
    obstacle_g: PointFunction | None = None,
    *,
    threads: int = 1,
) -> CoupledSystem:
    params.require_general_case()
    timings = {}
    start = time.perf_counter()
    space = FemSpace(mesh, spec.q if spec.q in (1, 2) else 2)
    basis = build_space(spec, params.a)
    trace = assemble_block_system(basis, params, quad, threads=threads)
    matrix, load = assemble_fem(space, materials, params)
    lam = assemble_lambda_coupling(basis, space, params, quad, threads=threads)
    match = assemble_trace_matching(basis, space)
    dofs, vals = dirichlet_data(space, obstacle_g)
    timings["assembly"] = time.perf_counter() - start
    return CoupledSystem(space, trace, matrix, load, lam, match, dofs, vals, timings)


def solve_general(
    params: WaveParams,
    spec: TraceGridSpec,
    quad: QuadratureSpec,
    mesh: Mesh2D,
    materials: MaterialField,
    obstacle_g: PointFunction | None = None,
    *,
    method: str = "auto",
    threads: int = 1,
    return_system: bool = False,
):
    """FEM field on the box and the four scaled traces; optionally the assembled system too."""
    system = assemble_coupled_system(params, spec, quad, mesh, materials, obstacle_g, threads=threads)
    u_b, traces = system.solve(method)
    if return_system:
        return u_b, traces, system
    return u_b, traces


def robin_defect(
    u_b: FemField,
    traces: TraceVector,
    params: WaveParams,
    j: int = 0,
    points: int = 4,
    *,
    recover: bool = True,
) -> tuple[float, float]:
    """``L2`` norms on outer side ``j`` of ``(d_n - i k) u_b - Lambda phi^j`` and of ``Lambda phi^j``.

    The FEM normal derivative is the recovered (nodally averaged) gradient, or
    with ``recover=False`` the raw gradient of the triangle adjacent to each edge.
    """
    space = u_b.space
    mesh = space.mesh
    edges = mesh.tagged(SIGMA_B[j])
    xi, w = np.polynomial.legendre.leggauss(points)
    xi, w = 0.5 * (xi + 1), 0.5 * w
    p0, p1 = mesh.vertices[edges[:, 0]], mesh.vertices[edges[:, 1]]
    x = (p0[:, None, :] + xi[None, :, None] * (p1 - p0)[:, None, :]).reshape(-1, 2)
    length = np.linalg.norm(p1 - p0, axis=1)
    wts = (length[:, None] * w[None, :]).ravel()
    tri_of_edge = {}
    for c, tri in enumerate(mesh.triangles):
        for e in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            tri_of_edge[tuple(sorted(e))] = c
    cells = np.repeat([tri_of_edge[tuple(sorted(e))] for e in edges], points)
    pc = np.einsum("nij,nj->ni", space._jac_inv[cells], x - mesh.vertices[mesh.triangles[cells, 0]])
    bary = np.column_stack([1 - pc.sum(axis=1), pc])
    shape = lagrange_values(space.degree, bary)
    if recover:
        nodal = u_b.recovered_gradient()[space.cell_dofs[cells]]  # (n, nloc, 2)
        grad = np.einsum("ni,nid->nd", shape, nodal)
    else:
        grad = u_b.gradient(x[:, 0], x[:, 1], cells=cells)
    n1, n2 = global_coords(j, 1.0, 0.0)
    dn = grad[:, 0] * n1 + grad[:, 1] * n2
    uval = np.einsum("ni,ni->n", shape, u_b.values[space.cell_dofs[cells]])
    _, t = local_coords(j, x[:, 0], x[:, 1])
    basis = traces.basis
    s, sw = _source_rule(basis)
    phi = traces.evaluate(j, s)
    kern = kernel_lambda(params, params.b - params.a, np.asarray(t)[:, None] - tau(params, s)[None, :])
    lam = kern @ (sw * tau_prime(params, s) * phi)
    defect = dn - 1j * params.k * uval - lam
    return float(np.sqrt(np.sum(wts * np.abs(defect) ** 2))), float(np.sqrt(np.sum(wts * np.abs(lam) ** 2)))


def _source_rule(basis: TraceBasis, order: int = 5) -> tuple[NDArray, NDArray]:
    pts, wts, _, _ = basis.quadrature(order)
    return pts.ravel(), wts.ravel()
