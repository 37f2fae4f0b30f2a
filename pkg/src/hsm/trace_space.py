"""Truncated 1D Lagrange spaces for the four scaled traces."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import ArrayLike, NDArray

from .scaling_geometry import global_coords


class InvalidSpecError(ValueError):
    """The truncation/mesh specification cannot be realised."""


class CornerMismatchError(ValueError):
    """Side data disagree at a shared corner of the inner square."""


@dataclass(frozen=True)
class TraceGridSpec:
    T: float
    h_mesh: float
    q: int = 1

    def validate(self, a: float) -> None:
        if self.q not in (1, 2, 3):
            raise InvalidSpecError(f"degree q must be 1, 2 or 3, got {self.q}")
        if not self.h_mesh > 0:
            raise InvalidSpecError("h_mesh must be positive")
        if not self.T > a:
            raise InvalidSpecError(f"truncation T={self.T} must exceed a={a}")
        if self.h_mesh > self.T:
            raise InvalidSpecError("h_mesh must not exceed T")


@lru_cache(maxsize=None)
def _reference_nodes(q: int) -> NDArray[np.float64]:
    return np.linspace(0.0, 1.0, q + 1)


def shape_functions(q: int, xi: ArrayLike) -> NDArray[np.float64]:
    """Lagrange shape functions on ``[0, 1]`` with equispaced nodes, shape ``(len(xi), q+1)``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    nodes = _reference_nodes(q)
    out = np.ones((xi.size, q + 1))
    for i in range(q + 1):
        for m in range(q + 1):
            if m != i:
                out[:, i] *= (xi - nodes[m]) / (nodes[i] - nodes[m])
    return out


def gauss_legendre(order: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Gauss-Legendre nodes and weights mapped to ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True, eq=False)
class TraceBasis:
    """C0 Lagrange space of degree ``q`` on ``[-T, T]`` with ``+-a`` among the vertices."""

    a: float
    T: float
    q: int
    vertices: NDArray[np.float64]
    nodes: NDArray[np.float64]
    constrained_mask: NDArray[np.bool_]
    reflection: NDArray[np.intp] = field(repr=False)

    @property
    def n_elements(self) -> int:
        return self.vertices.size - 1

    @property
    def ndofs(self) -> int:
        return self.nodes.size

    @property
    def element_dofs(self) -> NDArray[np.intp]:
        e = np.arange(self.n_elements)[:, None]
        return e * self.q + np.arange(self.q + 1)[None, :]

    @property
    def element_lengths(self) -> NDArray[np.float64]:
        return np.diff(self.vertices)

    @property
    def free_dofs(self) -> NDArray[np.intp]:
        """Dofs of the constrained subspace (node outside ``[-a, a]``)."""
        return np.flatnonzero(~self.constrained_mask)

    @property
    def inner_dofs(self) -> NDArray[np.intp]:
        return np.flatnonzero(self.constrained_mask)

    def element_mask(self, lo: float = -np.inf, hi: float = np.inf) -> NDArray[np.bool_]:
        """Elements contained in ``[lo, hi]`` (up to rounding)."""
        tol = 1e-12 * max(1.0, self.T)
        return (self.vertices[:-1] >= lo - tol) & (self.vertices[1:] <= hi + tol)

    def quadrature(self, order: int, elements: NDArray[np.bool_] | None = None):
        """Per-element Gauss points, weights and dof indices.

        Returns ``(points, weights, dofs, phi)`` with shapes ``(ne, order)``,
        ``(ne, order)``, ``(ne, q+1)`` and ``(order, q+1)``.
        """
        xi, w = gauss_legendre(order)
        sel = np.arange(self.n_elements) if elements is None else np.flatnonzero(elements)
        left = self.vertices[sel]
        length = self.vertices[sel + 1] - left
        points = left[:, None] + length[:, None] * xi[None, :]
        weights = length[:, None] * w[None, :]
        return points, weights, self.element_dofs[sel], shape_functions(self.q, xi)

    def evaluation_matrix(self, s: ArrayLike) -> sp.csr_matrix:
        """Sparse matrix mapping coefficients to values at ``s`` (zero outside ``[-T, T]``)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        inside = (s >= -self.T) & (s <= self.T)
        el = np.clip(np.searchsorted(self.vertices, s, side="right") - 1, 0, self.n_elements - 1)
        left = self.vertices[el]
        xi = (s - left) / (self.vertices[el + 1] - left)
        vals = shape_functions(self.q, xi) * inside[:, None]
        rows = np.repeat(np.arange(s.size), self.q + 1)
        cols = self.element_dofs[el].ravel()
        return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(s.size, self.ndofs))

    def evaluate(self, coeffs: ArrayLike, s: ArrayLike):
        values = self.evaluation_matrix(s) @ np.asarray(coeffs)
        return values[0] if np.ndim(s) == 0 else values


def section_vertices(a: float, T: float, h: float) -> NDArray[np.float64]:
    """Vertices of ``[-T, T]``, uniform on each of the three sections split at ``+-a``.

    Section sizes shrink below ``h`` where needed so that ``+-a`` are vertices.
    The result is exactly mirror symmetric.
    """
    n_out = max(1, math.ceil((T - a) / h - 1e-9))
    n_in = max(1, math.ceil(2 * a / h - 1e-9))
    right = np.linspace(a, T, n_out + 1)
    inner = np.linspace(-a, a, n_in + 1)
    v = np.concatenate([-right[::-1], inner[1:-1], right])
    return 0.5 * (v - v[::-1])


def build_space(spec: TraceGridSpec, a: float) -> TraceBasis:
    """Uniform-by-section mesh of ``[-T, T]``; element sizes shrink so ``+-a`` are vertices."""
    spec.validate(a)
    return basis_from_vertices(section_vertices(a, spec.T, spec.h_mesh), spec.q, a)


def basis_from_vertices(vertices: ArrayLike, q: int, a: float) -> TraceBasis:
    """P_q basis on mirror-symmetric sorted ``vertices`` spanning ``[-T, T]``."""
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 1 or v.size < 2 or np.any(np.diff(v) <= 0):
        raise InvalidSpecError("vertices must be strictly increasing")
    if not np.allclose(v, -v[::-1], rtol=0, atol=1e-12 * max(1.0, abs(v[-1]))):
        raise InvalidSpecError("vertices must be mirror symmetric")
    if q not in (1, 2, 3):
        raise InvalidSpecError(f"polynomial degree must be 1, 2 or 3, got {q}")
    v = 0.5 * (v - v[::-1])
    T = float(v[-1])
    ref = _reference_nodes(q)
    interior = (v[:-1, None] + np.diff(v)[:, None] * ref[None, 1:-1]).ravel() if q > 1 else None
    nodes = np.empty((v.size - 1) * q + 1)
    nodes[::q] = v
    if q > 1:
        nodes[np.arange(nodes.size) % q != 0] = interior
        nodes = 0.5 * (nodes - nodes[::-1])
    tol = 1e-12 * max(1.0, T)
    constrained = np.abs(nodes) <= a + tol
    reflection = np.arange(nodes.size)[::-1].copy()
    return TraceBasis(
        a=a, T=T, q=q, vertices=v, nodes=nodes, constrained_mask=constrained, reflection=reflection
    )


def mass_matrix(basis: TraceBasis, elements: NDArray[np.bool_] | None = None) -> sp.csr_matrix:
    """Exact P_q mass matrix, assembled with ``q + 1`` Gauss points per element.

    ``elements`` restricts the assembly to a subset of elements.
    """
    _, weights, dofs, phi = basis.quadrature(basis.q + 1, elements)
    local = np.einsum("eg,gi,gj->eij", weights, phi, phi)
    rows = np.repeat(dofs, basis.q + 1, axis=1).ravel()
    cols = np.tile(dofs, (1, basis.q + 1)).ravel()
    m = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(basis.ndofs, basis.ndofs))
    return m.tocsr()


SideFunction = Callable[[NDArray[np.float64]], ArrayLike]


@dataclass(frozen=True)
class BoundaryData:
    """Data on the four sides of the inner square, each in its local parameter ``t``.

    Side ``j`` is ``{y1 = a, |y2| <= a}`` in the frame of half-plane ``j``.
    """

    sides: tuple[SideFunction, SideFunction, SideFunction, SideFunction]

    @classmethod
    def from_global(cls, fn: Callable[[NDArray, NDArray], ArrayLike], a: float) -> "BoundaryData":
        def side(j: int) -> SideFunction:
            def g(t: NDArray[np.float64]) -> ArrayLike:
                t = np.asarray(t, dtype=float)
                x1, x2 = global_coords(j, np.full_like(t, a), t)
                return fn(x1, x2)

            return g

        return cls(tuple(side(j) for j in range(4)))  # type: ignore[arg-type]

    @classmethod
    def constant(cls, value: complex) -> "BoundaryData":
        def g(t: NDArray[np.float64]) -> NDArray[np.complex128]:
            return np.full(np.shape(t), value, dtype=np.complex128)

        return cls((g, g, g, g))

    @classmethod
    def zero(cls) -> "BoundaryData":
        return cls.constant(0.0)


@dataclass
class TraceVector:
    """Coefficients of the four traces, shape ``(4, ndofs)``."""

    basis: TraceBasis
    coeffs: NDArray[np.complex128]

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if self.coeffs.shape != (4, self.basis.ndofs):
            raise ValueError(f"expected coefficients of shape (4, {self.basis.ndofs})")

    @classmethod
    def zeros(cls, basis: TraceBasis) -> "TraceVector":
        return cls(basis, np.zeros((4, basis.ndofs), dtype=np.complex128))

    def __add__(self, other: "TraceVector") -> "TraceVector":
        if other.basis is not self.basis:
            raise ValueError("traces live on different bases")
        return TraceVector(self.basis, self.coeffs + other.coeffs)

    def __mul__(self, alpha: complex) -> "TraceVector":
        return TraceVector(self.basis, alpha * self.coeffs)

    __rmul__ = __mul__

    def evaluate(self, j: int, s: ArrayLike):
        return self.basis.evaluate(self.coeffs[int(j) % 4], s)

    def with_constraint(self) -> "TraceVector":
        """Copy with the dofs on ``[-a, a]`` zeroed."""
        out = self.coeffs.copy()
        out[:, self.basis.constrained_mask] = 0.0
        return TraceVector(self.basis, out)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["j", "s_node", "re", "im"])
            for j in range(4):
                for s, c in zip(self.basis.nodes, self.coeffs[j]):
                    writer.writerow([j, repr(float(s)), repr(float(c.real)), repr(float(c.imag))])

    @classmethod
    def from_csv(cls, path: str | Path, basis: TraceBasis) -> "TraceVector":
        coeffs = np.zeros((4, basis.ndofs), dtype=np.complex128)
        counts = [0, 0, 0, 0]
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                j = int(row["j"])
                coeffs[j, counts[j]] = complex(float(row["re"]), float(row["im"]))
                counts[j] += 1
        if counts != [basis.ndofs] * 4:
            raise ValueError("CSV trace does not match the basis")
        return cls(basis, coeffs)


def interpolate_boundary_data(
    basis: TraceBasis, g: BoundaryData, *, projection: bool = False, corner_tol: float = 1e-10,
) -> TraceVector:
    """Lift side data into the trace space: nodal values on ``[-a, a]``, zero elsewhere.

    With ``projection=True`` the side data are L2-projected onto the elements
    of ``[-a, a]`` instead. Side data must agree at the four corners.
    """
    a = basis.a
    ends = [np.asarray(g.sides[j](np.array([-a, a])), dtype=np.complex128) for j in range(4)]
    scale = max(1.0, max(float(np.max(np.abs(e))) for e in ends))
    for j in range(4):
        gap = abs(ends[j][1] - ends[(j + 1) % 4][0])
        if gap > corner_tol * scale:
            raise CornerMismatchError(f"sides {j} and {(j + 1) % 4} differ by {gap:.3e} at their corner")

    coeffs = np.zeros((4, basis.ndofs), dtype=np.complex128)
    inner = basis.inner_dofs
    if not projection:
        for j in range(4):
            coeffs[j, inner] = np.asarray(g.sides[j](basis.nodes[inner]), dtype=np.complex128)
        return TraceVector(basis, coeffs)

    elements = basis.element_mask(-a, a)
    pts, wts, dofs, phi = basis.quadrature(basis.q + 4, elements)
    m = mass_matrix(basis, elements).tocsc()[inner][:, inner]
    lookup = np.full(basis.ndofs, -1)
    lookup[inner] = np.arange(inner.size)
    for j in range(4):
        vals = np.asarray(g.sides[j](pts), dtype=np.complex128)
        rhs = np.zeros(inner.size, dtype=np.complex128)
        np.add.at(rhs, lookup[dofs], np.einsum("eg,eg,gi->ei", wts, vals, phi))
        coeffs[j, inner] = spla.spsolve(m.astype(np.complex128), rhs)
    return TraceVector(basis, coeffs)


def l2_inner_norm(basis: TraceBasis, coeffs: ArrayLike, lo: float = -np.inf, hi: float = np.inf) -> float:
    """L2 norm of a single trace restricted to ``[lo, hi]`` (element-aligned bounds)."""
    elements = basis.element_mask(lo, hi)
    if not elements.any():
        return 0.0
    _, wts, dofs, phi = basis.quadrature(basis.q + 1, elements)
    vals = np.einsum("gi,ei->eg", phi, np.asarray(coeffs)[dofs])
    return float(np.sqrt(np.sum(wts * np.abs(vals) ** 2)))
