"""Galerkin assembly and solution of the scaled trace system on a square.

The system couples the four traces through two dense blocks, ``D S`` and
``S D``, where ``S`` is the reflection ``s -> -s``. Both follow from one
Galerkin matrix ``G[n, m] = (D phi_m, psi_n)`` by permuting rows or columns,
so only ``G`` is ever integrated.
"""

from __future__ import annotations

import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from .kernels import kernel_Dtheta
from .linalg import lu_factor, relative_residual
from .scaling_geometry import WaveParams
from .trace_space import (
    BoundaryData,
    TraceBasis,
    TraceGridSpec,
    TraceVector,
    build_space,
    interpolate_boundary_data,
    mass_matrix,
)

Kernel = Callable[[NDArray, NDArray], NDArray]

# Kernel evaluations per chunk of test elements; bounds peak memory.
CHUNK_ENTRIES = 1_500_000


class NumericalFailure(RuntimeError):
    """The discrete solve did not meet its residual target."""


@dataclass(frozen=True)
class QuadratureSpec:
    panel_order: int = 5
    recon_step: float = 0.1
    recon_order: int = 5

    def __post_init__(self) -> None:
        if self.panel_order < 2 or self.recon_order < 1 or not self.recon_step > 0:
            raise ValueError("quadrature orders and step must be positive (panel_order >= 2)")


def cyclic_shift() -> NDArray[np.float64]:
    """4x4 matrix with ones at ``(j, j+1 mod 4)``."""
    return np.roll(np.eye(4), 1, axis=1)


def _projector(basis: TraceBasis, weights: NDArray, dofs: NDArray, phi: NDArray) -> sp.csr_matrix:
    """Sparse ``(npoints, ndofs)`` matrix of weighted basis values."""
    ne, ng = weights.shape
    vals = weights[:, :, None] * phi[None, :, :]
    rows = np.repeat(np.arange(ne * ng), phi.shape[1])
    cols = np.repeat(dofs, ng, axis=0).ravel()
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(ne * ng, basis.ndofs))


def assemble_galerkin(
    basis: TraceBasis,
    kernel: Kernel,
    test_elements: NDArray[np.bool_],
    source_elements: NDArray[np.bool_],
    order: int,
    *,
    threads: int = 1,
    test_basis: TraceBasis | None = None,
) -> NDArray[np.complex128]:
    """``sum over element pairs of sum_g sum_h w_g w_h K(t_g, s_h) phi_m(s_h) psi_n(t_g)``.

    Tensor Gauss rule of ``order`` points per element and direction. Test
    elements are processed in chunks; chunk results are added in a fixed
    order, so the output does not depend on ``threads``. ``test_basis``
    defaults to the source basis.
    """
    test_basis = basis if test_basis is None else test_basis
    t_pts, t_w, t_dofs, t_phi = test_basis.quadrature(order, test_elements)
    s_pts, s_w, s_dofs, s_phi = basis.quadrature(order, source_elements)
    source = _projector(basis, s_w, s_dofs, s_phi)
    s_flat = s_pts.ravel()
    per_chunk = max(1, CHUNK_ENTRIES // max(1, s_flat.size * order))
    chunks = [slice(i, i + per_chunk) for i in range(0, t_pts.shape[0], per_chunk)]

    def work(chunk: slice) -> NDArray[np.complex128]:
        pts = t_pts[chunk].ravel()
        k = np.asarray(kernel(pts[:, None], s_flat[None, :]), dtype=np.complex128)
        test = _projector(test_basis, t_w[chunk], t_dofs[chunk], t_phi)
        return np.asarray(test.T @ np.asarray((source.T @ k.T).T))

    out = np.zeros((test_basis.ndofs, basis.ndofs), dtype=np.complex128)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    for part in parts:
        out += part
    return out


def assemble_Dtheta_galerkin(
    basis: TraceBasis,
    params: WaveParams,
    quad: QuadratureSpec = QuadratureSpec(),
    *,
    source_elements: NDArray[np.bool_] | None = None,
    threads: int = 1,
) -> NDArray[np.complex128]:
    """Galerkin matrix of the scaled trace operator, tested on ``(a, T]``.

    Rows whose test function lives in ``t <= a`` are identically zero.
    """
    test = basis.element_mask(params.a, np.inf)
    src = np.ones(basis.n_elements, dtype=bool) if source_elements is None else source_elements

    def kernel(t: NDArray, s: NDArray) -> NDArray:
        return kernel_Dtheta(params, t, s)

    return assemble_galerkin(basis, kernel, test, src, quad.panel_order, threads=threads)


@dataclass
class HsmSystem:
    """Dense ``(I - DD)`` on the constrained dofs of the four traces."""

    basis: TraceBasis
    matrix: NDArray[np.complex128]
    galerkin: NDArray[np.complex128] = field(repr=False)
    mass: sp.csr_matrix = field(repr=False)
    ds_block: NDArray[np.complex128] = field(repr=False)
    sd_block: NDArray[np.complex128] = field(repr=False)
    rhs: NDArray[np.complex128] | None = None
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def block_size(self) -> int:
        return self.basis.free_dofs.size

    @property
    def offsets(self) -> NDArray[np.intp]:
        return np.arange(5) * self.block_size

    def block(self, i: int, j: int) -> NDArray[np.complex128]:
        n = self.block_size
        return self.matrix[i * n : (i + 1) * n, j * n : (j + 1) * n]

    def dump(self, path: str | Path) -> None:
        """Binary dump: little-endian ``uint64 rows, uint64 cols`` then row-major ``(re, im)`` float64 pairs."""
        m = np.ascontiguousarray(self.matrix, dtype="<c16")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<QQ", *m.shape))
            fh.write(m.view("<f8").tobytes())


def load_dump(path: str | Path) -> NDArray[np.complex128]:
    with open(path, "rb") as fh:
        rows, cols = struct.unpack("<QQ", fh.read(16))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.view("<c16").reshape(rows, cols).astype(np.complex128)


def reflection_matrix(basis: TraceBasis) -> sp.csr_matrix:
    """Permutation matrix of ``psi(t) -> psi(-t)`` acting on coefficients."""
    n = basis.ndofs
    return sp.csr_matrix((np.ones(n), (np.arange(n), basis.reflection)), shape=(n, n))


def split_blocks(basis: TraceBasis, galerkin: NDArray, rows: NDArray, cols: NDArray):
    """``(D S)`` and ``(S D)`` restricted to the given test rows and source columns."""
    p = basis.reflection
    ds = galerkin[np.ix_(rows, p[cols])]
    sd = galerkin[np.ix_(p[rows], cols)]
    return ds, sd


def assemble_block_system(
    basis: TraceBasis,
    params: WaveParams,
    quad: QuadratureSpec = QuadratureSpec(),
    *,
    threads: int = 1,
) -> HsmSystem:
    start = time.perf_counter()
    galerkin = assemble_Dtheta_galerkin(basis, params, quad, threads=threads)
    t_assembly = time.perf_counter() - start
    free = basis.free_dofs
    ds, sd = split_blocks(basis, galerkin, free, free)
    mass = mass_matrix(basis)
    m_ff = mass[free][:, free].toarray()
    shift = cyclic_shift()
    matrix = np.kron(np.eye(4), m_ff) - np.kron(shift, ds) - np.kron(shift.T, sd)
    return HsmSystem(
        basis=basis,
        matrix=matrix,
        galerkin=galerkin,
        mass=mass,
        ds_block=ds,
        sd_block=sd,
        timings={"assembly": t_assembly},
    )


def data_operator(system: HsmSystem) -> NDArray[np.complex128]:
    """Matrix mapping the inner coefficients of all four traces to the right-hand side.

    Includes the mass term of the lifted data, which overlaps the first free
    element on each side of ``[-a, a]``.
    """
    basis = system.basis
    free, inner = basis.free_dofs, basis.inner_dofs
    ds, sd = split_blocks(basis, system.galerkin, free, inner)
    m_fi = system.mass[free][:, inner].toarray()
    shift = cyclic_shift()
    return np.kron(shift, ds) + np.kron(shift.T, sd) - np.kron(np.eye(4), m_fi)


def assemble_rhs(system: HsmSystem, g_interp: TraceVector) -> NDArray[np.complex128]:
    """Galerkin right-hand side for lifted data supported on ``[-a, a]``."""
    inner = system.basis.inner_dofs
    data = g_interp.coeffs[:, inner].ravel()
    return data_operator(system) @ data


def expand_solution(system: HsmSystem, x: NDArray, lifted: TraceVector) -> TraceVector:
    basis = system.basis
    coeffs = lifted.coeffs.copy()
    coeffs[:, basis.free_dofs] += x.reshape(4, -1)
    return TraceVector(basis, coeffs)


def solve_system(matrix: NDArray, rhs: NDArray, tol: float = 1e-10) -> tuple[NDArray, float]:
    x = lu_factor(matrix).solve(rhs)
    res = relative_residual(matrix, x, rhs)
    if not res <= tol:
        raise NumericalFailure(f"relative residual {res:.3e} exceeds {tol:.1e}")
    return x, res


def solve_dirichlet(
    params: WaveParams,
    spec: TraceGridSpec,
    quad: QuadratureSpec,
    g: BoundaryData,
    *,
    system: HsmSystem | None = None,
    threads: int = 1,
) -> tuple[TraceVector, HsmSystem]:
    """Scaled traces of the radiating solution with data ``g`` on the inner square."""
    basis = system.basis if system is not None else build_space(spec, params.a)
    if system is None:
        system = assemble_block_system(basis, params, quad, threads=threads)
    lifted = interpolate_boundary_data(basis, g)
    rhs = assemble_rhs(system, lifted)
    system.rhs = rhs
    start = time.perf_counter()
    if np.linalg.norm(rhs) == 0.0:
        x = np.zeros_like(rhs)
        res = 0.0
    else:
        x, res = solve_system(system.matrix, rhs)
    system.timings["solve"] = time.perf_counter() - start
    system.timings["residual"] = res
    return expand_solution(system, x, lifted), system
