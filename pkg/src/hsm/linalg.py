"""Dense complex linear algebra: pivoted LU solves and weighted norm estimates."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from numpy.typing import ArrayLike, NDArray

PIVOT_FLOOR = 1e-300


class SingularMatrixError(np.linalg.LinAlgError):
    """A pivot fell below ``PIVOT_FLOOR`` in magnitude."""


class NonConvergenceError(RuntimeError):
    """An iterative estimate did not settle within its iteration cap."""


@dataclass
class LUFactors:
    """Packed ``L\\U`` factors with the row permutation as an index array."""

    lu: NDArray[np.complex128]
    perm: NDArray[np.intp]

    def solve(self, b: ArrayLike) -> NDArray[np.complex128]:
        b = np.asarray(b, dtype=np.complex128)[self.perm]
        y = sla.solve_triangular(self.lu, b, lower=True, unit_diagonal=True, check_finite=False)
        return sla.solve_triangular(self.lu, y, lower=False, check_finite=False)


def _check_pivots(lu: NDArray) -> None:
    diag = np.abs(np.diagonal(lu))
    if diag.size and not diag.min() >= PIVOT_FLOOR:
        k = int(np.argmin(diag))
        raise SingularMatrixError(f"pivot {k} has magnitude {diag[k]:.3e}")


def _ipiv_to_perm(ipiv: NDArray, n: int) -> NDArray[np.intp]:
    perm = np.arange(n)
    for i, p in enumerate(ipiv):
        perm[i], perm[p] = perm[p], perm[i]
    return perm


def lu_factor_blocked(a: ArrayLike, block: int = 64) -> LUFactors:
    """Right-looking blocked LU with partial pivoting, written against numpy BLAS.

    The panel is factored column by column; the trailing matrix is updated
    with one triangular solve and one matrix product per panel. Pivots are
    chosen by ``|Re| + |Im|`` as in LAPACK.
    """
    lu = np.array(a, dtype=np.complex128, order="C", copy=True)
    n = lu.shape[0]
    if lu.shape != (n, n):
        raise ValueError("matrix must be square")
    perm = np.arange(n)
    for k0 in range(0, n, block):
        k1 = min(k0 + block, n)
        for k in range(k0, k1):
            col = lu[k:, k]
            # LAPACK's pivot measure for complex entries, so both routes agree on the permutation.
            p = k + int(np.argmax(np.abs(col.real) + np.abs(col.imag)))
            if abs(lu[p, k]) < PIVOT_FLOOR:
                raise SingularMatrixError(f"pivot {k} has magnitude {abs(lu[p, k]):.3e}")
            if p != k:
                lu[[k, p], :] = lu[[p, k], :]
                perm[[k, p]] = perm[[p, k]]
            lu[k + 1 :, k] /= lu[k, k]
            lu[k + 1 :, k + 1 : k1] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 : k1])
        if k1 < n:
            l11 = lu[k0:k1, k0:k1]
            lu[k0:k1, k1:] = sla.solve_triangular(
                l11, lu[k0:k1, k1:], lower=True, unit_diagonal=True, check_finite=False
            )
            lu[k1:, k1:] -= lu[k1:, k0:k1] @ lu[k0:k1, k1:]
    return LUFactors(lu, perm)


def lu_factor(a: ArrayLike, *, method: str = "lapack") -> LUFactors:
    """Pivoted LU factorization; ``method`` is ``"lapack"`` or ``"blocked"``."""
    if method == "blocked":
        return lu_factor_blocked(a)
    if method != "lapack":
        raise ValueError(f"unknown LU method {method!r}")
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    with warnings.catch_warnings():
        # Exact zero pivots are reported by _check_pivots instead.
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, ipiv = sla.lu_factor(a, check_finite=False)
    _check_pivots(lu)
    return LUFactors(lu, _ipiv_to_perm(ipiv, a.shape[0]))


def lu_solve(a: ArrayLike, b: ArrayLike, *, method: str = "lapack") -> NDArray[np.complex128]:
    """Solve ``A x = b`` by partial-pivoting LU."""
    a = np.asarray(a)
    b = np.asarray(b)
    if b.shape[0] != a.shape[0]:
        raise ValueError("right-hand side length does not match the matrix")
    return lu_factor(a, method=method).solve(b)


def relative_residual(a: ArrayLike, x: ArrayLike, b: ArrayLike) -> float:
    b = np.asarray(b)
    nb = np.linalg.norm(b)
    r = np.linalg.norm(np.asarray(a) @ np.asarray(x) - b)
    return float(r / nb) if nb > 0 else float(r)


def op_norm_estimate(
    a: ArrayLike,
    weight: ArrayLike | None = None,
    *,
    tol: float = 1e-6,
    max_iter: int = 5000,
    seed: int = 0,
) -> float:
    """Largest singular value of ``A`` in the norm induced by ``weight``.

    For a Galerkin matrix ``A[n, m] = (K phi_m, phi_n)`` and mass matrix
    ``M = L L^H`` this is ``||L^{-1} A L^{-H}||_2``, i.e. the L2 operator
    norm of the discrete operator. Power iteration on the normal operator.
    """
    a = np.asarray(a, dtype=np.complex128)
    if weight is None:
        chol = None
    else:
        w = np.asarray(weight.toarray() if hasattr(weight, "toarray") else weight, dtype=np.complex128)
        chol = np.linalg.cholesky(w)

    def apply(x: NDArray) -> NDArray:
        if chol is None:
            return a @ x
        y = sla.solve_triangular(chol, x, lower=True, trans="C", check_finite=False)
        return sla.solve_triangular(chol, a @ y, lower=True, check_finite=False)

    def apply_h(x: NDArray) -> NDArray:
        if chol is None:
            return a.conj().T @ x
        y = sla.solve_triangular(chol, x, lower=True, trans="C", check_finite=False)
        return sla.solve_triangular(chol, a.conj().T @ y, lower=True, check_finite=False)

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(a.shape[1]) + 1j * rng.standard_normal(a.shape[1])
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(max_iter):
        y = apply_h(apply(x))
        lam = float(np.sqrt(abs(np.vdot(x, y))))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        if abs(lam - sigma) <= tol * max(lam, 1e-300):
            return lam
        sigma = lam
    raise NonConvergenceError(f"power iteration did not converge in {max_iter} steps")
