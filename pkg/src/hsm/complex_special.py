"""Hankel functions of the first kind, orders 0-2, at complex argument.

Three evaluation branches cover the right half-plane:

* ascending series for ``J_n`` and ``Y_n`` near the origin
  (``Re z < SERIES_REAL_MAX``, ``Im z < SERIES_IMAG_MAX``, ``|z| <= SERIES_RADIUS``),
* the Hankel-Laplace integral, discretised with generalized Gauss-Laguerre
  nodes, for the rest of ``|z| <= ASYMPTOTIC_RADIUS``; it avoids the
  cancellation of ``J + iY`` in the upper half-plane, where ``J`` and ``Y``
  grow like ``exp(Im z)`` while ``H`` decays like ``exp(-Im z)``,
* the large-argument expansion everywhere else: ``|z| > ASYMPTOTIC_RADIUS``,
  plus the points of the series strip with ``|z| > SERIES_RADIUS``.

Relative accuracy is about 1e-14, except in that strip below
``ASYMPTOTIC_RADIUS`` where the expansion gives about 5e-11.

Everything is vectorised over numpy arrays. Scalar inputs give scalar outputs.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import roots_genlaguerre

SERIES_RADIUS = 12.0
TERM_CAP = 200
ASYMPTOTIC_MAX_TERMS = 60
LAGUERRE_NODES = 48

# Branch switch lines, chosen from a relative-error map against mpmath.
SERIES_REAL_MAX = 4.0
SERIES_IMAG_MAX = 1.0
ASYMPTOTIC_RADIUS = 20.0

EULER_GAMMA = 0.57721566490153286061


class SpecialFunctionError(ArithmeticError):
    """Base class for failures in this module."""


class DomainError(SpecialFunctionError, ValueError):
    """Argument outside the supported half-plane Re z > 0."""


class ConvergenceError(SpecialFunctionError):
    """A series failed to converge within the term cap."""


class HankelOverflowError(SpecialFunctionError, OverflowError):
    """The unscaled value is not representable; use :func:`hankel1_scaled`."""


def _check_order(order: int) -> int:
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order!r}")
    return int(order)


def _as_complex(z: ArrayLike) -> NDArray[np.complex128]:
    arr = np.asarray(z, dtype=np.complex128)
    if not np.all(np.isfinite(arr)):
        raise DomainError("non-finite argument")
    return arr


def _check_domain(z: NDArray[np.complex128]) -> None:
    if np.any(z.real <= 0.0):
        bad = z[z.real <= 0.0].ravel()[0]
        raise DomainError(f"Hankel evaluation requires Re z > 0, got {bad}")


def _wrap(out: NDArray[np.complex128], scalar: bool):
    return out.reshape(())[()] if scalar else out


def bessel_jy_series(order: int, z: ArrayLike, *, tol: float = 1e-17):
    """Ascending-series values ``(J_order(z), Y_order(z))``.

    ``Y`` uses the principal logarithm, so the result is valid off the
    negative real axis. Raises :class:`ConvergenceError` if the terms do not
    drop below ``tol`` relative to the running sum within ``TERM_CAP`` terms.
    """
    n = _check_order(order)
    zz = _as_complex(z)
    scalar = zz.ndim == 0
    zz = np.atleast_1d(zz)
    if np.any(np.abs(zz) > SERIES_RADIUS + 1e-12):
        raise DomainError(f"series radius is {SERIES_RADIUS}")

    half = zz / 2.0
    q = -(half * half)
    lead = half**n / math.factorial(n)
    term = lead.copy()
    jsum = term.copy()
    # psi(m+1) + psi(m+n+1) with psi(1) = -gamma.
    harm_m = 0.0
    harm_mn = sum(1.0 / i for i in range(1, n + 1))
    ysum = term * (2.0 * -EULER_GAMMA + harm_m + harm_mn)
    converged = False
    for m in range(1, TERM_CAP + 1):
        term = term * q / (m * (m + n))
        harm_m += 1.0 / m
        harm_mn += 1.0 / (m + n)
        jsum = jsum + term
        ysum = ysum + term * (2.0 * -EULER_GAMMA + harm_m + harm_mn)
        scale = np.maximum(np.abs(jsum), np.abs(ysum))
        if np.all(np.abs(term) * (1.0 + harm_mn) <= tol * np.maximum(scale, 1e-300)):
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"series did not converge in {TERM_CAP} terms")

    with np.errstate(divide="ignore", invalid="ignore"):
        finite = np.zeros_like(zz)
        for m in range(n):
            finite = finite + (math.factorial(n - m - 1) / math.factorial(m)) * half ** (2 * m - n)
        y = (2.0 / np.pi) * jsum * np.log(half) - finite / np.pi - ysum / np.pi
    return _wrap(jsum, scalar), _wrap(y, scalar)


@lru_cache(maxsize=None)
def _asymptotic_coefficients(order: int, nterms: int) -> NDArray[np.complex128]:
    """``i^k a_k(order)`` for the expansion ``sum_k i^k a_k / z^k``."""
    mu = 4.0 * order * order
    coeffs = np.empty(nterms, dtype=np.complex128)
    a = 1.0
    for k in range(nterms):
        coeffs[k] = (1j) ** k * a
        a *= (mu - (2 * k + 1) ** 2) / ((k + 1) * 8.0)
    return coeffs


def _scaled_asymptotic(order: int, z: NDArray[np.complex128]) -> NDArray[np.complex128]:
    coeffs = _asymptotic_coefficients(order, ASYMPTOTIC_MAX_TERMS)
    inv = 1.0 / z
    total = np.full(z.shape, coeffs[0])
    power = np.ones_like(z)
    last = np.full(z.shape, np.inf)
    active = np.ones(z.shape, dtype=bool)
    for k in range(1, ASYMPTOTIC_MAX_TERMS):
        power = power * inv
        term = coeffs[k] * power
        mag = np.abs(term)
        # Stop each entry at its smallest term (optimal truncation).
        active &= mag < last
        if not active.any():
            break
        total = np.where(active, total + term, total)
        last = np.where(active, mag, last)
        active &= mag > 1e-17 * np.abs(total)
    phase = np.exp(-1j * (order * np.pi / 2 + np.pi / 4))
    return np.sqrt(2.0 / (np.pi * z)) * phase * total


@lru_cache(maxsize=None)
def _laguerre_rule(order: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    nodes, weights = roots_genlaguerre(LAGUERRE_NODES, order - 0.5)
    return nodes, weights / math.gamma(order + 0.5)


def _scaled_laguerre(order: int, z: NDArray[np.complex128]) -> NDArray[np.complex128]:
    nodes, weights = _laguerre_rule(order)
    ratio = 1j / (2.0 * z)
    factor = (1.0 + np.multiply.outer(ratio, nodes)) ** (order - 0.5)
    integral = factor @ weights
    phase = np.exp(-1j * (order * np.pi / 2 + np.pi / 4))
    return np.sqrt(2.0 / (np.pi * z)) * phase * integral


def _scaled_series(order: int, z: NDArray[np.complex128]) -> NDArray[np.complex128]:
    j, y = bessel_jy_series(order, z)
    return np.exp(-1j * z) * (j + 1j * y)


def branch_of(z: ArrayLike) -> NDArray[np.int8]:
    """Branch selector: 0 series, 1 Gauss-Laguerre, 2 large-argument expansion."""
    zz = np.asarray(z, dtype=np.complex128)
    r = np.abs(zz)
    near = (zz.real < SERIES_REAL_MAX) & (zz.imag < SERIES_IMAG_MAX)
    out = np.full(zz.shape, 2, dtype=np.int8)
    out[(r <= ASYMPTOTIC_RADIUS) & ~near] = 1
    out[near & (r <= SERIES_RADIUS)] = 0
    return out


def hankel1_scaled(order: int, z: ArrayLike):
    """``exp(-i z) H^(1)_order(z)`` for ``Re z > 0``.

    The scaling removes the ``exp(-Im z)`` factor, so the result stays
    O(|z|^-1/2) for large |z| anywhere in the half-plane.
    """
    n = _check_order(order)
    zz = _as_complex(z)
    scalar = zz.ndim == 0
    zz = np.atleast_1d(zz)
    _check_domain(zz)
    out = np.empty(zz.shape, dtype=np.complex128)
    branch = branch_of(zz)
    for code, fn in ((0, _scaled_series), (1, _scaled_laguerre), (2, _scaled_asymptotic)):
        mask = branch == code
        if mask.any():
            out[mask] = fn(n, zz[mask])
    return _wrap(out, scalar)


def hankel1(order: int, z: ArrayLike):
    """``H^(1)_order(z) = J_order(z) + i Y_order(z)`` for ``Re z > 0``."""
    zz = _as_complex(z)
    scaled = hankel1_scaled(order, zz)
    if np.any(-zz.imag > 700.0):
        raise HankelOverflowError("exp(-Im z) overflows; use hankel1_scaled")
    return scaled * np.exp(1j * zz)


def hankel1_asymptotic_scaled(order: int, z: ArrayLike):
    """Large-argument expansion of ``exp(-i z) H^(1)_order(z)`` (any ``Re z > 0``)."""
    n = _check_order(order)
    zz = _as_complex(z)
    scalar = zz.ndim == 0
    zz = np.atleast_1d(zz)
    _check_domain(zz)
    return _wrap(_scaled_asymptotic(n, zz), scalar)


def hankel1_laguerre_scaled(order: int, z: ArrayLike):
    """Gauss-Laguerre quadrature of the Hankel-Laplace integral, scaled by ``exp(-i z)``."""
    n = _check_order(order)
    zz = _as_complex(z)
    scalar = zz.ndim == 0
    zz = np.atleast_1d(zz)
    _check_domain(zz)
    return _wrap(_scaled_laguerre(n, zz), scalar)
