"""Half-plane double-layer kernel ``h``, its Robin derivative ``lambda`` and the
complex-scaled compositions used in the trace system and reconstruction.

All kernels are evaluated as ``prefactor * hankel1_scaled(., kR) * exp(i k R)``.
With ``Im R >= 0`` on every admissible configuration, the exponential is the
only decaying factor and it is applied last, so no intermediate overflows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .complex_special import DomainError, hankel1_scaled
from .scaling_geometry import (
    WaveParams,
    complex_distance,
    in_omega_theta,
    local_coords,
    tau,
    tau_prime,
)


class KernelBranchError(ArithmeticError):
    """The complex distance fell on the branch cut of the Hankel function."""


class RegionError(ValueError):
    """A reconstruction point lies outside the validity region of its branch."""


def _hankels(k: complex, R: NDArray, orders: tuple[int, ...]) -> list[NDArray]:
    kr = k * R
    try:
        scaled = [hankel1_scaled(n, kr) for n in orders]
    except DomainError as exc:
        raise KernelBranchError(
            "complex distance crosses the branch cut; the evaluation point is "
            "outside the analyticity region"
        ) from exc
    phase = np.exp(1j * kr)
    return [h * phase for h in scaled]


def kernel_h(params: WaveParams, x1: ArrayLike, z: ArrayLike):
    """``(i k x1 / 2) H1(k R) / R`` with ``R = sqrt(x1^2 + z^2)``; ``x1`` may be complex."""
    return kernel_h_wavenumber(params.k, x1, z)


def kernel_h_wavenumber(k: complex, x1: ArrayLike, z: ArrayLike):
    """Same kernel for an arbitrary (possibly complex) wavenumber."""
    x1 = np.asarray(x1, dtype=np.complex128)
    R = np.asarray(complex_distance(x1, z))
    (h1,) = _hankels(k, R, (1,))
    out = 0.5j * k * x1 * h1 / R
    return out[()] if out.ndim == 0 else out


def kernel_lambda(params: WaveParams, x1: ArrayLike, z: ArrayLike):
    """Robin kernel ``d/dx1 h - i k h`` in closed form."""
    k = params.k
    x1 = np.asarray(x1, dtype=np.complex128)
    R = np.asarray(complex_distance(x1, z))
    h1, h2 = _hankels(k, R, (1, 2))
    out = (0.5j * k / R) * ((1.0 - 1j * k * x1) * h1 - (k * x1 * x1 / R) * h2)
    return out[()] if out.ndim == 0 else out


def kernel_Dtheta(params: WaveParams, t: ArrayLike, s: ArrayLike):
    """Integrand of the scaled trace operator: ``h(tau(t)-a, a-tau(s)) tau'(s)``, ``t > a``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= params.a):
        raise ValueError("the scaled trace operator is only evaluated for t > a")
    x1 = tau(params, t) - params.a
    z = params.a - tau(params, s)
    return kernel_h(params, x1, z) * tau_prime(params, s)


def kernel_dissipative(params: WaveParams, t: ArrayLike, s: ArrayLike):
    """Unscaled kernel with wavenumber ``k exp(i theta)`` for real ``t, s > a``."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    kc = params.k * params.rotation
    return kernel_h_wavenumber(kc, t - params.a, params.a - s)


def kernel_reconstruction(
    params: WaveParams, j: int, x1: ArrayLike, x2: ArrayLike, s: ArrayLike, *, margin: float = 0.0,
):
    """Integrand of the deformed representation in frame ``j`` at global ``(x1, x2)``.

    Broadcasts points against ``s``. Raises :class:`RegionError` for points
    outside the validity wedge of frame ``j``.
    """
    if not np.all(in_omega_theta(j, x1, x2, params, margin=margin)):
        raise RegionError(f"point outside the validity region of half-plane {j}")
    y1, y2 = local_coords(j, x1, x2)
    return kernel_h(params, y1 - params.a, y2 - tau(params, s)) * tau_prime(params, s)


class KernelMode(enum.Enum):
    DOUBLE_LAYER = "h"
    ROBIN = "lambda"


@dataclass(frozen=True)
class KernelEvaluator:
    """Bundles a configuration with one of the two kernels."""

    params: WaveParams
    mode: KernelMode = KernelMode.DOUBLE_LAYER

    def __call__(self, x1: ArrayLike, z: ArrayLike):
        if self.mode is KernelMode.ROBIN:
            return kernel_lambda(self.params, x1, z)
        return kernel_h(self.params, x1, z)
