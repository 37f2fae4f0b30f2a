"""Complex scaling path, half-plane coordinates and validity regions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray


class ParameterError(ValueError):
    """Invalid physical or geometric configuration."""


@dataclass(frozen=True)
class WaveParams:
    """Wavenumber ``k``, half-widths ``a < b`` of the two squares, scaling angle ``theta``."""

    k: float
    a: float
    b: float
    theta: float

    def __post_init__(self) -> None:
        for name in ("k", "a", "b", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise ParameterError(f"{name} must be finite")
        if self.k <= 0:
            raise ParameterError(f"k must be positive, got {self.k}")
        if self.a <= 0:
            raise ParameterError(f"a must be positive, got {self.a}")
        if self.b <= self.a:
            raise ParameterError(f"b must exceed a, got a={self.a}, b={self.b}")
        if not 0.0 < self.theta < math.pi / 2:
            raise ParameterError(f"theta must lie in (0, pi/2), got {self.theta}")

    @property
    def rotation(self) -> complex:
        return complex(math.cos(self.theta), math.sin(self.theta))

    def require_general_case(self) -> None:
        """The coupled FEM formulation needs ``theta < pi/4``."""
        if not self.theta < math.pi / 4:
            raise ParameterError(f"coupled solver needs theta < pi/4, got {self.theta}")


def tau(params: WaveParams, s: ArrayLike):
    """Bent path: identity on ``[-a, a]``, rotated by ``exp(i theta)`` beyond."""
    s_arr = np.asarray(s, dtype=float)
    a, e = params.a, params.rotation
    out = s_arr.astype(np.complex128)
    right = s_arr > a
    left = s_arr < -a
    out = np.where(right, a + (s_arr - a) * e, out)
    out = np.where(left, -a + (s_arr + a) * e, out)
    return out[()] if out.ndim == 0 else out


def tau_prime(params: WaveParams, s: ArrayLike):
    """Derivative of :func:`tau`; the kinks at ``+-a`` take the outer value."""
    s_arr = np.asarray(s, dtype=float)
    out = np.where(np.abs(s_arr) >= params.a, params.rotation, 1.0 + 0.0j)
    return out[()] if out.ndim == 0 else out


def local_coords(j: int, x1: ArrayLike, x2: ArrayLike) -> tuple[NDArray, NDArray]:
    """Coordinates in the frame of half-plane ``j`` (rotation by ``-j pi/2``)."""
    j = int(j) % 4
    c, s = ((1, 0), (0, 1), (-1, 0), (0, -1))[j]
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return c * x1 + s * x2, -s * x1 + c * x2


def global_coords(j: int, y1: ArrayLike, y2: ArrayLike) -> tuple[NDArray, NDArray]:
    """Inverse of :func:`local_coords`."""
    return local_coords(-int(j), y1, y2)


def principal_sqrt(z: ArrayLike):
    """Square root with ``Arg`` in ``(-pi, pi]``; the negative axis maps to ``+i``."""
    zz = np.asarray(z, dtype=np.complex128)
    # Signed zero in the imaginary part would flip numpy's branch on the cut.
    zz = np.where(zz.imag == 0.0, zz.real + 0.0j, zz)
    out = np.sqrt(zz)
    return out[()] if out.ndim == 0 else out


def complex_distance(w: ArrayLike, z: ArrayLike):
    """Analytic continuation of ``sqrt(w^2 + z^2)``."""
    w = np.asarray(w, dtype=np.complex128)
    z = np.asarray(z, dtype=np.complex128)
    return principal_sqrt(w * w + z * z)


def in_omega_theta(
    j: int, x1: ArrayLike, x2: ArrayLike, params: WaveParams, angle: float | None = None,
    margin: float = 0.0,
):
    """Membership in ``{y1 - a > (|y2| - a) tan(angle) + margin}`` in frame ``j``."""
    angle = params.theta if angle is None else angle
    if not 0.0 < angle < math.pi / 2:
        raise ParameterError(f"angle must lie in (0, pi/2), got {angle}")
    y1, y2 = local_coords(j, x1, x2)
    out = y1 - params.a > (np.abs(y2) - params.a) * math.tan(angle) + margin
    return out[()] if np.ndim(out) == 0 else out
