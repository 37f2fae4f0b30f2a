"""Field reconstruction from scaled traces, axis far field and reference solutions."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from .complex_special import hankel1
from .hsm_assembly import QuadratureSpec
from .kernels import RegionError, kernel_reconstruction
from .scaling_geometry import WaveParams, in_omega_theta, tau, tau_prime
from .trace_space import TraceVector, gauss_legendre

TraceFunction = Callable[[int, NDArray[np.float64]], NDArray[np.complex128]]
TraceSource = Union[TraceVector, TraceFunction]

DEFAULT_MARGIN = 1e-9
OVERLAP_WARNING = 5e-2
PROVENANCE = ("fem", "j0", "j1", "j2", "j3", "outside")


class UncoveredPointError(ValueError):
    """No representation branch is valid at a requested point."""


class ConvergenceError(RuntimeError):
    """A reference series failed its tail criterion."""


class PointEvaluator(Protocol):
    def contains(self, x1: NDArray, x2: NDArray) -> NDArray[np.bool_]: ...

    def evaluate(self, x1: NDArray, x2: NDArray) -> NDArray[np.complex128]: ...


def composite_gauss(params: WaveParams, T: float, step: float, order: int):
    """Composite Gauss rule on ``[-T, T]`` with panels aligned to ``+-a``."""
    a = params.a
    edges = []
    for lo, hi in ((-T, -a), (-a, a), (a, T)):
        n = max(1, math.ceil((hi - lo) / step - 1e-9))
        edges.append(np.linspace(lo, hi, n + 1)[:-1])
    edges = np.concatenate(edges + [np.array([T])])
    xi, w = gauss_legendre(order)
    length = np.diff(edges)
    s = (edges[:-1, None] + length[:, None] * xi[None, :]).ravel()
    wts = (length[:, None] * w[None, :]).ravel()
    return s, wts


def _trace_values(traces: TraceSource, j: int, s: NDArray) -> NDArray[np.complex128]:
    if isinstance(traces, TraceVector):
        return np.asarray(traces.evaluate(j, s), dtype=np.complex128)
    return np.asarray(traces(j, s), dtype=np.complex128)


def _trace_extent(traces: TraceSource, T: float | None) -> float:
    if T is not None:
        return T
    if isinstance(traces, TraceVector):
        return traces.basis.T
    raise ValueError("a truncation length T is required for callable traces")


def reconstruct_points(
    traces: TraceSource,
    j: int,
    x1: ArrayLike,
    x2: ArrayLike,
    params: WaveParams,
    quad: QuadratureSpec = QuadratureSpec(),
    *,
    T: float | None = None,
    margin: float | None = None,
    chunk: int = 256,
) -> NDArray[np.complex128]:
    """Deformed half-plane representation of branch ``j`` at many points."""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    margin = DEFAULT_MARGIN * params.a if margin is None else margin
    if not np.all(in_omega_theta(j, x1, x2, params, margin=margin)):
        raise RegionError(f"some points lie outside the validity region of half-plane {j}")
    extent = _trace_extent(traces, T)
    s, w = composite_gauss(params, extent, quad.recon_step, quad.recon_order)
    weighted = w * _trace_values(traces, j, s)
    out = np.empty(x1.size, dtype=np.complex128)
    for i in range(0, x1.size, chunk):
        sl = slice(i, i + chunk)
        kern = kernel_reconstruction(params, j, x1[sl, None], x2[sl, None], s[None, :], margin=margin)
        out[sl] = kern @ weighted
    return out


def reconstruct_point(
    traces: TraceSource,
    j: int,
    p: tuple[float, float],
    params: WaveParams,
    quad: QuadratureSpec = QuadratureSpec(),
    **kwargs,
) -> complex:
    return complex(reconstruct_points(traces, j, [p[0]], [p[1]], params, quad, **kwargs)[0])


@dataclass
class FieldGrid:
    points: NDArray[np.float64]
    values: NDArray[np.complex128]
    provenance: list[str]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "re", "im", "provenance"])
            for (x, y), v, tag in zip(self.points, self.values, self.provenance):
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(v.real)), repr(float(v.imag)), tag])

    def to_vtk(self, path: str | Path, title: str = "hsm field samples") -> None:
        n = len(self.points)
        with open(path, "w") as fh:
            fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
            fh.write(f"POINTS {n} double\n")
            for x, y in self.points:
                fh.write(f"{x!r} {y!r} 0.0\n")
            fh.write(f"CELLS {n} {2 * n}\n")
            fh.writelines(f"1 {i}\n" for i in range(n))
            fh.write(f"CELL_TYPES {n}\n")
            fh.writelines("1\n" for _ in range(n))
            fh.write(f"POINT_DATA {n}\n")
            for name, part in (("re", self.values.real), ("im", self.values.imag)):
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.writelines(f"{float(v)!r}\n" for v in np.nan_to_num(part))


def _in_inner_square(params: WaveParams, x1: NDArray, x2: NDArray) -> NDArray[np.bool_]:
    return (np.abs(x1) <= params.a) & (np.abs(x2) <= params.a)


def reconstruct_field(
    traces: TraceSource,
    u_b: PointEvaluator | None,
    points: ArrayLike,
    params: WaveParams,
    quad: QuadratureSpec = QuadratureSpec(),
    *,
    T: float | None = None,
    margin: float | None = None,
    check_overlap: bool = False,
) -> FieldGrid:
    """Stitch the field: FEM region first, then the first branch ``j`` whose
    quarter-plane wedge (angle pi/4) contains the point, then the first
    branch whose own validity wedge contains it.

    Points inside the inner square that the FEM does not cover are labelled
    ``outside`` and carry NaN.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    x1, x2 = pts[:, 0], pts[:, 1]
    margin = DEFAULT_MARGIN * params.a if margin is None else margin
    values = np.full(len(pts), np.nan + 0j)
    label = np.full(len(pts), -1)
    todo = np.ones(len(pts), dtype=bool)
    if u_b is not None:
        hit = u_b.contains(x1, x2)
        if hit.any():
            values[hit] = u_b.evaluate(x1[hit], x2[hit])
            label[hit] = 0
            todo &= ~hit
    inside = todo & _in_inner_square(params, x1, x2)
    label[inside] = 5
    todo &= ~inside
    for angle in (math.pi / 4, params.theta):
        for j in range(4):
            if not todo.any():
                break
            valid = in_omega_theta(j, x1, x2, params, margin=margin)
            hit = todo & valid & in_omega_theta(j, x1, x2, params, angle, margin=margin)
            if hit.any():
                values[hit] = reconstruct_points(traces, j, x1[hit], x2[hit], params, quad, T=T, margin=margin)
                label[hit] = j + 1
                todo &= ~hit
    if todo.any():
        bad = pts[np.flatnonzero(todo)[0]]
        raise UncoveredPointError(f"no representation covers the point {tuple(bad)}")
    grid = FieldGrid(pts, values, [PROVENANCE[i] for i in label])
    if check_overlap:
        gap = overlap_discrepancy(traces, grid, params, quad, T=T, margin=margin)
        if gap > OVERLAP_WARNING:
            warnings.warn(f"branches disagree by {gap:.2e} on their overlap", RuntimeWarning, stacklevel=2)
    return grid


def overlap_discrepancy(
    traces: TraceSource, grid: FieldGrid, params: WaveParams, quad: QuadratureSpec, **kwargs
) -> float:
    """Largest relative gap between a point's value and its other valid branches."""
    worst = 0.0
    x1, x2 = grid.points[:, 0], grid.points[:, 1]
    margin = kwargs.get("margin") or DEFAULT_MARGIN * params.a
    scale = np.nanmax(np.abs(grid.values)) if np.isfinite(grid.values).any() else 1.0
    for j in range(4):
        own = np.array([tag == f"j{j}" for tag in grid.provenance])
        for other in range(4):
            if other == j:
                continue
            both = own & in_omega_theta(other, x1, x2, params, math.pi / 4, margin=margin)
            if both.any():
                alt = reconstruct_points(traces, other, x1[both], x2[both], params, quad, **kwargs)
                worst = max(worst, float(np.max(np.abs(alt - grid.values[both])) / scale))
    return worst


def far_field_axis(traces: TraceVector, j: int, params: WaveParams, *, reference: str = "origin") -> complex:
    """Far-field coefficient in direction ``(cos j pi/2, sin j pi/2)``.

    Integrates the piecewise-polynomial trace times the piecewise-constant
    path derivative exactly, elementwise. With ``reference="origin"`` the value
    is the coefficient of ``exp(i k r)/sqrt(r)``. The half-plane
    representation decays like ``exp(i k (x1 - a))/sqrt(x1 - a)``, so this
    carries a factor ``exp(-i k a)``; ``reference="edge"`` omits it.
    """
    if reference not in ("origin", "edge"):
        raise ValueError(f"unknown far-field reference {reference!r}")
    basis = traces.basis
    pts, wts, dofs, phi = basis.quadrature(basis.q + 1)
    coeffs = traces.coeffs[int(j) % 4]
    element_integrals = np.einsum("eg,gi,ei->e", wts, phi, coeffs[dofs])
    mid = 0.5 * (basis.vertices[:-1] + basis.vertices[1:])
    integral = np.sum(element_integrals * tau_prime(params, mid))
    edge_value = math.sqrt(params.k / math.pi) * (1 - 1j) / 2 * integral
    if reference == "edge":
        return complex(edge_value)
    return complex(edge_value * np.exp(-1j * params.k * params.a))


@dataclass
class FarFieldReport:
    values: list[complex]
    T: float
    quadrature: QuadratureSpec
    params: WaveParams
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        body = {
            "directions": [
                {"j": j, "angle": j * math.pi / 2, "re": v.real, "im": v.imag} for j, v in enumerate(self.values)
            ],
            "T": self.T,
            "quadrature": vars(self.quadrature),
            "params": vars(self.params),
            **self.extra,
        }
        return json.dumps(body, indent=2)


def far_field_report(traces: TraceVector, params: WaveParams, quad: QuadratureSpec = QuadratureSpec()) -> FarFieldReport:
    return FarFieldReport([far_field_axis(traces, j, params) for j in range(4)], traces.basis.T, quad, params)


# Reference solutions ---------------------------------------------------------

HANKEL_AMPLITUDE = 0.25j


def exact_hankel_solution(params: WaveParams, x1: ArrayLike, x2: ArrayLike, amplitude: complex = HANKEL_AMPLITUDE):
    """``amplitude * H0(k |x|)``; the default amplitude makes it the outgoing Green's function."""
    r = np.hypot(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
    if np.any(r == 0.0):
        raise ValueError("the source solution is singular at the origin")
    return amplitude * hankel1(0, params.k * r)


def exact_scaled_trace(params: WaveParams, s: ArrayLike, amplitude: complex = HANKEL_AMPLITUDE):
    """Scaled trace of :func:`exact_hankel_solution` (identical on all four lines)."""
    z = np.sqrt(params.a**2 + np.asarray(tau(params, s)) ** 2)
    return amplitude * hankel1(0, params.k * z)


def exact_scaled_trace_asymptotic(params: WaveParams, s: ArrayLike, amplitude: complex = HANKEL_AMPLITUDE):
    """Leading large-``s`` behaviour of :func:`exact_scaled_trace`."""
    s = np.asarray(s, dtype=float)
    k, a, th = params.k, params.a, params.theta
    lead = np.exp(1j * (k * a + math.pi / 4 - th / 2)) * np.exp(1j * k * (s - a) * params.rotation)
    return (amplitude / 0.25j) * lead / (2 * np.sqrt(2 * math.pi * k * s))


def exact_far_field(params: WaveParams, amplitude: complex = HANKEL_AMPLITUDE) -> complex:
    """Far-field coefficient of :func:`exact_hankel_solution` (direction independent)."""
    return complex(amplitude * math.sqrt(2 / (math.pi * params.k)) * np.exp(-1j * math.pi / 4))


def _mie_coefficients(k: float, radius: float, tol: float, max_order: int) -> NDArray[np.complex128]:
    kr = k * radius
    orders = np.arange(max_order + 1)
    j = special.jv(orders, kr)
    with np.errstate(invalid="ignore", over="ignore"):
        c = np.where(j == 0.0, 0.0, j / special.hankel1(orders, kr))
    if not np.all(np.isfinite(c)):
        raise ConvergenceError("Mie coefficients are not finite")
    # Dropped terms are at most |c_n| in the far field and |J_n(k radius)| near the disk.
    mags = np.maximum(np.abs(c), np.abs(j))
    tail = np.cumsum(mags[::-1])[::-1]
    ok = np.flatnonzero(tail < tol)
    if not ok.size:
        raise ConvergenceError(f"Mie coefficients not below {tol} by order {max_order}")
    return c[: ok[0]]


def mie_series_disk(
    k: float,
    radius: float,
    incidence_angle: float,
    x1: ArrayLike,
    x2: ArrayLike,
    *,
    tol: float = 1e-10,
    max_order: int = 400,
) -> NDArray[np.complex128]:
    """Scattered field of a plane wave ``exp(i k d.x)`` by a sound-soft disk at the origin."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    r = np.hypot(x1, x2)
    if np.any(r < radius * (1 - 1e-12)):
        raise ValueError("evaluation point inside the disk")
    phi = np.arctan2(x2, x1) - incidence_angle
    c = _mie_coefficients(k, radius, tol, max_order)
    total = -c[0] * special.hankel1(0, k * r)
    for n in range(1, c.size):
        total = total - 2 * (1j**n) * c[n] * special.hankel1(n, k * r) * np.cos(n * phi)
    return total


def mie_far_field(
    k: float, radius: float, incidence_angle: float, direction: ArrayLike, *, tol: float = 1e-10, max_order: int = 400
) -> NDArray[np.complex128]:
    """Coefficient of ``exp(i k r)/sqrt(r)`` in :func:`mie_series_disk` along ``direction`` (angle)."""
    phi = np.asarray(direction, dtype=float) - incidence_angle
    c = _mie_coefficients(k, radius, tol, max_order)
    total = c[0] * np.ones_like(phi, dtype=np.complex128)
    for n in range(1, c.size):
        total = total + 2 * c[n] * np.cos(n * phi)
    return -math.sqrt(2 / (math.pi * k)) * np.exp(-1j * math.pi / 4) * total


def plane_wave(k: float, angle: float, x1: ArrayLike, x2: ArrayLike) -> NDArray[np.complex128]:
    return np.exp(1j * k * (np.asarray(x1) * math.cos(angle) + np.asarray(x2) * math.sin(angle)))


def error_norms(computed: ArrayLike, reference: ArrayLike) -> tuple[float, float]:
    """Discrete relative ``(L2, Linf)`` errors over points where both values are finite."""
    c = np.asarray(computed.values if isinstance(computed, FieldGrid) else computed)
    r = np.asarray(reference.values if isinstance(reference, FieldGrid) else reference)
    if isinstance(computed, FieldGrid) and isinstance(reference, FieldGrid):
        if computed.points.shape != reference.points.shape or not np.allclose(computed.points, reference.points):
            raise ValueError("grids have different points")
    if c.shape != r.shape:
        raise ValueError("mismatched point sets")
    both = np.isfinite(c) & np.isfinite(r)
    diff = np.abs(c[both] - r[both])
    ref = np.abs(r[both])
    if not both.any() or ref.max() == 0.0:
        return (float(np.linalg.norm(diff)), float(diff.max(initial=0.0)))
    return float(np.linalg.norm(diff) / np.linalg.norm(ref)), float(diff.max() / ref.max())


def trace_l2_error(
    traces: TraceVector,
    exact: Callable[[NDArray], NDArray],
    params: WaveParams,
    j: int = 0,
    *,
    include_tail: bool = True,
    tail_tol: float = 1e-20,
) -> float:
    """``L2(R)`` distance between trace ``j`` (extended by zero) and an exact trace.

    The part beyond ``+-T`` is the exact trace's own tail, integrated until
    its decay factor ``exp(-2 k sin(theta) L)`` drops below ``tail_tol``.
    """
    basis = traces.basis
    pts, wts, _, _ = basis.quadrature(basis.q + 4)
    s, w = pts.ravel(), wts.ravel()
    inside = float(np.sum(w * np.abs(traces.evaluate(j, s) - exact(s)) ** 2))
    if not include_tail:
        return math.sqrt(inside)
    length = -math.log(tail_tol) / (2 * params.k * math.sin(params.theta))
    n = max(8, math.ceil(length / 0.05))
    edges = np.linspace(basis.T, basis.T + length, n + 1)
    xi, gw = gauss_legendre(8)
    ts = (edges[:-1, None] + np.diff(edges)[:, None] * xi[None, :]).ravel()
    tw = (np.diff(edges)[:, None] * gw[None, :]).ravel()
    tail = float(np.sum(tw * (np.abs(exact(ts)) ** 2 + np.abs(exact(-ts)) ** 2)))
    return math.sqrt(inside + tail)


def fit_log10_slope(x: ArrayLike, err: ArrayLike) -> float:
    """Least-squares slope of ``log10(err)`` against ``x``."""
    x = np.asarray(x, dtype=float)
    y = np.log10(np.asarray(err, dtype=float))
    if x.size < 2:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])
