"""End-to-end acceptance checks, shared by ``hsm validate`` and the test suite.

Each check returns a :class:`CriterionResult`; none of them raises on a
numerical miss, so a full run always reports every criterion.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .complex_special import bessel_jy_series, hankel1, hankel1_scaled
from .fem_coupling import MaterialField, solve_general, structured_mesh
from .hsm_assembly import (
    QuadratureSpec,
    assemble_block_system,
    assemble_galerkin,
    assemble_rhs,
    cyclic_shift,
    reflection_matrix,
    solve_dirichlet,
)
from .kernels import kernel_Dtheta, kernel_dissipative
from .linalg import op_norm_estimate
from .postprocess import (
    exact_hankel_solution,
    exact_scaled_trace,
    far_field_axis,
    fit_log10_slope,
    mie_far_field,
    plane_wave,
    reconstruct_points,
    trace_l2_error,
)
from .scaling_geometry import WaveParams, complex_distance, in_omega_theta, local_coords, tau
from .trace_space import BoundaryData, TraceGridSpec, build_space, interpolate_boundary_data, mass_matrix

FAR_FIELD_REFERENCE = 0.225079 * (1 - 1j)
TWO_PI = 2 * math.pi


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    limit_seconds: float | None = None
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        budget = f" (limit {self.limit_seconds:.0f} s)" if self.limit_seconds else ""
        return f"[{status}] criterion {self.number}: {self.name}: {self.detail}; {self.seconds:.1f} s{budget}"


def _timed(number: int, name: str, limit: float | None, fn: Callable[[], tuple[bool, str, dict]]) -> CriterionResult:
    start = time.perf_counter()
    ok, detail, data = fn()
    elapsed = time.perf_counter() - start
    within = limit is None or elapsed <= limit
    if not within:
        detail += "; exceeded time budget"
    return CriterionResult(number, name, ok and within, detail, elapsed, limit, data)


def hankel_boundary_data(params: WaveParams, amplitude: complex) -> BoundaryData:
    return BoundaryData.from_global(lambda x, y: exact_hankel_solution(params, x, y, amplitude), params.a)


# 1 ---------------------------------------------------------------------------


def far_field_reproduction(thetas=(math.pi / 6, math.pi / 4, math.pi / 3), h: float = 0.01) -> CriterionResult:
    """Unit-amplitude source, ``a = 1``, ``k = 2 pi``, ``q = 3``, ``T = 2.6``."""

    def run():
        errs, times = {}, {}
        for th in thetas:
            start = time.perf_counter()
            params = WaveParams(k=TWO_PI, a=1.0, b=2.0, theta=th)
            traces, _ = solve_dirichlet(
                params, TraceGridSpec(2.6, h, 3), QuadratureSpec(), hankel_boundary_data(params, 1.0)
            )
            errs[th] = abs(far_field_axis(traces, 0, params) - FAR_FIELD_REFERENCE)
            times[th] = time.perf_counter() - start
        ok = all(e <= 1e-2 for e in errs.values()) and all(t <= 120 for t in times.values())
        detail = ", ".join(f"theta={th:.4f}: |err|={e:.2e} ({times[th]:.1f} s)" for th, e in errs.items())
        return ok, detail, {"errors": errs, "times": times}

    return _timed(1, "far-field reproduction", None, run)


# 2 ---------------------------------------------------------------------------


def truncation_errors(theta: float, Ts, h: float = 0.02, q: int = 3) -> list[float]:
    params = WaveParams(k=TWO_PI, a=1.0, b=2.0, theta=theta)
    g = hankel_boundary_data(params, 0.25j)
    out = []
    for T in Ts:
        traces, _ = solve_dirichlet(params, TraceGridSpec(T, h, q), QuadratureSpec(), g)
        out.append(trace_l2_error(traces, lambda s: exact_scaled_trace(params, s), params))
    return out


def truncation_slopes(window=(1.4, 1.6, 1.8, 2.0)) -> CriterionResult:
    def run():
        parts, ok = [], True
        data = {}
        for th in (math.pi / 6, math.pi / 4):
            errs = truncation_errors(th, window)
            slope = fit_log10_slope(window, errs)
            target = -TWO_PI * math.sin(th) / math.log(10)
            rel = abs(slope - target) / abs(target)
            ok &= rel <= 0.15
            parts.append(f"theta={th:.4f}: slope {slope:.3f} vs {target:.3f} ({100 * rel:.1f}%)")
            data[th] = errs
        pre = (1.2, 1.4, 1.6, 1.8)
        errs = truncation_errors(math.pi / 3, pre)
        mono = all(b < a for a, b in zip(errs, errs[1:]))
        ok &= mono
        parts.append(f"theta=pi/3 decreasing on T in [1.2, 1.8]: {mono}")
        data[math.pi / 3] = errs
        return ok, "; ".join(parts), data

    return _timed(2, "truncation-decay slopes", 300, run)


# 3 ---------------------------------------------------------------------------


def sample_omega_points(params: WaveParams, n: int, seed: int = 0, clearance: float = 0.2) -> np.ndarray:
    """Random points of the half-plane-0 validity wedge, kept ``clearance`` away
    from its boundary line and from the line ``x1 = a``."""
    rng = np.random.default_rng(seed)
    a, th = params.a, params.theta
    pts = []
    while len(pts) < n:
        x1 = rng.uniform(a + clearance, a + 3.0)
        x2 = rng.uniform(-3.0, 3.0)
        gap = (x1 - a) * math.cos(th) - (abs(x2) - a) * math.sin(th)
        if gap >= clearance and in_omega_theta(0, x1, x2, params):
            pts.append((x1, x2))
    return np.array(pts)


def representation_oracle(n: int = 100) -> CriterionResult:
    def run():
        params = WaveParams(k=TWO_PI, a=1.0, b=2.0, theta=math.pi / 6)
        pts = sample_omega_points(params, n)
        rec = reconstruct_points(lambda j, s: exact_scaled_trace(params, s), 0, pts[:, 0], pts[:, 1], params, T=6.0)
        ref = exact_hankel_solution(params, pts[:, 0], pts[:, 1])
        rel = np.abs(rec - ref) / np.abs(ref)
        return bool(rel.max() <= 1e-3), f"max relative error {rel.max():.2e} at {n} points", {"max": rel.max()}

    return _timed(3, "deformed-representation oracle", 30, run)


# 4 ---------------------------------------------------------------------------


def dissipative_equivalence() -> CriterionResult:
    def run():
        params = WaveParams(k=TWO_PI, a=1.0, b=2.0, theta=math.pi / 6)
        basis = build_space(TraceGridSpec(4.0, 0.1, 2), params.a)
        right = basis.element_mask(params.a, np.inf)
        scaled = assemble_galerkin(basis, lambda t, s: kernel_Dtheta(params, t, s), right, right, 5)
        diss = assemble_galerkin(basis, lambda t, s: kernel_dissipative(params, t, s), right, right, 5)
        nz = np.abs(diss) > 0
        rel = float(np.max(np.abs(scaled - diss)[nz] / np.abs(diss[nz])))
        return rel <= 1e-12, f"max entrywise relative difference {rel:.2e}", {"rel": rel}

    return _timed(4, "dissipative-equivalence identity", 10, run)


# 5 ---------------------------------------------------------------------------


def static_block_norm(a: float = 1.0, length: float = 20.0, h: float = 0.05, q: int = 1) -> float:
    """Mass-weighted 2-norm of the k = 0 trace block on ``(a, a + length)``."""
    basis = build_space(TraceGridSpec(a + length, h, q), a)
    right = basis.element_mask(a, np.inf)

    def h0(t, s):
        return (t - a) / (math.pi * ((t - a) ** 2 + (a - s) ** 2))

    g = assemble_galerkin(basis, h0, right, right, 5)
    dofs = basis.free_dofs[basis.nodes[basis.free_dofs] > a]
    m = mass_matrix(basis)[dofs][:, dofs]
    return op_norm_estimate(g[np.ix_(dofs, dofs)], m)


def static_norm_bound() -> CriterionResult:
    def run():
        value = static_block_norm()
        return 0.66 <= value <= 0.73, f"norm estimate {value:.4f} (window [0.66, 0.73])", {"norm": value}

    return _timed(5, "static norm bound", 30, run)


# 6 ---------------------------------------------------------------------------


def disk_scattering(h: float = 0.05) -> CriterionResult:
    def run():
        params = WaveParams(k=TWO_PI, a=0.8, b=1.2, theta=math.pi / 6)
        inc = math.pi / 6
        mesh = structured_mesh(params.a, params.b, h, obstacle_radius=0.5)
        u_b, traces = solve_general(
            params,
            TraceGridSpec(5.0, h, 2),
            QuadratureSpec(),
            mesh,
            MaterialField(),
            lambda x, y: -plane_wave(params.k, inc, x, y),
        )
        computed = np.array([far_field_axis(traces, j, params) for j in range(4)])
        mie = mie_far_field(params.k, 0.5, inc, np.arange(4) * math.pi / 2)
        ff = float(np.max(np.abs(computed - mie) / np.abs(mie)))
        x1, x2 = np.meshgrid(np.linspace(params.a + 0.2, params.b - 0.02, 4), np.linspace(-0.9, 0.9, 10))
        x1, x2 = x1.ravel(), x2.ravel()
        rec = reconstruct_points(traces, 0, x1, x2, params)
        fem = u_b.evaluate(x1, x2)
        overlap = float(np.max(np.abs(rec - fem)) / np.max(np.abs(fem)))
        ok = ff <= 5e-2 and overlap <= 2e-2
        return ok, f"far-field max relative error {ff:.2e}; overlap sup error {overlap:.2e}", {"ff": ff, "overlap": overlap}

    return _timed(6, "general-case disk scattering", 300, run)


# 7 ---------------------------------------------------------------------------


def _property_checks() -> list[tuple[str, bool]]:
    checks = []
    rng = np.random.default_rng(7)
    z = rng.uniform(0.1, 30, 400) + 1j * rng.uniform(-5, 30, 400)
    h0, h1, h2 = (hankel1_scaled(n, z) for n in range(3))
    rec = np.abs(h2 - 2 / z * h1 + h0) / np.maximum.reduce([abs(h0), abs(h1), abs(h2)])
    checks.append(("Hankel recurrence", bool(rec.max() <= 1e-11)))
    zw = 3 + 2j
    (j0, y0), (j1, y1) = bessel_jy_series(0, zw), bessel_jy_series(1, zw)
    checks.append(("Wronskian", abs(j1 * y0 - j0 * y1 - 2 / (math.pi * zw)) <= 1e-11))
    t = 200.0
    asym = math.sqrt(2 / (math.pi * t)) * np.exp(-1j * math.pi / 4)
    checks.append(("Hankel asymptotics", abs(hankel1_scaled(0, t) / asym - 1) <= 1e-2))
    params = WaveParams(k=TWO_PI, a=1.0, b=2.0, theta=math.pi / 6)
    s = rng.uniform(-50, 50, 500)
    checks.append(("path symmetry", bool(np.all(tau(params, -s) == -tau(params, s)))))
    w = rng.uniform(0, 10, 500) * np.exp(1j * rng.uniform(0, params.theta, 500))
    zz = tau(params, s) - params.a
    r = complex_distance(w, zz)
    bound = math.cos(params.theta) ** 2 * (np.abs(w) ** 2 + np.abs(zz) ** 2)
    checks.append(("distance lower bound", bool(np.all(np.abs(r) ** 2 >= bound * (1 - 1e-12)))))
    x = rng.normal(size=(2, 100))
    norms_ok = all(
        np.allclose(np.hypot(*local_coords(j, x[0], x[1])), np.hypot(x[0], x[1]), rtol=0, atol=1e-15 * 4)
        for j in range(4)
    )
    checks.append(("rotations preserve length", norms_ok))
    basis = build_space(TraceGridSpec(3.0, 0.1, 2), params.a)
    coeffs = np.zeros(basis.ndofs, dtype=complex)
    coeffs[basis.free_dofs] = rng.normal(size=basis.free_dofs.size)
    inner = basis.evaluate(coeffs, rng.uniform(-params.a, params.a, 1000))
    checks.append(("constrained traces vanish on [-a, a]", bool(np.all(inner == 0))))
    refl = reflection_matrix(basis)
    checks.append(("reflection is an involution", (refl @ refl != sp.identity(basis.ndofs, format="csr")).nnz == 0))
    system = assemble_block_system(basis, params, QuadratureSpec())
    n = system.block_size
    m_ff = system.mass[basis.free_dofs][:, basis.free_dofs].toarray()
    coupling = system.matrix - np.kron(np.eye(4), m_ff)
    zero_blocks = all(
        not np.any(coupling[i * n : (i + 1) * n, j * n : (j + 1) * n]) for i in range(4) for j in (i, (i + 2) % 4)
    )
    checks.append(("diagonal and opposite blocks vanish", zero_blocks))
    shift = cyclic_shift()
    checks.append(("shift pattern", bool(np.array_equal(shift @ shift.T, np.eye(4)))))
    g = hankel_boundary_data(params, 0.25j)
    lifted = interpolate_boundary_data(basis, g)
    r1 = assemble_rhs(system, lifted)
    r2 = assemble_rhs(system, lifted * (2 - 3j))
    checks.append(("right-hand side linearity", bool(np.allclose(r2, (2 - 3j) * r1, rtol=1e-14, atol=0))))
    gp = WaveParams(k=TWO_PI, a=0.8, b=1.2, theta=math.pi / 6)
    mesh = structured_mesh(gp.a, gp.b, 0.2)
    u_b, traces = solve_general(gp, TraceGridSpec(3.0, 0.2, 2), QuadratureSpec(), mesh, MaterialField())
    checks.append(("uniqueness proxy", float(np.abs(u_b.values).max(initial=0) + np.abs(traces.coeffs).max()) <= 1e-8))
    n10, n20 = static_block_norm(length=10.0), static_block_norm(length=20.0)
    checks.append(("static norm bounded and growing in T", n10 < n20 <= 1 / math.sqrt(2) + 0.02))
    checks.append(("Hankel scaled finite at large Im", bool(np.isfinite(hankel1_scaled(0, 10 + 1e4j)))))
    checks.append(("unscaled matches scaled", abs(hankel1(1, 1.0) * np.exp(-1j) - hankel1_scaled(1, 1.0)) <= 1e-14))
    return checks


def property_suites() -> CriterionResult:
    def run():
        checks = _property_checks()
        failed = [name for name, ok in checks if not ok]
        detail = f"{len(checks) - len(failed)}/{len(checks)} invariants hold"
        if failed:
            detail += " (failed: " + ", ".join(failed) + ")"
        return not failed, detail, {"checks": checks}

    return _timed(7, "property suites", 120, run)


ALL_CRITERIA: dict[int, Callable[[], CriterionResult]] = {
    1: far_field_reproduction,
    2: truncation_slopes,
    3: representation_oracle,
    4: dissipative_equivalence,
    5: static_norm_bound,
    6: disk_scattering,
    7: property_suites,
}


def run_all(selected=None, echo: Callable[[str], None] = print) -> list[CriterionResult]:
    results = []
    for number, fn in ALL_CRITERIA.items():
        if selected and number not in selected:
            continue
        res = fn()
        echo(res.line())
        results.append(res)
    return results
