import csv
import math
import warnings

import numpy as np
import pytest

from hsm.acceptance import hankel_boundary_data, sample_omega_points
from hsm.hsm_assembly import QuadratureSpec, solve_dirichlet
from hsm.kernels import RegionError, kernel_Dtheta
from hsm.postprocess import (
    ConvergenceError,
    FieldGrid,
    UncoveredPointError,
    error_norms,
    exact_far_field,
    exact_hankel_solution,
    exact_scaled_trace,
    exact_scaled_trace_asymptotic,
    far_field_axis,
    far_field_report,
    mie_far_field,
    mie_series_disk,
    overlap_discrepancy,
    plane_wave,
    reconstruct_field,
    reconstruct_point,
    reconstruct_points,
)
from hsm.scaling_geometry import WaveParams
from hsm.trace_space import TraceGridSpec, TraceVector, build_space, gauss_legendre

K = 2 * math.pi
P = WaveParams(k=K, a=1.0, b=2.0, theta=math.pi / 6)

# (i/4) H0(k r) for k = 2 pi, mpmath.
SOURCE_AT_TWO = 0.04016553785993572 + 0.03937684812053459j
SOURCE_AT_ONE = 0.05727712750617978 + 0.055069227134983606j


def _exact(params):
    return lambda j, s: exact_scaled_trace(params, s)


@pytest.fixture(scope="module")
def square_traces():
    traces, _ = solve_dirichlet(P, TraceGridSpec(5.0, 0.1, 1), QuadratureSpec(), hankel_boundary_data(P, 0.25j))
    return traces


def test_reconstruction_from_exact_trace_at_axis_point():
    assert abs(reconstruct_point(_exact(P), 0, (2.0, 0.0), P, T=5.0) - SOURCE_AT_TWO) <= 1e-3
    assert abs(reconstruct_point(_exact(P), 0, (2.0, 0.0), P, T=6.0) - SOURCE_AT_TWO) <= 1e-13


def test_reconstruction_matches_source_on_random_points():
    pts = sample_omega_points(P, 100, seed=4)
    rec = reconstruct_points(_exact(P), 0, pts[:, 0], pts[:, 1], P, T=6.0)
    ref = exact_hankel_solution(P, pts[:, 0], pts[:, 1])
    assert np.max(np.abs(rec - ref) / np.abs(ref)) <= 1e-3


def test_reconstruction_rejects_points_outside_wedge():
    with pytest.raises(RegionError):
        reconstruct_point(_exact(P), 0, (1.05, 3.0), P, T=5.0)


def test_callable_traces_need_a_truncation_length():
    with pytest.raises(ValueError):
        reconstruct_point(_exact(P), 0, (2.0, 0.0), P)


def test_zero_traces_give_zero_field():
    basis = build_space(TraceGridSpec(3.0, 0.1, 1), 1.0)
    zero = TraceVector(basis, np.zeros((4, basis.ndofs)))
    assert reconstruct_point(zero, 0, (2.0, 0.3), P) == 0


def test_jump_across_wedge_boundary():
    # Boundary point (a, a) + (s - a)(sin theta, cos theta); the jump there has size |trace(s)|.
    quad = QuadratureSpec(recon_step=2.5e-4, recon_order=8)
    th = P.theta
    inward = np.array([math.cos(th), -math.sin(th)])
    jumps = []
    for s in (1.3, 1.6, 2.0):
        base = np.array([1.0, 1.0]) + (s - 1.0) * np.array([math.sin(th), math.cos(th)])
        inside = reconstruct_point(_exact(P), 0, tuple(base + 2e-3 * inward), P, quad, T=6.0, margin=-0.1)
        outside = reconstruct_point(_exact(P), 0, tuple(base - 2e-3 * inward), P, quad, T=6.0, margin=-0.1)
        jump = abs(inside - outside)
        assert abs(jump / abs(exact_scaled_trace(P, s)) - 1) <= 5e-2
        jumps.append(jump)
    assert jumps[0] > jumps[1] > jumps[2]


def test_representation_vanishes_on_the_edge_line_outside_the_square():
    quad = QuadratureSpec()
    value = reconstruct_point(_exact(P), 0, (1.0, 2.5), P, quad, T=6.0, margin=-10.0)
    assert abs(value) <= 1e-12


def _random_trace(rng, s):
    c = rng.normal(size=(6, 2))
    centres, widths = rng.uniform(-5, 5, 6), rng.uniform(0.1, 2.0, 6)
    return sum((c[i, 0] + 1j * c[i, 1]) * np.exp(-((s - centres[i]) ** 2) / widths[i]) for i in range(6))


def test_half_line_operator_bound():
    xi, w = gauss_legendre(10)
    edges = np.linspace(-6, 6, 241)
    s = (edges[:-1, None] + np.diff(edges)[:, None] * xi).ravel()
    ws = (np.diff(edges)[:, None] * w).ravel()
    t = P.a + np.geomspace(1e-3, 6, 80)
    envelope = ((t - P.a) ** -0.5 + 1) * np.exp(-K * math.sin(P.theta) * (t - P.a))
    kern = kernel_Dtheta(P, t[:, None], s[None, :])
    ratios = []
    for seed in range(10):
        psi = _random_trace(np.random.default_rng(seed), s)
        norm = math.sqrt(np.sum(ws * np.abs(psi) ** 2))
        ratios.append(np.max(np.abs(kern @ (ws * psi)) / (envelope * norm)))
    assert max(ratios) < 1.0


def test_branches_agree_on_overlap(square_traces):
    pts = np.array([(1.5 + d, 1.5 + d) for d in np.linspace(0, 2, 6)] + [(2.0, 1.8), (2.5, 2.2), (3.0, 2.9)])
    v0 = reconstruct_points(square_traces, 0, pts[:, 0], pts[:, 1], P)
    v1 = reconstruct_points(square_traces, 1, pts[:, 0], pts[:, 1], P)
    assert np.max(np.abs(v0 - v1)) / np.max(np.abs(v0)) <= 2e-2


def _annulus(n_angle=72, radii=np.linspace(1.6, 3.0, 8)):
    r, a = np.meshgrid(radii, np.linspace(0, 2 * np.pi, n_angle + 1)[:-1])
    return np.c_[(r * np.cos(a)).ravel(), (r * np.sin(a)).ravel()]


def test_square_field_on_annulus(square_traces):
    pts = _annulus()
    grid = reconstruct_field(square_traces, None, pts, P)
    ref = exact_hankel_solution(P, pts[:, 0], pts[:, 1])
    l2, _ = error_norms(grid.values, ref)
    assert l2 <= 3e-2
    assert set(grid.provenance) == {"j0", "j1", "j2", "j3"}


def test_overlap_diagnostic_is_quiet_for_consistent_traces(square_traces):
    pts = _annulus(24, np.array([2.0, 2.5]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        grid = reconstruct_field(square_traces, None, pts, P, check_overlap=True)
    assert overlap_discrepancy(square_traces, grid, P, QuadratureSpec()) <= 2e-2


class _Disk:
    """Stand-in volume solution on the disk of radius 1.5."""

    def contains(self, x1, x2):
        return np.hypot(x1, x2) <= 1.5

    def evaluate(self, x1, x2):
        return np.full(np.shape(x1), 7.0 + 0j)


def test_provenance_partition(square_traces):
    pts = np.array([(0.0, 0.0), (1.2, 0.3), (0.5, 0.5), (3.0, 0.2), (-0.2, 2.4), (-3.0, 0.0), (0.1, -2.5), (2.4, 2.4)])
    grid = reconstruct_field(square_traces, _Disk(), pts, P)
    assert grid.provenance[:3] == ["fem", "fem", "fem"]
    assert grid.provenance[3:7] == ["j0", "j1", "j2", "j3"]
    assert grid.provenance[7] in {"j0", "j1"}
    assert np.all(grid.values[:3] == 7)
    grid = reconstruct_field(square_traces, None, pts, P)
    assert [grid.provenance[i] for i in (0, 2)] == ["outside", "outside"]
    assert grid.provenance[1] == "j0"
    assert np.isnan(grid.values[[0, 2]]).all()
    assert all(tag in {"fem", "j0", "j1", "j2", "j3", "outside"} for tag in grid.provenance)


def test_wide_angle_leaves_diagonal_uncovered():
    params = WaveParams(K, 1.0, 2.0, math.pi / 3)
    basis = build_space(TraceGridSpec(3.0, 0.1, 1), 1.0)
    zero = TraceVector(basis, np.zeros((4, basis.ndofs)))
    with pytest.raises(UncoveredPointError):
        reconstruct_field(zero, None, np.array([(2.0, 2.0)]), params)


def test_field_grid_exports(tmp_path, square_traces):
    grid = reconstruct_field(square_traces, None, np.array([(2.0, 0.0), (0.0, 2.5)]), P)
    grid.to_csv(tmp_path / "f.csv")
    with open(tmp_path / "f.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "y", "re", "im", "provenance"]
    assert complex(float(rows[1][2]), float(rows[1][3])) == grid.values[0]
    assert rows[2][4] == "j1"
    grid.to_vtk(tmp_path / "f.vtk")
    text = (tmp_path / "f.vtk").read_text()
    assert text.startswith("# vtk DataFile Version 3.0")
    assert "POINTS 2 double" in text and "SCALARS re double 1" in text


def test_far_field_from_exact_trace_stays_in_truncation_envelope():
    for theta in (math.pi / 6, math.pi / 4, math.pi / 3):
        params = WaveParams(K, 1.0, 2.0, theta)
        target = exact_far_field(params)
        for T in (1.4, 1.8, 2.2, 2.6, 3.0):
            basis = build_space(TraceGridSpec(T, 0.01, 3), 1.0)
            exact = TraceVector(basis, np.tile(exact_scaled_trace(params, basis.nodes), (4, 1)))
            err = abs(far_field_axis(exact, 0, params) - target)
            assert err <= 0.05 * math.exp(-K * math.sin(theta) * (T - 1.0))


def test_far_field_of_source_solution():
    # (i/4) sqrt(2 / (pi k)) exp(-i pi/4) = (1 + i) / (4 sqrt(pi k)), mpmath
    assert abs(exact_far_field(P) - 0.0562697697598191 * (1 + 1j)) <= 1e-15


def test_far_field_is_linear(square_traces):
    other = TraceVector(square_traces.basis, np.roll(square_traces.coeffs, 5, axis=1))
    alpha, beta = 2 - 1j, 0.5j
    combo = TraceVector(square_traces.basis, alpha * square_traces.coeffs + beta * other.coeffs)
    expected = alpha * far_field_axis(square_traces, 0, P) + beta * far_field_axis(other, 0, P)
    assert abs(far_field_axis(combo, 0, P) - expected) <= 1e-14


def test_far_field_reference_points():
    basis = build_space(TraceGridSpec(3.0, 0.1, 1), 1.0)
    ones = TraceVector(basis, np.ones((4, basis.ndofs)))
    edge = far_field_axis(ones, 0, P, reference="edge")
    assert far_field_axis(ones, 0, P) == pytest.approx(edge * np.exp(-1j * K), abs=1e-15)
    with pytest.raises(ValueError):
        far_field_axis(ones, 0, P, reference="corner")


@pytest.mark.parametrize(
    ("theta", "Ts", "h", "q"),
    [
        (math.pi / 6, (1.4, 1.8, 2.2, 2.6, 3.0), 0.05, 2),
        # Beyond T = 2.2 the error sits at the discretization floor of this mesh.
        (math.pi / 4, (1.4, 1.8, 2.2), 0.025, 3),
    ],
)
def test_far_field_truncation_rate(theta, Ts, h, q):
    params = WaveParams(K, 1.0, 2.0, theta)
    target = exact_far_field(params)
    errs = []
    for T in Ts:
        traces, _ = solve_dirichlet(params, TraceGridSpec(T, h, q), QuadratureSpec(), hankel_boundary_data(params, 0.25j))
        errs.append(abs(far_field_axis(traces, 0, params) - target))
    rate = -np.polyfit(Ts, np.log(errs), 1)[0]
    assert rate >= 0.8 * K * math.sin(theta)


def test_far_field_report(square_traces):
    report = far_field_report(square_traces, P)
    assert len(report.values) == 4
    assert np.allclose(report.values, report.values[0], rtol=1e-10)
    text = report.to_text()
    assert '"T": 5.0' in text and '"panel_order": 5' in text


def test_source_value_at_unit_distance():
    assert abs(exact_hankel_solution(P, 1.0, 0.0) - SOURCE_AT_ONE) <= 1e-14


def test_source_is_radially_symmetric():
    r = 1.7
    vals = exact_hankel_solution(P, np.array([r, -r, 0, 0]), np.array([0, 0, r, -r]))
    assert np.all(vals == vals[0])


def test_source_is_singular_at_origin():
    with pytest.raises(ValueError):
        exact_hankel_solution(P, 0.0, 0.0)


def test_scaled_trace_matches_source_on_segment():
    s = np.linspace(-0.9, 0.9, 7)
    assert np.allclose(exact_scaled_trace(P, s), exact_hankel_solution(P, 1.0, s), rtol=1e-15)


def test_trace_asymptotics():
    ratio = exact_scaled_trace(P, 40.0) / exact_scaled_trace_asymptotic(P, 40.0)
    assert abs(abs(ratio) - 1) <= 5e-2
    # The complex ratio approaches 1 like 1/s.
    s = np.array([20.0, 40.0, 80.0, 160.0])
    gaps = np.abs(exact_scaled_trace(P, s) / exact_scaled_trace_asymptotic(P, s) - 1)
    assert abs(np.polyfit(np.log(s), np.log(gaps), 1)[0] + 1) <= 0.05


def test_mie_boundary_condition():
    k, radius, inc = K, 0.5, math.pi / 6
    phi = np.linspace(0, 2 * np.pi, 50)
    x1, x2 = radius * np.cos(phi), radius * np.sin(phi)
    total = mie_series_disk(k, radius, inc, x1, x2) + plane_wave(k, inc, x1, x2)
    assert np.max(np.abs(total)) <= 1e-8


@pytest.mark.parametrize(("k", "radius"), [(K, 0.5), (3.0, 1.0), (1.0, 0.3)])
def test_mie_optical_theorem(k, radius):
    phi = np.linspace(0, 2 * np.pi, 4001)[:-1]
    scattered = 2 * np.pi * np.mean(np.abs(mie_far_field(k, radius, 0.0, phi)) ** 2)
    forward = mie_far_field(k, radius, 0.0, np.array([0.0]))[0]
    extinction = -2 * math.sqrt(2 * math.pi / k) * (np.exp(1j * math.pi / 4) * forward).real
    assert abs(scattered - extinction) <= 1e-10 * extinction


@pytest.mark.parametrize("inc", [0.4, 2.1])
def test_mie_rotation(inc):
    x1, x2 = np.array([1.2, -0.7, 2.0]), np.array([0.3, 1.5, -1.1])
    c, s = math.cos(inc), math.sin(inc)
    rotated = mie_series_disk(K, 0.5, inc, x1, x2)
    base = mie_series_disk(K, 0.5, 0.0, c * x1 + s * x2, -s * x1 + c * x2)
    assert np.allclose(rotated, base, rtol=1e-13, atol=0)


def test_mie_far_field_matches_series_at_large_radius():
    r = 4000.0
    direction = 0.7
    near = mie_series_disk(K, 0.5, 0.2, r * math.cos(direction), r * math.sin(direction))
    far = mie_far_field(K, 0.5, 0.2, direction) * np.exp(1j * K * r) / math.sqrt(r)
    assert abs(near - far) <= 1e-3 * abs(far)


def test_mie_errors():
    with pytest.raises(ValueError):
        mie_series_disk(K, 0.5, 0.0, 0.1, 0.1)
    with pytest.raises(ConvergenceError):
        mie_far_field(50.0, 2.0, 0.0, 0.0, max_order=10)


def test_error_norm_examples():
    a = np.array([1.0, 2.0, -3.0 + 1j])
    assert error_norms(a, a) == (0.0, 0.0)
    assert error_norms(2 * a, a)[0] == pytest.approx(1.0)
    b = a.copy()
    b[1] += 0.01
    assert error_norms(b, a)[1] == pytest.approx(0.01 / np.abs(a).max())
    with pytest.raises(ValueError):
        error_norms(a, a[:2])


def test_error_norms_on_field_grids():
    pts = np.array([[1.0, 2.0], [3.0, 4.0]])
    grid = FieldGrid(pts, np.array([1.0 + 0j, np.nan]), ["j0", "outside"])
    assert error_norms(grid, FieldGrid(pts, np.array([1.0 + 0j, 5.0]), ["j0", "j0"])) == (0.0, 0.0)
    with pytest.raises(ValueError):
        error_norms(grid, FieldGrid(pts + 1, grid.values, grid.provenance))
