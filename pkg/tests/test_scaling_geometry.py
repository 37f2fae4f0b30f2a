import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsm.scaling_geometry import (
    ParameterError,
    WaveParams,
    complex_distance,
    global_coords,
    in_omega_theta,
    local_coords,
    principal_sqrt,
    tau,
    tau_prime,
)

P6 = WaveParams(k=2 * math.pi, a=1.0, b=2.0, theta=math.pi / 6)
P4 = WaveParams(k=2 * math.pi, a=1.0, b=2.0, theta=math.pi / 4)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(k=0.0, a=1.0, b=2.0, theta=0.5),
        dict(k=1.0, a=0.0, b=2.0, theta=0.5),
        dict(k=1.0, a=1.0, b=1.0, theta=0.5),
        dict(k=1.0, a=1.0, b=2.0, theta=0.0),
        dict(k=1.0, a=1.0, b=2.0, theta=math.pi / 2),
        dict(k=float("nan"), a=1.0, b=2.0, theta=0.5),
    ],
)
def test_invalid_parameters(kwargs):
    with pytest.raises(ParameterError):
        WaveParams(**kwargs)


def test_general_case_needs_small_angle():
    WaveParams(1.0, 0.8, 1.2, math.pi / 6).require_general_case()
    with pytest.raises(ParameterError):
        WaveParams(1.0, 0.8, 1.2, math.pi / 4).require_general_case()


def test_tau_identity_segment():
    assert tau(P6, 0.5) == 0.5 + 0j


def test_tau_outer_branch():
    assert abs(tau(P6, 2.0) - (1.8660254 + 0.5j)) < 1e-7
    assert abs(tau(P6, 2.0) - (1 + cmath.exp(1j * math.pi / 6))) < 1e-15


@pytest.mark.parametrize("s", [0.3, 1.7, 42.0])
def test_tau_is_odd(s):
    assert tau(P6, -s) == -tau(P6, s)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_tau_symmetry_property(s):
    assert tau(P6, -s) == -tau(P6, s)


def test_imaginary_part_grows_linearly():
    s = np.linspace(1.0, 40.0, 200)
    im = np.imag(tau(P6, s))
    assert np.all(np.diff(im) >= 0)
    assert np.allclose(im, (s - 1.0) * math.sin(math.pi / 6), rtol=0, atol=1e-13)


def test_tau_prime_values():
    assert tau_prime(P4, 0.0) == 1
    assert abs(tau_prime(P4, 3.0) - (0.70710678 + 0.70710678j)) < 1e-8
    assert tau_prime(P4, -3.0) == tau_prime(P4, 3.0)


def test_local_coordinates():
    assert np.allclose(local_coords(0, 3, 1), (3, 1))
    assert np.allclose(local_coords(1, 0, 5), (5, 0))
    assert np.allclose(local_coords(2, 0.3, -1.7), (-0.3, 1.7))
    assert np.allclose(local_coords(5, 0, 5), local_coords(1, 0, 5))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_rotations_are_orthogonal(j, x1, x2):
    y1, y2 = local_coords(j, x1, x2)
    assert abs(math.hypot(y1, y2) - math.hypot(x1, x2)) <= 1e-15 * max(1.0, math.hypot(x1, x2))
    back = global_coords(j, y1, y2)
    assert back[0] == x1 and back[1] == x2


def test_principal_sqrt():
    assert principal_sqrt(-1 + 0j) == 1j
    assert principal_sqrt(complex(-1.0, -0.0)) == 1j
    assert principal_sqrt(4) == 2
    assert abs(principal_sqrt(2j) - (1 + 1j)) < 1e-15


def test_complex_distance_values():
    assert complex_distance(3, 4) == 5
    assert abs(complex_distance(0, 2 + 1j) - (2 + 1j)) < 1e-15


def test_distance_lower_bound_example():
    z = 2 * cmath.exp(1j * math.pi / 3)
    r = complex_distance(1.0, z)
    assert abs(r) ** 2 >= abs(math.cos(math.pi / 3)) * (1 + abs(z) ** 2)


def _path_samples(params, n=4000, seed=1):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0, 20, n) * np.exp(1j * rng.uniform(0, params.theta, n))
    s = rng.uniform(-50, 50, n)
    return w, tau(params, s) - params.a


@pytest.mark.parametrize("theta", [math.pi / 6, math.pi / 4, math.pi / 3])
def test_distance_lower_bound_on_path(theta):
    params = WaveParams(2 * math.pi, 1.0, 2.0, theta)
    w, z = _path_samples(params)
    r = complex_distance(w, z)
    bound = math.cos(theta) ** 2 * (np.abs(w) ** 2 + np.abs(z) ** 2)
    assert np.all(np.abs(r) ** 2 >= bound * (1 - 1e-12))


@pytest.mark.parametrize("theta", [math.pi / 6, math.pi / 4, math.pi / 3])
def test_imaginary_growth_with_finite_offset(theta):
    # The fitted offset stays below a sin(theta) on every sample tried.
    params = WaveParams(2 * math.pi, 1.0, 2.0, theta)
    for seed in (1, 2, 3):
        w, z = _path_samples(params, n=20000, seed=seed)
        r = complex_distance(w, z)
        lower = np.cos(theta - np.angle(w)) * w.imag
        assert np.all(r.imag >= lower - params.a * math.sin(theta))


def test_region_membership():
    assert in_omega_theta(0, 2.0, 0.0, P6)
    assert not in_omega_theta(0, 1.01, 10.0, P4)


def test_outer_square_lies_in_region():
    params = WaveParams(2 * math.pi, 0.8, 1.2, math.pi / 6)
    t = np.linspace(-1.2, 1.2, 241)
    for j in range(4):
        x1, x2 = global_coords(j, np.full_like(t, 1.2), t)
        assert np.all(in_omega_theta(j, x1, x2, params))


def test_region_margin_shrinks():
    x1, x2 = 1.5, 1.0
    assert in_omega_theta(0, x1, x2, P6)
    assert not in_omega_theta(0, x1, x2, P6, margin=1.0)
