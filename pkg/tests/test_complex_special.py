import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsm.complex_special import (
    ASYMPTOTIC_RADIUS,
    SERIES_RADIUS,
    DomainError,
    bessel_jy_series,
    branch_of,
    hankel1,
    hankel1_asymptotic_scaled,
    hankel1_laguerre_scaled,
    hankel1_scaled,
)

# exp(-i z) H^(1)_n(z), mpmath at 100 digits.
SCALED_ORACLE = {
    (0, 9 + 7j): 0.10137769595623389 - 0.2116649812071628j,
    (0, 25 + 40j): 0.03180176686215286 - 0.11146645470779608j,
    (0, 8 + 30j): 0.0183918381893097 - 0.1414538966060977j,
    (0, 10 + 100j): 0.003950073486739925 - 0.07939405510513259j,
    (0, 40 + 1j): 0.08777822693360254 - 0.09056370617558332j,
    (0, 15 - 3j): 0.15692254691471946 - 0.13078512168841494j,
    (1, 9 + 7j): -0.21398087122484352 - 0.11126178498267951j,
    (1, 25 + 40j): -0.11228855253443379 - 0.032707555054894956j,
    (1, 8 + 30j): -0.14356426266219727 - 0.019254207673789974j,
    (1, 10 + 100j): -0.07978419510389222 - 0.00400869308103088j,
    (1, 40 + 1j): -0.08950300140619406 - 0.08894327664084006j,
    (1, 15 - 3j): -0.12495650092358525 - 0.16021124426423633j,
    (2, 9 + 7j): -0.14298785497011618 + 0.219303597110698j,
    (2, 25 + 40j): -0.03550110710085546 + 0.11476879468532863j,
    (2, 8 + 30j): -0.021973042196594506 + 0.15006985971496822j,
    (2, 10 + 100j): -0.0041874420529066595 + 0.08096600215059375j,
    (2, 40 + 1j): -0.0923616914344003 + 0.08623112895606126j,
    (2, 15 - 3j): -0.168834630513532 + 0.10704120573342092j,
}

# H^(1)_n(z), mpmath at 30 digits.
UNSCALED_ORACLE = {
    (0, 1): 0.7651976865579666 + 0.08825696421567696j,
    (0, 2 + 1j): 0.11221517779606792 + 0.15428168525601327j,
    (0, 0.3 - 0.2j): 1.3973806472899706 - 0.6649464670198474j,
    (0, 3 + 2j): -0.017793270303994597 + 0.05281940449715538j,
    (1, 1): 0.4400505857449335 - 0.7812128213002887j,
    (1, 2 + 1j): 0.19121655078657473 - 0.09624813198824855j,
    (1, 0.3 - 0.2j): 1.086524602963205 - 1.7596664070968744j,
    (1, 3 + 2j): 0.055067595337314715 + 0.024867281224750938j,
    (2, 1): 0.11490348493190047 - 1.6506826068162543j,
    (2, 2 + 1j): 0.0022588100378924465 - 0.307766811161242j,
    (2, 0.3 - 0.2j): 9.031706465145975 - 4.113438172002018j,
    (2, 3 + 2j): 0.050860554682678596 - 0.05828607326644409j,
}

right_half_plane = st.complex_numbers(min_magnitude=0.05, max_magnitude=60, allow_nan=False, allow_infinity=False).filter(
    lambda z: z.real > 1e-3
)


def test_hankel_at_one():
    assert abs(hankel1(0, 1 + 0j) - (0.76519769 + 0.08825696j)) < 1e-8


@pytest.mark.parametrize(("key", "expected"), sorted(UNSCALED_ORACLE.items(), key=str))
def test_unscaled_against_mpmath(key, expected):
    order, z = key
    assert abs(hankel1(order, z) - expected) <= 1e-13 * abs(expected)


@pytest.mark.parametrize(("key", "expected"), sorted(SCALED_ORACLE.items(), key=str))
def test_scaled_against_mpmath(key, expected):
    order, z = key
    assert abs(hankel1_scaled(order, z) - expected) <= 1e-13 * abs(expected)


def test_recurrence_at_two_plus_i():
    z = 2 + 1j
    assert abs(hankel1(2, z) - (2 / z * hankel1(1, z) - hankel1(0, z))) < 1e-14


@settings(max_examples=300, deadline=None)
@given(right_half_plane)
def test_recurrence_property(z):
    h0, h1, h2 = (hankel1_scaled(n, z) for n in range(3))
    scale = max(abs(h0), abs(h1), abs(h2))
    assert abs(h2 - 2 / z * h1 + h0) <= 1e-11 * scale


def test_derivative_by_central_differences():
    step = 1e-5
    x, y = np.meshgrid(np.linspace(0.1, 20, 25), np.linspace(0, 20, 25))
    z = (x + 1j * y).ravel()
    # d/dz H0 = -H1
    dh0 = (hankel1(0, z + step) - hankel1(0, z - step)) / (2 * step)
    rel = np.abs(-dh0 - hankel1(1, z)) / np.abs(hankel1(1, z))
    assert rel.max() <= 1e-6


def test_scaled_large_imaginary_argument():
    z = 10 + 100j
    value = hankel1_scaled(0, z)
    assert np.isfinite(value)
    t = abs(z)
    assert abs(value) <= 1.0 * (math.log(1 + 1 / t) + (1 + t) ** -0.5)


def test_scaled_matches_definition_at_real_argument():
    assert abs(hankel1_scaled(1, 1 + 0j) - np.exp(-1j) * hankel1(1, 1 + 0j)) < 1e-15


def test_large_argument_behaviour():
    t = 200.0
    lead = math.sqrt(2 / (math.pi * t)) * np.exp(-1j * math.pi / 4)
    assert abs(hankel1_scaled(0, t) / lead - 1) <= 1e-2


def _bound_grid(n, extent):
    x = np.geomspace(1e-3, extent, n)
    y = np.concatenate([-np.geomspace(1e-3, extent, n // 2)[::-1], np.geomspace(1e-3, extent, n // 2)])
    z = (x[:, None] + 1j * y[None, :]).ravel()
    return z, np.abs(z)


def test_order_one_bound_has_stable_constant():
    fits = []
    for n, extent in ((100, 30.0), (200, 60.0)):
        z, r = _bound_grid(n, extent)
        fits.append(np.max(np.abs(hankel1_scaled(1, z)) / (1 / r + (1 + r) ** -0.5)))
    assert fits[0] < 1.0
    assert abs(fits[1] - fits[0]) <= 0.1 * fits[0]


def test_order_zero_bound_has_stable_constant():
    fits = []
    for n, extent in ((100, 30.0), (200, 60.0)):
        z, r = _bound_grid(n, extent)
        fits.append(np.max(np.abs(hankel1_scaled(0, z)) / (np.log(1 + 1 / r) + (1 + r) ** -0.5)))
    assert fits[0] < 1.0
    assert abs(fits[1] - fits[0]) <= 0.1 * fits[0]


@pytest.mark.parametrize("order", [0, 1, 2])
def test_real_argument_gives_real_bessel_pair(order):
    t = np.linspace(0.1, 11.9, 60)
    j, y = bessel_jy_series(order, t)
    assert np.max(np.abs(np.imag(j))) <= 1e-14
    assert np.max(np.abs(np.imag(y))) <= 1e-14


def test_series_at_one():
    j, y = bessel_jy_series(0, 1.0)
    assert abs(j - 0.76519769) < 1e-8
    assert abs(y - 0.08825696) < 1e-8
    assert abs(j - 0.7651976865579666) < 1e-15
    assert abs(y - 0.08825696421567696) < 1e-15


def test_series_order_one_vanishes_at_origin():
    j, _ = bessel_jy_series(1, 1e-300)
    assert abs(j) < 1e-299


def test_wronskian():
    z = 3 + 2j
    (j0, y0), (j1, y1) = bessel_jy_series(0, z), bessel_jy_series(1, z)
    assert abs(j1 * y0 - j0 * y1 - 2 / (math.pi * z)) <= 1e-11


def test_series_domain_is_enforced():
    with pytest.raises(DomainError):
        bessel_jy_series(0, SERIES_RADIUS + 1)


def test_left_half_plane_is_rejected():
    with pytest.raises(DomainError):
        hankel1_scaled(0, -1 + 1j)


@pytest.mark.parametrize("order", [0, 1, 2])
def test_branches_agree_on_annulus(order):
    r = np.linspace(12, 14, 9)
    phase = np.linspace(-1.2, 1.4, 14)
    z = (r[:, None] * np.exp(1j * phase[None, :])).ravel()
    asym = hankel1_asymptotic_scaled(order, z)
    lag = hankel1_laguerre_scaled(order, z[z.imag >= 0])
    ref = hankel1_scaled(order, z)
    assert np.max(np.abs(asym - ref) / np.abs(ref)) <= 1e-9
    assert np.max(np.abs(lag - ref[z.imag >= 0]) / np.abs(ref[z.imag >= 0])) <= 1e-13


@pytest.mark.parametrize("order", [0, 1, 2])
def test_expansion_is_exact_at_crossover(order):
    r = np.linspace(ASYMPTOTIC_RADIUS - 2, ASYMPTOTIC_RADIUS + 2, 9)
    phase = np.linspace(-1.4, 1.4, 15)
    z = (r[:, None] * np.exp(1j * phase[None, :])).ravel()
    asym = hankel1_asymptotic_scaled(order, z)
    lag = hankel1_laguerre_scaled(order, z)
    assert np.max(np.abs(asym - lag) / np.abs(lag)) <= 1e-13


def test_branch_layout():
    assert branch_of(1 + 0.5j) == 0
    assert branch_of(6 + 0j) == 1
    assert branch_of(1 + 5j) == 1
    assert branch_of(ASYMPTOTIC_RADIUS + 1) == 2
    assert branch_of(0.5 - 15j) == 2


def test_scalar_in_scalar_out():
    assert np.ndim(hankel1(0, 2.0)) == 0
    assert hankel1(0, np.array([2.0, 3.0])).shape == (2,)


def test_bessel_series_matches_scipy_on_grid():
    from scipy import special

    x, y = np.meshgrid(np.linspace(0.05, 3.9, 20), np.linspace(-3, 0.9, 20))
    z = (x + 1j * y).ravel()
    for order in (0, 1, 2):
        j, yv = bessel_jy_series(order, z)
        assert np.max(np.abs(j - special.jv(order, z)) / np.abs(special.jv(order, z))) <= 1e-12
        assert np.max(np.abs(yv - special.yv(order, z)) / np.abs(special.yv(order, z))) <= 1e-12


def test_scaled_matches_scipy_over_half_plane():
    from scipy import special

    x = np.geomspace(1e-3, 80, 120)
    y = np.concatenate([-np.geomspace(1e-3, 80, 60)[::-1], np.geomspace(1e-3, 80, 60)])
    z = (x[:, None] + 1j * y[None, :]).ravel()
    for order in (0, 1, 2):
        ref = special.hankel1e(order, z)
        rel = np.abs(hankel1_scaled(order, z) - ref) / np.abs(ref)
        assert rel.max() <= 1e-10
        assert np.median(rel) <= 1e-14
