"""Properties of the convex generators and their conjugates."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dicetab import FGenerator, conjugate_pair_check, make_generator
from dicetab.divergence import GENERATOR_NAMES, f_star0_curvature

import oracles

ALL_NAMES = sorted(GENERATOR_NAMES)

# Keep the argument range well inside the KL exponent clamp so the closed
# forms are exact, not saturated.
xs = st.floats(min_value=1e-3, max_value=50.0)
ys = st.floats(min_value=-20.0, max_value=20.0)


@pytest.fixture(params=ALL_NAMES)
def gen(request):
    return make_generator(request.param)


def test_known_names_build_and_unknown_raises():
    for name in GENERATOR_NAMES:
        g = make_generator(name)
        assert isinstance(g, FGenerator)
        assert g.name == name
    with pytest.raises(ValueError, match="unknown generator"):
        make_generator("tv")


def test_f_vanishes_at_one(gen):
    assert abs(float(gen.f(1.0))) <= 1e-15


def test_conjugate_pair_identity_on_grid(gen):
    # Absolute tolerance where the conjugate stays O(1)...
    grid = np.linspace(-20.0, 3.0, 2301)
    assert conjugate_pair_check(gen, grid) <= 1e-10
    # ... and relative tolerance where the KL family grows like exp(y).
    big = np.linspace(3.0, 20.0, 1701)
    x_star = np.maximum(0.0, gen.f_prime_inverse(big))
    err = np.abs(gen.f_star0(big) - (x_star * big - gen.f(x_star)))
    scale = np.maximum(1.0, np.abs(gen.f_star0(big)))
    assert np.max(err / scale) <= 1e-12


@given(x1=xs, x2=xs, t=st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=200, deadline=None)
def test_f_is_convex(x1, x2, t):
    for name in ALL_NAMES:
        g = make_generator(name)
        mid = t * x1 + (1.0 - t) * x2
        lhs = float(g.f(mid))
        rhs = t * float(g.f(x1)) + (1.0 - t) * float(g.f(x2))
        assert lhs <= rhs + 1e-9 * (1.0 + abs(rhs))


@given(x=st.floats(min_value=0.05, max_value=50.0))
@settings(max_examples=100, deadline=None)
def test_f_prime_matches_finite_differences(x):
    for name in ALL_NAMES:
        g = make_generator(name)
        h = 1e-6 * max(1.0, x)
        fd = oracles.fd_derivative(lambda v: float(g.f(v)), x, h)
        assert float(g.f_prime(x)) == pytest.approx(fd, abs=1e-5, rel=1e-5)


@given(y=ys)
@settings(max_examples=100, deadline=None)
def test_f_star0_prime_matches_finite_differences(y):
    for name in ALL_NAMES:
        g = make_generator(name)
        # Central differences are only valid away from the clamp kink.
        kink = g.f_prime_at_zero_plus
        if np.isfinite(kink) and abs(y - kink) < 1e-3:
            continue
        if name == "soft_chi2" and abs(y) < 1e-3:
            continue  # piecewise boundary of this generator
        fd = oracles.fd_derivative(lambda v: float(g.f_star0(v)), y, 1e-6)
        assert float(g.f_star0_prime(y)) == pytest.approx(fd, abs=1e-5, rel=1e-5)


@given(y=ys, x=st.floats(min_value=0.0, max_value=50.0))
@settings(max_examples=200, deadline=None)
def test_fenchel_young_inequality_and_tightness(y, x):
    for name in ALL_NAMES:
        g = make_generator(name)
        # f*0 dominates every x >= 0 ...
        assert float(g.f_star0(y)) >= x * y - float(g.f(x)) - 1e-9
        # ... and is attained at the conjugate slope.
        x_star = float(g.f_star0_prime(y))
        attained = x_star * y - float(g.f(x_star))
        assert float(g.f_star0(y)) == pytest.approx(attained, abs=1e-9, rel=1e-9)


def test_brute_force_grid_conjugate(gen):
    """Grid search over x recovers f*0 up to the grid resolution."""
    y = np.linspace(-5.0, 5.0, 101)
    x_grid = np.linspace(0.0, 60.0, 360_001)
    brute = oracles.brute_conjugate(gen, y, x_grid)
    exact = gen.f_star0(y)
    assert np.all(brute <= exact + 1e-9)
    assert np.max(exact - brute) <= 1e-6


@given(x=st.floats(min_value=0.05, max_value=50.0))
@settings(max_examples=100, deadline=None)
def test_f_prime_inverse_is_inverse(x):
    for name in ALL_NAMES:
        g = make_generator(name)
        y = float(g.f_prime(x))
        assert float(g.f_prime_inverse(y)) == pytest.approx(x, rel=1e-9, abs=1e-9)


def test_conjugate_clamp_behavior():
    chi2 = make_generator("chi2")
    sql = make_generator("sql_chi2")
    kl = make_generator("kl")
    below = np.array([-1.5, -2.0, -10.0])
    assert np.all(chi2.f_star0_prime(below) == 0.0)
    assert np.all(sql.f_star0_prime(below) == 0.0)
    assert np.all(kl.f_star0_prime(below) > 0.0)
    # chi2's conjugate is flat at its minimum below the kink.
    assert np.all(chi2.f_star0(below) == -0.5)


def test_curvature_matches_slope_finite_differences(gen):
    pts = np.array([-3.0, -0.7, 0.4, 1.3, 4.0])
    kink = gen.f_prime_at_zero_plus
    curv = f_star0_curvature(gen.name)
    for y in pts:
        if np.isfinite(kink) and abs(y - kink) < 5e-2:
            continue
        if gen.name == "soft_chi2" and abs(y) < 5e-2:
            continue
        fd = oracles.fd_derivative(lambda v: float(gen.f_star0_prime(v)), y, 1e-6)
        assert float(curv(y)) == pytest.approx(fd, abs=1e-5, rel=1e-5)


def test_curvature_unknown_name_raises():
    with pytest.raises(ValueError, match="unknown generator"):
        f_star0_curvature("hellinger")


def test_generators_accept_arrays(gen):
    y = np.linspace(-3, 3, 7)
    for fn in (gen.f_star0, gen.f_star0_prime):
        out = fn(y)
        assert np.shape(out) == y.shape
    x = np.linspace(0.1, 3, 7)
    for fn in (gen.f, gen.f_prime):
        out = fn(x)
        assert np.shape(out) == x.shape


def test_kl_exponent_clamp_keeps_values_finite():
    kl = make_generator("kl")
    huge = np.array([1e4, 1e6])
    assert np.all(np.isfinite(kl.f_star0(huge)))
    assert np.all(np.isfinite(kl.f_star0_prime(huge)))
