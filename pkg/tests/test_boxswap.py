import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipforge.boxswap import (
    BoxExchange,
    QuarterSwap,
    RadialScaler,
    box_exchange,
    check_swap_plan,
    jacobians,
    operator_norm_probe,
    quarter_swap,
    scaler_map,
    sobol_points,
)
from flipforge.errors import ConditioningError, DomainError

ALPHAS = (0.26, 0.3, 0.375, 0.45)
UNIT2 = ((0.0, 0.0), (1.0, 1.0))


def top_center(n):
    c = np.full(n, 0.25)
    c[-1] = 0.75
    return c


def bottom_center(n):
    return np.full(n, 0.25)


# -- radial scaler -----------------------------------------------------------

def test_scaler_identity_near_faces():
    s = RadialScaler.for_gamma(0.3, 2)
    rng = np.random.default_rng(1)
    z = rng.uniform(-1, 1, (2000, 2))
    z[:, 0] = np.where(z[:, 0] > 0, 1.0, -1.0) * rng.uniform(1 - s.eps / 2, 1.0, 2000)
    assert np.array_equal(scaler_map(s, z), z)


def test_scaler_half_gamma_is_identity():
    s = RadialScaler.for_gamma(0.5, 3)
    z = np.random.default_rng(2).uniform(-0.5, 0.5, (100, 3))
    assert np.array_equal(s.forward(z), z)


@pytest.mark.parametrize("n", [2, 3])
def test_scaler_maps_inner_cube_to_half_cube(n):
    s = RadialScaler.for_gamma(0.3, n)
    rng = np.random.default_rng(3)
    z = rng.uniform(-0.7, 0.7, (500, n))
    idx = rng.integers(0, n, 500)
    z[np.arange(500), idx] = np.where(rng.random(500) < 0.5, -0.7, 0.7)
    y = s.forward(z)
    assert np.allclose(np.abs(y).max(axis=1), 0.5, atol=1e-9)


def test_scaler_round_trip():
    s = RadialScaler.for_gamma(0.3, 2)
    z = np.random.default_rng(4).uniform(-1, 1, (5000, 2))
    assert np.abs(s.inverse(s.forward(z)) - z).max() <= 1e-12


def test_scaler_radial_derivative_bounds():
    gamma = 0.3
    s = RadialScaler.for_gamma(gamma, 2)
    rho = np.linspace(0.0, 1.0, 20001)
    d = s.radial_derivative(rho)
    assert d.min() >= 0.5
    # recorded constant C(2) for the upper bound C/gamma
    assert d.max() * gamma <= 2.0


def test_scaler_rejects_bad_gamma():
    with pytest.raises(DomainError):
        RadialScaler.for_gamma(0.7, 2)


# -- quarter swap --------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3])
def test_quarter_swap_centers(n):
    assert np.allclose(quarter_swap(top_center(n)), bottom_center(n), atol=1e-12)
    assert np.allclose(quarter_swap(bottom_center(n)), top_center(n), atol=1e-12)


@pytest.mark.parametrize("n", [2, 3])
def test_quarter_swap_translates_tubes(n):
    rng = np.random.default_rng(5)
    x = top_center(n) + rng.uniform(-1 / 40, 1 / 40, (500, n))
    shift = np.zeros(n)
    shift[-1] = 0.5
    assert np.abs(quarter_swap(x) - (x - shift)).max() <= 1e-12


def test_quarter_swap_identity_at_boundary():
    rng = np.random.default_rng(6)
    x = rng.random((4000, 2))
    x[:, 1] = rng.uniform(0.0, 1e-3, 4000)
    assert np.array_equal(quarter_swap(x), x)


def test_quarter_swap_round_trip():
    x = sobol_points(3, 4096, seed=1)
    F = QuarterSwap(3)
    assert np.abs(F.inverse(F.forward(x)) - x).max() <= 1e-12


def test_swap_plan_checks_pass():
    assert check_swap_plan(2)


def test_quarter_swap_needs_two_dimensions():
    with pytest.raises(DomainError):
        QuarterSwap(1)


# -- box exchange --------------------------------------------------------------

@pytest.mark.parametrize("alpha", ALPHAS)
def test_box_exchange_round_trip(alpha):
    F = BoxExchange(alpha, 2)
    x = sobol_points(2, 10_000, seed=2)
    assert np.abs(F.inverse(F.forward(x)) - x).max() <= 1e-8
    assert np.abs(F.forward(F.inverse(x)) - x).max() <= 1e-8


@pytest.mark.parametrize("alpha", ALPHAS + (0.2,))
def test_box_exchange_collar_identity(alpha):
    F = BoxExchange(alpha, 2)
    rng = np.random.default_rng(7)
    x = rng.random((20_000, 2))
    axis = rng.integers(0, 2, 20_000)
    side = rng.random(20_000) < 0.5
    depth = rng.uniform(0.0, F.collar, 20_000)
    x[np.arange(20_000), axis] = np.where(side, depth, 1.0 - depth)
    assert np.array_equal(F.forward(x), x)
    assert np.array_equal(F.inverse(x), x)


@pytest.mark.parametrize("alpha", ALPHAS)
def test_box_exchange_center_swap(alpha):
    assert np.abs(box_exchange(alpha, top_center(2)) - bottom_center(2)).max() <= 1e-9


def test_box_exchange_three_eighths_example():
    assert np.abs(box_exchange(0.375, top_center(3)) - bottom_center(3)).max() <= 1e-9


def test_small_alpha_uses_quarter():
    x = sobol_points(2, 512, seed=3)
    assert np.array_equal(box_exchange(0.2, x), box_exchange(0.25, x))


@pytest.mark.parametrize("alpha", [0.3, 0.45])
def test_box_exchange_translates_cubes(alpha):
    F = BoxExchange(alpha, 2)
    rng = np.random.default_rng(8)
    half = alpha / 2 + F.beta / 10
    x = top_center(2) + rng.uniform(-half, half, (500, 2))
    assert np.abs(F.forward(x) - (x - [0.0, 0.5])).max() <= 1e-9


def test_box_exchange_rejects_alpha():
    with pytest.raises(DomainError):
        BoxExchange(0.5, 2)


def test_norm_score_shape():
    scores = []
    for a in ALPHAS:
        F = BoxExchange(a, 2)
        s_max, s_inv = operator_norm_probe(F.forward, UNIT2, samples=1024)
        scores.append((s_max + s_inv) * (1 - 2 * a) / 4)
    assert max(scores) / min(scores) < 4.0


@settings(max_examples=40, deadline=None)
@given(x=st.lists(st.floats(0.0, 1.0), min_size=2, max_size=2),
       alpha=st.sampled_from(ALPHAS))
def test_box_exchange_maps_cube_to_itself(x, alpha):
    y = box_exchange(alpha, np.array(x))
    assert np.all(y >= -1e-12) and np.all(y <= 1 + 1e-12)


# -- probes --------------------------------------------------------------------

def test_probe_identity():
    s_max, s_inv = operator_norm_probe(lambda x: x, UNIT2, samples=256)
    assert s_max == pytest.approx(1.0, abs=1e-9)
    assert s_inv == pytest.approx(1.0, abs=1e-9)


def test_probe_diagonal():
    s_max, s_inv = operator_norm_probe(lambda x: x * [2.0, 1.0], UNIT2, samples=256)
    assert s_max == pytest.approx(2.0, abs=1e-9)
    assert s_inv == pytest.approx(1.0, abs=1e-9)


def test_probe_singular_map():
    with pytest.raises(ConditioningError):
        operator_norm_probe(lambda x: x * [1.0, 0.0], UNIT2, samples=64)


def test_jacobian_of_affine_map():
    A = np.array([[1.0, 2.0], [-3.0, 0.5]])
    J = jacobians(lambda x: x @ A.T, np.random.default_rng(9).random((10, 2)), 1e-6)
    assert np.allclose(J, A, atol=1e-8)
