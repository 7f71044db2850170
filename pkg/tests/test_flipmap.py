import math

import numpy as np
import pytest

import oracles
from flipforge.errors import CapacityError, DomainError, StencilError
from flipforge.flipmap import (
    GAP,
    INSIDE,
    CubeAddress,
    approx_jacobian,
    build_flip,
    cantor_membership,
    cantor_stats,
    eval_depth,
    eval_limit,
    frame_of,
    locate,
    modulus_ratio_scan,
    pair_reflection_error,
    random_centers,
    reflect,
    reflection_defect,
    uniform_step,
)
from flipforge.modulus import build_psi


@pytest.fixture(scope="module")
def flip6(sqrt_scales):
    return build_flip(sqrt_scales, 2, 6)


# -- addressing --------------------------------------------------------------

def test_first_generation_spans(sqrt_scales):
    frames = [frame_of(sqrt_scales, CubeAddress((j,), 2)) for j in range(1, 5)]
    lows = sorted({float(f.origin[0]) for f in frames})
    assert lows == pytest.approx([1 / 16, 9 / 16])
    assert all(f.edge == pytest.approx(oracles.ALPHA_1) for f in frames)


def test_locate_center_is_gap(sqrt_scales):
    for K in (1, 3, 6):
        addr, status = locate(sqrt_scales, 2, np.array([0.5, 0.5]), K)
        assert len(addr) == 0 and status == GAP


def test_locate_first_generation_center(sqrt_scales):
    addr, status = locate(sqrt_scales, 2, np.array([0.25, 0.25]), 2)
    assert len(addr) == 1 and status == GAP


def test_locate_boundary(sqrt_scales):
    addr, status = locate(sqrt_scales, 2, np.array([0.0, 0.3]), 4)
    assert len(addr) == 0 and status == GAP


def test_locate_deep_center(sqrt_scales):
    rng = np.random.default_rng(0)
    for c in random_centers(sqrt_scales, 2, 5, 20, rng):
        addr, status = locate(sqrt_scales, 2, c, 5)
        assert status == INSIDE and len(addr) == 5
        assert frame_of(sqrt_scales, addr).contains(c)


def test_locate_rejects_wrong_dimension(sqrt_scales):
    with pytest.raises(DomainError):
        locate(sqrt_scales, 2, np.zeros(3), 2)


# -- evaluation ----------------------------------------------------------------

def test_boundary_fixed(flip6):
    t = np.linspace(0, 1, 50)
    edge = np.concatenate([np.column_stack([t, np.zeros(50)]), np.column_stack([np.ones(50), t])])
    for K in range(7):
        assert np.array_equal(eval_depth(flip6, edge, K), edge)


def test_first_level_center_swap(flip6):
    y = eval_depth(flip6, np.array([0.25, 0.75]), 1)
    assert np.allclose(y, [0.25, 0.25], atol=1e-9)


def test_round_trip(flip6):
    x = np.random.default_rng(1).random((5000, 2))
    for K in (1, 3, 6):
        back = eval_depth(flip6, eval_depth(flip6, x, K), K, "inverse")
        assert np.abs(back - x).max() <= 1e-8


def test_depth_beyond_build(flip6):
    with pytest.raises(CapacityError):
        eval_depth(flip6, np.array([0.1, 0.1]), 7)


def test_build_needs_long_sequence(sqrt_scales):
    with pytest.raises(CapacityError):
        build_flip(sqrt_scales, 2, sqrt_scales.K)


def test_eval_limit_boundary(flip6):
    y, err = eval_limit(flip6, np.array([1.0, 0.4]), 0.05)
    assert np.array_equal(y, [1.0, 0.4]) and err <= 0.05


def test_eval_limit_depth(flip6):
    _, err = eval_limit(flip6, np.array([0.3, 0.6]), 0.05)
    assert err == pytest.approx(oracles.SQRT2 * oracles.ALPHA_4, rel=1e-9)


def test_eval_limit_too_fine(flip6):
    with pytest.raises(CapacityError):
        eval_limit(flip6, np.array([0.3, 0.6]), 1e-4)


@pytest.mark.parametrize("K", range(6))
def test_uniform_step(flip6, sqrt_scales, K):
    step = uniform_step(flip6, K, 10_000, seed=K)
    assert step <= oracles.SQRT2 * oracles.alpha_sqrt(K) + 1e-12


def test_reflection_defect(flip6, sqrt_scales):
    rng = np.random.default_rng(2)
    worst = max(reflection_defect(flip6, c, 6) for c in random_centers(sqrt_scales, 2, 6, 100, rng))
    assert worst <= oracles.SQRT2 * oracles.ALPHA_6
    assert worst <= oracles.REFLECTION_BOUND_6


def test_reflection_defect_shrinks(sqrt_scales):
    fh = build_flip(sqrt_scales, 2, 6)
    rng = np.random.default_rng(3)
    worst = [max(reflection_defect(fh, c, K) for c in random_centers(sqrt_scales, 2, K, 30, rng))
             for K in range(1, 7)]
    bounds = [oracles.SQRT2 * oracles.alpha_sqrt(K) for K in range(1, 7)]
    assert all(w <= b for w, b in zip(worst, bounds))
    assert np.all(np.diff(bounds) < 0)


def test_midplane_point_has_no_defect(flip6):
    with pytest.raises(DomainError):
        reflection_defect(flip6, np.array([0.25, 0.5]), 3)


def test_pair_reflection(flip6, sqrt_scales):
    rng = np.random.default_rng(4)
    c = random_centers(sqrt_scales, 2, 6, 50, rng)
    sub = random_centers(sqrt_scales, 2, 6, 50, rng)
    bound = 2 * oracles.SQRT2 * oracles.ALPHA_6
    # pairs of depth-6 centres map like the reflection up to one cube diameter each
    for a, b in zip(c, sub):
        assert pair_reflection_error(flip6, a, b, 6) <= bound
    # pairs inside one depth-6 cube
    jitter = sqrt_scales.alphas[7] / 2
    for a in c:
        b = a + rng.uniform(-jitter, jitter, 2)
        assert pair_reflection_error(flip6, a, b, 6) <= bound


def test_reflect():
    assert np.array_equal(reflect(np.array([0.2, 0.1])), [0.2, 0.9])


def test_jacobian_in_tube(flip6):
    # centre of a first-generation cube is translated rigidly at level 0
    assert approx_jacobian(flip6, np.array([0.25, 0.75]), 1) == pytest.approx(1.0, abs=1e-6)


def test_jacobian_collar(flip6):
    x = np.array([flip6.exchanges[0].collar / 2, 0.5])
    assert np.array_equal(eval_depth(flip6, x, 6), x)
    assert approx_jacobian(flip6, x, 6, h=1e-8) == pytest.approx(1.0, abs=1e-6)


def test_jacobian_stencil_error(flip6, sqrt_scales):
    # a point just outside a first-generation cube
    x = np.array([1 / 16 - 1e-9, 0.25])
    with pytest.raises(StencilError):
        approx_jacobian(flip6, x, 2)


# -- Cantor measure ------------------------------------------------------------

def test_cantor_stats(sqrt_scales):
    v1, lim = cantor_stats(sqrt_scales, 2, 1)
    assert v1 == pytest.approx(oracles.CANTOR_K1, rel=1e-12)
    assert lim == pytest.approx(oracles.CANTOR_LIMIT, rel=1e-9)
    vols = [cantor_stats(sqrt_scales, 2, K)[0] for K in range(1, 12)]
    assert np.all(np.diff(vols) < 0)


def test_cantor_membership_depth8(sqrt_scales):
    p, s = cantor_membership(sqrt_scales, 2, 8, 100_000, seed=0)
    exact = (2**8 * oracles.alpha_sqrt(8)) ** 2
    assert abs(p - exact) <= 2 * s


# -- modulus scans -------------------------------------------------------------

def test_scan_needs_enough_pairs(flip6, sqrt_mod):
    with pytest.raises(DomainError):
        modulus_ratio_scan(flip6, sqrt_mod, pairs=100)


def test_scan_profile(flip6, sqrt_mod):
    scan = modulus_ratio_scan(flip6, sqrt_mod, pairs=2000, seed=1, K=3)
    assert scan.max_ratio == max(scan.forward_max, scan.inverse_max)
    assert scan.max_ratio == pytest.approx(max(scan.profile.values()))
    assert min(scan.profile) >= -9


def test_scan_identity_pairs_bounded(sqrt_mod):
    # depth 0 is the identity, so the ratio is t/phi(t) <= sqrt(n)/phi(sqrt(n))
    from flipforge.flipmap import ratio_scan

    ident = lambda z: z  # noqa: E731
    scan = ratio_scan(ident, ident, 2, sqrt_mod, pairs=2000)
    assert scan.max_ratio <= math.sqrt(2) / sqrt_mod(math.sqrt(2)) + 1e-12


def test_psi_flip_spread(sqrt_mod):
    psi = build_psi(sqrt_mod).modulus
    from flipforge.sequences import build_scales, solve_capacity

    seq = build_scales(psi, solve_capacity(psi), K=40)
    fh = build_flip(seq, 2, 6)
    maxima = [modulus_ratio_scan(fh, psi, pairs=2000, seed=0, K=K).max_ratio for K in range(2, 7)]
    assert max(maxima) / min(maxima) <= 2.0
