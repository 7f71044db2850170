import json
import math

import numpy as np
import pytest

import oracles
from flipforge.errors import BoundError, DomainError, ValidationError
from flipforge.flipmap import random_centers
from flipforge.refine import (
    PATCH_INNER,
    PATCH_OUTER,
    Level,
    RefinementState,
    TangentPatch,
    _lattice,
    ball_volume,
    bump,
    choose_domain,
    choose_rho,
    cover_intervals,
    dist_to_cover,
    estimate_bounds,
    implant_edge_cap,
    initial_state,
    lemma_radius_bound,
    local_bounds,
    negative_measure,
    omega_samples,
    patch_eval,
    tangent_patch,
    validate_patch,
)


@pytest.fixture(scope="module")
def base_state():
    return initial_state(pairs=2000)


def affine(A, b):
    A = np.asarray(A, dtype=float)
    return lambda x: np.atleast_2d(x) @ A.T + b


# -- bump and lemma arithmetic ---------------------------------------------------

def test_bump_profile():
    t = np.linspace(0, 1.5, 301)
    b = bump(t)
    assert np.all(b[t <= PATCH_INNER] == 0.0)
    assert np.all(b[t >= PATCH_OUTER] == 1.0)
    assert np.all(np.diff(b) >= 0)


def test_lemma_radius_example():
    assert lemma_radius_bound(2.0, 3) == pytest.approx(oracles.LEMMA_RADIUS_M2_L3, rel=1e-15)


def test_ball_volume():
    assert ball_volume(2, 0.5) == pytest.approx(math.pi / 4)
    assert ball_volume(3, 1.0) == pytest.approx(4 * math.pi / 3)


# -- tangent patch ----------------------------------------------------------------

def test_affine_patch_is_exact():
    G = affine([[1.2, 0.3], [-0.1, 0.9]], np.array([0.05, -0.02]))
    p = tangent_patch(G, [0.5, 0.5], 1e-4, 1)
    x = 0.5 + 1e-4 * np.random.default_rng(0).uniform(-1, 1, (200, 2))
    assert np.allclose(p.forward(x), G(x), atol=1e-13)
    assert np.allclose(p.inverse(G(x)), x, atol=1e-12)


def test_patch_regions():
    G = lambda x: np.atleast_2d(x) + 0.3 * np.atleast_2d(x) ** 2  # noqa: E731
    r = 1e-3
    c = np.array([0.4, 0.6])
    p = tangent_patch(G, c, r, 1, enforce_bound=False)
    rng = np.random.default_rng(1)
    u = rng.normal(size=(400, 2))
    u /= np.linalg.norm(u, axis=1)[:, None]
    inner = c + u * r * rng.uniform(0, 0.6, (400, 1))
    outer = c + u * r * rng.uniform(0.8, 1.5, (400, 1))
    assert np.allclose(p.forward(inner), p.T(inner), rtol=0, atol=1e-15)
    assert np.array_equal(p.forward(outer), G(outer))
    mid = c + u * r * rng.uniform(0.6, 0.8, (400, 1))
    assert np.abs(p.inverse(p.forward(mid)) - mid).max() <= 1e-10
    assert np.allclose(patch_eval(p, inner[0]), p.T(inner[:1])[0])


def test_patch_radius_bound():
    G = lambda x: np.atleast_2d(x) + 0.3 * np.atleast_2d(x) ** 2  # noqa: E731
    with pytest.raises(BoundError):
        tangent_patch(G, [0.5, 0.5], 0.05, 3)


def test_patch_validation_rejects_broken_patch():
    G = affine(np.eye(2), 0.0)
    bad = TangentPatch(np.array([0.5, 0.5]), 1e-3, 1, np.array([0.6, 0.5]), np.eye(2), 3.0, G)
    with pytest.raises(ValidationError):
        validate_patch(bad)


def test_local_bounds_identity():
    J0, M, flat = local_bounds(lambda x: np.atleast_2d(x), np.array([[0.3, 0.3]]), 1e-3)
    assert np.allclose(J0[0], np.eye(2), atol=1e-8)
    assert M[0] == pytest.approx(3.0, abs=1e-6)
    assert flat[0] <= 1e-7


# -- covers and domain ------------------------------------------------------------

def test_cover_intervals(sqrt_scales):
    o, e = cover_intervals(sqrt_scales, 1)
    assert o.tolist() == pytest.approx([1 / 16, 9 / 16])
    assert e == pytest.approx(0.375)
    o, e = cover_intervals(sqrt_scales, 3)
    assert len(o) == 8 and np.all(np.diff(o) > e)


def test_dist_to_cover(sqrt_scales):
    o, e = cover_intervals(sqrt_scales, 1)
    x = np.array([[0.25, 0.25], [0.5, 0.25], [0.5, 0.5]])
    d = dist_to_cover(x, o, e)
    assert d[0] == 0.0
    assert d[1] == pytest.approx(1 / 16)
    assert d[2] == pytest.approx(math.hypot(1 / 16, 1 / 16))


def test_domain_complement(base_state):
    dom = choose_domain(base_state, samples=20_000)
    assert dom.complement == pytest.approx(oracles.COMPLEMENT_C1, rel=1e-9)
    assert dom.measure > 0.75 * dom.complement
    assert dom.image_fraction - 2 * dom.image_sigma > 0.75


def test_domain_avoids_cantor_set(base_state, sqrt_scales):
    dom = choose_domain(base_state, samples=20_000)
    x = omega_samples(dom, 2000)
    assert np.all(dom.contains(x))
    o, e = cover_intervals(sqrt_scales, dom.m)
    assert np.all(dist_to_cover(x, o, e) > 0)
    centers = random_centers(sqrt_scales, 2, 8, 200, np.random.default_rng(2))
    assert not np.any(dom.contains(centers))


def test_domain_too_shallow(base_state):
    from flipforge.refine import DomainRetry

    with pytest.raises(DomainRetry) as e:
        choose_domain(base_state, m=1, samples=1000)
    assert e.value.suggested_depth == 2


# -- bounds and radius -------------------------------------------------------------

def test_identity_bounds():
    from flipforge.refine import Domain

    class Identity:
        n = 2

        class evaluator:
            @staticmethod
            def truncated(depth):
                return Identity.evaluator

            @staticmethod
            def forward(x):
                return np.atleast_2d(x).copy()

    o = np.array([0.0])
    dom = Domain(2, 1, 0.1, (o, 0.0), (o, 0.0), np.zeros((0, 2)), np.zeros(0), 0.64, 1.0)
    b = estimate_bounds(Identity, dom, samples=64)
    assert b.M == pytest.approx(oracles.IDENTITY_M, abs=1e-4)


def test_bounds_grow_with_samples(base_state):
    dom = choose_domain(base_state, samples=20_000)
    small = estimate_bounds(base_state, dom, samples=64)
    large = estimate_bounds(base_state, dom, samples=256)
    assert large.M >= small.M


def test_rho_first_bound(sqrt_mod):
    psi = lambda t: np.zeros_like(np.asarray(t, dtype=float))  # noqa: E731
    rc = choose_rho(1, 2.0, 1.0, sqrt_mod, psi, 1.0)
    assert rc.bounds[0] == pytest.approx(oracles.RHO_FIRST_K1_M2, rel=1e-15)


def test_rho_second_bound(sqrt_mod):
    psi = lambda t: np.zeros_like(np.asarray(t, dtype=float))  # noqa: E731
    rc = choose_rho(1, 0.0, 4.0, sqrt_mod, psi, 1.0)
    assert rc.bounds[1] == pytest.approx(oracles.RHO_SECOND_K1_L4, rel=1e-12)
    assert rc.bounds[1] < oracles.RHO_SECOND_K1_L4


def test_rho_decreases_with_step(sqrt_mod, base_state):
    psi = base_state.models.psi
    C = base_state.constants["C_psi"]
    rhos = [choose_rho(k, 10.0, 20.0, sqrt_mod, psi, C).rho for k in (1, 2, 3)]
    assert rhos[0] > rhos[1] > rhos[2] > 0


def test_implant_cap_monotone(base_state):
    md = base_state.models
    caps = implant_edge_cap(md, base_state.constants["C_psi"], 10.0, np.array([1.0, 2.0, 4.0]))
    assert np.all(np.diff(caps) <= 0) and caps[0] > 0


# -- packing arithmetic -------------------------------------------------------------

def test_square_lattice_share():
    r = 1 / 64
    X = _lattice(3, 0.0, 1.0, r)
    assert len(X) * ball_volume(3, r) == pytest.approx(oracles.CUBIC_LATTICE_3D, rel=1e-12)
    assert oracles.CUBIC_LATTICE_3D < 2 / 3 < oracles.SQUARE_LATTICE_2D


def test_hex_lattice_disjoint():
    r = 0.01
    X = _lattice(2, 0.0, 1.0, r)
    from scipy.spatial.distance import pdist

    assert pdist(X).min() >= 2 * r - 1e-12
    assert len(X) * ball_volume(2, r) > oracles.SQUARE_LATTICE_2D * 0.95


# -- levels and state ---------------------------------------------------------------

def test_level_find_and_geometry():
    lev = Level(np.array([[0.2, 0.2], [0.7, 0.7]]), np.array([0.1, 0.05]),
                np.zeros((2, 2)), np.tile(np.eye(2), (2, 1, 1)))
    assert lev.find(np.array([[0.25, 0.2], [0.7, 0.74], [0.5, 0.5]])).tolist() == [0, 1, -1]
    assert lev.edges == pytest.approx(np.array([0.1, 0.05]) / math.sqrt(2))
    # the inscribed cube fits in the half-radius ball
    assert np.all(lev.edges * math.sqrt(2) / 2 <= lev.radii / 2 + 1e-15)


def test_state_measures(base_state):
    assert base_state.cantor_measure() == pytest.approx(oracles.CANTOR_LIMIT, rel=1e-9)
    assert base_state.cantor_measure_lower() <= base_state.cantor_measure()
    assert base_state.implant_volume() == 0.0


def test_base_negative_measure(base_state):
    neg = negative_measure(base_state, samples=100_000)
    lower, mc = neg
    assert lower == pytest.approx(oracles.CANTOR_LIMIT, rel=1e-9)
    exact = (2**8 * oracles.alpha_sqrt(8)) ** 2
    assert abs(mc - exact) <= 2 * neg.sigma
    assert abs(mc - oracles.CANTOR_LIMIT) <= 2 * neg.sigma + (exact - 0.25)


def test_state_round_trip(base_state, tmp_path):
    path = tmp_path / "s.json"
    base_state.save(path)
    back = RefinementState.load(path, base_state.models)
    assert back.to_json() == base_state.to_json()
    x = np.random.default_rng(3).random((500, 2))
    assert np.array_equal(back.evaluator.forward(x), base_state.evaluator.forward(x))


def test_state_rejects_other_version(base_state):
    d = json.loads(base_state.to_json())
    d["version"] = 99
    with pytest.raises(DomainError):
        RefinementState.from_dict(d, base_state.models)


def test_state_rejects_mismatched_sequence(base_state):
    d = json.loads(base_state.to_json())
    d["sequences"]["phi"]["alphas"][3] *= 1.001
    with pytest.raises(ValidationError):
        RefinementState.from_dict(d, base_state.models)


def test_initial_constants(base_state):
    c = base_state.constants
    assert c["C_phi"] == pytest.approx(c["C_F"][0] / 1.5)
    assert c["C_psi"] > 0 and c["C_F"][0] > 0


# -- one full step (shared with the acceptance run) ------------------------------------

def test_failed_step_leaves_state_unchanged(base_state):
    from flipforge.errors import PackingError
    from flipforge.refine import refinement_step

    before = base_state.to_json()
    with pytest.raises(PackingError):
        refinement_step(base_state, coverage_target=0.99, scales=1, validate=4)
    assert base_state.to_json() == before
    assert base_state.k == 1 and base_state.levels == ()


def test_step_bookkeeping(refined):
    base, step, _ = refined
    h = step.history[-1]
    assert step.k == 2 and len(step.levels) == 1
    assert h["orientation_witness"] == 1.0
    assert h["measure_gain"] == pytest.approx(step.cantor_measure() - base.cantor_measure())
    assert h["modulus_constant"] <= h["modulus_budget"]
    lev = step.levels[0]
    from scipy.spatial import cKDTree

    pairs = cKDTree(lev.centers).query_pairs(2 * lev.radii.max(), output_type="ndarray")
    a, b = pairs[:, 0], pairs[:, 1]
    gap = np.linalg.norm(lev.centers[a] - lev.centers[b], axis=1)
    assert np.all(gap > lev.radii[a] + lev.radii[b])


def test_step_inside_cube_formula(refined):
    _, step, _ = refined
    lev = step.levels[0]
    md = step.models
    rng = np.random.default_rng(11)
    i = rng.choice(lev.count, 50, replace=False)
    u = rng.random((50, 2))
    x = lev.origins[i] + lev.edges[i][:, None] * u
    from flipforge.flipmap import eval_depth

    # local coordinates as the evaluator computes them
    local = (x - lev.origins[i]) / lev.edges[i][:, None]
    inner = eval_depth(md.implant, local, md.implant_depth)
    want = lev.tangent(i, lev.origins[i] + lev.edges[i][:, None] * inner)
    assert np.array_equal(step.evaluator.forward(x), want)


def test_step_patch_bilipschitz(refined):
    _, step, _ = refined
    lev = step.levels[0]
    ev = step.evaluator
    rng = np.random.default_rng(12)
    for i in rng.choice(lev.count, 20, replace=False):
        c, r = lev.centers[i], lev.radii[i]
        G = lambda z, i=i: ev.patch(1, i, z)  # noqa: E731
        _, M, _ = local_bounds(G, c, r)
        lam = 2 * float(M[0])
        x = c + r * rng.uniform(-0.7, 0.7, (200, 2))
        y = c + r * rng.uniform(-0.7, 0.7, (200, 2))
        ratio = np.linalg.norm(G(x) - G(y), axis=1) / np.linalg.norm(x - y, axis=1)
        assert ratio.max() <= lam and ratio.min() >= 1 / lam


def test_step_state_reload_is_bit_exact(refined, tmp_path):
    _, step, _ = refined
    path = tmp_path / "state.json"
    step.save(path)
    back = RefinementState.load(path, step.models)
    x = np.random.default_rng(13).random((5000, 2))
    assert np.array_equal(back.evaluator.forward(x), step.evaluator.forward(x))
    assert back.cantor_measure() == step.cantor_measure()


def test_step_negative_measure(refined):
    base, step, _ = refined
    after = negative_measure(step, samples=50_000)
    before = negative_measure(base, samples=50_000)
    assert after.lower >= oracles.C2_LOWER
    assert after.lower > before.lower
    assert after.mc >= before.mc - 2 * (after.sigma + before.sigma)
