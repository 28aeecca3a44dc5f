import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmsnet.core import binarize, dice, soft_mask, validate_simplex
from lmsnet.data import SHAPE_FAMILIES, SyntheticCorpusConfig, make_instance
from lmsnet.solver import (DegeneratePrototypeError, EmptyRegionError, PrototypePair, SolverConfig,
                           StageParams, TVDenoiser, data_consistency, dual_update, intensity_prototypes,
                           intensity_threshold, lms_energy, map_pool, reference_potts_solve, rho,
                           softplus_inverse, tv_anisotropic, tv_prox, write_energy_csv)


def pair(rng, c=4):
    return PrototypePair(rng.normal(size=c), rng.normal(size=c))


# -- rho ---------------------------------------------------------------------------

def test_rho_examples():
    l = np.array([1.0, 2.0, -1.0])
    F = np.stack([l, np.array([2.0, -1.0, 0.0]), -l])[None]
    assert np.allclose(rho(F, l)[0], [-1.0, 0.0, 1.0], atol=1e-15)


def test_rho_antisymmetric_and_degenerate():
    rng = np.random.default_rng(0)
    F, l = rng.normal(size=(3, 3, 5)), rng.normal(size=5)
    assert np.array_equal(rho(F, -l), -rho(F, l))
    with pytest.raises(DegeneratePrototypeError, match="degenerate prototype"):
        rho(F, np.zeros(5))
    # zero feature vectors are guarded, not an error
    assert rho(np.zeros((1, 1, 5)), l)[0, 0] == 0.0


# -- data consistency -----------------------------------------------------------------

def test_dc_examples():
    l = np.array([1.0, 0.0])
    F = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    u = data_consistency(F, PrototypePair(l, -l), np.zeros((1, 2, 2)), SolverConfig(alpha=20))
    assert np.allclose(u[0, 0], [0.5, 0.5])
    assert abs(u[0, 1, 0] - 1.0) <= 1e-12
    assert u[0, 1, 0] == pytest.approx(1 / (1 + math.exp(-40)), abs=1e-15)


def test_dc_non_finite_logits():
    with pytest.raises(FloatingPointError):
        data_consistency(np.ones((1, 1, 2)), PrototypePair(np.ones(2), -np.ones(2)),
                         np.full((1, 1, 2), np.inf))


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_dc_always_on_simplex(seed, alpha):
    rng = np.random.default_rng(seed)
    u = data_consistency(rng.normal(size=(4, 4, 3)), pair(rng, 3), 3 * rng.normal(size=(4, 4, 2)),
                         SolverConfig(alpha=alpha))
    assert validate_simplex(u)


def grid_minimiser(c, alpha, step=1e-3):
    """argmin over u1 in {0, step, ..., 1} of u.c + (1/alpha) sum u ln u (two channels)."""
    best, best_u = np.inf, None
    for u1 in np.arange(0.0, 1.0 + step / 2, step):
        u = (u1, 1.0 - u1)
        val = sum(ui * ci + (ui * math.log(ui) if ui > 0 else 0.0) / alpha for ui, ci in zip(u, c))
        if val < best:
            best, best_u = val, u1
    return best_u


@pytest.mark.parametrize("alpha", [3.0])
def test_dc_matches_grid_search_4x4(alpha):
    rng = np.random.default_rng(1)
    F, l, v = rng.normal(size=(4, 4, 3)), pair(rng, 3), 0.2 * rng.normal(size=(4, 4, 2))
    u = data_consistency(F, l, v, SolverConfig(alpha=alpha))
    r1, r2 = rho(F, l.fg), rho(F, l.bg)
    for i in range(4):
        for j in range(4):
            c = (r1[i, j] + v[i, j, 0], r2[i, j] + v[i, j, 1])
            assert abs(grid_minimiser(c, alpha) - u[i, j, 0]) <= 1e-3


# -- map pooling ---------------------------------------------------------------------------

def test_map_pool_examples():
    F = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    assert np.allclose(map_pool(F, np.ones((1, 2)), 1.0), [0.5, 0.5])
    c = np.array([3.0, -2.0])
    F = np.broadcast_to(c, (3, 3, 2)).copy()
    u = np.zeros((3, 3))
    u[1, 1] = 1
    assert np.allclose(map_pool(F, u), c)
    assert np.allclose(map_pool(F, u, 2.0), 2 * c)
    with pytest.raises(EmptyRegionError, match="empty region"):
        map_pool(F, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        map_pool(F, -u)


# -- dual update ---------------------------------------------------------------------------

def test_dual_update_identity_is_zero():
    rng = np.random.default_rng(2)
    for _ in range(50):
        u = soft_mask(rng.uniform(size=(5, 6)))
        v = dual_update(u, 10 * rng.normal(size=(5, 6, 2)), StageParams.with_delta(rng.uniform(1e-3, 10)))
        assert np.max(np.abs(v)) <= 1e-12


def test_dual_update_constant_denoiser():
    rng = np.random.default_rng(3)
    u = soft_mask(rng.uniform(size=(4, 4)))
    v = dual_update(u, np.zeros((4, 4, 2)), StageParams.with_delta(1.0, lambda z: np.full_like(z, 0.5)))
    assert np.allclose(v, u - 0.5, atol=1e-15)


def test_dual_update_tv_weight_zero_is_zero():
    rng = np.random.default_rng(4)
    u = soft_mask(rng.uniform(size=(6, 6)))
    v = dual_update(u, rng.normal(size=(6, 6, 2)), StageParams.with_delta(0.7, TVDenoiser(0.0)))
    assert np.max(np.abs(v)) <= 1e-12


def test_softplus_parametrisation():
    for d in (1e-3, 0.05, 1.0, 30.0):
        assert StageParams.with_delta(d).delta() == pytest.approx(d, rel=1e-12)
    assert StageParams().delta() == pytest.approx(1.0)
    assert softplus_inverse(1.0) == pytest.approx(math.log(math.e - 1))


# -- energy ----------------------------------------------------------------------------

def naive_energy(F, u, l, alpha, tv_weight):
    H, W, _ = F.shape
    total = 0.0
    for i, proto in enumerate((l.fg, l.bg)):
        for y in range(H):
            for x in range(W):
                f = F[y, x]
                cos = float(np.dot(f, proto)) / (max(math.sqrt(float(np.dot(f, f))), 1e-8)
                                                 * math.sqrt(float(np.dot(proto, proto))))
                ui = u[y, x, i]
                total += ui * (-cos)
                if ui > 0:
                    total += ui * math.log(ui) / alpha
                if x + 1 < W:
                    total += tv_weight * abs(u[y, x + 1, i] - ui)
                if y + 1 < H:
                    total += tv_weight * abs(u[y + 1, x, i] - ui)
    return total


def test_energy_examples():
    H, W, alpha = 3, 5, 20.0
    F = np.zeros((H, W, 2))
    F[..., 1] = 1.0  # orthogonal to both prototypes -> rho = 0
    l = PrototypePair(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
    e = lms_energy(F, soft_mask(np.full((H, W), 0.5)), l, SolverConfig(alpha=alpha), 7.0)
    assert e == pytest.approx(-H * W * math.log(2) / alpha, rel=1e-12)
    sign = np.where(np.arange(H * W).reshape(H, W) % 3 == 0, 1.0, -1.0)
    F = np.stack([sign, np.zeros((H, W))], -1)
    u = soft_mask((sign > 0).astype(float))
    assert lms_energy(F, u, l, SolverConfig(alpha=alpha), 0.0) == pytest.approx(-H * W, abs=1e-12)


def test_energy_matches_naive_loop():
    rng = np.random.default_rng(5)
    F, l = rng.normal(size=(3, 3, 4)), pair(rng)
    u = soft_mask(rng.uniform(size=(3, 3)))
    u[0, 0] = (1.0, 0.0)
    e = lms_energy(F, u, l, SolverConfig(alpha=7.0), 0.3)
    assert e == pytest.approx(naive_energy(F, u, l, 7.0, 0.3), rel=1e-12, abs=1e-12)


def test_tv_anisotropic():
    z = np.array([[0.0, 1.0], [0.0, 3.0]])
    assert tv_anisotropic(z) == pytest.approx(1 + 3 + 2)


# -- TV prox ---------------------------------------------------------------------------

def test_tv_prox_trivial_cases():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(7, 5))
    assert np.array_equal(tv_prox(z, 0.0, 10), z)
    c = np.full((4, 6), 0.3)
    assert np.allclose(tv_prox(c, 5.0, 50), c, atol=1e-12)


def test_tv_prox_1d_step_matches_rof_solution():
    # ROF of a unit step with n samples per side: each plateau moves by weight / n
    n, lam = 8, 0.1
    z = np.tile(np.r_[np.zeros(n), np.ones(n)], (3, 1))
    out = tv_prox(z, lam, 300)
    expected = np.tile(np.r_[np.full(n, lam / n), np.full(n, 1 - lam / n)], (3, 1))
    assert np.max(np.abs(out - expected)) <= 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 2.0))
def test_tv_prox_reduces_tv(seed, weight):
    z = np.random.default_rng(seed).normal(size=(6, 6))
    assert tv_anisotropic(tv_prox(z, weight, 100)) <= tv_anisotropic(z) + 1e-9


# -- reference solver ---------------------------------------------------------------------

def test_potts_tv_zero_is_dc_fixed_point():
    rng = np.random.default_rng(7)
    F, l = rng.normal(size=(8, 8, 3)), pair(rng, 3)
    cfg = SolverConfig(alpha=5.0)
    res = reference_potts_solve(F, l, cfg, tv_weight=0.0, outer_iters=5, tol=0.0, keep_iterates=True)
    expected = data_consistency(F, l, np.zeros((8, 8, 2)), cfg)
    for u, v in res.iterates:
        assert np.array_equal(u, expected)
        assert np.max(np.abs(v)) <= 1e-12


def test_potts_two_blob_image():
    img, gt = make_instance("two_lobe", SyntheticCorpusConfig(noise_sigma=0.15), np.random.default_rng(0))
    F, l = intensity_prototypes(img, gt)
    res = reference_potts_solve(F, l, SolverConfig(alpha=20), 0.5, 50, prox_iters=30)
    assert dice(binarize(res.u), gt) >= 0.99


@pytest.mark.parametrize("seed", range(20))
def test_potts_energy_non_increasing_synthetic(seed):
    img, gt = make_instance(SHAPE_FAMILIES[seed % 6], SyntheticCorpusConfig(noise_sigma=0.15),
                            np.random.default_rng(seed))
    F, l = intensity_prototypes(img, gt)
    res = reference_potts_solve(F, l, SolverConfig(alpha=20), 0.5, 100, tol=0.0, prox_iters=30)
    assert np.max(np.diff(res.energy_trace[2:])) <= 1e-6


@pytest.mark.xfail(strict=True, reason="the primal energy is tracked along a dual ascent; on random "
                                       "feature maps it can tick upwards for a few iterations")
def test_potts_energy_non_increasing_random_features():
    worst = []
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        F, l = rng.normal(size=(12, 12, 3)), pair(rng, 3)
        res = reference_potts_solve(F, l, SolverConfig(alpha=float(rng.uniform(2, 30))),
                                    float(rng.uniform(0.05, 1)), 60, tol=0.0, prox_iters=30)
        worst.append(np.max(np.diff(res.energy_trace[2:])))
    assert max(worst) <= 1e-6


def test_intensity_threshold():
    img = np.array([[0.2, 0.2, 0.8, 0.8]])
    m = np.array([[0, 0, 1, 1]])
    assert intensity_threshold(img, m) == (pytest.approx(0.5), 1.0)
    assert intensity_threshold(1 - img, m)[1] == -1.0


def test_energy_csv(tmp_path):
    p = tmp_path / "e.csv"
    write_energy_csv(p, [3.0, 2.5])
    assert p.read_text().splitlines()[0] == "iteration,energy"
