import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdl_lambda import autodiff as ad
from cdl_lambda.fista import (
    DivergenceError,
    FistaConfig,
    fista_solve,
    objective,
    step_size,
    weighted_l1_prox,
)
from cdl_lambda.linops import CodingOperator, Dictionary, LowResMask, forward_A
from helpers import crandn, grid_prox, ista_reference, random_dictionary


def impulse_dictionary():
    f = np.zeros((1, 3, 3))
    f[0, 1, 1] = 1.0
    return Dictionary(f)


def solve(s0, mask, D, y, lam, cfg, track="none", history=None):
    with ad.no_grad():
        return fista_solve(s0, mask, D, y, lam, cfg, track=track, history=history)


# -- prox ---------------------------------------------------------------------------


def test_prox_matches_grid_search(rng):
    u = rng.uniform(-3, 3, 200)
    w = rng.uniform(0.01, 2, 200)
    got = weighted_l1_prox(u.reshape(200, 1, 1, 1), w.reshape(200, 1, 1), 1.0).data.ravel()
    ref = np.array([grid_prox(a, b) for a, b in zip(u, w)])
    assert np.max(np.abs(got - ref)) < 1e-5


def test_prox_scales_threshold_by_step():
    s = np.full((1, 2, 1, 1), 1.0)
    out = weighted_l1_prox(s, np.full((1, 1, 1), 0.5), 0.4).data
    np.testing.assert_allclose(out, 0.8)


def test_prox_rejects_nonpositive_maps():
    with pytest.raises(ValueError):
        weighted_l1_prox(np.ones((2, 2, 3, 3)), np.zeros((2, 3, 3)), 1.0)
    with pytest.raises(ValueError):
        weighted_l1_prox(np.ones((2, 2, 3, 3)), np.ones((3, 3, 3)), 1.0)
    with pytest.raises(ValueError):
        weighted_l1_prox(np.ones((2, 2, 3, 3)), np.ones((2, 3, 3)), 0.0)


# -- config ---------------------------------------------------------------------------


def test_config_validation():
    FistaConfig(T=5, T_grad=5)
    for bad in (dict(T=0), dict(T=5, T_grad=6), dict(T_grad=0), dict(step=-1.0), dict(momentum_a=2.0)):
        with pytest.raises(ValueError):
            FistaConfig(**bad)
    full = FistaConfig.full_scale()
    assert (full.T, full.T_grad) == (64, 28)


def test_step_size_uses_safety_factor():
    D = impulse_dictionary()
    assert step_size(D, LowResMask.full(8, 8), FistaConfig()) == pytest.approx(0.95, rel=1e-12)
    assert step_size(D, LowResMask.full(8, 8), FistaConfig(step=0.3)) == 0.3


# -- solutions --------------------------------------------------------------------------


def test_separable_instance_matches_closed_form(rng):
    # B is the unitary DFT, so the minimiser soft-thresholds the image itself
    m = LowResMask.full(8, 8)
    x = crandn(rng, 8, 8)
    lam = rng.uniform(0.1, 0.8, (1, 8, 8))
    y = forward_A(x, m)
    s = solve(np.zeros((1, 2, 8, 8)), m, impulse_dictionary(), y, lam, FistaConfig(T=200, T_grad=1))
    expect = np.stack([np.sign(c) * np.maximum(np.abs(c) - lam[0], 0) for c in (x.real, x.imag)])
    assert np.max(np.abs(s.data[0] - expect)) < 1e-6


def test_matches_ista_objective(rng):
    D = random_dictionary(rng, 2, 3)
    m = LowResMask(8, 8, 6, 6)
    y = forward_A(crandn(rng, 8, 8), m)
    lam = np.full((2, 8, 8), 0.2)
    f_ref = ista_reference(CodingOperator(D, m), y, lam, n_iter=20_000)
    s = solve(np.zeros((2, 2, 8, 8)), m, D, y, lam, FistaConfig(T=500, T_grad=1))
    assert objective(s, CodingOperator(D, m), y, lam) - f_ref < 1e-6


def test_zero_data_gives_zero_codes(rng):
    D = random_dictionary(rng, 3, 3)
    m = LowResMask(8, 8, 4, 4)
    s = solve(np.zeros((3, 2, 8, 8)), m, D, np.zeros((8, 8), complex), np.ones((3, 8, 8)), FistaConfig())
    assert not np.any(s.data)


def test_solution_is_a_fixed_point(rng):
    m = LowResMask.full(8, 8)
    x = crandn(rng, 8, 8)
    lam = np.full((1, 8, 8), 0.3)
    exact = np.stack([np.sign(c) * np.maximum(np.abs(c) - 0.3, 0) for c in (x.real, x.imag)])[None]
    s = solve(exact, m, impulse_dictionary(), forward_A(x, m), lam, FistaConfig(T=5, T_grad=1))
    np.testing.assert_allclose(s.data, exact, atol=1e-13)


def test_history_records_objective_per_iteration(rng):
    D = random_dictionary(rng, 2, 3)
    m = LowResMask(8, 8, 4, 4)
    y = forward_A(crandn(rng, 8, 8), m)
    lam = np.full((2, 8, 8), 0.1)
    hist = []
    s = solve(np.zeros((2, 2, 8, 8)), m, D, y, lam, FistaConfig(T=12, T_grad=3), history=hist)
    assert len(hist) == 12
    assert hist[-1] == pytest.approx(objective(s, CodingOperator(D, m), y, lam), rel=1e-14)
    f0 = objective(np.zeros((2, 2, 8, 8)), CodingOperator(D, m), y, lam)
    assert hist[-1] < f0


def test_objective_by_hand(rng):
    D = random_dictionary(rng, 2, 3)
    m = LowResMask(6, 6, 4, 4)
    op = CodingOperator(D, m)
    s = rng.standard_normal((2, 2, 6, 6))
    y = crandn(rng, 6, 6) * m.array
    lam = rng.uniform(0.1, 1, (2, 6, 6))
    sc = s[:, 0] + 1j * s[:, 1]
    r = op.apply(sc) - y
    ref = 0.5 * np.sum(np.abs(r) ** 2) + np.sum(lam * (np.abs(sc.real) + np.abs(sc.imag)))
    assert objective(s, op, y, lam) == pytest.approx(ref, rel=1e-13)


# -- tracking modes ------------------------------------------------------------------------


def _tracked_run(track, rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    D = random_dictionary(rng, 2, 3)
    m = LowResMask(8, 8, 4, 4)
    y = forward_A(crandn(rng, 8, 8), m)
    lam = ad.Tensor(rng.uniform(0.05, 0.2, (2, 8, 8)), requires_grad=True)
    with ad.Tape() as tape:
        s = fista_solve(np.zeros((2, 2, 8, 8)), m, D, y, lam, FistaConfig(T=10, T_grad=3), track=track)
        n_ops = len(tape)
        if track != "none":
            ad.backward(ad.sum(ad.mul(s, s)))
    return s.data, n_ops, lam.grad


def test_tracking_modes_have_identical_forward_values():
    full, n_full, g_full = _tracked_run("full")
    trunc, n_trunc, g_trunc = _tracked_run("truncated")
    none, n_none, _ = _tracked_run("none")
    np.testing.assert_array_equal(full, trunc)
    np.testing.assert_array_equal(full, none)
    # only the reshape of the maps is recorded when nothing is tracked
    assert n_none <= 1 < n_trunc < n_full
    assert np.any(g_trunc) and np.any(g_full)


def test_divergence_is_detected(rng):
    D = random_dictionary(rng, 2, 3)
    m = LowResMask.full(8, 8)
    y = forward_A(crandn(rng, 8, 8), m)
    with pytest.raises(DivergenceError, match="iteration"):
        solve(np.zeros((2, 2, 8, 8)), m, D, y, np.full((2, 8, 8), 1e-3), FistaConfig(T=50, step=50.0))


def test_shape_checks(rng):
    D = random_dictionary(rng, 2, 3)
    m = LowResMask(8, 8, 4, 4)
    with pytest.raises(ValueError):
        solve(np.zeros((3, 2, 8, 8)), m, D, np.zeros((8, 8), complex), np.ones((2, 8, 8)), FistaConfig())
    with pytest.raises(ValueError):
        solve(np.zeros((2, 2, 8, 8)), m, D, np.zeros((6, 6), complex), np.ones((2, 8, 8)), FistaConfig())


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 2.0))
def test_larger_penalty_gives_sparser_codes(seed, lam):
    rng = np.random.default_rng(seed)
    m = LowResMask.full(6, 6)
    x = crandn(rng, 6, 6)
    cfg = FistaConfig(T=60, T_grad=1)
    y = forward_A(x, m)
    a = solve(np.zeros((1, 2, 6, 6)), m, impulse_dictionary(), y, np.full((1, 6, 6), lam), cfg)
    b = solve(np.zeros((1, 2, 6, 6)), m, impulse_dictionary(), y, np.full((1, 6, 6), 2 * lam), cfg)
    assert np.count_nonzero(b.data) <= np.count_nonzero(a.data)
