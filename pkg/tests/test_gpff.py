import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from planarcomm import _accel
from planarcomm.gpff import (DegenerateTargets, GpFeedforward, KernelParams, TuneBudget, bfr,
                             default_kernel_params, feedforward_eval, fit_axis, gp_fit,
                             gp_predict, kernel_eval, kernel_matrix, log_marginal_likelihood,
                             tune_hyperparams)

import oracles

P = KernelParams(2e-10, 0.03 ** 2, 0.05 ** 2, 3.0, 1.5, 1e-14, 0.04)


def _pdict(p):
    return dict(s1=p.signal_var, lx=p.rbf_x, ly=p.rbf_y, gx=p.per_x, gy=p.per_y,
                period=p.period)


def _data(n, seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(-0.1, 0.1, (n, 2))
    y = 1e-5 * np.sin(2 * np.pi * w[:, 0] / 0.04) + 5e-6 * w[:, 1] / 0.1
    return w, y


def test_kernel_at_zero_distance():
    assert kernel_eval((0.01, 0.02), (0.01, 0.02), P) == P.signal_var


@given(arrays(np.float64, 2, elements=st.floats(-0.1, 0.1)),
       arrays(np.float64, 2, elements=st.floats(-0.1, 0.1)))
def test_kernel_symmetric(a, b):
    assert kernel_eval(a, b, P) == pytest.approx(kernel_eval(b, a, P), rel=1e-14)


def test_kernel_full_period_shift_is_pure_rbf():
    w = np.array([0.013, -0.02])
    k = kernel_eval(w, w + (P.period, 0.0), P)
    assert k == pytest.approx(P.signal_var * math.exp(-P.period ** 2 / P.rbf_x), rel=1e-12)


def test_kernel_matches_formula():
    kf = oracles.kernel_formula(_pdict(P))
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-0.1, 0.1, (7, 2)), rng.uniform(-0.1, 0.1, (5, 2))
    ref = np.array([[kf(x, y) for y in b] for x in a])
    np.testing.assert_allclose(kernel_matrix(a, b, P), ref, rtol=1e-13)


def test_kernel_backends_agree():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(-0.1, 0.1, (40, 2)), rng.uniform(-0.1, 0.1, (30, 2))
    args = (P.signal_var, 1 / P.rbf_x, 1 / P.rbf_y, 1 / P.per_x, 1 / P.per_y, P.period)
    np.testing.assert_allclose(_accel.gram_py(a, b, *args), _accel.gram_nb(a, b, *args),
                               rtol=1e-13)


@given(st.integers(2, 50), st.integers(0, 10_000))
def test_gram_psd(n, seed):
    w = np.random.default_rng(seed).uniform(-0.1, 0.1, (n, 2))
    k = kernel_matrix(w, w, P)
    assert np.linalg.eigvalsh(k).min() >= -1e-10 * P.signal_var


def test_single_point_interpolation():
    p = KernelParams(1.0, 1e-3, 1e-3, 2.0, 2.0, 1e-12, 0.04)
    m = fit_axis(np.array([[0.01, 0.02]]), [3.5e-6], p)
    mean, var = gp_predict(m, np.array([0.01, 0.02]))
    assert mean == pytest.approx(3.5e-6, rel=1e-9)
    assert var <= p.noise_var + 1e-12


def test_three_point_dense_oracle():
    w = np.array([[0.0, 0.0], [0.01, 0.0], [0.025, 0.0]])
    y = np.array([1e-5, -3e-6, 7e-6])
    m = fit_axis(w, y, P)
    q = np.array([[0.005, 0.0], [0.02, 0.0]])
    mean, _ = gp_predict(m, q)
    ref, _, _ = oracles.dense_gp(w, y, q, oracles.kernel_formula(_pdict(P)), P.noise_var)
    np.testing.assert_allclose(mean, ref, rtol=1e-10)


@pytest.mark.parametrize("n", [5, 20, 50])
def test_dense_oracle_mean_variance_lml(n):
    w, y = _data(n, n)
    m = fit_axis(w, y, P)
    q = np.random.default_rng(99).uniform(-0.1, 0.1, (100, 2))
    mean, var = gp_predict(m, q)
    rmean, rvar, rlml = oracles.dense_gp(w, y, q, oracles.kernel_formula(_pdict(P)),
                                         P.noise_var)
    assert np.max(np.abs(mean - rmean)) <= 1e-9 * np.max(np.abs(rmean))
    assert np.max(np.abs(var - rvar)) <= 1e-9 * P.signal_var
    assert log_marginal_likelihood(m) == pytest.approx(rlml, rel=1e-9)


def test_far_query_reverts_to_prior():
    w, y = _data(20, 3)
    m = fit_axis(w, y, P)
    mean, var = gp_predict(m, np.array([5.02, -7.0]))
    assert abs(mean) < 1e-12 * np.max(np.abs(y))
    assert var == pytest.approx(P.signal_var, rel=1e-9)


def test_variance_contracts_at_training_points():
    w, y = _data(30, 4)
    m = fit_axis(w, y, P)
    _, var = gp_predict(m, w)
    assert np.all(var <= P.noise_var + 1e-12)
    assert np.all(var >= 0)


def test_lml_single_point_closed_form():
    p = KernelParams(2.0, 1e-3, 1e-3, 2.0, 2.0, 0.5, 0.04)
    m = fit_axis(np.array([[0.0, 0.0]]), [0.0], p)
    assert log_marginal_likelihood(m) == pytest.approx(-0.5 * math.log(2 * math.pi * 2.5),
                                                       rel=1e-14)


def test_lml_peaks_near_true_noise_level():
    rng = np.random.default_rng(5)
    w = rng.uniform(-0.1, 0.1, (300, 2))
    sigma2 = 4e-12
    y = math.sqrt(sigma2) * rng.standard_normal(300)
    levels = sigma2 * 2.0 ** np.arange(-4, 5)
    lml = [log_marginal_likelihood(fit_axis(w, y, KernelParams(
        1e-6 * sigma2, 1e-3, 1e-3, 2.0, 2.0, s, 0.04))) for s in levels]
    best = int(np.argmax(lml))
    assert 3 <= best <= 5  # within a factor two of the truth
    assert np.all(np.diff(lml[:best + 1]) > 0)
    assert np.all(np.diff(lml[best:]) < 0)


def test_posterior_mean_linear_in_targets():
    w, y1 = _data(25, 6)
    y2 = np.random.default_rng(7).normal(0, 1e-5, 25)
    q = np.random.default_rng(8).uniform(-0.1, 0.1, (40, 2))
    m1, _ = gp_predict(fit_axis(w, y1, P), q)
    m2, _ = gp_predict(fit_axis(w, y2, P), q)
    m12, _ = gp_predict(fit_axis(w, y1 + y2, P), q)
    assert np.max(np.abs(m12 - m1 - m2)) <= 1e-10 * np.max(np.abs(m12))


def test_periodic_translation_invariance():
    p = KernelParams(1e-10, 1e12, 1e12, 1.0, 1.0, 1e-14, 0.04)
    w, y = _data(15, 9)
    q = np.random.default_rng(10).uniform(-0.1, 0.1, (20, 2))
    a, _ = gp_predict(fit_axis(w, y, p), q)
    b, _ = gp_predict(fit_axis(w + (0.04, -0.08), y, p), q)
    assert np.max(np.abs(a - b)) <= 1e-8 * np.max(np.abs(a))


def test_tuning_never_worse_than_initial():
    w, y = _data(60, 11)
    init = default_kernel_params(y, 0.04)
    lml0 = log_marginal_likelihood(fit_axis(w, y, init))
    tuned = tune_hyperparams(w, y, init, TuneBudget(restarts=2, max_evals=200))
    lml1 = log_marginal_likelihood(fit_axis(w, y, tuned))
    assert lml1 >= lml0
    again = tune_hyperparams(w, y, tuned, TuneBudget(restarts=1, max_evals=100))
    assert log_marginal_likelihood(fit_axis(w, y, again)) >= lml1


def test_recovers_length_scales_from_kernel_samples():
    true = KernelParams(1e-10, 0.03 ** 2, 0.05 ** 2, 4.0, 2.0, 1e-14, 0.04)
    ratios = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        w = rng.uniform(-0.1, 0.1, (100, 2))
        k = kernel_matrix(w, w, true) + true.noise_var * np.eye(100)
        y = np.linalg.cholesky(k) @ rng.standard_normal(100)
        p = tune_hyperparams(w, y, default_kernel_params(y, 0.04),
                             TuneBudget(restarts=2, max_evals=300, seed=seed))
        ratios.append([math.sqrt(p.rbf_x / true.rbf_x), math.sqrt(p.rbf_y / true.rbf_y)])
    med = np.median(ratios, axis=0)
    assert np.all((med > 0.5) & (med < 2.0)), med


def test_noise_only_targets_shrink_signal():
    rng = np.random.default_rng(0)
    w = rng.uniform(-0.1, 0.1, (150, 2))
    y = 1e-5 * rng.standard_normal(150)
    p = tune_hyperparams(w, y, default_kernel_params(y, 0.04),
                         TuneBudget(restarts=3, max_evals=400))
    assert p.signal_var < 0.1 * np.var(y)


def test_bfr_values():
    t = np.array([1.0, 2.0, 4.0, 3.0])
    assert bfr(t, t) == 100.0
    assert bfr(t, np.full(4, t.mean())) == 0.0
    assert bfr(t, -t) == 0.0
    with pytest.raises(DegenerateTargets):
        bfr(np.ones(5), np.zeros(5))
    with pytest.raises(ValueError):
        bfr([1.0], [1.0])


def _grid(n):
    g = np.linspace(-0.1, 0.1, n)
    gx, gy = np.meshgrid(g, g)
    return np.column_stack([gx.ravel(), gy.ravel()])


def test_constant_targets_give_constant_feedforward():
    w = _grid(8)
    eta = np.tile([3e-5, -2e-5], (len(w), 1))
    # a flat map needs the simplex to walk the length scales to their upper bound
    params = [tune_hyperparams(w, eta[:, j], default_kernel_params(eta[:, j], 0.04),
                               TuneBudget(restarts=3, max_evals=1000)) for j in range(2)]
    ff = gp_fit(w, eta, params)
    q = np.random.default_rng(3).uniform(-0.1, 0.1, (200, 3))
    out = feedforward_eval(ff, q)
    np.testing.assert_allclose(out, np.tile([3e-5, -2e-5], (200, 1)), rtol=0.01)


def test_outside_hull_warns_and_reverts(caplog):
    w = _grid(5)
    y = 1e-5 * np.sin(2 * np.pi * w[:, 0] / 0.04)
    ff = gp_fit(w, np.column_stack([y, y]), [P, P])
    with caplog.at_level(logging.WARNING, logger="planarcomm.gpff"):
        out = feedforward_eval(ff, np.array([3.0, 3.0]))
    assert "outside" in caplog.text
    assert np.max(np.abs(out)) < 1e-15
    _, var = ff.predict(np.array([3.0, 3.0]))
    np.testing.assert_allclose(var, P.signal_var, rtol=1e-9)


def test_model_round_trip(tmp_path):
    w, y = _data(20, 12)
    ff = gp_fit(w, np.column_stack([y, -y]), [P, P])
    path = tmp_path / "m.json"
    ff.save(path)
    back = GpFeedforward.load(path)
    assert back.fingerprint() == ff.fingerprint()
    q = np.random.default_rng(1).uniform(-0.1, 0.1, (10, 2))
    np.testing.assert_array_equal(back.predict(q)[0], ff.predict(q)[0])
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        GpFeedforward.load(bad)


def test_kernel_params_validation():
    with pytest.raises(ValueError):
        KernelParams(0.0, 1, 1, 1, 1, 1)
