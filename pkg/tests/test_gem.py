import math

import numpy as np
import pytest
from scipy.special import xlogy

from possmix.core import to_json, validate_params
from possmix.densities import EventTable, event_space_logpdf, mixture_loglik, truncnorm_logpdf
from possmix.evaluate import adjusted_rand_index
from possmix.gem import (
    Curvature,
    DegenerateFitError,
    FitConfig,
    SpaceKernel,
    _EtaTerms,
    bounded_ascent_step,
    e_step,
    eta_gradient,
    fit,
    fit_report,
    gamma_gradient,
    gamma_objective,
    gem_iteration,
    m_step_closed_form,
    n_free_params,
    random_init,
    select_k,
    sufficient_stats,
)
from possmix.simulate import generate_dataset, generate_from_params, make_rng, scenario_params

from conftest import random_params


def central_diff(f, x, h):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h[i] if np.ndim(h) else h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * e.flat[i])
    return g


@pytest.fixture(scope="module")
def small():
    p = scenario_params(0.65)
    data, labels = generate_dataset("easy", 60, 4)
    return p, EventTable.build(data, 5, p.bounds), labels


def test_gamma_gradient_finite_differences(rng):
    for _ in range(20):
        rho = rng.uniform(0.3, 5.0, size=2)
        dt = rng.gamma(2.0, 1.0, size=30)
        w = rng.uniform(0.0, 1.0, size=30)
        stats = (w.sum(), (w * dt).sum(), (w * np.log(dt)).sum())
        g = gamma_gradient(rho, stats)
        fd = central_diff(lambda x: gamma_objective(x, *stats), rho, 1e-6 * rho)
        np.testing.assert_allclose(g, fd, rtol=1e-6)


def test_eta_gradient_finite_differences(rng):
    for _ in range(20):
        eta = rng.uniform(0.3, 4.0)
        n = 25
        b1 = -rng.uniform(0.0, 6.0, n)
        b2 = rng.uniform(0.0, 6.0, n)
        du = b1 + (b2 - b1) * rng.uniform(size=n)
        w = rng.uniform(size=n)
        events = list(zip(w, du, b1, b2))
        f = lambda x: float(np.sum(w * truncnorm_logpdf(du, b1, b2, float(x[0]))))
        fd = central_diff(f, [eta], [1e-6 * eta])[0]
        assert eta_gradient(eta, events) == pytest.approx(fd, rel=1e-6)


def test_kernel_matches_direct_evaluation_under_mixed_reuse(small):
    p, table, _ = small
    kernel = SpaceKernel(table, slots=3)
    rng = make_rng(2)
    eta = np.array(p.eta)
    for _ in range(12):
        # change a random subset of blocks so that caches are partially reused
        new = eta.copy()
        mask = rng.random(eta.shape) < 0.4
        new[mask] *= rng.uniform(0.5, 1.5, size=mask.sum())
        eta = new if rng.random() < 0.7 else eta
        np.testing.assert_allclose(kernel.logpdf(eta), event_space_logpdf(table, eta), rtol=1e-13, atol=1e-13)


def test_blockwise_eta_gradient(small):
    p, table, _ = small
    r = e_step(table, p).r
    terms = _EtaTerms(SpaceKernel(table), r)
    g = terms.gradient(np.array(p.eta))
    base = np.array(p.eta)
    h = 1e-6
    for idx in [(0, 0, 0), (1, 1, 3), (2, 0, 5)]:
        up, dn = base.copy(), base.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (terms.objective(up)[idx] - terms.objective(dn)[idx]) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-6)


def test_closed_form_matches_counting(small):
    p, table, _ = small
    stats = e_step(table, p)
    pi, gamma = m_step_closed_form(stats, table.n)
    np.testing.assert_allclose(pi, stats.r.mean(axis=0), rtol=1e-12)
    counts = np.zeros((3, 6, 6))
    for j in range(table.n_events):
        counts[:, table.prev[j], table.col[j]] += stats.r[table.poss[j]]
    np.testing.assert_allclose(gamma, counts / counts.sum(axis=2, keepdims=True), rtol=1e-12)


def test_closed_form_is_a_maximum(small):
    p, table, _ = small
    stats = e_step(table, p)
    _, gamma = m_step_closed_form(stats, table.n)

    def q(g):
        return float(np.sum(xlogy(stats.trans_counts, g)))

    rng = make_rng(0)
    for _ in range(20):
        other = rng.dirichlet(np.ones(6), size=(3, 6))
        assert q(other) < q(gamma)


def test_unvisited_rows_become_uniform():
    r = np.ones((1, 1))
    p = scenario_params(0.5, K=1, E=3)
    data, _ = generate_from_params(p, 1, 0)
    table = EventTable.build(data, 3, p.bounds)
    stats = sufficient_stats(table, r)
    _, gamma = m_step_closed_form(stats, 1)
    unvisited = stats.trans_counts.sum(axis=2) == 0
    assert np.any(unvisited)
    np.testing.assert_allclose(gamma[unvisited], 0.25)


def test_ascent_step_never_decreases_and_respects_floor():
    rng = make_rng(4)
    for _ in range(50):
        A = rng.normal(size=(3, 3))
        H = -(A @ A.T + 0.1 * np.eye(3))
        c = rng.uniform(-2, 2, size=3)
        f = lambda x: float(0.5 * (x - c) @ H @ (x - c))
        g = lambda x: H @ (x - c)
        x0 = rng.uniform(0.1, 2.0, size=3)
        xp = x0 + rng.normal(scale=0.1, size=3)
        x1 = bounded_ascent_step(x0, g, f, floor=0.05, x_prev=np.maximum(xp, 0.05))
        assert f(x1) >= f(x0)
        assert np.all(x1 >= 0.05)


def test_ascent_step_inactive_and_exhausted_blocks_stay():
    x0 = np.array([[1.0], [2.0]])
    g = lambda x: np.ones_like(x)
    f = lambda x: -np.ones(x.shape[0])  # flat: no strict Armijo gain is possible
    x1 = bounded_ascent_step(x0, g, f, max_backtracks=3)
    np.testing.assert_array_equal(x1, x0)
    f2 = lambda x: x[:, 0]
    x1 = bounded_ascent_step(x0, g, f2, active=[True, False])
    assert x1[0, 0] > 1.0 and x1[1, 0] == 2.0


def test_gem_monotone_from_random_start(small):
    _, table, _ = small
    p = random_init(table, 3, make_rng(9))
    cur = Curvature()
    lls = []
    for _ in range(60):
        p, _, ll = gem_iteration(table, p, cur)
        lls.append(ll)
    assert np.min(np.diff(lls)) >= -1e-8
    assert validate_params(p) == [] or all(not v.structural for v in validate_params(p))


def test_iteration_loglik_matches_direct(small):
    p, table, _ = small
    _, stats, ll = gem_iteration(table, p)
    assert ll == pytest.approx(mixture_loglik(table, p), rel=1e-12)


def test_random_init_uses_every_group(small):
    _, table, _ = small
    for seed in range(5):
        p = random_init(table, 4, make_rng(seed))
        assert p.K == 4 and np.all(p.pi > 0)
    with pytest.raises(DegenerateFitError):
        random_init(table, table.n + 1, make_rng(0))


def test_free_parameter_count_by_enumeration():
    for K, E in [(1, 1), (3, 5), (4, 12)]:
        p = random_params(make_rng(0), K=K, E=E)
        free = (p.pi.size - 1) + K * (E + 1) * E + p.rho.size + p.eta.size
        assert n_free_params(K, E) == free


def test_fit_recovers_well_separated_components():
    base = scenario_params(0.5, K=2)
    rho = np.array(base.rho)
    rho[1, :, 1] = 8.0
    eta = np.array(base.eta)
    eta[1] *= 4.0
    truth = base.replace(rho=rho, eta=eta)
    data, labels = generate_from_params(truth, 200, 0)
    res = fit(data, FitConfig(K=2, n_starts=10, n_keep=2, seed=1), n_types=5)
    assert adjusted_rand_index(labels, res.hard_assignment) > 0.9
    assert res.loglik >= mixture_loglik(data, truth)
    assert res.bic == pytest.approx(res.loglik - 0.5 * res.n_params * math.log(res.n_tot))


def test_fit_from_given_start_and_degenerate_failure(small):
    p, table, _ = small
    res = fit(table, FitConfig(K=3, n_starts=1, n_keep=1, n_long_iters=5), init_params=[p])
    assert res.start_id == 0 and res.iterations <= 5 + 10
    with pytest.raises(DegenerateFitError):
        fit(table, FitConfig(K=table.n + 1, n_starts=2, n_keep=1))


def test_fit_is_reproducible_and_thread_independent(small):
    _, table, _ = small
    cfg = FitConfig(K=2, n_starts=6, n_keep=2, seed=3, n_long_iters=30)
    a = to_json(fit_report(fit(table, cfg), 3))
    b = to_json(fit_report(fit(table, cfg), 3))
    from dataclasses import replace

    c = to_json(fit_report(fit(table, replace(cfg, threads=2)), 3))
    assert a == b == c


def test_select_k_rows(small):
    _, table, _ = small
    rows, best, fits = select_k(table, range(1, 3), FitConfig(K=1, n_starts=3, n_keep=1, n_long_iters=20))
    assert [r["K"] for r in rows] == [1, 2]
    assert best == max(rows, key=lambda r: r["bic"])["K"]
    assert set(fits) == {1, 2}


def test_gradient_special_values():
    x = 2.7
    assert gamma_gradient([1.0, x], (1.0, x, math.log(x)))[1] == pytest.approx(0.0, abs=1e-15)
    assert gamma_gradient([1.0, 1.0], (1.0, 1.0, -np.euler_gamma))[0] == pytest.approx(0.0, abs=1e-15)
    assert eta_gradient(1.7, [(1.0, 1.7, -1e6, 1e6)]) == pytest.approx(0.0, abs=1e-14)
    # zeta(-1, 1) = 2 phi(1) / (2 Phi(1) - 1)
    from scipy.stats import norm

    zeta = 2 * norm.pdf(1.0) / (2 * norm.cdf(1.0) - 1)
    assert eta_gradient(1.0, [(1.0, 0.0, -1.0, 1.0)]) == pytest.approx(zeta - 1.0, rel=1e-12)


def test_ascent_step_at_stationary_point():
    x1 = bounded_ascent_step(np.array([2.0]), lambda x: np.zeros(1), lambda x: -((x[0] - 2.0) ** 2))
    np.testing.assert_array_equal(x1, [2.0])


def _weighted_gamma_mle(w, x):
    from scipy.optimize import brentq
    from scipy.special import digamma as psi

    m = np.sum(w * x) / w.sum()
    c = math.log(m) - np.sum(w * np.log(x)) / w.sum()
    shape = brentq(lambda a: math.log(a) - psi(a) - c, 1e-8, 1e8)
    return shape, m / shape


def test_iterated_gamma_steps_reach_weighted_mle():
    rng = make_rng(21)
    x = rng.gamma(2.5, 1.3, size=200)
    w = rng.uniform(size=200)
    s = (w.sum(), (w * x).sum(), (w * np.log(x)).sum())
    rho, prev = np.array([1.0, 1.0]), None
    for _ in range(500):
        new = bounded_ascent_step(rho, lambda r: gamma_gradient(r, s), lambda r: gamma_objective(r, *s), x_prev=prev)
        prev, rho = rho, new
    np.testing.assert_allclose(rho, _weighted_gamma_mle(w, x), rtol=1e-7)


def test_single_component_fit_matches_direct_estimators():
    from scipy.optimize import brentq

    p = scenario_params(0.5, K=1, E=2)
    data, _ = generate_from_params(p, 150, 8)
    table = EventTable.build(data, 2, p.bounds)
    params, cur = p, Curvature()
    for _ in range(3000):
        params, _, _ = gem_iteration(table, params, cur)
    counts = np.zeros((3, 3))
    np.add.at(counts, (table.prev, table.col), 1.0)
    np.testing.assert_allclose(params.gamma[0], counts / counts.sum(axis=1, keepdims=True), rtol=1e-12)
    for e in range(3):
        mask = table.col == e
        np.testing.assert_allclose(params.rho[0, e], _weighted_gamma_mle(np.ones(mask.sum()), table.dt[mask]), rtol=1e-6)
        for h in range(2):
            ev = [(1.0, table.du[h, j], table.db1[h, j], table.db2[h, j]) for j in np.flatnonzero(mask)]
            root = brentq(lambda s: eta_gradient(s, ev), 0.05, 50.0, xtol=1e-14)
            assert params.eta[0, h, e] == pytest.approx(root, rel=1e-6)
    # fixed point
    again, _, _ = gem_iteration(table, params, cur)
    for f in ("pi", "gamma", "rho", "eta"):
        np.testing.assert_allclose(getattr(again, f), getattr(params, f), rtol=0, atol=1e-10)


def test_responsibilities_match_linear_space_bayes():
    from possmix.densities import possession_loglik

    p = random_params(make_rng(3), K=2, E=1)
    data, _ = generate_from_params(p, 2, 5)
    st = e_step(data, p)
    for i, poss in enumerate(data):
        dens = np.array([p.pi[k] * math.exp(possession_loglik(poss, p, k).total_ll) for k in range(2)])
        np.testing.assert_allclose(st.r[i], dens / dens.sum(), rtol=1e-12)
    np.testing.assert_allclose(st.r.sum(axis=1), 1.0, atol=1e-10)


def test_label_permutation_leaves_loglik(small):
    p, table, _ = small
    assert mixture_loglik(table, p.permuted([2, 0, 1])) == pytest.approx(mixture_loglik(table, p), rel=1e-13)


def test_fit_from_truth_ascends(small):
    p, table, _ = small
    res = fit(table, FitConfig(K=3, n_starts=1, n_keep=1), init_params=[p])
    assert res.loglik >= mixture_loglik(table, p)
    assert np.all(np.diff(res.loglik_trace) >= -1e-8)


def test_bic_penalty():
    assert n_free_params(1, 1) == 10
    from possmix.gem import bic

    p = scenario_params(0.5)
    data, _ = generate_dataset("easy", 20, 0)
    assert bic(-100.0, p, data) < -100.0
    assert bic(-100.0, scenario_params(0.5, K=4), data) < bic(-100.0, p, data)
