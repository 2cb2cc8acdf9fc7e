import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoparam import flowsim, gan, nes
from geoparam.nes import SearchDistribution


def sphere(zs):
    return -np.sum(np.atleast_2d(zs) ** 2, axis=1)


# ---------------------------------------------------------------- defaults & shaping

def test_default_step_sizes_dim30():
    assert nes.default_population(30) == 14
    assert nes.default_eta_a(30) == pytest.approx(0.023373868006529123, rel=1e-12)


def test_rank_utilities_hand_values():
    u = nes.rank_utilities(np.array([3.0, 10.0, -1.0, 5.0]))
    # ranks: 10 -> 1, 5 -> 2, 3 -> 3, -1 -> 4
    np.testing.assert_allclose(u, [-0.25, 0.48042271030918515, -0.25, 0.01957728969081496], rtol=1e-12)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=60))
def test_rank_utilities_properties(fs):
    f = np.array(fs)
    u = nes.rank_utilities(f)
    assert abs(u.sum()) < 1e-12
    order = np.argsort(-f, kind="stable")
    assert np.all(np.diff(u[order]) <= 1e-15)


def test_distribution_validation():
    with pytest.raises(ValueError):
        SearchDistribution(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        SearchDistribution(np.zeros(2), np.array([[-1.0, 0.0], [0.0, 1.0]]))


# ---------------------------------------------------------------- search gradient

def test_score_gradient_linear_1d():
    rng = np.random.default_rng(0)
    dist = SearchDistribution.isotropic(np.zeros(1))
    _, z = dist.sample(rng, 100_000)
    g_mu, _ = nes.score_gradient(z, z[:, 0], dist, utilities=False)
    assert abs(g_mu[0] - 1.0) < 0.02


def test_score_gradient_covariance_quadratic():
    # d/dSigma E[z^2] = I for N(mu, Sigma)
    rng = np.random.default_rng(1)
    dist = SearchDistribution(np.array([0.5]), np.array([[0.8]]))
    _, z = dist.sample(rng, 200_000)
    _, g_sigma = nes.score_gradient(z, z[:, 0] ** 2, dist, utilities=False, baseline=True)
    assert g_sigma[0, 0] == pytest.approx(1.0, abs=0.03)


def test_score_gradient_needs_two_samples():
    with pytest.raises(ValueError):
        nes.score_gradient(np.zeros((1, 2)), np.zeros(1), SearchDistribution.isotropic(np.zeros(2)))


# ---------------------------------------------------------------- updates

@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 8))
def test_update_keeps_valid_factor(seed, d):
    rng = np.random.default_rng(seed)
    dist = SearchDistribution.isotropic(rng.normal(size=d))
    for _ in range(5):
        dist, _ = nes.nes_step(dist, sphere, rng)
    assert np.allclose(dist.A, np.tril(dist.A))
    assert np.all(np.diag(dist.A) > 0)
    assert np.all(np.linalg.eigvalsh(dist.covariance) > 0)


def test_zero_utilities_leave_distribution():
    dist = SearchDistribution.isotropic(np.ones(3), 0.7)
    xi = np.random.default_rng(2).normal(size=(6, 3))
    new = nes.natural_update(dist, xi, np.zeros(6))
    np.testing.assert_allclose(new.mean, dist.mean)
    np.testing.assert_allclose(new.A, dist.A, atol=1e-14)


def test_mean_update_formula():
    dist = SearchDistribution(np.array([1.0, -1.0]), np.array([[2.0, 0.0], [0.5, 1.0]]), eta_mu=0.5)
    xi = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    u = np.array([0.5, -0.2, -0.3])
    new = nes.natural_update(dist, xi, u)
    np.testing.assert_allclose(new.mean, dist.mean + 0.5 * dist.A @ (u @ xi))


def test_non_finite_update_raises():
    dist = SearchDistribution.isotropic(np.zeros(2))
    with pytest.raises(FloatingPointError):
        nes.nes_step(dist, lambda zs: np.full(len(zs), 1e300) * np.arange(len(zs)),
                     np.random.default_rng(0), shaping=None)


def test_sphere_default_settings_improve():
    dist = SearchDistribution.isotropic(np.full(10, 3.0))
    res = nes.optimize(sphere, dist, 200, seed=0, plateau=None)
    assert np.linalg.norm(res.distribution.mean) < 0.1 * np.linalg.norm(np.full(10, 3.0))
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))


@pytest.mark.xfail(strict=True, reason="with the literature eta_A the step size shrinks too slowly "
                                       "in dim 30 to reach 1e-3 in 500 generations")
def test_sphere_dim30_population20_default_rates():
    res = nes.optimize(sphere, SearchDistribution.isotropic(np.ones(30), population=20), 500,
                       seed=0, plateau=None)
    assert np.linalg.norm(res.distribution.mean) < 1e-3


def test_sphere_dim30_configured_rates():
    dist = SearchDistribution.isotropic(np.ones(30), population=50, eta_a=0.15)
    res = nes.optimize(sphere, dist, 500, seed=0, plateau=None)
    assert np.linalg.norm(res.distribution.mean) < 1e-3


def test_optimize_deterministic_and_target_stop():
    a = nes.optimize(sphere, SearchDistribution.isotropic(np.ones(4)), 50, seed=3, plateau=None)
    b = nes.optimize(sphere, SearchDistribution.isotropic(np.ones(4)), 50, seed=3, plateau=None)
    assert a.trace == b.trace
    c = nes.optimize(sphere, SearchDistribution.isotropic(np.ones(4)), 500, seed=3, plateau=None, target=-0.5)
    assert c.best_fitness >= -0.5 and len(c.trace) < 500


def test_plateau_stop():
    res = nes.optimize(lambda zs: np.zeros(len(zs)) - 1.0, SearchDistribution.isotropic(np.zeros(3)),
                       300, seed=0, plateau=(20, 1e-4))
    assert len(res.trace) == 21


# ---------------------------------------------------------------- inverse problems

@pytest.fixture(scope="module")
def small_problem():
    G = gan.build_generator(4, 16, 16, seed=7)
    sc = flowsim.five_producer_wells(16, 16, t_end=0.2, n_report=40)
    return nes.InverseProblem(G, sc)


def test_observation_window(small_problem):
    assert small_problem.observed_time == pytest.approx(0.1)
    obs = small_problem.observation_scenario
    assert obs.t_end == pytest.approx(0.1) and obs.n_report == 20


def test_inverse_crime_zero_misfit(small_problem):
    z = np.random.default_rng(0).standard_normal(4)
    problem = nes.InverseProblem(small_problem.generator, small_problem.scenario)
    problem.d_obs = problem.forward(z)
    assert problem.misfit(z) == 0.0
    assert nes.fitness(z, problem) == pytest.approx(-z @ z)


def test_fitness_rejects_nonfinite(small_problem):
    small_problem.d_obs = np.zeros(1)
    with pytest.raises(ValueError):
        nes.fitness(np.array([np.nan, 0, 0, 0]), small_problem)


def test_failed_simulation_is_minus_inf(small_problem, monkeypatch):
    problem = nes.InverseProblem(small_problem.generator, small_problem.scenario, d_obs=np.zeros(5))

    def boom(*a, **k):
        raise flowsim.ConvergenceError("forced")

    monkeypatch.setattr(flowsim, "simulate", boom)
    assert nes.fitness(np.zeros(4), problem) == -math.inf


def test_observed_window_beyond_simulation_rejected(small_problem):
    with pytest.raises(ValueError):
        nes.InverseProblem(small_problem.generator, small_problem.scenario, observed_pvi=2.0)


def test_history_match_small(small_problem):
    z_true = np.random.default_rng(5).standard_normal(4)
    problem = nes.InverseProblem(small_problem.generator, small_problem.scenario)
    problem.d_obs = problem.forward(z_true)
    res = nes.history_match(problem, n_restarts=2, generations=15)
    assert len(res) == 2
    for r in res:
        assert r.misfit_final <= r.misfit_initial
        assert r.record is not None and r.raster.shape == (16, 16)


def test_image_match_small():
    G = gan.build_generator(3, 8, 8, seed=1)
    for w in G.weights():
        w.data *= 25.0   # make the image term dominate the latent prior
    target = gan.generate_from(G, np.array([0.5, -1.0, 0.2]))
    res = nes.image_match(target, G, n_restarts=1, generations=60, plateau=None)
    assert res[0].misfit_final < res[0].misfit_initial
