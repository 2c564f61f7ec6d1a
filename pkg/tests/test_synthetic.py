import math

import numpy as np
import pytest
from scipy.stats import norm

from sitar_mcmc.config import McmcConfig, ModelConfig, PriorConfig
from sitar_mcmc.distributions import logpdf_mvn
from sitar_mcmc.sampler import SitarProblem, run_chain
from sitar_mcmc.spline import SplineBasis, place_knots
from sitar_mcmc.synthetic import (
    GridTooNarrowError,
    Scenario,
    TruthRecord,
    generate_dataset,
    grid_posterior_1d,
    make_truth,
    random_design,
    recovery_study,
    total_variation,
)


def _truth(sigma2=0.25, sg=None, n=10):
    rng = np.random.default_rng(0)
    design = random_design(rng, n, 6)
    knots = place_knots(np.concatenate(design.times), 3)
    truth = TruthRecord(
        beta_true=np.array([110.0, 120.0, 140.0, 152.0, 160.0]),
        sigma2_true=sigma2,
        sigma_gamma_true=np.diag([0.2, 4.0, 0.01]) if sg is None else sg,
        A_true=np.zeros((3, 1)),
        knots=knots,
    )
    return truth, design


def test_noiseless_degenerate_data_lie_on_curve():
    truth, design = _truth(sigma2=0.0, sg=1e-18 * np.eye(3))
    ds, realized = generate_dataset(truth, design, np.random.default_rng(1))
    spline = SplineBasis(truth.knots)
    for s in ds.subjects:
        assert np.max(np.abs(s.responses - spline.basis(s.times) @ truth.beta_true)) < 1e-6


def test_generation_is_deterministic():
    truth, design = _truth()
    a, _ = generate_dataset(truth, design, np.random.default_rng(5))
    b, _ = generate_dataset(truth, design, np.random.default_rng(5))
    assert a.responses.tobytes() == b.responses.tobytes()


def test_realized_gamma_covariance():
    sg = np.array([[0.25, 0.45, -0.01], [0.45, 9.0, 0.06], [-0.01, 0.06, 0.01]])
    truth, design = _truth(sg=sg, n=2000)
    design = random_design(np.random.default_rng(2), 2000, 3)
    _, realized = generate_dataset(truth, design, np.random.default_rng(3))
    emp = np.cov(realized.gamma_true, rowvar=False)
    assert np.linalg.norm(emp - sg) / np.linalg.norm(sg) < 0.05


def test_truth_record_round_trip():
    truth, design = _truth()
    _, realized = generate_dataset(truth, design, np.random.default_rng(5))
    back = TruthRecord.from_dict(realized.to_dict())
    np.testing.assert_array_equal(back.gamma_true, realized.gamma_true)
    assert back.knots == realized.knots


def _one_subject(seed=0, T=2):
    truth, design = _truth(n=1)
    ds, realized = generate_dataset(truth, design, np.random.default_rng(seed))
    return ds.subjects[0], truth


def test_grid_posterior_normalized():
    s, truth = _one_subject()
    grid = np.linspace(-4, 4, 2001)
    p = grid_posterior_1d(s, "gamma1", [0, 0, 0], truth.beta_true, 0.25, np.zeros(3), truth.sigma_gamma_true, truth.knots, grid)
    assert abs(p.sum() - 1.0) < 1e-12


def test_grid_posterior_flat_likelihood_is_prior():
    s, truth = _one_subject()
    grid = np.linspace(-8, 8, 2001)
    p = grid_posterior_1d(s, "gamma1", [0, 0, 0], truth.beta_true, 1e12, np.zeros(3), np.eye(3), truth.knots, grid)
    prior = norm.pdf(grid)
    assert total_variation(p, prior / prior.sum()) < 1e-6


def test_grid_posterior_size_is_conjugate_normal():
    s, truth = _one_subject(seed=4)
    sg = truth.sigma_gamma_true
    fixed = np.array([0.3, 0.0, -0.05])
    sigma2 = 0.5
    # conditional prior of gamma_2 given gamma_1, gamma_3
    o = [0, 2]
    w = sg[1, o] @ np.linalg.inv(sg[np.ix_(o, o)])
    m0 = w @ fixed[o]
    v0 = sg[1, 1] - w @ sg[o, 1]
    B = SplineBasis(truth.knots).basis(np.exp(fixed[2]) * (s.times - fixed[0]))
    r = s.responses - B @ truth.beta_true
    prec = 1 / v0 + s.n_obs / sigma2
    mean = (m0 / v0 + r.sum() / sigma2) / prec
    sd = math.sqrt(1 / prec)
    grid = np.linspace(mean - 10 * sd, mean + 10 * sd, 2001)
    p = grid_posterior_1d(s, "size", fixed, truth.beta_true, sigma2, np.zeros(3), sg, truth.knots, grid)
    ref = norm.pdf(grid, mean, sd)
    assert total_variation(p, ref / ref.sum()) < 1e-6


def test_grid_too_narrow():
    s, truth = _one_subject()
    with pytest.raises(GridTooNarrowError):
        grid_posterior_1d(s, "gamma1", [0, 0, 0], truth.beta_true, 0.25, np.zeros(3), truth.sigma_gamma_true,
                          truth.knots, np.linspace(-0.01, 0.01, 11))


def test_grid_posterior_shift_invariance():
    s, truth = _one_subject()
    grid = np.linspace(-4, 4, 401)
    sg = truth.sigma_gamma_true

    def dens(g, c=0.0):
        return logpdf_mvn(g, np.zeros(3), sg) - 0.5 * (g[1] - 1) ** 2 + c

    a = grid_posterior_1d(s, "tempo", [0, 0, 0], None, None, None, None, None, grid, log_density=dens)
    b = grid_posterior_1d(s, "tempo", [0, 0, 0], None, None, None, None, None, grid, log_density=lambda g: dens(g, 1e3))
    assert np.max(np.abs(a - b)) < 1e-14


def test_recovery_needs_replicates():
    with pytest.raises(ValueError):
        recovery_study(Scenario(), McmcConfig(n_iterations=100, thin=1, n_chains=1), 0)


def test_recovery_zero_noise():
    sc = Scenario(sigma2=0.0, sigma_gamma=1e-18 * np.eye(3))
    mcmc = McmcConfig(n_iterations=10_000, thin=5, n_chains=2, seed=1)
    # the random-effects prior scale has to match the degenerate truth, see test_growth
    rep = recovery_study(sc, mcmc, 1, prior=PriorConfig(iw_scale=1e-6), seed=3)
    assert not rep.failures
    assert all(abs(b) < 1e-3 for b in rep.bias.values())
    # variance truths of 0 sit on the support boundary; only the curve coefficients can be covered
    assert all(v == 1.0 for k, v in rep.coverage.items() if k.startswith("beta"))


def test_recovery_failures_are_recorded(monkeypatch):
    import sitar_mcmc.sampler as smp

    def boom(*a, **k):
        raise RuntimeError("fit failed")

    monkeypatch.setattr(smp, "run_chains", boom)
    rep = recovery_study(Scenario(n_subjects=5, n_obs=5), McmcConfig(n_iterations=100, thin=1, n_chains=1), 2)
    assert [f[0] for f in rep.failures] == [0, 1]
    assert rep.coverage == {}


@pytest.mark.slow
def test_recovery_standard_scenario_sigma2_coverage():
    mcmc = McmcConfig(n_iterations=10_000, burn_in_fraction=0.5, thin=5, n_chains=2, seed=11)
    rep = recovery_study(Scenario(), mcmc, 20, seed=17)
    assert not rep.failures
    assert 0.8 <= rep.coverage["sigma2"] <= 1.0


def test_round_trip_gamma_near_zero():
    sc = Scenario(n_subjects=40, n_obs=8, sigma_gamma=1e-6 * np.eye(3))
    ds, truth = make_truth(sc, np.random.default_rng(8))
    problem = SitarProblem(ds, ModelConfig(), PriorConfig(), knots=truth.knots)
    out = run_chain(ds, ModelConfig(), PriorConfig(), McmcConfig(n_iterations=6000, thin=5, seed=4), problem=problem)
    mean, sd = out.gamma.mean(axis=0), out.gamma.std(axis=0)
    ok = np.all(np.abs(mean) < 3 * sd, axis=1)
    assert ok.mean() >= 0.95


def test_recovery_independent_of_workers():
    sc = Scenario(n_subjects=10, n_obs=6)
    mcmc = McmcConfig(n_iterations=200, thin=2, n_chains=1, seed=2)
    a = recovery_study(sc, mcmc, 2, seed=4)
    b = recovery_study(sc, mcmc, 2, seed=4, threads=2)
    assert a.per_replicate == b.per_replicate
