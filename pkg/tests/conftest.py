import numpy as np
import pytest

from sitar_mcmc.config import McmcConfig, ModelConfig, PriorConfig
from sitar_mcmc.data import INTERCEPT, LongitudinalDataset, SubjectRecord
from sitar_mcmc.sampler import ChainState, SitarProblem

# criterion number -> PASS/FAIL line, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


def make_dataset(times, responses, covariates=None, names=(INTERCEPT,)):
    subjects = []
    for i, (t, y) in enumerate(zip(times, responses)):
        x = np.array([1.0]) if covariates is None else np.asarray(covariates[i], dtype=float)
        subjects.append(SubjectRecord(f"s{i}", np.asarray(t, float), np.asarray(y, float), x))
    return LongitudinalDataset(tuple(subjects), covariate_names=tuple(names))


def tiny_instance(seed=3, n_subjects=3, n_obs=4, kappa=2, covariates=True):
    """Small fixed problem with a state for conditional-update checks."""
    rng = np.random.default_rng(seed)
    times = [np.sort(rng.uniform(0, 10, n_obs)) for _ in range(n_subjects)]
    responses = [100 + 3 * t + rng.normal(0, 1, n_obs) for t in times]
    if covariates:
        cov = [[1.0, float(i % 2)] for i in range(n_subjects)]
        ds = make_dataset(times, responses, cov, (INTERCEPT, "sex"))
        model = ModelConfig(n_interior_knots=kappa, use_covariates=True, covariate_selection=("sex",))
    else:
        ds = make_dataset(times, responses)
        model = ModelConfig(n_interior_knots=kappa)
    problem = SitarProblem(ds, model, PriorConfig())
    N, p = problem.n_subjects, problem.p
    state = ChainState(
        gamma=rng.normal(0, [0.3, 1.0, 0.05], (N, 3)),
        beta=np.linspace(100, 130, problem.n_basis),
        A=rng.normal(0, 0.2, (3, p)),
        sigma2=0.8,
        sigma_gamma=np.array([[0.3, 0.1, 0.0], [0.1, 2.0, 0.02], [0.0, 0.02, 0.01]]),
        proposal_scales=np.tile(0.01 * np.eye(3), (N, 1, 1)),
        accept_counts=np.zeros(N, dtype=np.int64),
    )
    return ds, problem, state


@pytest.fixture
def tiny():
    return tiny_instance()


@pytest.fixture
def quick_mcmc():
    return McmcConfig(n_iterations=400, burn_in_fraction=0.5, thin=2, n_chains=2, seed=99)
