"""Block Gibbs / Metropolis-Hastings sampler for the shape-invariant growth model.

Model, for subject ``i`` and observation ``j``::

    y_ij = gamma_i2 + B(exp(gamma_i3) * (t_ij - gamma_i1)) @ beta + e_ij,  e_ij ~ N(0, sigma2)
    gamma_i ~ N_3(A @ x_i, Sigma_gamma)

``gamma_i = (tempo, size, velocity)``. One sweep updates every ``gamma_i`` by
random-walk M-H with a multivariate-t proposal, then ``beta``, ``A``,
``sigma2`` and ``Sigma_gamma`` from their conjugate full conditionals.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .config import McmcConfig, ModelConfig, PriorConfig, fingerprint
from .data import LongitudinalDataset, SubjectRecord
from .distributions import (
    SpdError,
    cholesky,
    logpdf_mvn_rows,
    mvt_step,
    rng_stream,
    sample_inverse_gamma,
    sample_inverse_wishart,
    sample_mvn_precision,
)
from .spline import KnotSet, SplineBasis, place_knots

log = logging.getLogger(__name__)

GAMMA_NAMES = ("tempo", "size", "velocity")
LOG_2PI = math.log(2.0 * math.pi)

# stream keys below the chain id
STREAM_INIT, STREAM_GLOBAL, STREAM_GAMMA, STREAM_MOVES = 0, 1, 2, 3
EPOCH = 256
INIT_RIDGE = 1e-6
INIT_GAMMA_SD = 0.01
INIT_SCALE = 0.01
ADAPT_STEP = 0.5
SIW_STEP = 0.1
RESHAPE_MIN_DRAWS = 20
# initial scale of the population shift relative to Sigma_gamma / N
SHIFT_SCALE = 2.38 / math.sqrt(3.0)
# initial log-scale step of the spread move, times 1/sqrt(N)
SPREAD_STEP = 1.0
# adaptation ceilings for the joint moves; flat directions would otherwise grow them without bound
SHIFT_SCALE_MAX = 10.0
SPREAD_STEP_MAX = 2.0


class InitializationError(ValueError):
    pass


class SamplerAbort(RuntimeError):
    """Numerical failure inside an update; carries the iteration and a state dump."""

    def __init__(self, message: str, iteration: int, state_dump: dict):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.state_dump = state_dump


class SitarProblem:
    """Dataset flattened for vectorized evaluation, plus knots, basis and priors."""

    def __init__(
        self,
        ds: LongitudinalDataset,
        model: ModelConfig,
        prior: PriorConfig,
        knots: KnotSet | None = None,
    ):
        self.ds = ds
        self.model = model
        self.prior = prior
        self.t = ds.times
        self.y = ds.responses
        self.idx = ds.subject_index
        self.counts = np.array([s.n_obs for s in ds.subjects])
        self.n_subjects = ds.n_subjects
        self.n_obs = self.t.size
        if model.use_covariates:
            self.X = ds.design_matrix(model.covariate_selection)
            self.covariate_names = ("intercept", *model.covariate_selection)
        else:
            self.X = np.ones((self.n_subjects, 1))
            self.covariate_names = ("intercept",)
        self.p = self.X.shape[1]
        self.knots = knots if knots is not None else place_knots(self.t, model.n_interior_knots, model.knot_strategy)
        self.spline = SplineBasis(self.knots, model.spline_family)
        self.n_basis = self.spline.n_basis

    def warp(self, gamma: np.ndarray) -> np.ndarray:
        g = gamma[self.idx]
        with np.errstate(over="ignore", invalid="ignore"):
            return np.exp(g[:, 2]) * (self.t - g[:, 0])

    def warped_basis(self, gamma: np.ndarray) -> np.ndarray:
        # non-finite rows from overflowing warps make the candidate's density non-finite
        with np.errstate(over="ignore", invalid="ignore"):
            return self.spline.basis(self.warp(gamma))

    def residuals(self, gamma: np.ndarray, beta: np.ndarray, Z: np.ndarray | None = None) -> np.ndarray:
        if Z is None:
            Z = self.warped_basis(gamma)
        return self.y - gamma[self.idx, 1] - Z @ beta

    def rss(self, gamma, beta, Z=None) -> float:
        r = self.residuals(gamma, beta, Z)
        return float(r @ r)

    def subject_loglik(self, gamma, beta, sigma2, Z=None) -> np.ndarray:
        """Per-subject Gaussian log-likelihood, normalizing constants included."""
        r = self.residuals(gamma, beta, Z)
        # extreme warps overflow to inf, which the M-H step rejects
        with np.errstate(over="ignore", invalid="ignore"):
            ss = np.bincount(self.idx, weights=r * r, minlength=self.n_subjects)
            return -0.5 * (ss / sigma2 + self.counts * (LOG_2PI + math.log(sigma2)))

    def gamma_prior_mean(self, A: np.ndarray) -> np.ndarray:
        return self.X @ A.T


@dataclass
class ChainState:
    gamma: np.ndarray
    beta: np.ndarray
    A: np.ndarray
    sigma2: float
    sigma_gamma: np.ndarray
    proposal_scales: np.ndarray
    accept_counts: np.ndarray
    iteration: int = 0
    window_accepts: np.ndarray = None
    window_length: int = 0
    adaptation_frozen: bool = False
    # scaled inverse-Wishart: Sigma_gamma = D Q D with D = diag(exp(siw_log_d))
    siw_q: np.ndarray | None = None
    siw_log_d: np.ndarray | None = None
    proposal_chol: np.ndarray = field(default=None, repr=False)
    shift_scale: float = SHIFT_SCALE
    shift_accepts: int = 0
    shift_window: int = 0
    spread_steps: np.ndarray = None
    spread_accepts: np.ndarray = None

    def __post_init__(self):
        if self.window_accepts is None:
            self.window_accepts = np.zeros(self.gamma.shape[0], dtype=np.int64)
        if self.spread_steps is None:
            self.spread_steps = np.full(3, SPREAD_STEP / math.sqrt(self.gamma.shape[0]))
        if self.spread_accepts is None:
            self.spread_accepts = np.zeros(3, dtype=np.int64)
        if self.proposal_chol is None:
            self.refresh_proposal_chol()

    def refresh_proposal_chol(self):
        self.proposal_chol = np.stack([cholesky(s) for s in self.proposal_scales])

    def copy(self) -> "ChainState":
        kw = {}
        for k, v in self.__dict__.items():
            kw[k] = v.copy() if isinstance(v, np.ndarray) else v
        return ChainState(**kw)

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if k == "proposal_chol":
                continue
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def warped_basis_row(subject: SubjectRecord, gamma_i, knots: KnotSet, family: str) -> np.ndarray:
    g = np.asarray(gamma_i, dtype=float)
    w = np.exp(g[2]) * (subject.times - g[0])
    return SplineBasis(knots, family).basis(w)


def initialize_state(problem: SitarProblem, rng: np.random.Generator) -> ChainState:
    """Ridge fit of y on the unwarped basis; small random gamma; vague globals."""
    K = problem.n_basis
    distinct = np.unique(problem.t).size
    if distinct < K:
        raise InitializationError(
            f"only {distinct} distinct times for {K} basis columns; use fewer interior knots"
        )
    Z = problem.spline.basis(problem.t)
    beta = np.linalg.solve(Z.T @ Z + INIT_RIDGE * np.eye(K), Z.T @ problem.y)
    r = problem.y - Z @ beta
    sigma2 = max(float(r @ r) / problem.n_obs, 1e-12)
    N = problem.n_subjects
    gamma = INIT_GAMMA_SD * rng.standard_normal((N, 3))
    sigma_gamma = INIT_SCALE * np.eye(3)
    state = ChainState(
        gamma=gamma,
        beta=beta,
        A=np.zeros((3, problem.p)),
        sigma2=sigma2,
        sigma_gamma=sigma_gamma,
        proposal_scales=np.tile(INIT_SCALE * np.eye(3), (N, 1, 1)),
        accept_counts=np.zeros(N, dtype=np.int64),
    )
    if problem.model.sigma_gamma_prior == "scaled_inverse_wishart":
        state.siw_q = sigma_gamma.copy()
        state.siw_log_d = np.zeros(3)
    return state


# --------------------------------------------------------------------------
# conjugate updates


def beta_conditional(state: ChainState, problem: SitarProblem, Z=None) -> tuple[np.ndarray, np.ndarray]:
    """Precision Z'Z / sigma2 + I / sigma_beta^2 and linear term Z'(y - gamma_2) / sigma2."""
    if Z is None:
        Z = problem.warped_basis(state.gamma)
    target = problem.y - state.gamma[problem.idx, 1]
    precision = Z.T @ Z / state.sigma2 + np.eye(problem.n_basis) / problem.prior.beta_var
    return precision, Z.T @ target / state.sigma2


def update_beta(state: ChainState, problem: SitarProblem, rng, Z=None) -> np.ndarray:
    draw, _ = sample_mvn_precision(*beta_conditional(state, problem, Z), rng)
    return draw


def alpha_conditional(state: ChainState, problem: SitarProblem) -> tuple[np.ndarray, np.ndarray, slice]:
    """Precision and linear term for vec(A) (column-major), and which columns are free."""
    cols = slice(1, None) if problem.model.zero_intercept_row else slice(None)
    X = problem.X[:, cols]
    sg_inv = np.linalg.inv(state.sigma_gamma)
    sg_inv = 0.5 * (sg_inv + sg_inv.T)
    precision = np.kron(X.T @ X, sg_inv) + np.eye(3 * X.shape[1]) / problem.prior.alpha_var
    linear = (sg_inv @ state.gamma.T @ X).reshape(-1, order="F")
    return precision, linear, cols


def update_alpha(state: ChainState, problem: SitarProblem, rng) -> np.ndarray:
    if not problem.model.use_covariates:
        return state.A
    precision, linear, cols = alpha_conditional(state, problem)
    draw, _ = sample_mvn_precision(precision, linear, rng)
    A = np.zeros_like(state.A)
    A[:, cols] = draw.reshape(3, -1, order="F")
    return A


def update_sigma2(state: ChainState, problem: SitarProblem, rng, Z=None) -> float:
    rss = problem.rss(state.gamma, state.beta, Z)
    prior = problem.prior
    return sample_inverse_gamma(prior.sigma2_shape + 0.5 * problem.n_obs, prior.sigma2_scale + 0.5 * rss, rng)


def _gamma_resid(state: ChainState, problem: SitarProblem) -> np.ndarray:
    if problem.model.use_covariates:
        return state.gamma - problem.gamma_prior_mean(state.A)
    return state.gamma


def update_sigma_gamma(state: ChainState, problem: SitarProblem, rng) -> np.ndarray:
    S = _gamma_resid(state, problem)
    df = problem.prior.iw_df + problem.n_subjects
    return sample_inverse_wishart(df, problem.prior.psi + S.T @ S, rng)


def update_sigma_gamma_scaled(state: ChainState, problem: SitarProblem, rng) -> tuple[np.ndarray, np.ndarray]:
    """Scaled inverse-Wishart: conjugate draw of Q, then random-walk M-H on log D."""
    S = _gamma_resid(state, problem)
    prior = problem.prior
    d = np.exp(state.siw_log_d)
    Sd = S / d
    q = sample_inverse_wishart(prior.iw_df + problem.n_subjects, prior.psi + Sd.T @ Sd, rng)
    log_d = state.siw_log_d.copy()

    def target(ld):
        dd = np.exp(ld)
        chol = cholesky(dd[:, None] * q * dd[None, :])
        lp = logpdf_mvn_rows(S, np.zeros(3), chol).sum()
        return lp - 0.5 * np.sum((ld - prior.siw_log_scale_mean) ** 2) / prior.siw_log_scale_sd**2

    current = target(log_d)
    for k in range(3):
        cand = log_d.copy()
        cand[k] += SIW_STEP * rng.standard_normal()
        proposed = target(cand)
        if math.log(rng.random()) < proposed - current:
            log_d, current = cand, proposed
    return q, log_d


# --------------------------------------------------------------------------
# subject-level Metropolis-Hastings


def log_conditional_gamma(gamma: np.ndarray, state: ChainState, problem: SitarProblem, Z=None) -> np.ndarray:
    """Log full conditional of every gamma_i (rows of ``gamma``), constants included."""
    prior_chol = cholesky(state.sigma_gamma)
    lp = logpdf_mvn_rows(gamma, problem.gamma_prior_mean(state.A), prior_chol)
    return lp + problem.subject_loglik(gamma, state.beta, state.sigma2, Z)


def log_conditional_gamma_i(gamma_i, i: int, state: ChainState, problem: SitarProblem) -> float:
    gamma = state.gamma.copy()
    gamma[i] = gamma_i
    return float(log_conditional_gamma(gamma, state, problem)[i])


class GammaNoise:
    """Per-subject proposal noise, buffered by epochs of ``EPOCH`` iterations.

    Subject ``i`` in epoch ``e`` reads stream ``(seed, chain, STREAM_GAMMA, i, e)``,
    so any subset of subjects can be processed in any order with identical results.
    """

    def __init__(self, seed: int, chain_id: int, n_subjects: int, df: float):
        self.seed, self.chain_id, self.n_subjects, self.df = seed, chain_id, n_subjects, df
        self._epoch = -1

    def _fill(self, epoch: int):
        N = self.n_subjects
        self.z = np.empty((EPOCH, N, 3))
        self.chi2 = np.empty((EPOCH, N))
        self.logu = np.empty((EPOCH, N))
        for i in range(N):
            g = rng_stream(self.seed, self.chain_id, STREAM_GAMMA, i, epoch)
            self.z[:, i] = g.standard_normal((EPOCH, 3))
            self.chi2[:, i] = g.chisquare(self.df, EPOCH)
            self.logu[:, i] = np.log(g.random(EPOCH))
        self._epoch = epoch

    def __call__(self, iteration: int):
        epoch, k = divmod(iteration, EPOCH)
        if epoch != self._epoch:
            self._fill(epoch)
        return self.z[k], self.chi2[k], self.logu[k]


def mh_gamma_step(
    state: ChainState,
    problem: SitarProblem,
    z: np.ndarray,
    chi2: np.ndarray,
    logu: np.ndarray,
    df: float,
    Z_current: np.ndarray | None = None,
    free: np.ndarray | None = None,
    log_density=None,
):
    """One M-H sweep over all subjects with pre-drawn noise.

    Returns ``(gamma, accepted, Z)`` where ``Z`` is the warped basis at the new
    gamma. ``free`` masks which gamma coordinates move; ``log_density`` replaces
    the log full conditional (used to check shift invariance).
    """
    step = mvt_step(state.proposal_chol, z, chi2, df)
    if free is not None:
        step = step * free
    cand = state.gamma + step
    if Z_current is None:
        Z_current = problem.warped_basis(state.gamma)
    Z_cand = problem.warped_basis(cand)
    if log_density is None:
        lp_cur = log_conditional_gamma(state.gamma, state, problem, Z_current)
        lp_cand = log_conditional_gamma(cand, state, problem, Z_cand)
    else:
        lp_cur = log_density(state.gamma)
        lp_cand = log_density(cand)
    with np.errstate(invalid="ignore"):
        accepted = np.isfinite(lp_cand) & np.all(np.isfinite(cand), axis=1) & (logu < lp_cand - lp_cur)
    gamma = np.where(accepted[:, None], cand, state.gamma)
    Z = np.where(accepted[problem.idx][:, None], Z_cand, Z_current)
    return gamma, accepted, Z


def update_gamma_i(state: ChainState, problem: SitarProblem, i: int, rng, df: float = 5) -> tuple[np.ndarray, bool]:
    """Single-subject random-walk M-H step; updates ``accept_counts`` in place."""
    z = rng.standard_normal(3)
    g = rng.chisquare(df)
    logu = math.log(rng.random())
    cand = state.gamma[i] + mvt_step(state.proposal_chol[i], z, g, df)
    cur_lp = log_conditional_gamma_i(state.gamma[i], i, state, problem)
    cand_lp = log_conditional_gamma_i(cand, i, state, problem)
    accepted = bool(np.isfinite(cand_lp) and logu < cand_lp - cur_lp)
    if accepted:
        state.accept_counts[i] += 1
        return cand, True
    return state.gamma[i].copy(), False


def beta_marginal_loglik(gamma: np.ndarray, state: ChainState, problem: SitarProblem, Z=None) -> float:
    """log p(y | gamma, sigma2) with beta integrated over its N(0, sigma_beta^2 I) prior."""
    if Z is None:
        Z = problem.warped_basis(gamma)
    s2, v = state.sigma2, problem.prior.beta_var
    r = problem.y - gamma[problem.idx, 1]
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(r))):
        return -math.inf
    with np.errstate(over="ignore", invalid="ignore"):
        precision = Z.T @ Z / s2 + np.eye(problem.n_basis) / v
        b = Z.T @ r / s2
    if not (np.all(np.isfinite(precision)) and np.all(np.isfinite(b))):
        return -math.inf
    try:
        L = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        return -math.inf
    h = solve_triangular(L, b, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    quad = float(r @ r) / s2 - float(h @ h)
    return -0.5 * (problem.n_obs * (LOG_2PI + math.log(s2)) + problem.n_basis * math.log(v) + logdet + quad)


def population_shift_step(state: ChainState, problem: SitarProblem, z: np.ndarray, logu: float, Z=None):
    """Move every gamma_i by one common offset, beta integrated out.

    The offset is Gaussian with covariance ``shift_scale^2 Sigma_gamma / N``. The
    sampler must draw beta from its full conditional right after this step.
    Returns ``(gamma, accepted, Z)``.
    """
    if Z is None:
        Z = problem.warped_basis(state.gamma)
    chol = cholesky(state.sigma_gamma)
    offset = state.shift_scale * (chol @ z) / math.sqrt(problem.n_subjects)
    cand = state.gamma + offset[None, :]
    Z_cand = problem.warped_basis(cand)
    mean = problem.gamma_prior_mean(state.A)
    with np.errstate(over="ignore", invalid="ignore"):
        lp_cur = beta_marginal_loglik(state.gamma, state, problem, Z) + logpdf_mvn_rows(state.gamma, mean, chol).sum()
        lp_cand = beta_marginal_loglik(cand, state, problem, Z_cand) + logpdf_mvn_rows(cand, mean, chol).sum()
    if np.isfinite(lp_cand) and logu < lp_cand - lp_cur:
        return cand, True, Z_cand
    return state.gamma, False, Z


def spread_scale_step(state: ChainState, problem: SitarProblem, k: int, z: float, logu: float, Z=None):
    """Rescale coordinate ``k`` of every gamma_i about its prior mean together with Sigma_gamma.

    ``gamma_ik -> m_ik + e^s (gamma_ik - m_ik)`` and ``Sigma -> D Sigma D`` with
    ``D = diag(1, e^s, 1)`` at position ``k``. The gamma prior density and the
    Jacobian of the gamma map cancel; what remains is the beta-marginal
    likelihood, the inverse-Wishart prior and the Jacobian ``e^{4s}`` of the
    Sigma map. Beta must be drawn from its full conditional right after.
    Returns ``(gamma, sigma_gamma, accepted, Z)``.
    """
    if Z is None:
        Z = problem.warped_basis(state.gamma)
    s = state.spread_steps[k] * z
    d = np.ones(3)
    d[k] = math.exp(min(s, 700.0))
    mean = problem.gamma_prior_mean(state.A)
    cand = state.gamma.copy()
    cand[:, k] = mean[:, k] + d[k] * (state.gamma[:, k] - mean[:, k])
    Z_cand = Z if k == 1 else problem.warped_basis(cand)
    delta, psi = problem.prior.iw_df, np.asarray(problem.prior.iw_scale)
    inv_cur = np.linalg.inv(state.sigma_gamma)
    with np.errstate(over="ignore", invalid="ignore"):
        sg_cand = d[:, None] * state.sigma_gamma * d[None, :]
        inv_cand = inv_cur / (d[:, None] * d[None, :])
        log_prior = -s * (delta + 4.0) - 0.5 * float(np.sum(psi * (inv_cand - inv_cur)))
        lp = (beta_marginal_loglik(cand, state, problem, Z_cand) - beta_marginal_loglik(state.gamma, state, problem, Z)
              + log_prior + 4.0 * s)
    if np.isfinite(lp) and np.all(np.isfinite(sg_cand)) and logu < lp:
        return cand, sg_cand, True, Z_cand
    return state.gamma, state.sigma_gamma, False, Z


def adapt_proposals(state: ChainState, mcmc: McmcConfig) -> np.ndarray:
    """Scale each subject's proposal by exp(+-0.5) when its windowed acceptance leaves the target band."""
    if state.adaptation_frozen:
        log.warning("adapt_proposals called after burn-in; proposal scales are frozen")
        return state.proposal_scales
    if state.window_length == 0:
        return state.proposal_scales
    lo, hi = mcmc.target_acceptance
    rate = state.window_accepts / state.window_length
    log_factor = np.where(rate > hi, ADAPT_STEP, np.where(rate < lo, -ADAPT_STEP, 0.0))
    factor = np.exp(log_factor)
    state.proposal_scales = state.proposal_scales * factor[:, None, None]
    state.proposal_chol = state.proposal_chol * np.sqrt(factor)[:, None, None]
    state.window_accepts[:] = 0
    state.window_length = 0
    if state.shift_window:
        shift_rate = state.shift_accepts / state.shift_window
        if shift_rate > hi:
            state.shift_scale = min(state.shift_scale * math.exp(ADAPT_STEP / 2), SHIFT_SCALE_MAX)
        elif shift_rate < lo:
            state.shift_scale *= math.exp(-ADAPT_STEP / 2)
        rates = state.spread_accepts / state.shift_window
        steps = state.spread_steps * np.exp(np.where(rates > hi, ADAPT_STEP / 2, np.where(rates < lo, -ADAPT_STEP / 2, 0.0)))
        state.spread_steps = np.minimum(steps, SPREAD_STEP_MAX)
        state.shift_accepts = state.shift_window = 0
        state.spread_accepts[:] = 0
    return state.proposal_scales


def reshape_proposals(state: ChainState, history: np.ndarray) -> None:
    """Align each proposal with the empirical covariance of that subject's recent draws.

    The overall scale stays with ``adapt_proposals``: the new matrix keeps the
    old determinant.
    """
    N = history.shape[1]
    if history.shape[0] < RESHAPE_MIN_DRAWS:
        return
    for i in range(N):
        cov = np.cov(history[:, i, :], rowvar=False)
        if not np.all(np.isfinite(cov)):
            continue
        cov = cov + 1e-10 * np.trace(cov) * np.eye(3)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            continue
        old = state.proposal_scales[i]
        ratio = (np.linalg.det(old) / np.linalg.det(cov)) ** (1.0 / 3.0)
        if not np.isfinite(ratio) or ratio <= 0:
            continue
        state.proposal_scales[i] = cov * ratio
        state.proposal_chol[i] = chol * math.sqrt(ratio)


# --------------------------------------------------------------------------
# chains


@dataclass
class PosteriorSamples:
    """Thinned post-burn-in draws of one chain, stored as stacked arrays."""

    gamma: np.ndarray  # (D, N, 3)
    beta: np.ndarray  # (D, K)
    A: np.ndarray  # (D, 3, p)
    sigma2: np.ndarray  # (D,)
    sigma_gamma: np.ndarray  # (D, 3, 3)
    iterations: np.ndarray  # (D,)
    chain_id: int
    config_fingerprint: str
    knots: KnotSet
    model: ModelConfig
    prior: PriorConfig
    mcmc: McmcConfig
    subject_ids: tuple[str, ...]
    covariate_names: tuple[str, ...]
    time_transform: str
    accept_counts: np.ndarray  # post-burn-in, per subject
    n_proposals: int  # post-burn-in proposals per subject
    proposal_scales: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.sigma2.size

    @property
    def acceptance_rates(self) -> np.ndarray:
        return self.accept_counts / max(self.n_proposals, 1)

    def draw(self, k: int) -> ChainState:
        N = self.gamma.shape[1]
        return ChainState(
            gamma=self.gamma[k].copy(),
            beta=self.beta[k].copy(),
            A=self.A[k].copy(),
            sigma2=float(self.sigma2[k]),
            sigma_gamma=self.sigma_gamma[k].copy(),
            proposal_scales=np.tile(np.eye(3), (N, 1, 1)),
            accept_counts=np.zeros(N, dtype=np.int64),
            iteration=int(self.iterations[k]),
            proposal_chol=np.tile(np.eye(3), (N, 1, 1)),
        )

    def posterior_mean_state(self) -> ChainState:
        N = self.gamma.shape[1]
        return ChainState(
            gamma=self.gamma.mean(axis=0),
            beta=self.beta.mean(axis=0),
            A=self.A.mean(axis=0),
            sigma2=float(self.sigma2.mean()),
            sigma_gamma=self.sigma_gamma.mean(axis=0),
            proposal_scales=np.tile(np.eye(3), (N, 1, 1)),
            accept_counts=np.zeros(N, dtype=np.int64),
            proposal_chol=np.tile(np.eye(3), (N, 1, 1)),
        )

    def subset(self, index) -> "PosteriorSamples":
        """Draw subset, e.g. ``samples.subset(slice(None, None, 10))`` for extra thinning."""
        out = PosteriorSamples(**self.__dict__)
        for name in ("gamma", "beta", "A", "sigma2", "sigma_gamma", "iterations"):
            setattr(out, name, getattr(self, name)[index])
        return out


def run_chain(
    ds: LongitudinalDataset,
    model: ModelConfig,
    prior: PriorConfig,
    mcmc: McmcConfig,
    chain_id: int = 0,
    problem: SitarProblem | None = None,
    callback=None,
) -> PosteriorSamples:
    """Run one chain; deterministic in ``(mcmc.seed, chain_id)``.

    ``ds`` must already be on the modelling time scale. ``callback(it, state)``
    is invoked after every sweep when given.
    """
    if problem is None:
        problem = SitarProblem(ds, model, prior)
    seed = mcmc.seed
    state = initialize_state(problem, rng_stream(seed, chain_id, STREAM_INIT))
    rng = rng_stream(seed, chain_id, STREAM_GLOBAL)
    noise = GammaNoise(seed, chain_id, problem.n_subjects, mcmc.proposal_df)
    moves_rng = rng_stream(seed, chain_id, STREAM_MOVES) if mcmc.population_moves else None
    # the spread move rescales Sigma_gamma directly, which only the plain inverse-Wishart prior supports
    spread_moves = moves_rng is not None and model.sigma_gamma_prior == "inverse_wishart"
    n_burn = mcmc.n_burn_in
    D = mcmc.n_retained
    N, K, p = problem.n_subjects, problem.n_basis, problem.p
    out = {
        "gamma": np.empty((D, N, 3)),
        "beta": np.empty((D, K)),
        "A": np.empty((D, 3, p)),
        "sigma2": np.empty(D),
        "sigma_gamma": np.empty((D, 3, 3)),
        "iterations": np.empty(D, dtype=np.int64),
    }
    scaled_iw = model.sigma_gamma_prior == "scaled_inverse_wishart"
    # proposal shape is re-estimated at 1/4 and 1/2 of burn-in over trailing windows
    reshape_at = {n_burn // 4, n_burn // 2} - {0} if mcmc.adapt_shape else set()
    history = []
    history_from = 0

    Z = problem.warped_basis(state.gamma)
    kept = 0
    post_accepts = np.zeros(N, dtype=np.int64)
    for it in range(mcmc.n_iterations):
        try:
            z, chi2, logu = noise(it)
            gamma, accepted, Z = mh_gamma_step(state, problem, z, chi2, logu, mcmc.proposal_df, Z)
            state.gamma = gamma
            state.accept_counts += accepted
            if it < n_burn:
                state.window_accepts += accepted
                state.window_length += 1
            else:
                post_accepts += accepted
            if moves_rng is not None:
                u = moves_rng.random(4)
                zs = moves_rng.standard_normal(6)
                state.gamma, moved, Z = population_shift_step(state, problem, zs[:3], math.log(u[0]), Z)
                if it < n_burn:
                    state.shift_accepts += moved
                    state.shift_window += 1
                if spread_moves:
                    for k in range(3):
                        state.gamma, state.sigma_gamma, moved, Z = spread_scale_step(
                            state, problem, k, zs[3 + k], math.log(u[1 + k]), Z)
                        if it < n_burn:
                            state.spread_accepts[k] += moved
            state.beta = update_beta(state, problem, rng, Z)
            state.A = update_alpha(state, problem, rng)
            state.sigma2 = update_sigma2(state, problem, rng, Z)
            if scaled_iw:
                state.siw_q, state.siw_log_d = update_sigma_gamma_scaled(state, problem, rng)
                d = np.exp(state.siw_log_d)
                state.sigma_gamma = d[:, None] * state.siw_q * d[None, :]
            else:
                state.sigma_gamma = update_sigma_gamma(state, problem, rng)
        except (SpdError, np.linalg.LinAlgError) as exc:
            raise SamplerAbort(str(exc), it, state.to_dict()) from exc
        state.iteration = it + 1

        if it < n_burn:
            if reshape_at:
                history.append(state.gamma.copy())
                if state.iteration in reshape_at:
                    window = np.array(history[history_from:])
                    reshape_proposals(state, window)
                    history_from = len(history)
            if state.iteration % mcmc.adapt_interval == 0:
                adapt_proposals(state, mcmc)
            if state.iteration == n_burn:
                state.adaptation_frozen = True
                history = []
        elif (it + 1 - n_burn) % mcmc.thin == 0:
            out["gamma"][kept] = state.gamma
            out["beta"][kept] = state.beta
            out["A"][kept] = state.A
            out["sigma2"][kept] = state.sigma2
            out["sigma_gamma"][kept] = state.sigma_gamma
            out["iterations"][kept] = state.iteration
            kept += 1
        if callback is not None:
            callback(it, state)

    return PosteriorSamples(
        **out,
        chain_id=chain_id,
        config_fingerprint=fingerprint(model, prior, mcmc),
        knots=problem.knots,
        model=model,
        prior=prior,
        mcmc=mcmc,
        subject_ids=tuple(ds.ids),
        covariate_names=problem.covariate_names,
        time_transform=ds.time_transform_applied,
        accept_counts=post_accepts,
        n_proposals=mcmc.n_iterations - n_burn,
        proposal_scales=state.proposal_scales.copy(),
    )


def _run_chain_job(args):
    return run_chain(*args)


def run_chains(
    ds: LongitudinalDataset,
    model: ModelConfig,
    prior: PriorConfig,
    mcmc: McmcConfig,
    threads: int = 1,
) -> list[PosteriorSamples]:
    """All ``mcmc.n_chains`` chains; workers only change wall time, never results."""
    jobs = [(ds, model, prior, mcmc, c) for c in range(mcmc.n_chains)]
    if threads <= 1 or len(jobs) == 1:
        return [_run_chain_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(_run_chain_job, jobs))


def merge_chains(chains) -> PosteriorSamples:
    """Pool the draws of several chains of one fit into a single ``PosteriorSamples``."""
    if isinstance(chains, PosteriorSamples):
        return chains
    chains = list(chains)
    if len(chains) == 1:
        return chains[0]
    merged = PosteriorSamples(**chains[0].__dict__)
    for name in ("gamma", "beta", "A", "sigma2", "sigma_gamma", "iterations"):
        setattr(merged, name, np.concatenate([getattr(c, name) for c in chains]))
    merged.accept_counts = sum(c.accept_counts for c in chains)
    merged.n_proposals = sum(c.n_proposals for c in chains)
    return merged
