"""Simulation from the generative model, brute-force oracles and recovery studies.

The oracles here deliberately avoid the sampler's kernels: the log
conditional is re-derived with mpmath, and the natural spline basis is
re-evaluated point by point from its defining formula.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import mpmath
import numpy as np

from .config import McmcConfig, ModelConfig, PriorConfig
from .data import INTERCEPT, LongitudinalDataset, SubjectRecord
from .spline import KnotSet, SplineBasis, place_knots

mpmath.mp.dps = 40


class GridTooNarrowError(ValueError):
    pass


@dataclass
class TruthRecord:
    beta_true: np.ndarray
    sigma2_true: float
    sigma_gamma_true: np.ndarray
    A_true: np.ndarray
    knots: KnotSet
    family: str = "natural_cubic"
    gamma_true: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "beta_true": self.beta_true.tolist(),
            "sigma2_true": self.sigma2_true,
            "sigma_gamma_true": np.asarray(self.sigma_gamma_true).tolist(),
            "A_true": np.asarray(self.A_true).tolist(),
            "knots": self.knots.to_dict(),
            "family": self.family,
            "gamma_true": None if self.gamma_true is None else self.gamma_true.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TruthRecord":
        return cls(
            beta_true=np.array(d["beta_true"], dtype=float),
            sigma2_true=float(d["sigma2_true"]),
            sigma_gamma_true=np.array(d["sigma_gamma_true"], dtype=float),
            A_true=np.array(d["A_true"], dtype=float),
            knots=KnotSet.from_dict(d["knots"]),
            family=d.get("family", "natural_cubic"),
            gamma_true=None if d.get("gamma_true") is None else np.array(d["gamma_true"], dtype=float),
        )


@dataclass
class Design:
    """Per-subject observation times and covariate rows (intercept first)."""

    times: list[np.ndarray]
    covariates: np.ndarray
    covariate_names: tuple[str, ...] = (INTERCEPT,)


def pubertal_curve(t, base=140.0, slope=5.0, spurt=12.0, center=0.0, width=0.8):
    """Linear growth plus a logistic spurt; ``t`` is centred age."""
    t = np.asarray(t, dtype=float)
    return base + slope * t + spurt / (1.0 + np.exp(-(t - center) / width))


def project_curve(fn: Callable, knots: KnotSet, family: str = "natural_cubic", n_grid: int = 512) -> np.ndarray:
    """Least-squares spline coefficients of ``fn`` over the knot range."""
    grid = np.linspace(*knots.boundary, n_grid)
    B = SplineBasis(knots, family).basis(grid)
    beta, *_ = np.linalg.lstsq(B, fn(grid), rcond=None)
    return beta


def random_design(
    rng: np.random.Generator,
    n_subjects: int,
    n_obs: int,
    time_range=(-5.0, 5.0),
    covariate_sampler: Callable | None = None,
    covariate_names: Sequence[str] = (),
) -> Design:
    """Uniform sorted times per subject; subject 0 also observes both range ends."""
    lo, hi = time_range
    times = []
    for i in range(n_subjects):
        t = np.sort(rng.uniform(lo, hi, n_obs))
        if i == 0 and n_obs >= 2:
            t[0], t[-1] = lo, hi
        times.append(t)
    if covariate_sampler is None:
        X = np.ones((n_subjects, 1))
    else:
        X = np.column_stack([np.ones(n_subjects), covariate_sampler(rng, n_subjects)])
    return Design(times, X, (INTERCEPT, *covariate_names))


def generate_dataset(truth: TruthRecord, design: Design, rng: np.random.Generator) -> tuple[LongitudinalDataset, TruthRecord]:
    N = len(design.times)
    X = np.asarray(design.covariates, dtype=float)
    A = np.asarray(truth.A_true, dtype=float)
    mean = X @ A.T if A.size else np.zeros((N, 3))
    chol = np.linalg.cholesky(np.asarray(truth.sigma_gamma_true, dtype=float))
    gamma = mean + rng.standard_normal((N, 3)) @ chol.T
    spline = SplineBasis(truth.knots, truth.family)
    sd = math.sqrt(truth.sigma2_true)
    width = len(str(N - 1))
    subjects = []
    for i, t in enumerate(design.times):
        w = np.exp(gamma[i, 2]) * (t - gamma[i, 0])
        y = gamma[i, 1] + spline.basis(w) @ truth.beta_true + sd * rng.standard_normal(t.size)
        subjects.append(SubjectRecord(id=f"s{i:0{width}d}", times=t, responses=y, covariates=X[i]))
    ds = LongitudinalDataset(tuple(subjects), covariate_names=tuple(design.covariate_names))
    realized = TruthRecord(
        beta_true=np.asarray(truth.beta_true, dtype=float),
        sigma2_true=truth.sigma2_true,
        sigma_gamma_true=np.asarray(truth.sigma_gamma_true, dtype=float),
        A_true=A,
        knots=truth.knots,
        family=truth.family,
        gamma_true=gamma,
    )
    return ds, realized


# ---------------------------------------------------------------------------
# scenarios

DEFAULT_SIGMA_GAMMA = np.array(
    [
        [0.25, 0.45, -0.010],
        [0.45, 9.00, 0.060],
        [-0.010, 0.060, 0.010],
    ]
)


@dataclass
class Scenario:
    n_subjects: int = 100
    n_obs: int = 10
    n_interior_knots: int = 3
    time_range: tuple[float, float] = (-5.0, 5.0)
    sigma2: float = 0.25
    sigma_gamma: np.ndarray = field(default_factory=lambda: DEFAULT_SIGMA_GAMMA.copy())
    curve: Callable = pubertal_curve
    family: str = "natural_cubic"


def make_truth(scenario: Scenario, rng: np.random.Generator) -> tuple[LongitudinalDataset, TruthRecord]:
    """Draw a design, fix knots on its realized times, project the curve, then simulate."""
    design = random_design(rng, scenario.n_subjects, scenario.n_obs, scenario.time_range)
    knots = place_knots(np.concatenate(design.times), scenario.n_interior_knots)
    beta = project_curve(scenario.curve, knots, scenario.family)
    truth = TruthRecord(
        beta_true=beta,
        sigma2_true=scenario.sigma2,
        sigma_gamma_true=np.asarray(scenario.sigma_gamma, dtype=float),
        A_true=np.zeros((3, 1)),
        knots=knots,
        family=scenario.family,
    )
    return generate_dataset(truth, design, rng)


# ---------------------------------------------------------------------------
# independent oracles


def naive_natural_basis(knots: KnotSet, x: float) -> list:
    """Cardinal natural cubic basis at one point, mpmath arithmetic, written from the formula.

    The truncated-power natural basis is evaluated in ``u = (x - lo) / (hi - lo)``
    and mapped to the cardinal basis through the inverse of its values at the knots.
    """
    lo, hi = (mpmath.mpf(v) for v in knots.boundary)
    xi = [(mpmath.mpf(k) - lo) / (hi - lo) for k in knots.all_knots]
    xi[0], xi[-1] = mpmath.mpf(0), mpmath.mpf(1)
    u = (mpmath.mpf(x) - lo) / (hi - lo)
    n = len(xi)

    def raw(v):
        def d(k):
            a = max(v - xi[k], 0) ** 3
            b = max(v - xi[n - 1], 0) ** 3
            return (a - b) / (xi[n - 1] - xi[k])

        return [mpmath.mpf(1), v] + [d(k) - d(n - 2) for k in range(n - 2)]

    if u < 0:
        # below the range only the linear part is non-zero
        row = [mpmath.mpf(1), u] + [mpmath.mpf(0)] * (n - 2)
    elif u <= 1:
        row = raw(u)
    else:
        # above the range: linear continuation from u = 1
        one = raw(mpmath.mpf(1))
        slopes = [mpmath.mpf(0), mpmath.mpf(1)]
        dlast = 3 * (1 - xi[n - 2]) ** 2 / (xi[n - 1] - xi[n - 2])
        for k in range(n - 2):
            slopes.append(3 * (1 - xi[k]) ** 2 / (xi[n - 1] - xi[k]) - dlast)
        row = [a + (u - 1) * s for a, s in zip(one, slopes)]
    out = mpmath.matrix([row]) * _naive_cardinal(knots, raw, xi)
    return [out[0, k] for k in range(n)]


_CARDINAL_CACHE: dict = {}


def _naive_cardinal(knots: KnotSet, raw, xi):
    key = (knots, mpmath.mp.dps)
    if key not in _CARDINAL_CACHE:
        _CARDINAL_CACHE[key] = mpmath.inverse(mpmath.matrix([raw(v) for v in xi]))
    return _CARDINAL_CACHE[key]


def naive_log_conditional(
    gamma_i,
    times,
    responses,
    beta,
    sigma2: float,
    prior_mean,
    sigma_gamma,
    knots: KnotSet,
) -> float:
    """log N_3(gamma_i | prior_mean, Sigma) + sum_j log N(y_j | g2 + B(w_j) beta, sigma2), in mpmath."""
    g = [mpmath.mpf(float(v)) for v in gamma_i]
    m = mpmath.matrix([float(v) for v in prior_mean])
    S = mpmath.matrix(np.asarray(sigma_gamma, dtype=float).tolist())
    diff = mpmath.matrix(g) - m
    quad = (diff.T * mpmath.inverse(S) * diff)[0]
    lp = -mpmath.mpf(3) / 2 * mpmath.log(2 * mpmath.pi) - mpmath.log(mpmath.det(S)) / 2 - quad / 2
    s2 = mpmath.mpf(float(sigma2))
    for t, y in zip(times, responses):
        w = mpmath.exp(g[2]) * (mpmath.mpf(float(t)) - g[0])
        # evaluate at the same double the sampler sees
        b = naive_natural_basis(knots, float(w))
        fit = g[1] + mpmath.fsum(bk * mpmath.mpf(float(c)) for bk, c in zip(b, beta))
        r = mpmath.mpf(float(y)) - fit
        lp += -mpmath.log(2 * mpmath.pi * s2) / 2 - r * r / (2 * s2)
    return float(lp)


FREE_INDEX = {"gamma1": 0, "gamma2": 1, "gamma3": 2, "tempo": 0, "size": 1, "velocity": 2}


def grid_posterior_1d(
    subject: SubjectRecord,
    free_param: str,
    fixed_gamma,
    beta,
    sigma2: float,
    prior_mean,
    sigma_gamma,
    knots: KnotSet,
    grid,
    log_density: Callable | None = None,
) -> np.ndarray:
    """Normalized grid posterior of one gamma coordinate with everything else fixed."""
    k = FREE_INDEX[free_param]
    grid = np.asarray(grid, dtype=float)
    logp = np.empty(grid.size)
    for j, v in enumerate(grid):
        g = np.array(fixed_gamma, dtype=float)
        g[k] = v
        if log_density is None:
            logp[j] = naive_log_conditional(g, subject.times, subject.responses, beta, sigma2, prior_mean, sigma_gamma, knots)
        else:
            logp[j] = log_density(g)
    w = np.exp(logp - logp.max())
    if max(w[0], w[-1]) >= 1e-6:
        raise GridTooNarrowError("posterior mass reaches the grid edge; widen the grid")
    return w / w.sum()


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# recovery


@dataclass
class RecoveryReport:
    n_replicates: int
    coverage: dict[str, float]
    bias: dict[str, float]
    failures: list[tuple[int, str]]
    per_replicate: list[dict]


def _interval_hit(draws: np.ndarray, truth: float) -> bool:
    lo, hi = np.percentile(draws, [2.5, 97.5])
    return bool(lo <= truth <= hi)


def _recovery_replicate(job) -> tuple[int, dict | None, str | None]:
    from .sampler import SitarProblem, run_chains

    scenario, model, prior, mcmc, seed, r = job
    ds, truth = make_truth(scenario, np.random.default_rng([seed, r]))
    try:
        chains = run_chains(ds, model, prior, mcmc)
    except Exception as exc:  # recorded, study continues
        return r, None, repr(exc)
    params = {"sigma2": (np.concatenate([c.sigma2 for c in chains]), truth.sigma2_true)}
    beta = np.concatenate([c.beta for c in chains])
    sg = np.concatenate([c.sigma_gamma for c in chains])
    for k in range(beta.shape[1]):
        params[f"beta[{k}]"] = (beta[:, k], truth.beta_true[k])
    for k in range(3):
        params[f"sigma_gamma[{k}][{k}]"] = (sg[:, k, k], truth.sigma_gamma_true[k, k])
    if SitarProblem(ds, model, prior).p > 1:
        A = np.concatenate([c.A for c in chains])
        for a in range(3):
            for b in range(A.shape[2]):
                params[f"A[{a}][{b}]"] = (A[:, a, b], truth.A_true[a, b])
    row = {name: {"covered": _interval_hit(draws, true), "bias": float(draws.mean() - true)}
           for name, (draws, true) in params.items()}
    return r, row, None


def recovery_study(
    scenario: Scenario,
    mcmc: McmcConfig,
    n_replicates: int,
    prior: PriorConfig | None = None,
    seed: int = 0,
    threads: int = 1,
) -> RecoveryReport:
    """Generate, fit and score ``n_replicates`` synthetic datasets.

    Replicate ``r`` draws its data from the stream ``(seed, r)``, so the report
    does not depend on ``threads``.
    """
    if n_replicates < 1:
        raise ValueError("recovery study needs at least one replicate")
    prior = prior or PriorConfig()
    model = ModelConfig(spline_family=scenario.family, n_interior_knots=scenario.n_interior_knots)
    jobs = [(scenario, model, prior, mcmc, seed, r) for r in range(n_replicates)]
    if threads > 1 and n_replicates > 1:
        with ProcessPoolExecutor(max_workers=min(threads, n_replicates)) as pool:
            results = list(pool.map(_recovery_replicate, jobs))
    else:
        results = [_recovery_replicate(j) for j in jobs]
    rows = [row for _, row, _ in results if row is not None]
    failures = [(r, err) for r, _, err in results if err is not None]
    names = sorted({n for row in rows for n in row})
    coverage = {n: float(np.mean([row[n]["covered"] for row in rows])) for n in names}
    bias = {n: float(np.mean([row[n]["bias"] for row in rows])) for n in names}
    return RecoveryReport(n_replicates, coverage, bias, failures, rows)
