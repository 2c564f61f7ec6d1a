"""Convergence and mixing diagnostics over retained draws."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

log = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.1
ACCEPTANCE_FLAG_BAND = (0.10, 0.40)


class DegenerateSeriesError(ValueError):
    pass


@dataclass(frozen=True)
class ScalarTrace:
    name: str
    chains: tuple[np.ndarray, ...]

    def __post_init__(self):
        chains = tuple(np.asarray(c, dtype=float) for c in self.chains)
        if not chains:
            raise ValueError("trace needs at least one chain")
        n = chains[0].size
        if n < 2 or any(c.ndim != 1 or c.size != n for c in chains):
            raise ValueError("chains must be 1-D, equal length, and have at least 2 draws")
        object.__setattr__(self, "chains", chains)

    @property
    def array(self) -> np.ndarray:
        return np.vstack(self.chains)


class RhatResult(NamedTuple):
    rhat: float
    degenerate: bool


def gelman_rubin(trace: ScalarTrace | np.ndarray, split: bool = False) -> RhatResult:
    """Potential scale reduction sqrt((n-1)/n + B/(n W)) of Gelman and Rubin (1992).

    ``B`` is n times the variance of the chain means, ``W`` the mean within-chain
    variance. With ``split`` each chain is halved first.
    """
    x = trace.array if isinstance(trace, ScalarTrace) else np.asarray(trace, dtype=float)
    if split:
        half = x.shape[1] // 2
        x = np.vstack([x[:, :half], x[:, x.shape[1] - half :]])
    m, n = x.shape
    if m < 2 or n < 2:
        raise ValueError("Gelman-Rubin needs at least 2 chains of at least 2 draws")
    W = float(np.mean(np.var(x, axis=1, ddof=1)))
    B = n * float(np.var(x.mean(axis=1), ddof=1))
    if W == 0.0:
        if B == 0.0:
            return RhatResult(1.0, True)
        return RhatResult(float("inf"), True)
    return RhatResult(float(np.sqrt((n - 1) / n + B / (n * W))), False)


def autocorrelation(series, max_lag: int | None = None) -> np.ndarray:
    """Biased (1/n) sample autocorrelation for lags 0..max_lag."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if max_lag is None:
        max_lag = n - 1
    if not 1 <= max_lag < n:
        raise ValueError(f"need 1 <= max_lag < n, got max_lag={max_lag}, n={n}")
    d = x - x.mean()
    denom = float(d @ d)
    if denom == 0.0 or not np.isfinite(denom):
        raise DegenerateSeriesError("autocorrelation of a constant series is undefined")
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(d, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1]
    acf = acov / denom
    acf[0] = 1.0
    return acf


def effective_sample_size(series) -> float:
    """n / (1 + 2 sum rho_k), truncated by Geyer's initial positive sequence; capped at n."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 10:
        raise ValueError(f"effective sample size needs at least 10 draws, got {n}")
    rho = autocorrelation(x, n - 1)
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    stop = np.flatnonzero(pairs <= 0)
    pairs = pairs[: stop[0]] if stop.size else pairs
    tau = -1.0 + 2.0 * pairs.sum()
    return float(min(n / tau, n)) if tau > 0 else float(n)


@dataclass
class AcceptanceReport:
    rates: np.ndarray
    flagged: np.ndarray
    subject_ids: tuple[str, ...]
    band: tuple[float, float] = ACCEPTANCE_FLAG_BAND

    @property
    def summary(self) -> dict:
        r = self.rates
        return {
            "n_subjects": int(r.size),
            "mean": float(r.mean()),
            "min": float(r.min()),
            "max": float(r.max()),
            "n_flagged": int(self.flagged.sum()),
            "flag_band": list(self.band),
        }


def acceptance_report(samples, band=ACCEPTANCE_FLAG_BAND) -> AcceptanceReport:
    """Post-burn-in M-H acceptance per subject; pools several chains when given a list."""
    if isinstance(samples, (list, tuple)):
        counts = sum(s.accept_counts for s in samples)
        total = sum(s.n_proposals for s in samples)
        ids = samples[0].subject_ids
    else:
        counts, total, ids = samples.accept_counts, samples.n_proposals, samples.subject_ids
    rates = np.asarray(counts, dtype=float) / max(total, 1)
    lo, hi = band
    return AcceptanceReport(rates, (rates < lo) | (rates > hi), tuple(ids), tuple(band))


def qq_export(values) -> np.ndarray:
    """(theoretical normal quantile, sorted sample) pairs, Phi^-1((i - 0.5) / n)."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    n = v.size
    if n < 3:
        raise ValueError("Q-Q export needs at least 3 values")
    theo = norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    return np.column_stack([theo, v])


def qq_slope(pairs: np.ndarray) -> float:
    theo, sample = pairs[:, 0], pairs[:, 1]
    return float(np.polyfit(theo, sample, 1)[0])


# ---------------------------------------------------------------------------
# parameter traces from fitted chains


def global_parameter_traces(chains) -> dict[str, np.ndarray]:
    """(n_chains, n_draws) arrays for every global scalar: beta, A, sigma2, Sigma_gamma."""
    out = {}
    K = chains[0].beta.shape[1]
    for k in range(K):
        out[f"beta[{k}]"] = np.array([c.beta[:, k] for c in chains])
    if chains[0].model.use_covariates:
        for a in range(3):
            for b in range(chains[0].A.shape[2]):
                out[f"A[{a}][{b}]"] = np.array([c.A[:, a, b] for c in chains])
    out["sigma2"] = np.array([c.sigma2 for c in chains])
    for a in range(3):
        for b in range(a, 3):
            out[f"sigma_gamma[{a}][{b}]"] = np.array([c.sigma_gamma[:, a, b] for c in chains])
    return out


def gamma_traces(chains) -> dict[str, np.ndarray]:
    out = {}
    N = chains[0].gamma.shape[1]
    for i in range(N):
        for k in range(3):
            out[f"gamma[{i}][{k}]"] = np.array([c.gamma[:, i, k] for c in chains])
    return out


def convergence_table(traces: dict[str, np.ndarray], split: bool = False) -> list[dict]:
    rows = []
    for name, x in traces.items():
        row = {"parameter": name, "mean": float(x.mean()), "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0}
        if x.shape[0] >= 2 and x.shape[1] >= 2:
            res = gelman_rubin(x, split=split)
            row["rhat"], row["degenerate"] = res.rhat, res.degenerate
        else:
            row["rhat"], row["degenerate"] = float("nan"), False
        try:
            row["ess"] = float(sum(effective_sample_size(c) for c in x))
        except (DegenerateSeriesError, ValueError):
            row["ess"] = float("nan")
        rows.append(row)
    return rows


def rhat_warnings(rows: list[dict], threshold: float = RHAT_THRESHOLD) -> list[dict]:
    return [r for r in rows if r["rhat"] >= threshold]
