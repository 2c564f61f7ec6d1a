"""Growth quantities derived from posterior draws.

Curves live on the modelling time scale ``u`` (``u = log t`` after a log
transform) and are reported on the original time scale. A population curve
puts the warp parameters at their population value: zero without covariates,
``A @ x`` for a covariate profile ``x`` otherwise.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .sampler import GAMMA_NAMES, PosteriorSamples, merge_chains
from .spline import SplineBasis

log = logging.getLogger(__name__)

CURVE_KINDS = ("height", "velocity")
CURVE_HEADER = ["grid", "mean", "lower", "upper"]
DEFAULT_GRID = 512
REFINE_FACTOR = 10
# draws evaluated per block when every draw has its own warp
BLOCK = 256
FLAT_TOL = 1e-12


class DimensionError(ValueError):
    pass


@dataclass
class CurveEstimate:
    grid: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in CURVE_KINDS:
            raise ValueError(f"unknown curve kind {self.kind!r}")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("curve grid must be strictly increasing")

    def rows(self) -> list[list[float]]:
        return [list(map(float, r)) for r in zip(self.grid, self.mean, self.lower, self.upper)]


@dataclass
class PeakVelocity:
    """Posterior summary of the age at peak velocity and of the peak velocity."""

    apv_mean: float
    apv_lower: float
    apv_upper: float
    peak_mean: float
    peak_lower: float
    peak_upper: float
    boundary_fraction: float
    boundary_peak: bool
    apv_draws: np.ndarray = field(repr=False)
    peak_draws: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                for k, v in self.__dict__.items() if not k.endswith("_draws")}


@dataclass
class EffectsSummary:
    sd_size: float
    sd_tempo: float
    sd_velocity: float
    residual_sd: float
    correlations: np.ndarray  # (size, tempo, velocity) order, as in the tables
    covariate_table: list[dict]
    sd_intervals: dict[str, tuple[float, float]]
    percent: bool = False

    def sd_rows(self) -> list[list]:
        order = [("Residual SD", self.residual_sd), ("SD of size", self.sd_size),
                 ("SD of tempo", self.sd_tempo), ("SD of velocity", self.sd_velocity)]
        return [[name, value, *self.sd_intervals[name]] for name, value in order]


# ---------------------------------------------------------------------------
# per-draw curve evaluation


def _samples(samples) -> PosteriorSamples:
    return merge_chains(samples) if isinstance(samples, (list, tuple)) else samples


def profile_vector(samples: PosteriorSamples, profile) -> np.ndarray:
    """Full design row ``(1, covariates...)``; ``profile`` omits the intercept.

    ``profile`` may be a sequence in covariate order or a name -> value mapping.
    """
    names = samples.covariate_names[1:]
    if profile is None:
        return np.concatenate([[1.0], np.zeros(len(names))])
    if isinstance(profile, dict):
        unknown = set(profile) - set(names)
        missing = set(names) - set(profile)
        if unknown or missing:
            raise DimensionError(f"covariate profile keys must be {list(names)}, got {sorted(profile)}")
        values = [float(profile[n]) for n in names]
    else:
        values = [float(v) for v in np.atleast_1d(np.asarray(profile, dtype=float))] if np.size(profile) else []
    if len(values) != len(names):
        raise DimensionError(f"covariate profile has {len(values)} values, the fit has {len(names)} covariates {list(names)}")
    return np.concatenate([[1.0], values])


def population_gamma(samples: PosteriorSamples, profile=None) -> np.ndarray:
    """(D, 3) population warp parameters ``A_d @ x`` per draw."""
    x = profile_vector(samples, profile)
    return samples.A @ x


def model_grid(samples: PosteriorSamples, grid_size: int) -> np.ndarray:
    if grid_size < 2:
        raise ValueError(f"grid_size must be >= 2, got {grid_size}")
    lo, hi = samples.knots.boundary
    return np.linspace(lo, hi, grid_size)


def to_original(samples: PosteriorSamples, u: np.ndarray) -> np.ndarray:
    return np.exp(u) if samples.time_transform == "log" else np.asarray(u, dtype=float)


def curve_draws(samples: PosteriorSamples, u: np.ndarray, gamma: np.ndarray, kind: str = "height") -> np.ndarray:
    """(D, G) curve values per draw at model-scale points ``u``.

    ``gamma`` is (D, 3): the warp applied in each draw. Velocities are in
    response units per original time unit.
    """
    if kind not in CURVE_KINDS:
        raise ValueError(f"unknown curve kind {kind!r}")
    spline = SplineBasis(samples.knots, samples.model.spline_family)
    beta = samples.beta
    D = beta.shape[0]
    u = np.asarray(u, dtype=float)
    out = np.empty((D, u.size))
    if not np.any(gamma[:, [0, 2]]):
        B = spline.basis(u) if kind == "height" else spline.deriv(u)
        out[:] = beta @ B.T
        if kind == "height":
            out += gamma[:, 1:2]
    else:
        for start in range(0, D, BLOCK):
            g = gamma[start : start + BLOCK]
            scale = np.exp(g[:, 2:3])
            w = scale * (u[None, :] - g[:, 0:1])
            if kind == "height":
                B = spline.basis(w.ravel()).reshape(*w.shape, -1)
                out[start : start + BLOCK] = g[:, 1:2] + np.einsum("dgk,dk->dg", B, beta[start : start + BLOCK])
            else:
                B = spline.deriv(w.ravel()).reshape(*w.shape, -1)
                out[start : start + BLOCK] = scale * np.einsum("dgk,dk->dg", B, beta[start : start + BLOCK])
    if kind == "velocity" and samples.time_transform == "log":
        out /= np.exp(u)[None, :]
    return out


def _summarize(grid, values, kind) -> CurveEstimate:
    mean = values.mean(axis=0)
    lower, upper = np.percentile(values, [2.5, 97.5], axis=0)
    # identical draws: the average can be off by an ulp
    const = values.min(axis=0) == values.max(axis=0)
    mean[const] = values[0, const]
    # a skewed posterior can put the mean outside the percentile band; widen to keep the ordering
    return CurveEstimate(grid, mean, np.minimum(lower, mean), np.maximum(upper, mean), kind)


def mean_curve(samples, grid_size: int = DEFAULT_GRID, covariate_profile=None) -> CurveEstimate:
    """Population height curve with 95% pointwise credible band."""
    s = _samples(samples)
    u = model_grid(s, grid_size)
    return _summarize(to_original(s, u), curve_draws(s, u, population_gamma(s, covariate_profile), "height"), "height")


def velocity_curve(samples, grid_size: int = DEFAULT_GRID, covariate_profile=None) -> CurveEstimate:
    """First derivative of the population curve in original time units."""
    s = _samples(samples)
    u = model_grid(s, grid_size)
    return _summarize(to_original(s, u), curve_draws(s, u, population_gamma(s, covariate_profile), "velocity"), "velocity")


def subject_curve(samples, subject_index: int, grid_size: int = DEFAULT_GRID) -> CurveEstimate:
    """Curve of one subject, ``gamma_i2 + B(exp(gamma_i3)(u - gamma_i1)) beta`` per draw."""
    s = _samples(samples)
    N = s.gamma.shape[1]
    if not 0 <= subject_index < N:
        raise IndexError(f"subject index {subject_index} out of range for {N} subjects")
    u = model_grid(s, grid_size)
    return _summarize(to_original(s, u), curve_draws(s, u, s.gamma[:, subject_index, :], "height"), "height")


def age_at_peak_velocity(samples, grid_size: int = DEFAULT_GRID, covariate_profile=None) -> PeakVelocity:
    """Per-draw argmax of the velocity curve, refined once on a 10x finer local grid."""
    if grid_size < 64:
        raise ValueError(f"grid_size must be >= 64 for peak velocity, got {grid_size}")
    s = _samples(samples)
    u = model_grid(s, grid_size)
    gamma = population_gamma(s, covariate_profile)
    coarse = curve_draws(s, u, gamma, "velocity")
    j = np.argmax(coarse, axis=1)
    # a flat velocity curve has no interior peak either; its argmax is rounding noise
    vmax, vmin = coarse.max(axis=1), coarse.min(axis=1)
    flat = vmax - vmin <= FLAT_TOL * np.maximum(1.0, np.abs(vmax))
    boundary = (j == 0) | (j == grid_size - 1) | flat

    # local grid spanning the neighbours of each coarse argmax
    step = u[1] - u[0]
    lo = u[np.maximum(j - 1, 0)]
    hi = u[np.minimum(j + 1, grid_size - 1)]
    n_fine = int(round((hi - lo).max() / step)) * REFINE_FACTOR + 1
    offsets = np.arange(n_fine) * (step / REFINE_FACTOR)
    fine = np.minimum(lo[:, None] + offsets[None, :], hi[:, None])
    D = coarse.shape[0]
    apv_u = np.empty(D)
    peak = np.empty(D)
    for start in range(0, D, BLOCK):
        sl = slice(start, start + BLOCK)
        vals = _velocity_at(s, fine[sl], gamma[sl], s.beta[sl])
        k = np.argmax(vals, axis=1)
        rows = np.arange(vals.shape[0])
        apv_u[sl] = fine[sl][rows, k]
        peak[sl] = vals[rows, k]
    apv = to_original(s, apv_u)
    frac = float(boundary.mean())
    if frac > 0:
        log.warning("velocity peaks at the grid boundary in %.1f%% of draws", 100 * frac)
    a_lo, a_hi = np.percentile(apv, [2.5, 97.5])
    p_lo, p_hi = np.percentile(peak, [2.5, 97.5])
    return PeakVelocity(
        apv_mean=float(apv.mean()), apv_lower=float(a_lo), apv_upper=float(a_hi),
        peak_mean=float(peak.mean()), peak_lower=float(p_lo), peak_upper=float(p_hi),
        boundary_fraction=frac, boundary_peak=frac > 0.5,
        apv_draws=apv, peak_draws=peak,
    )


def _velocity_at(s: PosteriorSamples, u: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Velocity at per-draw points ``u`` (d, G) in original time units."""
    spline = SplineBasis(s.knots, s.model.spline_family)
    scale = np.exp(gamma[:, 2:3])
    w = scale * (u - gamma[:, 0:1])
    B = spline.deriv(w.ravel()).reshape(*w.shape, -1)
    v = scale * np.einsum("dgk,dk->dg", B, beta)
    if s.time_transform == "log":
        v /= np.exp(u)
    return v


# ---------------------------------------------------------------------------
# random-effects summaries


def effects_summary(samples, percent: bool = False) -> EffectsSummary:
    """Posterior means of random-effect SDs, residual SD, correlations and covariate effects.

    With ``percent`` the covariate coefficients are multiplied by 100, which reads
    as percentage differences when the response was modelled on a log scale.
    """
    s = _samples(samples)
    if s.n_draws < 1:
        raise ValueError("effects summary needs at least one draw")
    sg = s.sigma_gamma
    sd = np.sqrt(np.diagonal(sg, axis1=1, axis2=2))  # (D, 3) tempo, size, velocity
    corr = sg / (sd[:, :, None] * sd[:, None, :])
    order = [1, 0, 2]  # size, tempo, velocity
    mean_corr = corr.mean(axis=0)[np.ix_(order, order)]
    np.fill_diagonal(mean_corr, 1.0)
    mean_corr = np.clip(mean_corr, -1.0, 1.0)
    resid = np.sqrt(s.sigma2)

    def interval(x):
        lo, hi = np.percentile(x, [2.5, 97.5])
        return float(lo), float(hi)

    intervals = {
        "Residual SD": interval(resid),
        "SD of size": interval(sd[:, 1]),
        "SD of tempo": interval(sd[:, 0]),
        "SD of velocity": interval(sd[:, 2]),
    }
    factor = 100.0 if percent else 1.0
    table = []
    if s.model.use_covariates:
        for a, effect in enumerate(GAMMA_NAMES):
            for b, name in enumerate(s.covariate_names):
                x = s.A[:, a, b] * factor
                lo, hi = interval(x)
                table.append({"effect": effect, "covariate": name, "mean": float(x.mean()), "lower": lo, "upper": hi})
    return EffectsSummary(
        sd_size=float(sd[:, 1].mean()),
        sd_tempo=float(sd[:, 0].mean()),
        sd_velocity=float(sd[:, 2].mean()),
        residual_sd=float(resid.mean()),
        correlations=mean_corr,
        covariate_table=table,
        sd_intervals=intervals,
        percent=percent,
    )


def population_effects(samples, profiles: dict[str, object]) -> list[dict]:
    """Posterior mean and 95% CI of (size, tempo, velocity) population values per profile."""
    s = _samples(samples)
    rows = []
    for label, profile in profiles.items():
        g = population_gamma(s, profile)
        for k in (1, 0, 2):
            lo, hi = np.percentile(g[:, k], [2.5, 97.5])
            rows.append({"profile": label, "parameter": GAMMA_NAMES[k], "mean": float(g[:, k].mean()),
                         "lower": float(lo), "upper": float(hi)})
    return rows


# ---------------------------------------------------------------------------
# CSV output

SD_HEADER = ["quantity", "mean", "lower", "upper"]
CORRELATION_HEADER = ["parameter", "size", "tempo", "velocity"]
COVARIATE_HEADER = ["effect", "covariate", "mean", "lower", "upper"]
POPULATION_HEADER = ["profile", "parameter", "mean", "lower", "upper"]


def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_curve(curve: CurveEstimate, path) -> None:
    _write(path, CURVE_HEADER, curve.rows())


def write_effects(summary: EffectsSummary, sd_path, corr_path, covariate_path=None) -> None:
    _write(sd_path, SD_HEADER, summary.sd_rows())
    labels = ["size", "tempo", "velocity"]
    _write(corr_path, CORRELATION_HEADER, [[labels[i], *map(float, summary.correlations[i])] for i in range(3)])
    if covariate_path is not None:
        _write(covariate_path, COVARIATE_HEADER, [[r[h] for h in COVARIATE_HEADER] for r in summary.covariate_table])


def write_population_effects(rows: list[dict], path) -> None:
    _write(path, POPULATION_HEADER, [[r[h] for h in POPULATION_HEADER] for r in rows])
