"""Model, prior and MCMC run configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .spline import FAMILIES, KNOT_STRATEGIES
from .data import TIME_TRANSFORMS

SIGMA_GAMMA_PRIORS = ("inverse_wishart", "scaled_inverse_wishart")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ModelConfig:
    spline_family: str = "natural_cubic"
    n_interior_knots: int = 3
    knot_strategy: str = "equal_spacing"
    time_transform: str = "none"
    use_covariates: bool = False
    covariate_selection: tuple[str, ...] = ()
    sigma_gamma_prior: str = "inverse_wishart"
    zero_intercept_row: bool = False

    def __post_init__(self):
        object.__setattr__(self, "covariate_selection", tuple(self.covariate_selection))
        if self.spline_family not in FAMILIES:
            raise ConfigError("model.spline_family", f"must be one of {FAMILIES}")
        if int(self.n_interior_knots) != self.n_interior_knots or self.n_interior_knots < 0:
            raise ConfigError("model.n_interior_knots", "must be an integer >= 0")
        if self.knot_strategy not in KNOT_STRATEGIES:
            raise ConfigError("model.knot_strategy", f"must be one of {KNOT_STRATEGIES}")
        if self.time_transform not in TIME_TRANSFORMS:
            raise ConfigError("model.time_transform", f"must be one of {TIME_TRANSFORMS}")
        if self.use_covariates and not self.covariate_selection:
            raise ConfigError("model.covariate_selection", "must be non-empty when use_covariates is true")
        if self.sigma_gamma_prior not in SIGMA_GAMMA_PRIORS:
            raise ConfigError("model.sigma_gamma_prior", f"must be one of {SIGMA_GAMMA_PRIORS}")


@dataclass(frozen=True)
class PriorConfig:
    sigma2_shape: float = 0.001
    sigma2_scale: float = 0.001
    alpha_var: float = 1000.0
    beta_var: float = 1000.0
    iw_df: float = 3.0
    iw_scale: tuple[tuple[float, ...], ...] = ((0.01, 0.0, 0.0), (0.0, 0.01, 0.0), (0.0, 0.0, 0.01))
    # scaled inverse-Wishart only: log-normal prior on the scale factors
    siw_log_scale_mean: float = 0.0
    siw_log_scale_sd: float = 1.0

    def __post_init__(self):
        scale = self.iw_scale
        if np.isscalar(scale):
            scale = float(scale) * np.eye(3)
        scale = np.asarray(scale, dtype=float)
        object.__setattr__(self, "iw_scale", tuple(tuple(float(v) for v in row) for row in scale))
        for name in ("sigma2_shape", "sigma2_scale", "alpha_var", "beta_var", "siw_log_scale_sd"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"prior.{name}", "must be > 0")
        if not self.iw_df >= 3:
            raise ConfigError("prior.iw_df", "must be >= 3")
        if scale.shape != (3, 3) or not np.allclose(scale, scale.T, atol=1e-12, rtol=0):
            raise ConfigError("prior.iw_scale", "must be a symmetric 3x3 matrix or a positive scalar")
        if np.linalg.eigvalsh(scale)[0] <= 0:
            raise ConfigError("prior.iw_scale", "must be positive definite")

    @property
    def psi(self) -> np.ndarray:
        return np.array(self.iw_scale)


@dataclass(frozen=True)
class McmcConfig:
    n_iterations: int = 20_000
    burn_in_fraction: float = 0.5
    thin: int = 5
    n_chains: int = 3
    proposal_df: int = 5
    target_acceptance: tuple[float, float] = (0.20, 0.30)
    adapt_interval: int = 100
    seed: int = 20210216
    adapt_shape: bool = True
    # joint moves of all subjects' gamma (common shift, spread rescaling) with beta integrated out
    population_moves: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target_acceptance", tuple(float(v) for v in self.target_acceptance))
        if self.n_iterations < 1:
            raise ConfigError("mcmc.n_iterations", "must be >= 1")
        if not 0 < self.burn_in_fraction < 1:
            raise ConfigError("mcmc.burn_in_fraction", "must be in (0, 1)")
        if self.thin < 1:
            raise ConfigError("mcmc.thin", "must be >= 1")
        if self.n_chains < 1:
            raise ConfigError("mcmc.n_chains", "must be >= 1")
        if self.proposal_df < 3:
            raise ConfigError("mcmc.proposal_df", "must be >= 3")
        lo, hi = self.target_acceptance
        if not 0 < lo < hi < 1:
            raise ConfigError("mcmc.target_acceptance", "must be an interval inside (0, 1)")
        if self.adapt_interval < 1:
            raise ConfigError("mcmc.adapt_interval", "must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("mcmc.seed", "must be a 64-bit unsigned integer")
        if self.n_retained < 1:
            raise ConfigError("mcmc", "configuration retains no draws")

    @property
    def n_burn_in(self) -> int:
        # rounded so 0.9 * 500_000 is exactly 450_000
        return int(round(self.n_iterations * self.burn_in_fraction))

    @property
    def n_retained(self) -> int:
        return (self.n_iterations - self.n_burn_in) // self.thin


def _jsonable(obj):
    if isinstance(obj, tuple):
        return [_jsonable(v) for v in obj]
    return obj


def config_dict(cfg) -> dict:
    return {k: _jsonable(v) for k, v in asdict(cfg).items()}


def from_dict(cls, data: dict | None, section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}", "unknown field")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from exc


def fingerprint(model: ModelConfig, prior: PriorConfig, mcmc: McmcConfig) -> str:
    payload = {"model": config_dict(model), "prior": config_dict(prior), "mcmc": config_dict(mcmc)}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    mcmc: McmcConfig = field(default_factory=McmcConfig)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.model, self.prior, self.mcmc)
