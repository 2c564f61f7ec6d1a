"""Random variates, log densities and the SPD kernel used by the sampler.

Random streams are numpy ``Generator`` objects over the counter-based Philox
bit generator. A stream is addressed by ``(seed, *key)``, so any component
(chain, subject, epoch) can rebuild its own stream without coordination.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

_JITTER_START = 1e-12
_JITTER_STOP = 1e-6

# log-space clamp for inverse-gamma draws whose true value overflows a double
_LOG_MAX = math.log(np.finfo(float).max)
_LOG_TINY = math.log(np.finfo(float).tiny)


class SpdError(np.linalg.LinAlgError):
    """Matrix is not positive definite even after the jitter ladder."""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(f"{message} (min eigenvalue estimate {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent reproducible stream for ``(seed, key...)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def cholesky(m) -> np.ndarray:
    """Lower Cholesky factor, retrying with diagonal jitter 1e-12..1e-6 x mean(diag)."""
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    a = 0.5 * (a + a.T)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    if not np.all(np.isfinite(a)):
        raise SpdError("matrix has non-finite entries", float("nan"))
    base = abs(float(np.mean(np.diag(a)))) or 1.0
    eye = np.eye(a.shape[0])
    jitter = _JITTER_START
    while jitter <= _JITTER_STOP * (1 + 1e-9):
        try:
            return np.linalg.cholesky(a + jitter * base * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SpdError("matrix is not positive definite", float(np.linalg.eigvalsh(a)[0]))


def sample_mvn(mean, cov, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    chol = cholesky(cov)
    if chol.shape[0] != mean.size:
        raise ValueError("mean and covariance dimensions differ")
    return mean + chol @ rng.standard_normal(mean.size)


def sample_mvn_precision(precision, linear, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw from N(P^-1 b, P^-1) given precision P and linear term b.

    Returns ``(draw, mean)``. Uses only triangular solves against chol(P).
    """
    chol = cholesky(precision)
    mean = solve_triangular(chol.T, solve_triangular(chol, linear, lower=True), lower=False)
    z = rng.standard_normal(mean.size)
    return mean + solve_triangular(chol.T, z, lower=False), mean


def sample_inverse_gamma(shape: float, scale: float, rng: np.random.Generator) -> float:
    """Inverse-gamma draw with mean ``scale / (shape - 1)``.

    Small shapes (the vague IG(0.001, 0.001) prior) put much of their mass
    beyond the double range; the draw is computed in log space and clamped
    to the finite positive floats.
    """
    if not (shape > 0 and scale > 0):
        raise ValueError(f"inverse gamma needs shape > 0 and scale > 0, got ({shape}, {scale})")
    if shape >= 1.0:
        log_g = math.log(rng.standard_gamma(shape))
    else:
        # G(a) = G(a + 1) * U^(1/a)
        log_g = math.log(rng.standard_gamma(shape + 1.0)) + math.log(rng.random()) / shape
    log_draw = math.log(scale) - log_g
    return math.exp(min(max(log_draw, _LOG_TINY), _LOG_MAX))


def _bartlett_factor(df: float, dim: int, rng: np.random.Generator) -> np.ndarray:
    a = np.zeros((dim, dim))
    for i in range(dim):
        a[i, i] = math.sqrt(rng.chisquare(df - i))
        a[i, :i] = rng.standard_normal(i)
    return a


def sample_wishart(df: float, scale, rng: np.random.Generator) -> np.ndarray:
    scale = np.asarray(scale, dtype=float)
    dim = scale.shape[0]
    if df <= dim - 1:
        raise ValueError(f"Wishart needs df > dim - 1, got df={df}, dim={dim}")
    m = cholesky(scale) @ _bartlett_factor(df, dim, rng)
    return m @ m.T


def sample_inverse_wishart(df: float, scale, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart draw with mean ``scale / (df - dim - 1)``.

    If ``scale = L L'`` and ``A`` is the Bartlett factor, the draw is
    ``(L A^-T)(L A^-T)'``; nothing is inverted explicitly.
    """
    scale = np.asarray(scale, dtype=float)
    dim = scale.shape[0]
    if df < dim:
        raise ValueError(f"inverse Wishart needs df >= dim, got df={df}, dim={dim}")
    chol = cholesky(scale)
    a = _bartlett_factor(df, dim, rng)
    t = solve_triangular(a, chol.T, lower=True).T
    out = t @ t.T
    return 0.5 * (out + out.T)


def mvt_step(chol: np.ndarray, z: np.ndarray, chi2: np.ndarray, df: float) -> np.ndarray:
    """Multivariate-t increments ``L z sqrt(df / g)``; batched over leading axes."""
    step = np.einsum("...ij,...j->...i", chol, z)
    return step * np.sqrt(df / np.asarray(chi2))[..., None]


def sample_mvt(center, scale, df: float, rng: np.random.Generator) -> np.ndarray:
    if df < 1:
        raise ValueError("multivariate t needs df >= 1")
    center = np.asarray(center, dtype=float)
    chol = cholesky(scale)
    z = rng.standard_normal(center.size)
    g = rng.chisquare(df)
    return center + mvt_step(chol, z, g, df)


def logpdf_mvn(x, mean, cov) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    chol = cholesky(np.atleast_2d(cov))
    if chol.shape[0] != x.size or mean.size != x.size:
        raise ValueError("inconsistent dimensions")
    r = solve_triangular(chol, x - mean, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (x.size * math.log(2 * math.pi) + logdet + r @ r))


def logpdf_mvn_rows(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Row-wise MVN log density for ``x`` of shape (n, d) with a shared covariance factor."""
    d = x.shape[1]
    r = solve_triangular(chol, (x - mean).T, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * math.log(2 * math.pi) + logdet + np.sum(r * r, axis=0))
