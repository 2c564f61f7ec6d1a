"""Posterior draws as CSV (one row per retained draw) plus a JSON metadata sidecar."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .config import McmcConfig, ModelConfig, PriorConfig, config_dict
from .sampler import PosteriorSamples
from .spline import KnotSet


def posterior_header(K: int, p: int, N: int) -> list[str]:
    cols = ["iteration", "sigma2"]
    cols += [f"beta[{k}]" for k in range(K)]
    cols += [f"A[{a}][{b}]" for a in range(3) for b in range(p)]
    cols += [f"sigma_gamma[{a}][{b}]" for a in range(3) for b in range(a, 3)]
    cols += [f"gamma[{i}][{k}]" for i in range(N) for k in range(3)]
    return cols


def _fmt(v) -> str:
    # repr of a float round-trips exactly
    return repr(float(v))


def write_posterior_csv(samples: PosteriorSamples, path) -> None:
    D, N, _ = samples.gamma.shape
    K, p = samples.beta.shape[1], samples.A.shape[2]
    iu = np.triu_indices(3)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(posterior_header(K, p, N))
        for d in range(D):
            row = [str(int(samples.iterations[d])), _fmt(samples.sigma2[d])]
            row += [_fmt(v) for v in samples.beta[d]]
            row += [_fmt(v) for v in samples.A[d].ravel()]
            row += [_fmt(v) for v in samples.sigma_gamma[d][iu]]
            row += [_fmt(v) for v in samples.gamma[d].ravel()]
            w.writerow(row)


def metadata(samples: PosteriorSamples) -> dict:
    return {
        "chain_id": int(samples.chain_id),
        "config_fingerprint": samples.config_fingerprint,
        "n_draws": int(samples.n_draws),
        "knots": samples.knots.to_dict(),
        "model": config_dict(samples.model),
        "prior": config_dict(samples.prior),
        "mcmc": config_dict(samples.mcmc),
        "subject_ids": list(samples.subject_ids),
        "covariate_names": list(samples.covariate_names),
        "time_transform": samples.time_transform,
        "accept_counts": [int(v) for v in samples.accept_counts],
        "n_proposals": int(samples.n_proposals),
    }


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_posterior(samples: PosteriorSamples, csv_path, meta_path) -> None:
    write_posterior_csv(samples, csv_path)
    write_json(metadata(samples), meta_path)


def read_posterior(csv_path, meta_path) -> PosteriorSamples:
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    model = ModelConfig(**meta["model"])
    prior = PriorConfig(**meta["prior"])
    mcmc = McmcConfig(**meta["mcmc"])
    knots = KnotSet.from_dict(meta["knots"])
    N = len(meta["subject_ids"])
    K = knots.n_basis
    p = len(meta["covariate_names"])
    expected = posterior_header(K, p, N)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != expected:
            raise ValueError(f"{csv_path}: posterior header does not match metadata")
        rows = [r for r in reader]
    D = len(rows)
    iterations = np.array([int(r[0]) for r in rows], dtype=np.int64)
    vals = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(D, -1)
    pos = 0

    def take(n):
        nonlocal pos
        out = vals[:, pos : pos + n]
        pos += n
        return out

    sigma2 = take(1)[:, 0].copy()
    beta = take(K).copy()
    A = take(3 * p).reshape(D, 3, p).copy()
    tri = take(6)
    sigma_gamma = np.empty((D, 3, 3))
    iu = np.triu_indices(3)
    sigma_gamma[:, iu[0], iu[1]] = tri
    sigma_gamma[:, iu[1], iu[0]] = tri
    gamma = take(3 * N).reshape(D, N, 3).copy()
    return PosteriorSamples(
        gamma=gamma,
        beta=beta,
        A=A,
        sigma2=sigma2,
        sigma_gamma=sigma_gamma,
        iterations=iterations,
        chain_id=meta["chain_id"],
        config_fingerprint=meta["config_fingerprint"],
        knots=knots,
        model=model,
        prior=prior,
        mcmc=mcmc,
        subject_ids=tuple(meta["subject_ids"]),
        covariate_names=tuple(meta["covariate_names"]),
        time_transform=meta["time_transform"],
        accept_counts=np.array(meta["accept_counts"], dtype=np.int64),
        n_proposals=meta["n_proposals"],
    )


def chain_paths(directory, chain_id: int) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"posterior_chain{chain_id}.csv", d / f"posterior_chain{chain_id}.json"


def read_chains(directory) -> list[PosteriorSamples]:
    d = Path(directory)
    out = []
    c = 0
    while True:
        csv_path, meta_path = chain_paths(d, c)
        if not csv_path.exists():
            break
        out.append(read_posterior(csv_path, meta_path))
        c += 1
    if not out:
        raise FileNotFoundError(f"no posterior_chain*.csv files in {d}")
    return out
