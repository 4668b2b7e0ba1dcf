"""Multiscale score-norm embeddings and Gaussian-mixture anomaly scoring."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .categorical import LogitRecord, NoiseSchedule
from .network import ModelConfig, ModelParameters, forward, network_scores

log = logging.getLogger(__name__)

SCORER_VERSION = 1


class DegenerateFitError(RuntimeError):
    pass


def embed(record: LogitRecord, params: ModelParameters, config: ModelConfig,
          schedule: NoiseSchedule, batch_size: int = 1024, log_norms: bool = False) -> np.ndarray:
    """Squared score norms of clean records at every noise scale, shape ``(n, L)``."""
    schema = record.schema
    if config.input_dim != schema.input_dim:
        raise ValueError("record schema does not match the model input width")
    n = len(record)
    out = np.empty((n, len(schedule)))
    for s in range(0, n, batch_size):
        sl = slice(s, min(s + batch_size, n))
        x = record.blocks[sl]
        if record.cont is not None and schema.n_continuous:
            x = np.concatenate([x, record.cont[sl]], axis=1)
        for i, lam in enumerate(schedule.lambdas):
            sigma = None if schedule.sigmas is None else schedule.sigmas[i]
            eps_hat = forward(x, lam, params, config)
            scores = network_scores(eps_hat, np.full(x.shape[0], lam), schema,
                                    None if sigma is None else np.full(x.shape[0], sigma))
            out[sl, i] = np.einsum("ij,ij->i", scores, scores)
    return np.log(out + 1e-12) if log_norms else out


# ---------------------------------------------------------------------------
# Gaussian mixture


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    floor: float = 1e-6
    history: list = field(default_factory=list, repr=False)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def _chol(self):
        return np.linalg.cholesky(self.covariances)

    def component_log_pdf(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n, dim = X.shape
        chol = self._chol()
        out = np.empty((n, self.n_components))
        for k in range(self.n_components):
            diff = (X - self.means[k]).T
            sol = np.linalg.solve(chol[k], diff)
            maha = np.einsum("ij,ij->j", sol, sol)
            logdet = 2.0 * np.log(np.diag(chol[k])).sum()
            out[:, k] = -0.5 * (dim * np.log(2 * np.pi) + logdet + maha)
        return out

    def log_likelihood(self, X: np.ndarray) -> np.ndarray:
        """Per-sample log density."""
        lp = self.component_log_pdf(X) + np.log(self.weights)
        m = lp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(lp - m).sum(axis=1, keepdims=True)))[:, 0]

    def score(self, X: np.ndarray) -> np.ndarray:
        """Negative log-likelihood; higher means more anomalous."""
        return -self.log_likelihood(X)

    def sample(self, n: int, rng=None) -> np.ndarray:
        rng = np.random.default_rng(rng)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.means.shape[1]))
        chol = self._chol()
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "floor": self.floor,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GmmModel":
        return cls(np.array(obj["weights"], dtype=np.float64),
                   np.array(obj["means"], dtype=np.float64),
                   np.array(obj["covariances"], dtype=np.float64), float(obj.get("floor", 1e-6)))


def _floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def _kmeanspp(X: np.ndarray, k: int, rng) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _em(X: np.ndarray, k: int, rng, tol: float, max_iter: int, floor: float) -> GmmModel:
    n, dim = X.shape
    centers = _kmeanspp(X, k, rng)
    labels = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0
    history = []
    model = None
    prev = -np.inf
    for _ in range(max_iter):
        # M-step
        nk = resp.sum(axis=0)
        if np.any(nk / n < 1e-8):
            raise DegenerateFitError("a mixture component collapsed")
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        covs = np.empty((k, dim, dim))
        for j in range(k):
            d = X - means[j]
            covs[j] = _floor_covariance((resp[:, j, None] * d).T @ d / nk[j], floor)
        weights = weights / weights.sum()
        model = GmmModel(weights, means, covs, floor)
        # E-step
        lp = model.component_log_pdf(X) + np.log(weights)
        m = lp.max(axis=1, keepdims=True)
        norm = m + np.log(np.exp(lp - m).sum(axis=1, keepdims=True))
        resp = np.exp(lp - norm)
        ll = float(norm.mean())
        history.append(ll)
        if ll - prev < tol:
            break
        prev = ll
    if np.any(model.weights < 1e-8):
        raise DegenerateFitError("a mixture component collapsed")
    model.history = history
    return model


def gmm_fit(X, n_components: int, seed=0, tol: float = 1e-6, max_iter: int = 500,
            floor: float = 1e-6, retries: int = 3) -> GmmModel:
    """Full-covariance EM in float64 with k-means++ seeding and eigenvalue flooring.

    ``tol`` applies to the mean per-sample log-likelihood. A collapsed
    component triggers a reseeded retry, up to ``retries`` times.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, dim = X.shape
    if n < n_components * (dim + 1):
        raise ValueError(f"need at least {n_components * (dim + 1)} samples for "
                         f"{n_components} components in {dim} dimensions, got {n}")
    ss = np.random.SeedSequence(seed)
    last = None
    for child in ss.spawn(retries + 1):
        try:
            return _em(X, n_components, np.random.default_rng(child), tol, max_iter, floor)
        except DegenerateFitError as exc:
            last = exc
            log.info("degenerate GMM fit with %d components, reseeding", n_components)
    raise DegenerateFitError(f"{n_components}-component fit degenerate after {retries} retries") from last


@dataclass
class Selection:
    model: GmmModel
    scores: dict  # n_components -> total log-likelihood (None if degenerate)


def select_gmm(X, component_grid: Sequence[int] = (3, 5, 7, 9), seed=0, **kwargs) -> Selection:
    """Fit every grid size and keep the highest total held-in log-likelihood (ties: fewer components)."""
    if not component_grid:
        raise ValueError("component grid is empty")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    scores, fits = {}, {}
    for k in sorted(component_grid):
        try:
            fit = gmm_fit(X, k, seed=seed, **kwargs)
        except (DegenerateFitError, ValueError) as exc:
            log.info("grid candidate %d skipped: %s", k, exc)
            scores[k] = None
            continue
        fits[k] = fit
        scores[k] = float(fit.log_likelihood(X).sum())
    valid = {k: v for k, v in scores.items() if v is not None}
    if not valid:
        warnings.warn("all GMM grid candidates degenerate; falling back to one component")
        model = gmm_fit(X, 1, seed=seed, **kwargs)
        scores[1] = float(model.log_likelihood(X).sum())
        return Selection(model, scores)
    best = max(valid.values())
    k_best = min(k for k, v in valid.items() if v == best)
    return Selection(fits[k_best], scores)


def anomaly_score(record: LogitRecord, params: ModelParameters, config: ModelConfig,
                  schedule: NoiseSchedule, gmm: GmmModel, log_norms: bool = False) -> np.ndarray:
    return gmm.score(embed(record, params, config, schedule, log_norms=log_norms))


# ---------------------------------------------------------------------------
# scorer files


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_scorer(path, gmm: GmmModel, checkpoint_hash: str, schema_hash: str,
                log_norms: bool = False, grid_scores: Optional[dict] = None):
    obj = {
        "version": SCORER_VERSION,
        "checkpoint_sha256": checkpoint_hash,
        "schema_hash": schema_hash,
        "log_norms": log_norms,
        "gmm": gmm.to_dict(),
        "grid_log_likelihood": {str(k): v for k, v in (grid_scores or {}).items()},
    }
    Path(path).write_text(json.dumps(obj, indent=1))


def load_scorer(path) -> dict:
    obj = json.loads(Path(path).read_text())
    if obj.get("version") != SCORER_VERSION:
        raise ValueError(f"unsupported scorer version {obj.get('version')}")
    obj["gmm"] = GmmModel.from_dict(obj["gmm"])
    return obj
