"""ExpConcrete noise for one-hot categorical blocks.

Records are stored as 2-D arrays ``(n_rows, total_onehot_dim)`` where the
columns of feature ``d`` occupy a contiguous slice. Segment reductions use
``np.ufunc.reduceat`` over the block start offsets so that every helper works
on all blocks at once.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_DELTA = 1e-6
MANIFOLD_TOL = 1e-6


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str  # "categorical" | "continuous"
    outcomes: tuple = ()

    @property
    def n_outcomes(self) -> int:
        return len(self.outcomes)


@dataclass(frozen=True)
class CategoricalSchema:
    """Ordered feature list; categorical features define the block layout."""

    features: tuple

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names in schema")
        for f in self.features:
            if f.kind == "categorical":
                if f.n_outcomes < 2:
                    raise ValueError(f"feature {f.name!r} needs at least 2 outcomes")
                if len(set(f.outcomes)) != f.n_outcomes:
                    raise ValueError(f"feature {f.name!r} has duplicate outcomes")
            elif f.kind != "continuous":
                raise ValueError(f"feature {f.name!r}: unknown kind {f.kind!r}")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], n_continuous: int = 0) -> "CategoricalSchema":
        feats = [
            Feature(f"x{d}", "categorical", tuple(str(k) for k in range(int(K))))
            for d, K in enumerate(sizes)
        ]
        feats += [Feature(f"c{j}", "continuous") for j in range(n_continuous)]
        return cls(tuple(feats))

    @classmethod
    def from_dict(cls, obj: dict) -> "CategoricalSchema":
        feats = []
        for f in obj["features"]:
            kind = f.get("kind", "categorical")
            outcomes = tuple(str(o) for o in f.get("outcomes", ())) if kind == "categorical" else ()
            feats.append(Feature(str(f["name"]), kind, outcomes))
        return cls(tuple(feats))

    def to_dict(self) -> dict:
        out = []
        for f in self.features:
            entry = {"name": f.name, "kind": f.kind}
            if f.kind == "categorical":
                entry["outcomes"] = list(f.outcomes)
            out.append(entry)
        return {"features": out}

    @property
    def categorical(self) -> list:
        return [f for f in self.features if f.kind == "categorical"]

    @property
    def continuous(self) -> list:
        return [f for f in self.features if f.kind == "continuous"]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([f.n_outcomes for f in self.categorical], dtype=np.int64)

    @property
    def n_categorical(self) -> int:
        return len(self.categorical)

    @property
    def n_continuous(self) -> int:
        return len(self.continuous)

    @property
    def total_onehot_dim(self) -> int:
        return int(self.sizes.sum())

    @property
    def input_dim(self) -> int:
        return self.total_onehot_dim + self.n_continuous

    @property
    def offsets(self) -> np.ndarray:
        """Block boundaries, length ``D_cat + 1``."""
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)

    @property
    def block_ids(self) -> np.ndarray:
        """Feature index of every one-hot column."""
        return np.repeat(np.arange(self.n_categorical), self.sizes)

    def block(self, values: np.ndarray, d: int) -> np.ndarray:
        o = self.offsets
        return values[..., o[d]:o[d + 1]]

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# segment helpers


def block_max(x: np.ndarray, schema: CategoricalSchema) -> np.ndarray:
    return np.maximum.reduceat(x, schema.offsets[:-1], axis=-1)


def block_sum(x: np.ndarray, schema: CategoricalSchema) -> np.ndarray:
    return np.add.reduceat(x, schema.offsets[:-1], axis=-1)


def expand_blocks(v: np.ndarray, schema: CategoricalSchema) -> np.ndarray:
    """Broadcast a per-block quantity ``(..., D)`` back to columns ``(..., total)``."""
    return np.repeat(v, schema.sizes, axis=-1)


def block_logsumexp(x: np.ndarray, schema: CategoricalSchema) -> np.ndarray:
    m = block_max(x, schema)
    s = block_sum(np.exp(x - expand_blocks(m, schema)), schema)
    return m + np.log(s)


def block_log_softmax(x: np.ndarray, schema: CategoricalSchema) -> np.ndarray:
    return x - expand_blocks(block_logsumexp(x, schema), schema)


def block_softmax(x: np.ndarray, schema: CategoricalSchema) -> np.ndarray:
    m = expand_blocks(block_max(x, schema), schema)
    e = np.exp(x - m)
    return e / expand_blocks(block_sum(e, schema), schema)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# records


@dataclass
class LogitRecord:
    """Rows of ``log(one_hot + delta)`` in block layout, plus standardized continuous values."""

    blocks: np.ndarray
    schema: CategoricalSchema
    delta: float = DEFAULT_DELTA
    cont: Optional[np.ndarray] = None

    def __len__(self):
        return self.blocks.shape[0]

    def block(self, d: int) -> np.ndarray:
        return self.schema.block(self.blocks, d)

    def subset(self, idx) -> "LogitRecord":
        cont = None if self.cont is None else self.cont[idx]
        return LogitRecord(self.blocks[idx], self.schema, self.delta, cont)


@dataclass
class PerturbedRecord:
    blocks: np.ndarray
    lam: np.ndarray  # per-row temperature
    lambda_index: Optional[np.ndarray] = None
    schema: Optional[CategoricalSchema] = field(default=None, repr=False)


def encode_logits(one_hot, schema: CategoricalSchema, delta: float = DEFAULT_DELTA,
                  cont: Optional[np.ndarray] = None) -> LogitRecord:
    """Map one-hot rows to ``log(one_hot + delta)``.

    ``one_hot`` is either a list of per-feature blocks (each of shape ``(K_d,)``
    or ``(n, K_d)``) or a single concatenated array in block layout.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if isinstance(one_hot, (list, tuple)):
        if len(one_hot) != schema.n_categorical:
            raise ValueError(f"expected {schema.n_categorical} blocks, got {len(one_hot)}")
        parts = []
        for d, (b, K) in enumerate(zip(one_hot, schema.sizes)):
            b = np.atleast_2d(np.asarray(b, dtype=np.float64))
            if b.shape[-1] != K:
                raise ValueError(f"block {d} has length {b.shape[-1]}, schema expects {K}")
            parts.append(b)
        x = np.concatenate(parts, axis=-1)
    else:
        x = np.atleast_2d(np.asarray(one_hot, dtype=np.float64))
        if x.shape[-1] != schema.total_onehot_dim:
            raise ValueError(
                f"record width {x.shape[-1]} does not match schema width {schema.total_onehot_dim}")
    ok = (block_sum(x, schema) == 1) & (block_sum(((x != 0) & (x != 1)).astype(float), schema) == 0)
    if not ok.all():
        row, d = np.argwhere(~ok)[0]
        raise ValueError(f"row {row}, feature {d}: block is not one-hot")
    if cont is not None:
        cont = np.atleast_2d(np.asarray(cont, dtype=np.float64))
        if cont.shape != (x.shape[0], schema.n_continuous):
            raise ValueError("continuous block shape mismatch")
    elif schema.n_continuous:
        raise ValueError("schema has continuous features but no values were given")
    return LogitRecord(np.log(x + delta), schema, float(delta), cont)


def codes_to_one_hot(codes: np.ndarray, schema: CategoricalSchema) -> np.ndarray:
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    if codes.shape[-1] != schema.n_categorical:
        raise ValueError("code width does not match number of categorical features")
    if np.any(codes < 0) or np.any(codes >= schema.sizes):
        raise ValueError("category code out of range")
    out = np.zeros((codes.shape[0], schema.total_onehot_dim))
    out[np.arange(codes.shape[0])[:, None], schema.offsets[:-1] + codes] = 1.0
    return out


def one_hot_to_codes(x: np.ndarray, schema: CategoricalSchema) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.stack([np.argmax(schema.block(x, d), axis=-1)
                     for d in range(schema.n_categorical)], axis=-1)


# ---------------------------------------------------------------------------
# sampling


def gumbel_from_uniform(u):
    return -np.log(-np.log(u))


def sample_gumbel(n, rng=None) -> np.ndarray:
    """Standard Gumbel draws; ``n`` may be an int or a shape tuple."""
    rng = np.random.default_rng(rng)
    u = rng.random(n)
    tiny = np.finfo(np.float64).tiny
    u = np.clip(u, tiny, 1.0 - np.finfo(np.float64).epsneg)
    return gumbel_from_uniform(u)


def perturb(record: LogitRecord, lam, rng=None, lambda_index=None, gumbel=None) -> PerturbedRecord:
    """ExpConcrete sample per row: ``Y = (log a + G)/lam - logsumexp((log a + G)/lam)`` per block."""
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0):
        raise ValueError("temperature must be positive")
    logits = record.blocks
    n = logits.shape[0]
    lam_rows = np.broadcast_to(lam, (n,)).copy() if lam.ndim <= 1 else None
    if lam_rows is None:
        raise ValueError("lam must be a scalar or a per-row vector")
    if gumbel is None:
        gumbel = sample_gumbel(logits.shape, rng)
    z = (logits + gumbel) / lam_rows[:, None]
    y = block_log_softmax(z, record.schema)
    idx = None if lambda_index is None else np.broadcast_to(np.asarray(lambda_index), (n,)).copy()
    return PerturbedRecord(y, lam_rows, idx, record.schema)


# ---------------------------------------------------------------------------
# density and score of a single block (vectorized over leading axes)


def _check_block(y, alpha, lam, check):
    y = np.asarray(y, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if y.shape[-1] != alpha.shape[-1]:
        raise ValueError("y and alpha must have the same length")
    if np.any(alpha <= 0):
        raise ValueError("alpha must be strictly positive")
    if lam <= 0:
        raise ValueError("temperature must be positive")
    if check and np.any(np.abs(logsumexp(y)) > MANIFOLD_TOL):
        raise ValueError("y is off the ExpConcrete manifold (logsumexp(y) != 0)")
    return y, alpha


def log_density(y, alpha, lam: float, check: bool = True):
    """ExpConcrete log-density of ``y`` for location ``alpha`` and temperature ``lam``."""
    y, alpha = _check_block(y, alpha, lam, check)
    K = y.shape[-1]
    t = np.log(alpha) - lam * y
    return math.lgamma(K) + (K - 1) * math.log(lam) + t.sum(-1) - K * logsumexp(t)


def analytic_score(y, alpha, lam: float, check: bool = True):
    """Gradient of :func:`log_density` with respect to ``y``: ``-lam + lam*K*softmax(log a - lam*y)``."""
    y, alpha = _check_block(y, alpha, lam, check)
    K = y.shape[-1]
    return -lam + lam * K * softmax(np.log(alpha) - lam * y)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    lambdas: np.ndarray
    sigmas: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.lambdas)

    def to_dict(self) -> dict:
        return {
            "lambdas": [float(v) for v in self.lambdas],
            "sigmas": None if self.sigmas is None else [float(v) for v in self.sigmas],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NoiseSchedule":
        sig = obj.get("sigmas")
        return cls(np.array(obj["lambdas"], dtype=np.float64),
                   None if sig is None else np.array(sig, dtype=np.float64))


def _geometric(lo: float, hi: float, n: int) -> np.ndarray:
    if not (0 < lo < hi):
        raise ValueError(f"need 0 < min < max, got ({lo}, {hi})")
    i = np.arange(n)
    out = lo * (hi / lo) ** (i / (n - 1))
    out[0], out[-1] = lo, hi
    return out


def build_schedule(lambda_min: float = 2.0, lambda_max: float = 20.0, n_scales: int = 20,
                   sigma_min: Optional[float] = None,
                   sigma_max: Optional[float] = None) -> NoiseSchedule:
    if n_scales < 2:
        raise ValueError("need at least 2 noise scales")
    lambdas = _geometric(lambda_min, lambda_max, n_scales)
    sigmas = None
    if sigma_min is not None or sigma_max is not None:
        if sigma_min is None or sigma_max is None:
            raise ValueError("sigma_min and sigma_max must be given together")
        sigmas = _geometric(sigma_min, sigma_max, n_scales)
    return NoiseSchedule(lambdas, sigmas)
