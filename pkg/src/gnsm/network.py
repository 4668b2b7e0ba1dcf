"""Noise-conditioned residual MLP predicting per-block logit noise.

The same code runs in float32 for training and float64 for gradient checks;
the dtype is a field of :class:`ModelConfig`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .categorical import CategoricalSchema, block_softmax

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    n_scales: int
    width: int = 1024
    n_blocks: int = 20
    time_embedding_size: int = 128
    fourier_scale: float = 16.0
    leaky_slope: float = 0.01
    dtype: str = "float32"

    def __post_init__(self):
        if self.width < 1 or self.n_blocks < 1 or self.input_dim < 1:
            raise ValueError("width, n_blocks and input_dim must be positive")
        if self.time_embedding_size < 2 or self.time_embedding_size % 2:
            raise ValueError("time_embedding_size must be a positive even number")

    def to_dict(self) -> dict:
        return asdict(self)


def _pack(arrays: dict):
    """Copy named arrays into one contiguous buffer; returns ``(flat, {name: view})``."""
    if not arrays:
        return None, {}
    dtype = np.result_type(*arrays.values())
    flat = np.empty(sum(a.size for a in arrays.values()), dtype=dtype)
    views, pos = {}, 0
    for k, a in arrays.items():
        views[k] = flat[pos:pos + a.size].reshape(a.shape)
        views[k][...] = a
        pos += a.size
    return flat, views


class ModelParameters:
    """Live weights and EMA shadow, each stored as views into one flat buffer."""

    def __init__(self, weights: dict, fourier: np.ndarray, ema: Optional[dict] = None):
        self.flat, self.weights = _pack(weights)
        self.ema_flat, self.ema = _pack(ema or {})
        self.fourier = np.asarray(fourier, dtype=np.float64)

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.weights, self.fourier, self.ema)

    def ema_view(self) -> "ModelParameters":
        """Parameters whose live weights are a copy of the EMA shadow."""
        return ModelParameters(self.ema, self.fourier, self.ema)

    def unpack(self, flat: np.ndarray) -> dict:
        out, pos = {}, 0
        for k, w in self.weights.items():
            out[k] = flat[pos:pos + w.size].reshape(w.shape)
            pos += w.size
        return out

    def pack_like(self, arrays: dict) -> np.ndarray:
        return np.concatenate([np.ravel(arrays[k]) for k in self.weights]).astype(self.flat.dtype)

    @property
    def names(self) -> list:
        return list(self.weights)

    def n_parameters(self) -> int:
        return int(self.flat.size)


def parameter_shapes(config: ModelConfig) -> dict:
    W, E, D = config.width, config.time_embedding_size, config.input_dim
    shapes = {"in.W": (D, W), "in.b": (W,)}
    for i in range(config.n_blocks):
        p = f"blk{i}."
        shapes.update({
            p + "ln.g": (W,), p + "ln.b": (W,),
            p + "dense1.W": (W, W), p + "dense1.b": (W,),
            p + "film.scale.W": (E, W), p + "film.scale.b": (W,),
            p + "film.shift.W": (E, W), p + "film.shift.b": (W,),
            p + "dense2.W": (W, W), p + "dense2.b": (W,),
        })
    shapes.update({"head.ln.g": (W,), "head.ln.b": (W,), "head.out.W": (W, D), "head.out.b": (D,)})
    return shapes


def init_parameters(config: ModelConfig, seed=0) -> ModelParameters:
    """He-normal linear layers, identity FiLM, zero head output, frozen Fourier frequencies."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    weights = {}
    for name, shape in parameter_shapes(config).items():
        if name == "head.out.W" or name.endswith(".b") or ".film." in name:
            w = np.zeros(shape)
            if name.endswith("film.scale.b"):
                w[:] = 1.0
        elif name.endswith("ln.g"):
            w = np.ones(shape)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        weights[name] = w.astype(dt)
    fourier = rng.normal(0.0, config.fourier_scale, size=config.time_embedding_size // 2)
    ema = {k: v.copy() for k, v in weights.items()}
    return ModelParameters(weights, fourier.astype(np.float64), ema)


def fourier_noise_embedding(lam, params: ModelParameters) -> np.ndarray:
    """``[sin(2 pi w log lam), cos(2 pi w log lam)]`` for each temperature."""
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0):
        raise ValueError("temperature must be positive")
    proj = 2.0 * np.pi * np.log(lam)[..., None] * params.fourier
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


def film(h, t, P: dict, prefix: str, rows=None):
    """Feature-wise affine modulation ``scale(t) * h + shift(t)``.

    With ``rows`` (a one-hot ``(n, U)`` matrix), ``t`` holds only the ``U``
    distinct embeddings and the modulation table is gathered per row.
    """
    scale = t @ P[prefix + "film.scale.W"] + P[prefix + "film.scale.b"]
    shift = t @ P[prefix + "film.shift.W"] + P[prefix + "film.shift.b"]
    if rows is not None:
        scale, shift = rows @ scale, rows @ shift
    if scale.shape[-1] != h.shape[-1]:
        raise ValueError("FiLM width does not match hidden width")
    return scale * h + shift


def _network(x, t, rows, P: dict, config: ModelConfig):
    h = x @ P["in.W"] + P["in.b"]
    for i in range(config.n_blocks):
        p = f"blk{i}."
        z = ag.gelu(ag.layer_norm(h) * P[p + "ln.g"] + P[p + "ln.b"])
        z = z @ P[p + "dense1.W"] + P[p + "dense1.b"]
        z = film(z, t, P, p, rows)
        z = z @ P[p + "dense2.W"] + P[p + "dense2.b"]
        h = h + z
    z = ag.leaky_relu(ag.layer_norm(h) * P["head.ln.g"] + P["head.ln.b"], config.leaky_slope)
    return z @ P["head.out.W"] + P["head.out.b"]


def _prepare(x_tilde, lam, params: ModelParameters, config: ModelConfig):
    dt = np.dtype(config.dtype)
    x = np.atleast_2d(np.asarray(x_tilde)).astype(dt, copy=False)
    if x.shape[-1] != config.input_dim:
        raise ValueError(f"input width {x.shape[-1]} != model input_dim {config.input_dim}")
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (x.shape[0],))
    uniq, inv = np.unique(lam, return_inverse=True)
    t = fourier_noise_embedding(uniq, params).astype(dt)
    rows = np.eye(len(uniq), dtype=dt)[inv]
    return x, t, rows


def forward(x_tilde, lam, params: ModelParameters, config: ModelConfig) -> np.ndarray:
    """Predicted logit noise (untaped). ``lam`` is a scalar or one temperature per row."""
    x, t, rows = _prepare(x_tilde, lam, params, config)
    with ag.no_tape():
        out = _network(ag.Var(x), t, rows, {k: ag.Var(v) for k, v in params.weights.items()}, config)
    return out.value


def forward_taped(x_tilde, lam, params: ModelParameters, config: ModelConfig):
    """Taped forward pass; returns ``(output Var, {name: leaf Var})``."""
    x, t, rows = _prepare(x_tilde, lam, params, config)
    leaves = {k: ag.Var(v, requires_grad=True, name=k) for k, v in params.weights.items()}
    return _network(ag.Var(x), t, rows, leaves, config), leaves


def backward(loss, leaves: dict) -> dict:
    """Gradient of a taped scalar loss for every named parameter leaf."""
    names = list(leaves)
    return dict(zip(names, ag.backward(loss, [leaves[k] for k in names])))


def score_from_epsilon(eps_hat, lam, schema: CategoricalSchema) -> np.ndarray:
    """Per-block ``-lam + lam * K_d * softmax(eps_hat_d)`` on the categorical columns."""
    eps_hat = np.atleast_2d(np.asarray(eps_hat, dtype=np.float64))
    if eps_hat.shape[-1] != schema.total_onehot_dim:
        raise ValueError("epsilon width does not match schema")
    lam = np.asarray(lam, dtype=np.float64).reshape(-1, 1)
    K = np.repeat(schema.sizes, schema.sizes).astype(np.float64)
    return -lam + lam * K * block_softmax(eps_hat, schema)


def network_scores(out, lam, schema: CategoricalSchema, sigma=None) -> np.ndarray:
    """Full score vector from raw network output: categorical blocks then ``out / sigma`` for continuous."""
    out = np.atleast_2d(np.asarray(out, dtype=np.float64))
    T = schema.total_onehot_dim
    cat = score_from_epsilon(out[:, :T], lam, schema)
    if schema.n_continuous == 0:
        return cat
    if sigma is None:
        raise ValueError("continuous features need a Gaussian noise level")
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    return np.concatenate([cat, out[:, T:] / sigma], axis=-1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: ModelConfig, params: ModelParameters, schema_hash: str,
                    step: int = 0, optimizer: Optional[dict] = None, extra: Optional[dict] = None):
    """Write a versioned ``.npz`` checkpoint. ``optimizer`` maps slot name -> {param: array}."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "schema_hash": schema_hash,
        "step": int(step),
        "extra": extra or {},
    }
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True)), "fourier": params.fourier}
    for k, v in params.weights.items():
        arrays["w/" + k] = v
    for k, v in params.ema.items():
        arrays["ema/" + k] = v
    for slot, tree in (optimizer or {}).items():
        if isinstance(tree, dict):
            for k, v in tree.items():
                arrays[f"opt/{slot}/{k}"] = v
        else:
            arrays[f"opt/{slot}"] = np.asarray(tree)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParameters
    schema_hash: str
    step: int
    optimizer: dict
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        config = ModelConfig(**meta["config"])
        order = list(parameter_shapes(config))
        weights = {k: z["w/" + k] for k in order}
        ema = {k: z["ema/" + k] for k in order if "ema/" + k in z.files}
        opt: dict = {}
        for key in z.files:
            if key.startswith("opt/"):
                parts = key.split("/", 2)
                if len(parts) == 3:
                    opt.setdefault(parts[1], {})[parts[2]] = z[key]
                else:
                    opt[parts[1]] = z[key]
        params = ModelParameters(weights, z["fourier"], ema)
    return Checkpoint(config, params, meta["schema_hash"], meta["step"], opt, meta["extra"])
