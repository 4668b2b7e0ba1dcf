"""Score-matching objectives and the optimization loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .categorical import (
    CategoricalSchema,
    LogitRecord,
    NoiseSchedule,
    block_softmax,
    perturb,
)
from .network import (
    ModelConfig,
    ModelParameters,
    backward,
    forward,
    forward_taped,
    init_parameters,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 2048
    n_steps: int = 1_000_000
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    loss_kind: str = "mse"
    inner_k: bool = False
    checkpoint_every: int = 10_000
    validation_every: int = 1000
    patience: int = 20
    max_nonfinite: int = 100
    eval_batch_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in ("mse", "kl"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# objectives


def logit_noise(logits: np.ndarray, y: np.ndarray, lam) -> np.ndarray:
    """``eps = log(alpha) - lam * y`` per row."""
    lam = np.asarray(lam, dtype=np.float64).reshape(-1, 1)
    return logits - lam * y


def scale_weights(lam, schema: CategoricalSchema, inner_k: bool = False) -> np.ndarray:
    """Per-column weights ``lam^2 K_d^2`` (times another ``K_d^2`` for the inner-K variant)."""
    lam = np.asarray(lam, dtype=np.float64).reshape(-1, 1)
    K = np.repeat(schema.sizes, schema.sizes).astype(np.float64)
    w = lam ** 2 * K ** 2
    return w * K ** 2 if inner_k else w


def categorical_loss(eps_hat, eps, lam, schema: CategoricalSchema, kind: str = "mse",
                     inner_k: bool = False):
    """Batch mean of ``sum_d lam^2 K_d^2 * r(softmax(eps_hat_d), softmax(eps_d))``.

    ``r`` is the squared distance (``kind="mse"``) or ``KL(target || pred)``.
    Returns a Var when ``eps_hat`` is a Var, otherwise a float.
    """
    taped = isinstance(eps_hat, ag.Var)
    if not taped:
        eps_hat = ag.Var(np.atleast_2d(np.asarray(eps_hat, dtype=np.float64)))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if eps_hat.shape[-1] != schema.total_onehot_dim or eps.shape != eps_hat.shape:
        raise ValueError("prediction/target widths do not match schema")
    n = eps.shape[0]
    starts, sizes = schema.offsets[:-1], schema.sizes
    target = block_softmax(eps, schema)
    w = scale_weights(lam, schema, inner_k).astype(eps_hat.value.dtype)
    if kind == "mse":
        diff = ag.segment_softmax(eps_hat, starts, sizes) - target.astype(eps_hat.value.dtype)
        per = ag.square(diff) * w
    elif kind == "kl":
        log_target = np.log(np.maximum(target, np.finfo(np.float64).tiny))
        log_pred = ag.segment_log_softmax(eps_hat, starts, sizes)
        per = (ag.Var(log_target.astype(eps_hat.value.dtype)) - log_pred) * (w * target).astype(
            eps_hat.value.dtype)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    loss = ag.sum_all(per) * (1.0 / n)
    return loss if taped else float(loss.value)


def gnsm_loss(eps_hat, eps, lam, schema, inner_k=False):
    return categorical_loss(eps_hat, eps, lam, schema, "mse", inner_k)


def kl_loss(eps_hat, eps, lam, schema, inner_k=False):
    return categorical_loss(eps_hat, eps, lam, schema, "kl", inner_k)


def gaussian_dsm_loss(out_cont, x, x_tilde, sigma):
    """Batch mean of ``sigma^2 * ||s - (x - x_tilde)/sigma^2||^2`` with ``s = out / sigma``."""
    taped = isinstance(out_cont, ag.Var)
    if not taped:
        out_cont = ag.Var(np.atleast_2d(np.asarray(out_cont, dtype=np.float64)))
    x = np.atleast_2d(x)
    x_tilde = np.atleast_2d(x_tilde)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    target = (x - x_tilde) / sigma ** 2
    dt = out_cont.value.dtype
    resid = out_cont * (1.0 / sigma).astype(dt) - target.astype(dt)
    loss = ag.sum_all(ag.square(resid) * (sigma ** 2).astype(dt)) * (1.0 / x.shape[0])
    return loss if taped else float(loss.value)


def initial_loss(schedule: NoiseSchedule, schema: CategoricalSchema, inner_k: bool = False) -> float:
    """Expected MSE objective of a network whose softmax output is uniform.

    The target ``softmax(log a - lam*y)`` equals ``softmax(-G)``, which is
    Dirichlet(1, ..., 1), so ``E||u - p||^2 = (K-1) / (K (K+1))`` per block.
    """
    K = schema.sizes.astype(np.float64)
    per_block = K ** 2 * (K - 1) / (K * (K + 1))
    if inner_k:
        per_block = per_block * K ** 2
    return float(np.mean(schedule.lambdas ** 2) * per_block.sum())


# ---------------------------------------------------------------------------
# optimizer pieces


def cosine_lr(step: int, n_steps: int, config: TrainConfig) -> float:
    frac = min(max(step, 0), n_steps) / max(n_steps, 1)
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + math.cos(math.pi * frac))


def clip_grads(grad: np.ndarray, max_norm: Optional[float]) -> float:
    """Scale a flat gradient in place to global norm ``<= max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm is not None and norm > max_norm:
        grad *= grad.dtype.type(max_norm / norm)
    return norm


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, flat: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(flat), np.zeros_like(flat))

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)

    def to_tree(self) -> dict:
        return {"m": self.m, "v": self.v, "step": np.array(self.step)}

    @classmethod
    def from_tree(cls, tree: dict) -> "AdamState":
        return cls(np.asarray(tree["m"]), np.asarray(tree["v"]), int(tree["step"]))


def adamw_step(w: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, config: TrainConfig):
    """One decoupled-weight-decay Adam update of ``w`` in place.

    ``grad`` must already be clipped; it is overwritten (used as scratch).
    """
    b1, b2 = config.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    np.square(grad, out=grad)
    grad *= 1.0 - b2
    v += grad
    denom = grad
    np.multiply(v, 1.0 / c2, out=denom)
    np.sqrt(denom, out=denom)
    denom += config.eps
    np.divide(m, denom, out=denom)
    denom *= lr / c1
    w *= 1.0 - lr * config.weight_decay
    w -= denom


def ema_update(shadow: np.ndarray, live: np.ndarray, decay: float = 0.999):
    shadow *= decay
    shadow += (1.0 - decay) * live


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: ModelParameters
    best_step: int
    best_val_loss: float
    history: list = field(default_factory=list)
    n_nonfinite: int = 0
    initial_loss: float = float("nan")


def _draw_inputs(record: LogitRecord, lam_idx, schedule: NoiseSchedule, rng):
    lam = schedule.lambdas[lam_idx]
    y = perturb(record, lam, rng).blocks
    x_in, cont, x_cont = y, None, None
    sigma = None
    if record.cont is not None and record.cont.shape[1]:
        sigma = schedule.sigmas[lam_idx]
        cont = record.cont
        x_cont = cont + sigma[:, None] * rng.standard_normal(cont.shape)
        x_in = np.concatenate([y, x_cont], axis=1)
    return x_in, y, lam, sigma, cont, x_cont


def batch_loss(params: ModelParameters, config: ModelConfig, record: LogitRecord, lam_idx,
               schedule: NoiseSchedule, rng, kind: str = "mse", inner_k: bool = False,
               taped: bool = True):
    """Total objective (categorical + Gaussian DSM terms) for one batch.

    Returns ``(loss, leaves)`` when taped, else a float.
    """
    schema = record.schema
    x_in, y, lam, sigma, cont, x_cont = _draw_inputs(record, lam_idx, schedule, rng)
    eps = logit_noise(record.blocks, y, lam)
    T = schema.total_onehot_dim
    if taped:
        out, leaves = forward_taped(x_in, lam, params, config)
        loss = categorical_loss(out[:, :T], eps, lam, schema, kind, inner_k)
        if cont is not None:
            loss = loss + gaussian_dsm_loss(out[:, T:], cont, x_cont, sigma)
        return loss, leaves
    out = forward(x_in, lam, params, config).astype(np.float64)
    loss = categorical_loss(out[:, :T], eps, lam, schema, kind, inner_k)
    if cont is not None:
        loss += gaussian_dsm_loss(out[:, T:], cont, x_cont, sigma)
    return loss


def validation_loss(params: ModelParameters, config: ModelConfig, record: LogitRecord,
                    schedule: NoiseSchedule, train_config: TrainConfig, seed: int) -> float:
    """Deterministic loss over the whole split: scale index cycles with row index, noise seeded."""
    rng = np.random.default_rng(seed)
    n = len(record)
    lam_idx = np.arange(n) % len(schedule)
    total = 0.0
    bs = train_config.eval_batch_size
    for s in range(0, n, bs):
        sl = slice(s, min(s + bs, n))
        part = record.subset(sl)
        total += batch_loss(params, config, part, lam_idx[sl], schedule, rng,
                            train_config.loss_kind, train_config.inner_k, taped=False) * len(part)
    return total / n


def train(train_record: LogitRecord, val_record: LogitRecord, schedule: NoiseSchedule,
          model_config: ModelConfig, train_config: TrainConfig, out_dir=None,
          schema_hash: str = "", params: Optional[ModelParameters] = None,
          extra_meta: Optional[dict] = None) -> TrainResult:
    """Run the optimization loop and return the parameters with the best validation loss.

    Validation uses the EMA weights. When ``out_dir`` is given, a line-delimited
    JSON progress log, periodic checkpoints and ``best.npz`` are written there.
    """
    cfg = train_config
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_parameters(model_config, seed=cfg.seed)
    opt = AdamState.zeros_like(params.flat)
    n = len(train_record)
    L = len(schedule)
    val_seed = cfg.seed + 7919
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")

    def write_ckpt(path, p, step, state):
        save_checkpoint(path, model_config, p, schema_hash, step, state.to_tree(),
                        {"schedule": schedule.to_dict(), "train_config": cfg.to_dict(),
                         **(extra_meta or {})})

    best = None
    best_val = math.inf
    best_step = 0
    best_opt = None
    history = []
    bad_evals = 0
    nonfinite_run = 0
    n_nonfinite = 0
    order = rng.permutation(n)
    cursor = 0
    running = []
    try:
        for step in range(1, cfg.n_steps + 1):
            if cursor + cfg.batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            batch = train_record.subset(idx)
            lam_idx = rng.integers(0, L, size=len(idx))
            loss, leaves = batch_loss(params, model_config, batch, lam_idx, schedule, rng,
                                      cfg.loss_kind, cfg.inner_k)
            loss_value = float(loss.value)
            grad = params.pack_like(backward(loss, leaves))
            if not math.isfinite(loss_value) or not np.all(np.isfinite(grad)):
                nonfinite_run += 1
                n_nonfinite += 1
                if nonfinite_run >= cfg.max_nonfinite:
                    raise NonFiniteLossError(
                        f"loss non-finite for {nonfinite_run} consecutive steps (step {step})")
                continue
            nonfinite_run = 0
            clip_grads(grad, cfg.grad_clip)
            lr = cosine_lr(step, cfg.n_steps, cfg)
            adamw_step(params.flat, grad, opt, lr, cfg)
            ema_update(params.ema_flat, params.flat, cfg.ema_decay)
            running.append(loss_value)

            last = step == cfg.n_steps
            if step % cfg.validation_every == 0 or last:
                val = validation_loss(params.ema_view(), model_config, val_record, schedule, cfg,
                                      val_seed)
                rec = {"step": step, "lr": lr, "train_loss": float(np.mean(running)),
                       "val_loss": val}
                running = []
                history.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                log.info("step %d lr %.2e train %.4f val %.4f", step, lr, rec["train_loss"], val)
                if val < best_val:
                    best_val, best_step, bad_evals = val, step, 0
                    best = params.copy()
                    best_opt = opt.copy()
                    if out is not None:
                        write_ckpt(out / "best.npz", best, step, best_opt)
                else:
                    bad_evals += 1
                    if bad_evals >= cfg.patience:
                        log.info("early stop at step %d", step)
                        break
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                write_ckpt(out / f"ckpt_{step:08d}.npz", params, step, opt)
    finally:
        if log_fh is not None:
            log_fh.close()
    if best is None:
        best = params.copy()
        if out is not None:
            write_ckpt(out / "best.npz", best, 0, opt)
    return TrainResult(best, best_step, best_val, history, n_nonfinite,
                       initial_loss(schedule, train_record.schema, cfg.inner_k))
