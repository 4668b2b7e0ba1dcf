"""Gumbel noise score matching for anomaly detection on categorical tabular data."""

from .categorical import (
    CategoricalSchema,
    Feature,
    LogitRecord,
    NoiseSchedule,
    PerturbedRecord,
    analytic_score,
    build_schedule,
    encode_logits,
    log_density,
    perturb,
    sample_gumbel,
)
from .data import Dataset, SplitSpec, generate_synthetic, load_csv, split, standardize_continuous
from .metrics import auroc, average_precision
from .msma import GmmModel, anomaly_score, embed, gmm_fit, select_gmm
from .network import ModelConfig, ModelParameters, forward, init_parameters, score_from_epsilon
from .training import TrainConfig, gaussian_dsm_loss, gnsm_loss, kl_loss, train

__version__ = "0.1.0"
