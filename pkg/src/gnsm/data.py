"""Tabular ingestion, splitting, standardization and the synthetic generator."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .categorical import (
    DEFAULT_DELTA,
    CategoricalSchema,
    LogitRecord,
    codes_to_one_hot,
    encode_logits,
)

log = logging.getLogger(__name__)

LABEL_COLUMN = "__label__"


class DataValidationError(ValueError):
    pass


@dataclass
class Dataset:
    codes: np.ndarray  # (n, D_cat) outcome indices
    cont: np.ndarray  # (n, C) float
    schema: CategoricalSchema
    labels: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return self.codes.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.codes[idx], self.cont[idx], self.schema,
                       None if self.labels is None else self.labels[idx], dict(self.provenance))

    def concat(self, other: "Dataset") -> "Dataset":
        if other.schema.hash() != self.schema.hash():
            raise DataValidationError("cannot concatenate datasets with different schemas")
        labels = None
        if self.labels is not None or other.labels is not None:
            a = self.labels if self.labels is not None else np.zeros(len(self), dtype=np.int64)
            b = other.labels if other.labels is not None else np.zeros(len(other), dtype=np.int64)
            labels = np.concatenate([a, b])
        return Dataset(np.concatenate([self.codes, other.codes]),
                       np.concatenate([self.cont, other.cont]), self.schema, labels,
                       dict(self.provenance))

    def inliers(self) -> "Dataset":
        return self if self.labels is None else self.subset(self.labels == 0)

    def anomalies(self) -> "Dataset":
        if self.labels is None:
            return self.subset(np.zeros(len(self), dtype=bool))
        return self.subset(self.labels == 1)

    def to_logits(self, delta: float = DEFAULT_DELTA) -> LogitRecord:
        cont = self.cont if self.schema.n_continuous else None
        return encode_logits(codes_to_one_hot(self.codes, self.schema), self.schema, delta, cont)


def load_schema(path) -> CategoricalSchema:
    try:
        obj = json.loads(Path(path).read_text())
        return CategoricalSchema.from_dict(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataValidationError(f"malformed schema file {path}: {exc}") from exc


def save_schema(schema: CategoricalSchema, path):
    Path(path).write_text(json.dumps(schema.to_dict(), indent=1) + "\n")


def load_csv(path, schema) -> Dataset:
    """Read a UTF-8 CSV whose header names every schema feature (plus optional ``__label__``)."""
    if not isinstance(schema, CategoricalSchema):
        schema = load_schema(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        col = {name: i for i, name in enumerate(header)}
        missing = [f.name for f in schema.features if f.name not in col]
        if missing:
            raise DataValidationError(f"{path}: missing column(s) {missing}")
        lookup = [{o: k for k, o in enumerate(f.outcomes)} for f in schema.categorical]
        cat_cols = [col[f.name] for f in schema.categorical]
        cont_cols = [col[f.name] for f in schema.continuous]
        label_col = col.get(LABEL_COLUMN)
        codes, cont, labels = [], [], []
        for r, row in enumerate(reader):
            if len(row) != len(header):
                raise DataValidationError(
                    f"{path}: row {r} has {len(row)} fields, header has {len(header)}")
            rc = []
            for d, (c, table) in enumerate(zip(cat_cols, lookup)):
                v = row[c]
                if v not in table:
                    raise DataValidationError(
                        f"{path}: row {r}: unknown outcome {v!r} for feature "
                        f"{schema.categorical[d].name!r}")
                rc.append(table[v])
            codes.append(rc)
            try:
                cont.append([float(row[c]) for c in cont_cols])
            except ValueError as exc:
                raise DataValidationError(f"{path}: row {r}: {exc}") from None
            if label_col is not None:
                if row[label_col] not in ("0", "1"):
                    raise DataValidationError(f"{path}: row {r}: label must be 0 or 1")
                labels.append(int(row[label_col]))
    n = len(codes)
    return Dataset(
        np.array(codes, dtype=np.int64).reshape(n, schema.n_categorical),
        np.array(cont, dtype=np.float64).reshape(n, schema.n_continuous),
        schema,
        np.array(labels, dtype=np.int64) if label_col is not None else None,
        {"source": str(path)},
    )


def write_csv(dataset: Dataset, path, include_labels: bool = True):
    schema = dataset.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [f.name for f in schema.features]
        labels = include_labels and dataset.labels is not None
        w.writerow(header + ([LABEL_COLUMN] if labels else []))
        cat_i = cont_i = 0
        order = []
        for f in schema.features:
            if f.kind == "categorical":
                order.append(("cat", cat_i, f.outcomes))
                cat_i += 1
            else:
                order.append(("cont", cont_i, None))
                cont_i += 1
        for r in range(len(dataset)):
            row = []
            for kind, j, outcomes in order:
                row.append(outcomes[dataset.codes[r, j]] if kind == "cat" else repr(float(dataset.cont[r, j])))
            if labels:
                row.append(str(int(dataset.labels[r])))
            w.writerow(row)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or min(self.fractions) <= 0 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValueError("split fractions must be three positive numbers summing to 1")


def split(dataset: Dataset, spec: SplitSpec = SplitSpec()) -> dict:
    """Seeded shuffle of inliers into train / val / test index sets."""
    n = len(dataset)
    if n < 10:
        raise DataValidationError(f"need at least 10 rows to split, got {n}")
    if dataset.labels is not None and np.any(dataset.labels == 1):
        raise DataValidationError("split expects inliers only; hold anomalies aside first")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(round(spec.fractions[0] * n))
    n_val = int(round(spec.fractions[1] * n))
    idx = {"train": np.sort(perm[:n_train]),
           "val": np.sort(perm[n_train:n_train + n_val]),
           "test": np.sort(perm[n_train + n_val:])}
    return {k: (dataset.subset(v), v) for k, v in idx.items()}


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, obj) -> "Standardizer":
        return cls(np.array(obj["mean"], dtype=np.float64), np.array(obj["std"], dtype=np.float64))


def fit_standardizer(train: Dataset) -> Standardizer:
    mean = train.cont.mean(axis=0)
    std = train.cont.std(axis=0)
    zero = std == 0
    if np.any(zero):
        names = [f.name for f, z in zip(train.schema.continuous, zero) if z]
        log.warning("zero-variance continuous feature(s) %s; using unit divisor", names)
        std = np.where(zero, 1.0, std)
    return Standardizer(mean, std)


def standardize_continuous(train: Dataset, *others: Dataset):
    """Z-score continuous columns with train-split statistics; returns ``(train, others..., stats)``."""
    stats = fit_standardizer(train)

    def apply(ds):
        return Dataset(ds.codes, stats.transform(ds.cont), ds.schema, ds.labels, dict(ds.provenance))

    return (apply(train), *[apply(o) for o in others], stats)


# ---------------------------------------------------------------------------
# synthetic data with exact likelihood


@dataclass
class SyntheticOracle:
    probs: list  # per-feature probability vectors

    def log_likelihood(self, codes: np.ndarray) -> np.ndarray:
        codes = np.atleast_2d(codes)
        return sum(np.log(p[codes[:, d]]) for d, p in enumerate(self.probs))

    def nll(self, codes: np.ndarray) -> np.ndarray:
        return -self.log_likelihood(codes)

    def to_dict(self) -> dict:
        return {"probs": [p.tolist() for p in self.probs]}

    @classmethod
    def from_dict(cls, obj) -> "SyntheticOracle":
        return cls([np.array(p, dtype=np.float64) for p in obj["probs"]])


def generate_synthetic(D: int = 5, K=4, n_inliers: int = 8000, n_anomalies: int = 800,
                       skew: float = 0.3, seed: int = 0):
    """Inliers from a product of Dirichlet(skew)-drawn categoricals, anomalies uniform.

    ``K`` is an int or a per-feature list. Returns ``(Dataset, SyntheticOracle)``;
    rows are inliers first, then anomalies, with labels 0/1.
    """
    sizes = [int(K)] * D if np.isscalar(K) else [int(k) for k in K]
    if D < 1 or len(sizes) != D or min(sizes) < 2:
        raise ValueError("need D >= 1 features with at least 2 outcomes each")
    rng = np.random.default_rng(seed)
    probs = []
    for k in sizes:
        p = rng.dirichlet(np.full(k, skew))
        p = np.maximum(p, 1e-300)
        probs.append(p / p.sum())
    inl = np.stack([rng.choice(k, size=n_inliers, p=p) for k, p in zip(sizes, probs)], axis=1) \
        if n_inliers else np.zeros((0, D), dtype=np.int64)
    ano = np.stack([rng.integers(0, k, size=n_anomalies) for k in sizes], axis=1) \
        if n_anomalies else np.zeros((0, D), dtype=np.int64)
    schema = CategoricalSchema.from_sizes(sizes)
    codes = np.concatenate([inl, ano]).astype(np.int64)
    labels = np.concatenate([np.zeros(n_inliers, dtype=np.int64), np.ones(n_anomalies, dtype=np.int64)])
    prov = {"generator": "synthetic", "D": D, "K": sizes, "n_inliers": n_inliers,
            "n_anomalies": n_anomalies, "skew": skew, "seed": seed}
    ds = Dataset(codes, np.zeros((len(codes), 0)), schema, labels, prov)
    return ds, SyntheticOracle(probs)
