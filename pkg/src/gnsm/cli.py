"""Command-line interface: ``gnsm {synth,train,embed,score,eval,fetch}``.

Exit codes: 0 ok, 2 validation, 3 I/O, 4 numeric failure, 64 usage.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import urllib.request
from importlib import resources
from pathlib import Path

import numpy as np

from .categorical import NoiseSchedule, build_schedule
from .data import (
    LABEL_COLUMN,
    DataValidationError,
    Dataset,
    SplitSpec,
    Standardizer,
    generate_synthetic,
    load_csv,
    load_schema,
    save_schema,
    split,
    standardize_continuous,
    write_csv,
)
from .metrics import ap_from_pr_points, auroc, average_precision, precision_recall_points
from .msma import DegenerateFitError, embed, file_sha256, load_scorer, save_scorer, select_gmm
from .network import ModelConfig, load_checkpoint
from .training import NonFiniteLossError, TrainConfig, train

log = logging.getLogger("gnsm")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_USAGE = 64

CONFIG_DIR_ENV = "GNSM_CONFIG_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config


def default_config() -> dict:
    """Desk-scale defaults; see ``configs/full.json`` for the full-size settings."""
    return json.loads(resources.files("gnsm").joinpath("configs/desk.json").read_text())


def resolve_config(path):
    """Read a JSON config, looking in ``$GNSM_CONFIG_DIR`` for bare names and for ``train.json``."""
    cfg = default_config()
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if path is None:
        if env_dir and (Path(env_dir) / "train.json").is_file():
            path = Path(env_dir) / "train.json"
        else:
            return cfg
    p = Path(path)
    if not p.is_file():
        candidates = []
        if env_dir:
            candidates += [Path(env_dir) / p, Path(env_dir) / (p.name + ".json")]
        candidates.append(Path(str(resources.files("gnsm").joinpath("configs", p.name))))
        candidates.append(Path(str(resources.files("gnsm").joinpath("configs", p.name + ".json"))))
        found = [c for c in candidates if c.is_file()]
        if not found:
            raise FileNotFoundError(f"config file not found: {path}")
        p = found[0]
    user = json.loads(p.read_text())
    for section, values in user.items():
        if isinstance(values, dict) and isinstance(cfg.get(section), dict):
            cfg[section].update(values)
        else:
            cfg[section] = values
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, oracle = generate_synthetic(args.D, args.K, args.n_inliers, args.n_anomalies, args.skew,
                                    args.seed)
    save_schema(ds.schema, out / "schema.json")
    write_csv(ds, out / "data.csv")
    (out / "oracle.json").write_text(json.dumps(oracle.to_dict(), indent=1))
    (out / "provenance.json").write_text(json.dumps(ds.provenance, indent=1))
    with open(out / "oracle_nll.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "oracle_nll"])
        for i, v in enumerate(oracle.nll(ds.codes)):
            w.writerow([i, repr(float(v))])
    print(f"wrote {len(ds)} rows to {out / 'data.csv'}")
    return EXIT_OK


def _train_one(data: Dataset, cfg: dict, seed: int, out: Path):
    inl, ano = data.inliers(), data.anomalies()
    parts = split(inl, SplitSpec(seed=seed))
    tr, va, te = (parts[k][0] for k in ("train", "val", "test"))
    test = te.concat(ano)
    stats = None
    if data.schema.n_continuous:
        tr, va, test, stats = standardize_continuous(tr, va, test)
    sch = cfg["schedule"]
    schedule = build_schedule(sch["lambda_min"], sch["lambda_max"], sch["n_scales"],
                              *((sch["sigma_min"], sch["sigma_max"]) if data.schema.n_continuous else ()))
    model_cfg = ModelConfig(input_dim=data.schema.input_dim, n_scales=len(schedule), **cfg["model"])
    train_cfg = TrainConfig(**{**cfg["train"], "seed": seed})
    out.mkdir(parents=True, exist_ok=True)
    (out / "splits.json").write_text(json.dumps(
        {k: v[1].tolist() for k, v in parts.items()} | {"seed": seed}))
    write_csv(test if stats is None else _unstandardize(test, stats), out / "test.csv")
    extra = {"schema": data.schema.to_dict(),
             "standardizer": None if stats is None else stats.to_dict(),
             "delta": cfg.get("delta", 1e-6)}
    result = train(tr.to_logits(extra["delta"]), va.to_logits(extra["delta"]), schedule, model_cfg,
                   train_cfg, out_dir=out, schema_hash=data.schema.hash(), extra_meta=extra)
    ckpt_path = out / "best.npz"
    params = result.params.ema_view()
    gcfg = cfg.get("gmm", {})
    log_norms = bool(gcfg.get("log_norms", False))
    eta = embed(tr.concat(va).to_logits(extra["delta"]), params, model_cfg, schedule,
                log_norms=log_norms)
    sel = select_gmm(eta, tuple(gcfg.get("grid", (3, 5, 7, 9))), seed=seed)
    save_scorer(out / "scorer.json", sel.model, file_sha256(ckpt_path), data.schema.hash(),
                log_norms, sel.scores)
    if result.history:
        from .plotting import plot_training_curve
        plot_training_curve(result.history, out / "loss_curve.png")
    print(f"seed {seed}: best step {result.best_step}, val loss {result.best_val_loss:.4f}, "
          f"GMM components {sel.model.n_components} -> {out}")


def _unstandardize(ds: Dataset, stats: Standardizer) -> Dataset:
    return Dataset(ds.codes, ds.cont * stats.std + stats.mean, ds.schema, ds.labels, ds.provenance)


def cmd_train(args) -> int:
    cfg = resolve_config(args.config)
    data = load_csv(args.data, load_schema(args.schema))
    out = Path(args.out)
    seeds = [args.seed + k for k in range(args.seeds)]
    (out).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=1))
    for s in seeds:
        _train_one(data, cfg, s, out if len(seeds) == 1 else out / f"seed_{s}")
    return EXIT_OK


def _load_model(ckpt_path, schema):
    ck = load_checkpoint(ckpt_path)
    if ck.schema_hash != schema.hash():
        raise DataValidationError(
            f"schema hash {schema.hash()[:12]} does not match checkpoint {ck.schema_hash[:12]}")
    schedule = NoiseSchedule.from_dict(ck.extra["schedule"])
    return ck, schedule


def _records(data: Dataset, ck):
    std = ck.extra.get("standardizer")
    if std is not None:
        stats = Standardizer.from_dict(std)
        data = Dataset(data.codes, stats.transform(data.cont), data.schema, data.labels)
    return data.to_logits(ck.extra.get("delta", 1e-6))


def _checkpoints(path: Path) -> list:
    if path.is_dir():
        if (path / "best.npz").is_file():
            return [path / "best.npz"]
        found = sorted(path.glob("seed_*/best.npz"))
        if not found:
            raise FileNotFoundError(f"no best.npz under {path}")
        return found
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return [path]


def cmd_embed(args) -> int:
    schema = load_schema(args.schema)
    data = load_csv(args.data, schema)
    ck, schedule = _load_model(args.ckpt, schema)
    eta = embed(_records(data, ck), ck.params.ema_view(), ck.config, schedule,
                log_norms=args.log_norms)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id"] + [f"eta_{i + 1}" for i in range(eta.shape[1])])
        for i, row in enumerate(eta):
            w.writerow([i] + [repr(float(v)) for v in row])
    if data.labels is not None:
        from .plotting import plot_embedding_profile
        plot_embedding_profile(eta, data.labels, schedule.lambdas, out.with_suffix(".png"))
    return EXIT_OK


def _score_one(ckpt: Path, gmm_path: Path, data: Dataset, schema, out: Path):
    ck, schedule = _load_model(ckpt, schema)
    scorer = load_scorer(gmm_path)
    if scorer["checkpoint_sha256"] != file_sha256(ckpt):
        raise DataValidationError(f"scorer {gmm_path} was fitted for a different checkpoint")
    if scorer["schema_hash"] != schema.hash():
        raise DataValidationError(f"scorer {gmm_path} was fitted for a different schema")
    eta = embed(_records(data, ck), ck.params.ema_view(), ck.config, schedule,
                log_norms=scorer["log_norms"])
    scores = scorer["gmm"].score(eta)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite anomaly scores")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        labels = data.labels is not None
        w.writerow(["row_id", "anomaly_score"] + ([LABEL_COLUMN] if labels else []))
        for i, s in enumerate(scores):
            w.writerow([i, repr(float(s))] + ([int(data.labels[i])] if labels else []))


def cmd_score(args) -> int:
    schema = load_schema(args.schema)
    data = load_csv(args.data, schema)
    ckpts = _checkpoints(Path(args.ckpt))
    if len(ckpts) == 1:
        gmm = Path(args.gmm) if args.gmm else ckpts[0].parent / "scorer.json"
        _score_one(ckpts[0], gmm, data, schema, Path(args.out))
        return EXIT_OK
    if args.gmm:
        raise DataValidationError("--gmm cannot be combined with a multi-seed run directory")
    out = Path(args.out)
    for c in ckpts:
        _score_one(c, c.parent / "scorer.json", data, schema, out / f"scores_{c.parent.name}.csv")
    return EXIT_OK


def read_scores(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "anomaly_score" not in reader.fieldnames:
            raise DataValidationError(f"{path}: missing anomaly_score column")
        label_key = next((k for k in (LABEL_COLUMN, "label") if k in reader.fieldnames), None)
        if label_key is None:
            raise DataValidationError(f"{path}: eval needs a {LABEL_COLUMN} column")
        scores, labels = [], []
        for row in reader:
            scores.append(float(row["anomaly_score"]))
            labels.append(int(row[label_key]))
    return np.array(scores), np.array(labels)


def cmd_eval(args) -> int:
    files = []
    for p in map(Path, args.scores):
        if p.is_dir():
            files += sorted(p.glob("*.csv"))
        elif p.is_file():
            files.append(p)
        else:
            raise FileNotFoundError(f"scores file not found: {p}")
    if not files:
        raise FileNotFoundError("no score files given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_run, curves = [], {}
    pr_rows = []
    all_scores, all_labels = None, None
    for f in files:
        scores, labels = read_scores(f)
        ap = average_precision(scores, labels)
        roc = auroc(scores, labels)
        thr, prec, rec, _ = precision_recall_points(scores, labels)
        if abs(ap_from_pr_points(prec, rec) - ap) > 1e-12:
            raise FloatingPointError("precision-recall table does not reproduce AP")
        per_run.append({"file": str(f), "ap": ap, "auroc": roc, "n": int(len(labels)),
                        "n_anomalies": int(labels.sum())})
        curves[f.stem] = (prec, rec, ap)
        pr_rows += [(f.name, k + 1, t, p, r) for k, (t, p, r) in enumerate(zip(thr, prec, rec))]
        if all_scores is None:
            all_scores, all_labels = scores, labels
    aps = np.array([r["ap"] for r in per_run])
    rocs = np.array([r["auroc"] for r in per_run])
    report = {
        "runs": per_run,
        "ap_mean": float(aps.mean()), "ap_std": float(aps.std(ddof=1)) if len(aps) > 1 else 0.0,
        "auroc_mean": float(rocs.mean()),
        "auroc_std": float(rocs.std(ddof=1)) if len(rocs) > 1 else 0.0,
        "ap_definition": "mean precision at the rank of each anomaly (no interpolation)",
    }
    (out / "metrics.json").write_text(json.dumps(report, indent=1))
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "rank", "threshold", "precision", "recall"])
        for row in pr_rows:
            w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])
    from .plotting import plot_pr_curves, plot_score_hist
    plot_pr_curves(curves, out / "pr_curve.png", baseline=float(all_labels.mean()))
    plot_score_hist(all_scores, all_labels, out / "score_hist.png")
    print(f"AP {report['ap_mean']:.4f} ± {report['ap_std']:.4f}   "
          f"AUROC {report['auroc_mean']:.4f} ± {report['auroc_std']:.4f}   ({len(per_run)} run(s))")
    return EXIT_OK


def dataset_registry() -> dict:
    return json.loads(resources.files("gnsm").joinpath("datasets.json").read_text())


def cmd_fetch(args) -> int:
    url, sha = args.url, args.sha256
    if args.name:
        reg = dataset_registry()
        if args.name not in reg:
            raise DataValidationError(f"unknown dataset {args.name!r}; known: {sorted(reg)}")
        entry = reg[args.name]
        url = url or entry.get("url")
        sha = sha or entry.get("sha256")
        if not url:
            raise DataValidationError(
                f"no direct download recorded for {args.name!r}; the source page is "
                f"{entry.get('page')} -- pass --url and --sha256 explicitly")
    if not url or not sha:
        raise DataValidationError("fetch needs --url and --sha256 (or a registered --name)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    h = hashlib.sha256()
    tmp = out.with_suffix(out.suffix + ".part")
    with urllib.request.urlopen(url) as resp, open(tmp, "wb") as fh:
        for chunk in iter(lambda: resp.read(1 << 20), b""):
            h.update(chunk)
            fh.write(chunk)
    if h.hexdigest() != sha.lower():
        tmp.unlink()
        raise DataValidationError(f"checksum mismatch for {url}: got {h.hexdigest()}")
    tmp.replace(out)
    print(f"fetched {url} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gnsm", description="Gumbel noise score matching anomaly detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic categorical dataset and its oracle")
    s.add_argument("--out", required=True)
    s.add_argument("--D", type=int, default=5)
    s.add_argument("--K", type=int, default=4)
    s.add_argument("--n-inliers", type=int, default=8000)
    s.add_argument("--n-anomalies", type=int, default=800)
    s.add_argument("--skew", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train score network(s) and fit the mixture scorer")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--schema", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to run")
    t.add_argument("--seed", type=int, default=0, help="first seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="write multiscale score-norm embeddings")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--log-norms", action="store_true")
    e.set_defaults(func=cmd_embed)

    c = sub.add_parser("score", help="write anomaly scores for a dataset")
    c.add_argument("--ckpt", required=True, help="best.npz, a run dir, or a multi-seed run dir")
    c.add_argument("--gmm", default=None, help="scorer.json (default: next to the checkpoint)")
    c.add_argument("--data", required=True)
    c.add_argument("--schema", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_score)

    v = sub.add_parser("eval", help="AP / AUROC report with PR table and figures")
    v.add_argument("--scores", required=True, nargs="+")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)

    f = sub.add_parser("fetch", help="download a benchmark file and verify its checksum")
    f.add_argument("--name", default=None)
    f.add_argument("--url", default=None)
    f.add_argument("--sha256", default=None)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fetch)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gnsm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (DataValidationError, ValueError, KeyError) as exc:
        print(f"gnsm: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"gnsm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLossError, DegenerateFitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"gnsm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
