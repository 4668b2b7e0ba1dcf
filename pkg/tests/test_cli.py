import csv
import json

import numpy as np
import pytest

from gnsm.cli import (
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VALIDATION,
    dataset_registry,
    default_config,
    main,
    resolve_config,
)

TINY = {"model": {"width": 16, "n_blocks": 1, "time_embedding_size": 8},
        "schedule": {"n_scales": 4},
        "train": {"n_steps": 60, "batch_size": 32, "validation_every": 20},
        "gmm": {"grid": [3]}}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg").mkdir()
    (root / "cfg" / "train.json").write_text(json.dumps(TINY))
    mp = pytest.MonkeyPatch()
    mp.setenv("GNSM_CONFIG_DIR", str(root / "cfg"))
    assert main(["synth", "--out", str(root / "data"), "--n-inliers", "600", "--n-anomalies", "60"]) == 0
    assert main(["train", "--data", str(root / "data/data.csv"), "--schema", str(root / "data/schema.json"),
                 "--out", str(root / "run"), "--seeds", "2"]) == 0
    yield root
    mp.undo()


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestPipeline:
    def test_synth_artifacts(self, pipeline):
        for f in ("schema.json", "data.csv", "oracle.json", "provenance.json", "oracle_nll.csv"):
            assert (pipeline / "data" / f).is_file()
        assert json.loads((pipeline / "data/provenance.json").read_text())["n_inliers"] == 600

    def test_train_artifacts(self, pipeline):
        for seed in ("seed_0", "seed_1"):
            d = pipeline / "run" / seed
            for f in ("best.npz", "scorer.json", "train_log.jsonl", "splits.json", "test.csv",
                      "loss_curve.png"):
                assert (d / f).is_file(), f
            log = [json.loads(x) for x in (d / "train_log.jsonl").read_text().splitlines()]
            assert set(log[0]) == {"step", "lr", "train_loss", "val_loss"}
        cfg = json.loads((pipeline / "run/config.json").read_text())
        assert cfg["train"]["n_steps"] == 60

    def test_score_and_eval(self, pipeline):
        schema = str(pipeline / "data/schema.json")
        test = str(pipeline / "run/seed_0/test.csv")
        assert main(["score", "--ckpt", str(pipeline / "run"), "--data", test, "--schema", schema,
                     "--out", str(pipeline / "scores")]) == 0
        rows = _read(pipeline / "scores/scores_seed_0.csv")
        assert list(rows[0]) == ["row_id", "anomaly_score", "__label__"]
        assert len(rows) == 60 + 60
        assert main(["eval", "--scores", str(pipeline / "scores"), "--out", str(pipeline / "ev")]) == 0
        rep = json.loads((pipeline / "ev/metrics.json").read_text())
        assert len(rep["runs"]) == 2
        aps = [r["ap"] for r in rep["runs"]]
        assert rep["ap_mean"] == pytest.approx(np.mean(aps))
        assert rep["ap_std"] == pytest.approx(np.std(aps, ddof=1))
        for f in ("pr_curve.csv", "pr_curve.png", "score_hist.png"):
            assert (pipeline / "ev" / f).is_file()

    def test_single_checkpoint_score_is_deterministic(self, pipeline, tmp_path):
        args = ["score", "--ckpt", str(pipeline / "run/seed_1/best.npz"),
                "--gmm", str(pipeline / "run/seed_1/scorer.json"),
                "--data", str(pipeline / "data/data.csv"), "--schema", str(pipeline / "data/schema.json")]
        assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_embed(self, pipeline, tmp_path):
        out = tmp_path / "eta.csv"
        assert main(["embed", "--ckpt", str(pipeline / "run/seed_0/best.npz"),
                     "--data", str(pipeline / "data/data.csv"),
                     "--schema", str(pipeline / "data/schema.json"), "--out", str(out)]) == 0
        rows = _read(out)
        assert len(rows) == 660 and len(rows[0]) == 1 + 4
        assert out.with_suffix(".png").is_file()

    def test_schema_mismatch_writes_nothing(self, pipeline, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "other"), "--K", "3", "--n-inliers", "20",
                     "--n-anomalies", "0"]) == 0
        out = tmp_path / "s.csv"
        code = main(["score", "--ckpt", str(pipeline / "run/seed_0"),
                     "--data", str(tmp_path / "other/data.csv"),
                     "--schema", str(tmp_path / "other/schema.json"), "--out", str(out)])
        assert code == EXIT_VALIDATION
        assert not out.exists()

    def test_scorer_checkpoint_mismatch(self, pipeline, tmp_path):
        out = tmp_path / "s.csv"
        code = main(["score", "--ckpt", str(pipeline / "run/seed_0/best.npz"),
                     "--gmm", str(pipeline / "run/seed_1/scorer.json"),
                     "--data", str(pipeline / "data/data.csv"),
                     "--schema", str(pipeline / "data/schema.json"), "--out", str(out)])
        assert code == EXIT_VALIDATION
        assert not out.exists()


class TestEval:
    def test_hand_example(self, tmp_path, capsys):
        f = tmp_path / "s.csv"
        f.write_text("row_id,anomaly_score,__label__\n0,0.9,1\n1,0.8,0\n2,0.1,1\n")
        assert main(["eval", "--scores", str(f), "--out", str(tmp_path / "ev")]) == EXIT_OK
        rep = json.loads((tmp_path / "ev/metrics.json").read_text())
        assert rep["ap_mean"] == pytest.approx(5 / 6, abs=1e-15)
        assert rep["auroc_mean"] == 0.5
        pr = _read(tmp_path / "ev/pr_curve.csv")
        assert [float(r["precision"]) for r in pr] == pytest.approx([1.0, 0.5, 2 / 3])

    def test_deterministic(self, tmp_path):
        f = tmp_path / "s.csv"
        rng = np.random.default_rng(0)
        with open(f, "w") as fh:
            fh.write("row_id,anomaly_score,__label__\n")
            for i in range(50):
                fh.write(f"{i},{rng.random()!r},{int(rng.random() < 0.3)}\n")
        main(["eval", "--scores", str(f), "--out", str(tmp_path / "a")])
        main(["eval", "--scores", str(f), "--out", str(tmp_path / "b")])
        for name in ("metrics.json", "pr_curve.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_needs_labels(self, tmp_path):
        f = tmp_path / "s.csv"
        f.write_text("row_id,anomaly_score\n0,0.9\n")
        assert main(["eval", "--scores", str(f), "--out", str(tmp_path / "ev")]) == EXIT_VALIDATION


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert main(["eval", "--scores", "x", "--out", "y", "--frobnicate"]) == EXIT_USAGE

    def test_unknown_command(self):
        assert main(["launch"]) == EXIT_USAGE

    def test_missing_file(self, tmp_path):
        assert main(["eval", "--scores", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == EXIT_IO

    def test_missing_data(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps(
            {"features": [{"name": "a", "kind": "categorical", "outcomes": ["x", "y"]}]}))
        code = main(["train", "--data", str(tmp_path / "none.csv"), "--schema", str(tmp_path / "s.json"),
                     "--out", str(tmp_path / "o")])
        assert code == EXIT_IO

    def test_fetch_registered_without_url(self, tmp_path, capsys):
        assert main(["fetch", "--name", "u2r", "--out", str(tmp_path / "u2r.csv")]) == EXIT_VALIDATION
        assert "--url" in capsys.readouterr().err

    def test_fetch_checksum_mismatch(self, tmp_path):
        src = tmp_path / "src.csv"
        src.write_text("a\n1\n")
        code = main(["fetch", "--url", src.as_uri(), "--sha256", "0" * 64, "--out", str(tmp_path / "o.csv")])
        assert code == EXIT_VALIDATION
        assert not (tmp_path / "o.csv").exists()

    def test_fetch_ok(self, tmp_path):
        import hashlib
        src = tmp_path / "src.csv"
        src.write_text("a\n1\n")
        sha = hashlib.sha256(src.read_bytes()).hexdigest()
        assert main(["fetch", "--url", src.as_uri(), "--sha256", sha, "--out", str(tmp_path / "o.csv")]) == 0
        assert (tmp_path / "o.csv").read_text() == "a\n1\n"


class TestConfig:
    def test_defaults_are_desk_scale(self):
        cfg = default_config()
        assert cfg["model"]["width"] == 256 and cfg["model"]["n_blocks"] == 4
        assert cfg["schedule"]["n_scales"] == 10 and cfg["train"]["n_steps"] == 20000

    def test_packaged_full_config(self):
        cfg = resolve_config("full")
        assert cfg["model"]["width"] == 1024 and cfg["schedule"]["n_scales"] == 20
        assert cfg["train"]["batch_size"] == 2048

    def test_env_dir_default(self, tmp_path, monkeypatch):
        (tmp_path / "train.json").write_text(json.dumps({"train": {"n_steps": 5}}))
        monkeypatch.setenv("GNSM_CONFIG_DIR", str(tmp_path))
        cfg = resolve_config(None)
        assert cfg["train"]["n_steps"] == 5 and cfg["train"]["batch_size"] == 64

    def test_missing_config(self, tmp_path, monkeypatch):
        monkeypatch.delenv("GNSM_CONFIG_DIR", raising=False)
        with pytest.raises(FileNotFoundError):
            resolve_config(str(tmp_path / "nope.json"))

    def test_registry_has_no_invented_links(self):
        reg = dataset_registry()
        assert set(reg) == {"bank", "census", "chess", "cmc", "probe", "solar", "u2r"}
        assert all(v["url"] is None and v["sha256"] is None for v in reg.values())
        assert reg["u2r"]["reported_ap"] == [82.35, 5.45]
