import json

import numpy as np
import pytest

from lossforge.cli import main, parse_dataset_spec
from lossforge.learners import builtin_loss


@pytest.fixture
def ce_document(tmp_path):
    path = tmp_path / "ce.loss.json"
    builtin_loss("cross_entropy").save(path)
    return str(path)


@pytest.fixture
def sq_document(tmp_path):
    path = tmp_path / "sq.loss.json"
    builtin_loss("squared_error").save(path)
    return str(path)


def meta_train_config(tmp_path, **overrides):
    cfg = {
        "dataset": {"kind": "blobs", "n": 300, "classes": 2, "dim": 2,
                    "sep": 4.0, "seed": 1},
        "gp": {"population_size": 4, "generations": 1,
               "elitism_rate": 0.25, "rng_seed": 0},
        "meta": {"s_meta": 3, "s_base": 1, "alpha": 0.05, "eta": 0.001,
                 "batch_size": 32},
        "filters": {"probe_size": 48, "probe_steps": 20, "s_testing": 40},
        "train": {"learner": "logistic", "hidden": [], "lr": 0.05,
                  "batch_size": 32},
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestInspect:
    def test_squared_error_infix(self, sq_document, capsys):
        assert main(["inspect", "--loss", sq_document]) == 0
        out = capsys.readouterr().out
        assert "(y - f)^2" in out
        assert "weights:" in out

    def test_missing_file_is_runtime_failure(self, tmp_path):
        assert main(["inspect", "--loss", str(tmp_path / "nope.json")]) == 2

    def test_malformed_document_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.loss.json"
        bad.write_text("{broken")
        assert main(["inspect", "--loss", str(bad)]) == 1


class TestTrain:
    def test_builtin_on_blobs(self, tmp_path, capsys):
        out = tmp_path / "metrics.json"
        code = main(["train", "--builtin", "cross_entropy",
                     "--dataset", "blobs:n=300,sep=4.0,seed=1",
                     "--steps", "200", "--lr", "0.1", "--hidden",
                     "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["metric"] == "error_rate"
        assert payload["val"] < 0.2
        assert len(payload["train_loss_trajectory"]) == 200

    def test_document_equals_builtin_trajectory(self, tmp_path, ce_document):
        out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
        args = ["--dataset", "blobs:n=300,sep=4.0,seed=1", "--steps", "100",
                "--lr", "0.05", "--hidden", "--seed", "7"]
        assert main(["train", "--builtin", "cross_entropy",
                     "--out", str(out1)] + args) == 0
        assert main(["train", "--loss", ce_document,
                     "--out", str(out2)] + args) == 0
        a = json.loads(out1.read_text())
        b = json.loads(out2.read_text())
        assert a["train_loss_trajectory"] == b["train_loss_trajectory"]
        assert a["val"] == b["val"] and a["test"] == b["test"]

    def test_zero_steps(self, tmp_path):
        out = tmp_path / "m.json"
        assert main(["train", "--builtin", "cross_entropy",
                     "--dataset", "blobs:n=200,seed=0", "--steps", "0",
                     "--out", str(out)]) == 0
        assert json.loads(out.read_text())["steps"] == 0

    def test_loss_and_builtin_mutually_exclusive(self, tmp_path, ce_document):
        assert main(["train", "--loss", ce_document,
                     "--builtin", "cross_entropy",
                     "--dataset", "blobs:n=200,seed=0",
                     "--out", str(tmp_path / "x.json")]) == 1

    def test_unknown_flag_is_usage_error(self, tmp_path):
        assert main(["train", "--builtin", "cross_entropy",
                     "--dataset", "blobs:n=200,seed=0",
                     "--out", str(tmp_path / "x.json"),
                     "--frobnicate"]) == 1

    def test_regression_dataset_spec(self, tmp_path):
        out = tmp_path / "m.json"
        assert main(["train", "--builtin", "squared_error",
                     "--dataset", "linreg:dim=3,noise=0.0,n=200,seed=2",
                     "--steps", "300", "--lr", "0.05",
                     "--out", str(out)]) == 0
        assert json.loads(out.read_text())["metric"] == "mse"


class TestMetaTrain:
    def test_smoke_run_writes_artifacts(self, tmp_path, capsys):
        cfg = meta_train_config(tmp_path)
        out = tmp_path / "run"
        assert main(["meta-train", "--config", cfg, "--seed", "0",
                     "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["mode"] == "evolved-local-search"
        assert len(manifest["generations"]) == 1
        assert (out / "best.loss.json").exists()
        assert (out / "filter_stats.csv").exists()
        assert (out / "meta_trajectory.csv").exists()

    def test_no_local_search_flag_recorded(self, tmp_path):
        cfg = meta_train_config(tmp_path)
        out = tmp_path / "run"
        assert main(["meta-train", "--config", cfg, "--seed", "0",
                     "--out", str(out), "--no-local-search"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["mode"] == "gp-only"
        assert manifest["alg1_invocations"] == 0

    def test_config_error_names_field(self, tmp_path, capsys):
        cfg = meta_train_config(tmp_path,
                                gp={"population_size": 4, "generations": 1,
                                    "elitism_rate": 0.25,
                                    "crossover_rate": 7.0})
        assert main(["meta-train", "--config", cfg, "--seed", "0",
                     "--out", str(tmp_path / "run")]) == 1
        assert "crossover_rate" in capsys.readouterr().err

    def test_unknown_config_field_rejected(self, tmp_path, capsys):
        cfg = meta_train_config(tmp_path, gp={"popsize": 4})
        assert main(["meta-train", "--config", cfg, "--seed", "0",
                     "--out", str(tmp_path / "run")]) == 1
        assert "popsize" in capsys.readouterr().err

    def test_workers_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LOSSFORGE_WORKERS", "2")
        cfg = meta_train_config(tmp_path)
        out = tmp_path / "run-env"
        assert main(["meta-train", "--config", cfg, "--seed", "0",
                     "--out", str(out)]) == 0
        # worker count changes scheduling only, not results
        ref = tmp_path / "run-ref"
        monkeypatch.delenv("LOSSFORGE_WORKERS")
        assert main(["meta-train", "--config", cfg, "--seed", "0",
                     "--out", str(ref)]) == 0
        assert ((out / "manifest.json").read_text()
                == (ref / "manifest.json").read_text())


class TestBenchAndDelta:
    def test_bench_writes_csv(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(["bench-smoothing", "--losses", "sparse_lsr",
                     "--classes", "2,8", "--batch", "10", "--reps", "3",
                     "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "loss_id,n_classes,batch,with_logsoftmax,median_ns"
        assert len(lines) == 5

    def test_bench_unknown_loss_usage_error(self, tmp_path):
        assert main(["bench-smoothing", "--losses", "nope",
                     "--out", str(tmp_path / "b.csv")]) == 1

    def test_delta_report_null(self, capsys):
        assert main(["delta-report", "--loss", "ce", "--regime", "null",
                     "--classes", "10"]) == 0
        out = capsys.readouterr().out
        line = out.strip().splitlines()[1]
        cells = line.split(",")
        assert cells[0] == "ce"
        assert float(cells[8]) == pytest.approx(10.0, rel=1e-9)

    def test_delta_report_zero_all(self, tmp_path):
        out = tmp_path / "delta.csv"
        assert main(["delta-report", "--regime", "zero", "--classes", "5",
                     "--xi", "0.2", "--epsilon", "1e-4",
                     "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 7  # header + 6 losses


class TestDatasetSpec:
    def test_csv_spec(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("\n".join(["a,t"] + [f"{i},{i % 2}"
                                             for i in range(20)]))
        task = parse_dataset_spec(f"csv:path={path},target=t,kind=classification")
        assert task.n_classes == 2

    def test_malformed_spec_rejected(self):
        with pytest.raises(Exception):
            parse_dataset_spec("blobs")
        with pytest.raises(Exception):
            parse_dataset_spec("martian:n=10")
