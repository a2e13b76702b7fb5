"""End-to-end tests for the srvf command line."""

import json
import math
from pathlib import Path

import pytest

from srvf.cli import main
from srvf.core import LabelSet, RationaleStore, load_samples, save_documents, save_samples
from srvf.supervisor import load_model
from srvf.synthetic import SEMEVAL_LABELS, make_corpus, make_documents

BIAS = {
    "confusion": {"Entity-Destination": ["Content-Container", 0.5]},
    "steering_strength": 1.0,
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run collect -> train -> run -> eval once and hand out the artifacts."""
    root = tmp_path_factory.mktemp("pipeline")
    train, test, labelset = make_corpus(3, 4, seed=3)
    paths = {
        "train": root / "train.jsonl",
        "test": root / "test.jsonl",
        "bias": root / "bias.json",
        "store": root / "store.jsonl",
        "model": root / "model.json",
        "preds": root / "preds.jsonl",
        "report": root / "report.json",
        "matrix": root / "matrix.csv",
    }
    save_samples(train, paths["train"])
    save_samples(test, paths["test"])
    paths["bias"].write_text(json.dumps(BIAS), encoding="utf-8")

    rc = {}
    rc["collect"] = main([
        "collect", "--data", str(paths["train"]), "--out", str(paths["store"]),
        "--mock-bias", str(paths["bias"]), "--seed", "0",
    ])
    rc["train"] = main([
        "train", "--rationales", str(paths["store"]), "--data", str(paths["train"]),
        "--out", str(paths["model"]),
        "--dim", "16", "--feature-space", "4096", "--epochs", "5",
    ])
    rc["run"] = main([
        "run", "--test", str(paths["test"]), "--model", str(paths["model"]),
        "--store", str(paths["store"]), "--data", str(paths["train"]),
        "--out", str(paths["preds"]), "--mock-bias", str(paths["bias"]),
        "--seed", "0",
    ])
    rc["eval"] = main([
        "eval", "--pred", str(paths["preds"]), "--gold", str(paths["test"]),
        "--out", str(paths["report"]), "--matrix-out", str(paths["matrix"]),
    ])
    return paths, labelset, len(test), rc


class TestPipeline:
    def test_every_stage_exits_zero(self, pipeline):
        _, _, _, rc = pipeline
        assert rc == {"collect": 0, "train": 0, "run": 0, "eval": 0}

    def test_store_loads_and_covers_every_sample(self, pipeline):
        paths, labelset, _, _ = pipeline
        samples = load_samples(paths["train"], labelset)
        store = RationaleStore.load(paths["store"], labelset, samples=samples)
        # Collection may reject a few stubborn samples, never more than half.
        pool_ids = {d.sample.id for d in store.demonstration_pool()}
        assert pool_ids <= {s.id for s in samples}
        assert len(pool_ids) >= len(samples) / 2

    def test_checkpoint_loads(self, pipeline):
        paths, _, _, _ = pipeline
        model = load_model(paths["model"])
        assert model.dim == 16 and model.feature_space == 4096

    def test_prediction_rows_are_well_formed(self, pipeline):
        paths, labelset, n_test, _ = pipeline
        rows = [json.loads(l) for l in paths["preds"].read_text().splitlines()]
        assert len(rows) == n_test
        for row in rows:
            assert set(row) == {
                "id", "label", "rationale", "p_b_trace", "iterations_used", "llm_calls",
            }
            assert labelset.resolve(row["label"]) is not None
            assert row["llm_calls"] >= 1
            for x in row["p_b_trace"]:
                if isinstance(x, str):
                    assert x in ("inf", "-inf")
                else:
                    assert math.isfinite(x)

    def test_eval_report_and_matrix(self, pipeline):
        paths, _, n_test, _ = pipeline
        report = json.loads(paths["report"].read_text())
        assert set(report) == {"micro_f1", "pairs_scored", "errors", "worst_confusions"}
        assert report["pairs_scored"] == n_test
        assert 0.0 <= report["micro_f1"] <= 1.0
        header = paths["matrix"].read_text().splitlines()[0]
        assert header.startswith("gold\\predicted,")

    def test_eval_to_stdout(self, pipeline, capsys):
        paths, _, _, _ = pipeline
        assert main(["eval", "--pred", str(paths["preds"]), "--gold", str(paths["test"])]) == 0
        report = json.loads(capsys.readouterr().out)
        assert "micro_f1" in report

    def test_rerun_is_deterministic(self, pipeline, tmp_path):
        paths, _, _, _ = pipeline
        again = tmp_path / "preds2.jsonl"
        assert main([
            "run", "--test", str(paths["test"]), "--model", str(paths["model"]),
            "--store", str(paths["store"]), "--data", str(paths["train"]),
            "--out", str(again), "--mock-bias", str(paths["bias"]), "--seed", "0",
        ]) == 0
        assert again.read_bytes() == paths["preds"].read_bytes()


class TestExitCodes:
    def test_no_subcommand_is_a_usage_error(self, capsys):
        assert main([]) == 1
        assert "subcommand" in capsys.readouterr().err

    def test_unknown_subcommand_is_a_usage_error(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_options(self, capsys):
        assert main(["run"]) == 1
        err = capsys.readouterr().err
        assert "--test" in err and "--model" in err

    def test_missing_input_file_is_a_runtime_error(self, tmp_path):
        rc = main([
            "collect", "--data", str(tmp_path / "nope.jsonl"),
            "--out", str(tmp_path / "o.jsonl"), "--labels", "A,Other",
        ])
        assert rc == 2

    def test_unknown_pred_id_is_a_runtime_error(self, pipeline, tmp_path):
        paths, _, _, _ = pipeline
        bad = tmp_path / "bad.jsonl"
        bad.write_text(json.dumps({"id": "ghost", "label": "Other"}) + "\n")
        assert main(["eval", "--pred", str(bad), "--gold", str(paths["test"])]) == 2

    def test_bad_flag_value(self):
        assert main(["train", "--epochs", "many"]) == 1


class TestConfigResolution:
    def test_print_config_shows_defaults(self, capsys):
        assert main(["train", "--print-config"]) == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["tau"] == 0.2 and cfg["epochs"] == 50 and cfg["batch"] == 128

    def test_flags_beat_config_beats_defaults(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"train": {"tau": 0.5, "epochs": 7}}))
        assert main([
            "train", "--config", str(cfg_path), "--tau", "0.9", "--print-config",
        ]) == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["tau"] == 0.9      # flag wins
        assert cfg["epochs"] == 7     # config beats default
        assert cfg["batch"] == 128    # untouched default

    def test_flat_config_section(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"lr": 0.5}))
        assert main(["train", "--config", str(cfg_path), "--print-config"]) == 0
        assert json.loads(capsys.readouterr().out)["lr"] == 0.5

    def test_unknown_config_key_is_a_usage_error(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"train": {"epochz": 7}}))
        assert main(["train", "--config", str(cfg_path), "--print-config"]) == 1


class TestSampleKshot:
    def test_sentence_level(self, tmp_path):
        train, _, labelset = make_corpus(6, 0, seed=5)
        data = tmp_path / "data.jsonl"
        out = tmp_path / "subset.jsonl"
        save_samples(train, data)
        assert main([
            "sample-kshot", "--data", str(data), "--out", str(out),
            "--k", "2", "--seed", "1",
        ]) == 0
        picked = load_samples(out, labelset)
        assert len(picked) == 2 * len(SEMEVAL_LABELS)

    def test_document_level(self, tmp_path):
        docs = make_documents(8, seed=2)
        data = tmp_path / "docs.jsonl"
        out = tmp_path / "subset.jsonl"
        save_documents(docs, data)
        assert main([
            "sample-kshot", "--doc-level", "--data", str(data), "--out", str(out),
            "--k", "2", "--seed", "1", "--labels", ",".join(SEMEVAL_LABELS),
        ]) == 0
        assert out.read_text().strip()


class TestBench:
    def test_bench_writes_artifacts(self, tmp_path):
        cfg = {
            "dataset": {"kind": "synthetic", "train_per_label": 3, "test_per_label": 4, "seed": 7},
            "methods": ["icl", "srvf"],
            "backend": {"llm": "mock", "bias": BIAS},
            "train": {"dim": 16, "feature_space": 4096, "epochs": 4},
            "demo_count": 4,
            "seed": 0,
        }
        cfg_path = tmp_path / "bench.json"
        cfg_path.write_text(json.dumps(cfg))
        out_dir = tmp_path / "out"
        assert main(["bench", "--config", str(cfg_path), "--out-dir", str(out_dir)]) == 0
        for name in (
            "report.json", "timings.json",
            "preds_icl.jsonl", "preds_srvf.jsonl",
            "error_matrix_icl.csv", "error_matrix_srvf.csv",
        ):
            assert (out_dir / name).exists(), name
        report = json.loads((out_dir / "report.json").read_text())
        assert set(report["methods"]) == {"icl", "srvf"}

    def test_bench_print_config(self, capsys):
        assert main([
            "bench", "--config", "configs/bench.synthetic.json", "--print-config",
        ]) == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["methods"] == ["icl", "srvf"]

    def test_bench_requires_config(self):
        assert main(["bench"]) == 1
