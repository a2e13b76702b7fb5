"""Command-line entry point.

One binary, six subcommands: collect / train / run / eval / sample-kshot /
bench. Option values resolve as flags over config-file entries over built-in
defaults; logs are line-delimited JSON on stderr and data only ever goes to
the requested output paths. Exit codes: 0 success, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .collection import CollectionConfig, CollectionError, collect
from .core import (
    DataError,
    Demonstration,
    LabelSet,
    MergeError,
    RationaleStore,
    load_documents,
    load_samples,
    save_documents,
    save_samples,
)
from .evalbench import (
    BenchConfig,
    error_matrix,
    micro_f1,
    pick_initial_demos,
    pick_similar_demos,
    prediction_row,
    run_benchmark,
    sample_kshot_document,
    sample_kshot_sentence,
)
from .feedback import (
    AnchorIndex,
    Fallback,
    LoopConfig,
    default_fallback_label,
    predict_with_feedback,
)
from .gateway import (
    BiasModel,
    CallLog,
    ConfigurationError,
    GatewayError,
    HttpBackend,
    MockBackend,
    ParseError,
)
from .seeding import stable_u64
from .supervisor import CheckpointError, RationaleSupervisor, load_model, save_model

__all__ = ["main"]

log = logging.getLogger("srvf.cli")


class UsageError(Exception):
    """Bad invocation: missing required option or malformed flag value."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage problems; the contract here is 1.
    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "event": record.getMessage(),
        }
        if record.exc_info:
            payload["traceback"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False, sort_keys=True)


def _setup_logging(level_name: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("srvf")
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level_name.upper(), logging.INFO))
    root.propagate = False


# ---------------------------------------------------------------------------
# option resolution: flags > config file > defaults

_BACKEND_DEFAULTS = {
    "llm": "mock",
    "endpoint": None,
    "model_name": None,
    "temperature": 1.0,
    "max_tokens": 512,
    "max_inflight": 4,
    "mock_bias": None,
    "seed": 0,
}

_DEFAULTS: dict[str, dict] = {
    "collect": {
        **_BACKEND_DEFAULTS,
        "data": None,
        "out": None,
        "di_attempts": 3,
        "lgi_retries": 2,
        "max_reject_fraction": 0.5,
        "labels": None,
        "negatives": "Other",
    },
    "train": {
        "rationales": None,
        "out": None,
        "data": None,
        "tau": 0.2,
        "epochs": 50,
        "batch": 128,
        "lr": 1e-2,
        "dim": 128,
        "feature_space": 2**18,
        "seed": 0,
        "labels": None,
        "negatives": "Other",
    },
    "run": {
        **_BACKEND_DEFAULTS,
        "test": None,
        "model": None,
        "store": None,
        "out": None,
        "data": None,
        "max_iters": 5,
        "k": 5,
        "feedback_demos": 5,
        "fallback": "min_pb",
        "init_demos": "random",
        "demos_file": None,
        "demo_count": None,
        "labels": None,
        "negatives": "Other",
    },
    "eval": {
        "pred": None,
        "gold": None,
        "negatives": "Other",
        "labels": None,
        "out": None,
        "matrix_out": None,
    },
    "sample-kshot": {
        "data": None,
        "k": 5,
        "seed": 0,
        "doc_level": False,
        "out": None,
        "labels": None,
        "negatives": "Other",
    },
    "bench": {
        "config": None,
        "out_dir": "bench_out",
        "seed": None,
    },
}


def _resolve_options(command: str, ns: argparse.Namespace) -> dict:
    resolved = dict(_DEFAULTS[command])
    config_path = getattr(ns, "config", None)
    if config_path and command != "bench":
        with open(config_path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise UsageError(f"{config_path}: config must be a JSON object")
        section = raw.get(command, raw)
        if not isinstance(section, dict):
            raise UsageError(f"{config_path}: section {command!r} must be a JSON object")
        for key, value in section.items():
            key = key.replace("-", "_")
            if key not in resolved:
                raise UsageError(f"{config_path}: unknown option {key!r} for {command}")
            resolved[key] = value
    for key in resolved:
        flag_value = getattr(ns, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    return resolved


def _require(resolved: dict, command: str, *names: str) -> None:
    missing = [n for n in names if resolved.get(n) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"srvf {command}: missing required option(s): {flags}")


def _maybe_print_config(ns: argparse.Namespace, resolved: dict) -> bool:
    if getattr(ns, "print_config", False):
        sys.stdout.write(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        return True
    return False


def _split_csv(raw: str | Sequence[str] | None) -> list[str]:
    if raw is None:
        return []
    if isinstance(raw, str):
        return [part.strip() for part in raw.split(",") if part.strip()]
    return [str(part) for part in raw]


def _labels_from_jsonl(paths: Sequence[str], fields: Sequence[str]) -> list[str]:
    names: set[str] = set()
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                for f in fields:
                    if f in row:
                        names.add(str(row[f]))
    return sorted(names)


def _resolve_labelset(resolved: dict, paths: Sequence[str], fields: Sequence[str] = ("label",)) -> LabelSet:
    names = _split_csv(resolved.get("labels"))
    if not names:
        names = _labels_from_jsonl([p for p in paths if p], fields)
    if not names:
        raise DataError("could not determine the label set; pass --labels")
    return LabelSet.from_names(names, negatives=_split_csv(resolved.get("negatives")))


def _build_backend(resolved: dict, call_log: CallLog | None = None):
    if resolved["llm"] == "mock":
        bias = BiasModel()
        if resolved.get("mock_bias"):
            with open(resolved["mock_bias"], encoding="utf-8") as fh:
                bias = BiasModel.from_dict(json.load(fh))
        return MockBackend(bias=bias, seed=int(resolved["seed"]), call_log=call_log)
    if resolved["llm"] == "http":
        if not resolved.get("endpoint") or not resolved.get("model_name"):
            raise UsageError("http backend needs --endpoint and --model-name")
        return HttpBackend(
            base_url=resolved["endpoint"],
            model=resolved["model_name"],
            temperature=float(resolved["temperature"]),
            max_tokens=int(resolved["max_tokens"]),
            max_inflight=int(resolved["max_inflight"]),
            call_log=call_log,
        )
    raise UsageError(f"unknown backend {resolved['llm']!r} (expected mock or http)")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_collect(ns: argparse.Namespace) -> int:
    resolved = _resolve_options("collect", ns)
    if _maybe_print_config(ns, resolved):
        return 0
    _require(resolved, "collect", "data", "out")
    labelset = _resolve_labelset(resolved, [resolved["data"]])
    samples = load_samples(resolved["data"], labelset)
    backend = _build_backend(resolved, CallLog())
    config = CollectionConfig(
        lgi_retries=int(resolved["lgi_retries"]),
        di_attempts=int(resolved["di_attempts"]),
        max_reject_fraction=float(resolved["max_reject_fraction"]),
    )
    store, report = collect(
        samples, backend, labelset, config=config, seed=int(resolved["seed"])
    )
    store.save(resolved["out"])
    log.info(
        "wrote %d rationales to %s (accepted %d/%d samples, %d biased)",
        len(store), resolved["out"], report.accepted, report.total_samples,
        report.biased_count,
    )
    return 0


def _cmd_train(ns: argparse.Namespace) -> int:
    resolved = _resolve_options("train", ns)
    if _maybe_print_config(ns, resolved):
        return 0
    _require(resolved, "train", "rationales", "out")
    label_paths = [resolved["data"]] if resolved.get("data") else [resolved["rationales"]]
    fields = ("label",) if resolved.get("data") else ("predicted",)
    labelset = _resolve_labelset(resolved, label_paths, fields)
    samples = load_samples(resolved["data"], labelset) if resolved.get("data") else None
    store = RationaleStore.load(resolved["rationales"], labelset, samples=samples)
    model = RationaleSupervisor(
        dim=int(resolved["dim"]),
        feature_space=int(resolved["feature_space"]),
        tau=float(resolved["tau"]),
        epochs=int(resolved["epochs"]),
        batch_size=int(resolved["batch"]),
        learning_rate=float(resolved["lr"]),
        seed=int(resolved["seed"]),
    )
    model.fit(store)
    save_model(model, resolved["out"])
    log.info("trained on %d rationales, checkpoint at %s", len(store), resolved["out"])
    return 0


def _cmd_run(ns: argparse.Namespace) -> int:
    resolved = _resolve_options("run", ns)
    if _maybe_print_config(ns, resolved):
        return 0
    _require(resolved, "run", "test", "model", "store", "out")

    data_path = resolved.get("data")
    labelset = _resolve_labelset(resolved, [p for p in (data_path, resolved["test"]) if p])
    test = load_samples(resolved["test"], labelset)
    samples = load_samples(data_path, labelset) if data_path else None
    store = RationaleStore.load(resolved["store"], labelset, samples=samples)
    model = load_model(resolved["model"])
    index = AnchorIndex.build(store, model)
    pool = store.demonstration_pool()
    backend = _build_backend(resolved, CallLog())
    fallback_label = default_fallback_label(labelset)
    cfg = LoopConfig(
        max_iters=int(resolved["max_iters"]),
        k=int(resolved["k"]),
        feedback_demo_count=int(resolved["feedback_demos"]),
        fallback=Fallback(resolved["fallback"]),
    )
    demo_count = resolved.get("demo_count")
    demo_count = int(demo_count) if demo_count is not None else (10 if len(labelset) <= 10 else 4)
    seed = int(resolved["seed"])
    demo_seed = stable_u64(seed, "demo-selection")
    infer_seed = stable_u64(seed, "inference")

    mode = resolved["init_demos"]
    if mode == "file":
        _require(resolved, "run", "demos_file")
        file_pool = _load_demo_file(resolved["demos_file"], labelset)
    elif mode == "simcse-like":
        retrieval_encoder = RationaleSupervisor(dim=64, feature_space=2**15)
    elif mode != "random":
        raise UsageError(f"unknown --init-demos mode {mode!r}")

    def select(sample, round_i: int = 0):
        if mode == "random":
            round_seed = demo_seed if round_i == 0 else stable_u64(demo_seed, "round", round_i)
            return pick_initial_demos(pool, demo_count, round_seed, sample.id)
        if mode == "simcse-like":
            return pick_similar_demos(pool, demo_count, sample, retrieval_encoder)
        return pick_initial_demos(file_pool, demo_count, demo_seed, sample.id)

    with open(resolved["out"], "w", encoding="utf-8") as fh:
        for sample in test:
            pred = predict_with_feedback(
                sample, backend, model, index, select(sample), labelset, cfg,
                seed=infer_seed,
                fallback_label=fallback_label,
                demo_selector=lambda r, s=sample: select(s, r),
            )
            fh.write(json.dumps(prediction_row(sample.id, pred), ensure_ascii=False) + "\n")
    log.info("wrote %d predictions to %s", len(test), resolved["out"])
    return 0


def _load_demo_file(path: str, labelset: LabelSet) -> list[Demonstration]:
    samples = load_samples(path, labelset)
    rationales: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                if "rationale" in row:
                    rationales[str(row["id"])] = str(row["rationale"])
    out = []
    for s in samples:
        text = rationales.get(s.id)
        if text is None:
            raise DataError(f"demonstration {s.id} is missing a 'rationale' field")
        out.append(Demonstration(sample=s, rationale_text=text, label=s.gold))
    return out


def _cmd_eval(ns: argparse.Namespace) -> int:
    resolved = _resolve_options("eval", ns)
    if _maybe_print_config(ns, resolved):
        return 0
    _require(resolved, "eval", "pred", "gold")
    labelset = _resolve_labelset(resolved, [resolved["gold"]])
    gold = {s.id: s for s in load_samples(resolved["gold"], labelset)}
    pairs = []
    with open(resolved["pred"], encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            sid = str(row["id"])
            if sid not in gold:
                raise DataError(f"{resolved['pred']}:{lineno}: unknown sample id {sid!r}")
            label = labelset.resolve(str(row["label"]))
            if label is None:
                raise DataError(f"{resolved['pred']}:{lineno}: unknown label {row['label']!r}")
            pairs.append((gold[sid].gold, label))
    matrix = error_matrix(pairs)
    report = {
        "micro_f1": micro_f1(pairs, labelset.negatives()),
        "pairs_scored": len(pairs),
        "errors": matrix.total,
        "worst_confusions": [
            {"gold": g, "predicted": p, "count": n} for (g, p), n in matrix.ranked()[:10]
        ],
    }
    body = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if resolved.get("out"):
        Path(resolved["out"]).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)
    if resolved.get("matrix_out"):
        Path(resolved["matrix_out"]).write_text(matrix.to_csv(), encoding="utf-8")
    return 0


def _cmd_sample_kshot(ns: argparse.Namespace) -> int:
    resolved = _resolve_options("sample-kshot", ns)
    if _maybe_print_config(ns, resolved):
        return 0
    _require(resolved, "sample-kshot", "data", "out")
    labelset = _resolve_labelset(
        resolved, [resolved["data"]], fields=("label", "relation")
    )
    k = int(resolved["k"])
    seed = int(resolved["seed"])
    if resolved.get("doc_level"):
        docs = load_documents(resolved["data"], labelset)
        picked_docs = sample_kshot_document(docs, k, seed)
        save_documents(picked_docs, resolved["out"])
        log.info("kept %d of %d documents at k=%d", len(picked_docs), len(docs), k)
    else:
        data = load_samples(resolved["data"], labelset)
        picked = sample_kshot_sentence(data, k, seed)
        save_samples(picked, resolved["out"])
        log.info("kept %d of %d samples at k=%d", len(picked), len(data), k)
    return 0


def _cmd_bench(ns: argparse.Namespace) -> int:
    resolved = _resolve_options("bench", ns)
    _require(resolved, "bench", "config")
    with open(resolved["config"], encoding="utf-8") as fh:
        raw = json.load(fh)
    if resolved.get("seed") is not None:
        raw["seed"] = int(resolved["seed"])
    cfg = BenchConfig.from_dict(raw)
    if _maybe_print_config(ns, cfg.to_dict()):
        return 0
    report = run_benchmark(cfg)

    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out_dir / "timings.json").write_text(
        json.dumps(report.timings(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for name, result in sorted(report.methods.items()):
        if result.error is not None:
            log.error("method %s failed: %s", name, result.error)
            continue
        with open(out_dir / f"preds_{name}.jsonl", "w", encoding="utf-8") as fh:
            for row in result.preds:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        assert result.errors is not None
        (out_dir / f"error_matrix_{name}.csv").write_text(
            result.errors.to_csv(), encoding="utf-8"
        )
        log.info("method %s: micro_f1=%.4f llm_calls=%d", name, result.f1,
                 result.efficiency.llm_calls if result.efficiency else -1)
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--llm", choices=["mock", "http"], default=None)
    p.add_argument("--endpoint", default=None, help="HTTP backend base URL")
    p.add_argument("--model-name", dest="model_name", default=None,
                   help="model identifier sent to the HTTP backend")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-tokens", dest="max_tokens", type=int, default=None)
    p.add_argument("--max-inflight", dest="max_inflight", type=int, default=None)
    p.add_argument("--mock-bias", dest="mock_bias", default=None,
                   help="JSON file configuring the mock backend's label confusion")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file (flags still win)")
    p.add_argument("--print-config", dest="print_config", action="store_true",
                   help="print the resolved configuration and exit")
    p.add_argument("--labels", default=None,
                   help="comma-separated label names (default: read from the data)")
    p.add_argument("--negatives", default=None,
                   help="comma-separated negative label names (default: Other)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srvf", description=__doc__)
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("collect", help="gather biased and unbiased rationales")
    _add_common(p)
    _add_backend_flags(p)
    p.add_argument("--data", default=None, help="labeled training samples (JSONL)")
    p.add_argument("--out", default=None, help="rationale store output (JSONL)")
    p.add_argument("--di-attempts", dest="di_attempts", type=int, default=None)
    p.add_argument("--lgi-retries", dest="lgi_retries", type=int, default=None)
    p.add_argument("--max-reject-fraction", dest="max_reject_fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_collect)

    p = sub.add_parser("train", help="train the rationale supervisor")
    _add_common(p)
    p.add_argument("--rationales", default=None, help="rationale store (JSONL)")
    p.add_argument("--out", default=None, help="model checkpoint output (JSON)")
    p.add_argument("--data", default=None,
                   help="original samples (JSONL); recovers full sample records")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--feature-space", dest="feature_space", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("run", help="predict with verification and feedback")
    _add_common(p)
    _add_backend_flags(p)
    p.add_argument("--test", default=None, help="test samples (JSONL)")
    p.add_argument("--model", default=None, help="supervisor checkpoint (JSON)")
    p.add_argument("--store", default=None, help="rationale store (JSONL)")
    p.add_argument("--out", default=None, help="predictions output (JSONL)")
    p.add_argument("--data", default=None,
                   help="training samples backing the store (JSONL)")
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--feedback-demos", dest="feedback_demos", type=int, default=None)
    p.add_argument("--fallback", choices=["min_pb", "last"], default=None)
    p.add_argument("--init-demos", dest="init_demos",
                   choices=["random", "simcse-like", "file"], default=None)
    p.add_argument("--demos-file", dest="demos_file", default=None)
    p.add_argument("--demo-count", dest="demo_count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="score predictions against gold labels")
    _add_common(p)
    p.add_argument("--pred", default=None, help="predictions (JSONL)")
    p.add_argument("--gold", default=None, help="gold samples (JSONL)")
    p.add_argument("--out", default=None, help="report output (JSON); stdout when omitted")
    p.add_argument("--matrix-out", dest="matrix_out", default=None,
                   help="error matrix output (CSV)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sample-kshot", help="draw a k-shot training split")
    _add_common(p)
    p.add_argument("--data", default=None, help="full dataset (JSONL)")
    p.add_argument("--out", default=None, help="sampled subset output (JSONL)")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--doc-level", dest="doc_level", action="store_const", const=True,
                   default=None, help="sample documents instead of sentences")
    p.set_defaults(func=_cmd_sample_kshot)

    p = sub.add_parser("bench", help="run the benchmark described by a config file")
    p.add_argument("--config", default=None, help="benchmark config (JSON)")
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--print-config", dest="print_config", action="store_true")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    _setup_logging(getattr(ns, "log_level", "info"))
    if getattr(ns, "command", None) is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write("srvf: error: a subcommand is required\n")
        return 1
    try:
        return ns.func(ns)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except (
        DataError,
        MergeError,
        CollectionError,
        GatewayError,
        ConfigurationError,
        ParseError,
        CheckpointError,
        OSError,
        ValueError,
    ) as exc:
        log.error("%s: %s", type(exc).__name__, exc, exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
