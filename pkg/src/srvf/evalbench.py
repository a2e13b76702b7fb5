"""Metrics, few-shot samplers, and the benchmark harness.

The benchmark wires the whole pipeline together: collect rationales over the
training split, train the supervisor, then run each configured method over
the test split under seeds fanned out from one master seed, so every method
sees identical demonstrations and initial generations.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .collection import CollectionConfig, collect
from .core import (
    DataError,
    Demonstration,
    DocumentSample,
    LabelSet,
    LabeledSample,
    Prediction,
    RelationLabel,
)
from .feedback import (
    AnchorIndex,
    Fallback,
    LoopConfig,
    default_fallback_label,
    initial_generation,
    predict_with_feedback,
    self_consistency,
)
from .gateway import BiasModel, CallLog, HttpBackend, MockBackend, PromptSpec, RE_INSTRUCTION
from .seeding import stable_rng, stable_u64
from .supervisor import RationaleSupervisor
from . import synthetic

__all__ = [
    "micro_f1",
    "ErrorMatrix",
    "error_matrix",
    "sample_kshot_sentence",
    "sample_kshot_document",
    "EfficiencyReport",
    "efficiency_report",
    "BenchConfig",
    "MethodResult",
    "EvalReport",
    "run_benchmark",
    "pick_initial_demos",
    "pick_similar_demos",
    "prediction_row",
    "KNOWN_METHODS",
]

log = logging.getLogger("srvf.evalbench")

KNOWN_METHODS = ("icl", "srvf", "self_consistency")


def micro_f1(
    pairs: Iterable[tuple[RelationLabel, RelationLabel]],
    negatives: Iterable[RelationLabel] = (),
) -> float:
    """Micro F1 over non-negative relation decisions.

    A negative gold with a non-negative prediction counts as a false
    positive only; a non-negative gold with any wrong prediction counts as a
    false negative, plus a false positive when the prediction itself is
    non-negative.
    """
    neg = {lab.name for lab in negatives}
    tp = fp = fn = 0
    for gold, pred in pairs:
        hit = gold.name == pred.name
        if hit:
            if gold.name not in neg:
                tp += 1
            continue
        if pred.name not in neg:
            fp += 1
        if gold.name not in neg:
            fn += 1
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@dataclass
class ErrorMatrix:
    """Misclassification counts indexed by (gold name, predicted name)."""

    counts: dict[tuple[str, str], int]
    labels: tuple[str, ...]

    def count(self, gold: str, predicted: str) -> int:
        return self.counts.get((gold, predicted), 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def ranked(self) -> list[tuple[tuple[str, str], int]]:
        """Worst confusions first; ties ordered by label names."""
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))

    def to_dict(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (gold, pred), n in sorted(self.counts.items()):
            out.setdefault(gold, {})[pred] = n
        return out

    def to_csv(self) -> str:
        lines = ["gold\\predicted," + ",".join(self.labels)]
        for gold in self.labels:
            row = [str(self.count(gold, pred)) for pred in self.labels]
            lines.append(gold + "," + ",".join(row))
        return "\n".join(lines) + "\n"


def error_matrix(pairs: Iterable[tuple[RelationLabel, RelationLabel]]) -> ErrorMatrix:
    counts: dict[tuple[str, str], int] = {}
    seen: set[str] = set()
    for gold, pred in pairs:
        seen.add(gold.name)
        seen.add(pred.name)
        if gold.name != pred.name:
            key = (gold.name, pred.name)
            counts[key] = counts.get(key, 0) + 1
    return ErrorMatrix(counts=counts, labels=tuple(sorted(seen)))


def sample_kshot_sentence(
    data: Sequence[LabeledSample], k: int, seed: int
) -> list[LabeledSample]:
    """k instances per relation label, uniform without replacement.

    Labels are processed in sorted-name order and the output keeps
    (label, draw order). Labels with fewer than k instances contribute
    everything they have, with a warning.
    """
    by_label: dict[str, list[LabeledSample]] = {}
    for s in data:
        by_label.setdefault(s.gold.name, []).append(s)
    rng = stable_rng(seed, "kshot-sentence")
    out: list[LabeledSample] = []
    for name in sorted(by_label):
        pool = by_label[name]
        if len(pool) < k:
            log.warning("label %s has only %d instances, wanted %d", name, len(pool), k)
            out.extend(pool)
        else:
            out.extend(rng.sample(pool, k))
    return out


def sample_kshot_document(
    docs: Sequence[DocumentSample],
    k: int,
    seed: int,
    labels: Sequence[str] | None = None,
) -> list[DocumentSample]:
    """Greedy document sampler targeting about k triplets per relation.

    Documents are drawn uniformly without replacement; a draw is kept only
    when it contains a triplet of a relation whose kept-count is still below
    k. After each admission q = kept triplets / |relation universe| is
    recomputed, and sampling stops once q exceeds k. Exhausting the corpus
    first returns whatever was kept, with a warning.
    """
    if labels is None:
        universe: list[str] = []
        for doc in docs:
            for t in doc.triplets:
                if t.relation.name not in universe:
                    universe.append(t.relation.name)
    else:
        universe = list(dict.fromkeys(labels))
    if not universe:
        return []

    rng = stable_rng(seed, "kshot-document")
    remaining = list(docs)
    kept: list[DocumentSample] = []
    kept_per_label: dict[str, int] = {name: 0 for name in universe}
    total = 0
    q = 0.0
    while remaining and q <= k:
        doc = remaining.pop(rng.randrange(len(remaining)))
        unfinished = any(
            t.relation.name in kept_per_label and kept_per_label[t.relation.name] < k
            for t in doc.triplets
        )
        if not unfinished:
            continue
        kept.append(doc)
        for t in doc.triplets:
            if t.relation.name in kept_per_label:
                kept_per_label[t.relation.name] += 1
        total += len(doc.triplets)
        q = total / len(universe)
    if q <= k:
        log.warning(
            "document corpus exhausted at q=%.2f before exceeding k=%d", q, k
        )
    return kept


@dataclass(frozen=True)
class EfficiencyReport:
    pre_inference_seconds: float
    initial_generation_seconds: float
    correction_seconds: float
    llm_calls: int
    corrected_fraction: float

    def to_dict(self) -> dict:
        return {
            "pre_inference_seconds": self.pre_inference_seconds,
            "initial_generation_seconds": self.initial_generation_seconds,
            "correction_seconds": self.correction_seconds,
            "llm_calls": self.llm_calls,
            "corrected_fraction": self.corrected_fraction,
        }


def efficiency_report(*call_logs: CallLog) -> EfficiencyReport:
    """Aggregate one or more call logs into the three-phase summary."""
    pre = sum(log_.seconds_in("pre_inference") for log_ in call_logs)
    initial = sum(log_.seconds_in("initial_generation") for log_ in call_logs)
    correction = sum(log_.seconds_in("correction") for log_ in call_logs)
    calls = sum(log_.llm_calls for log_ in call_logs)
    flags: list[bool] = []
    for log_ in call_logs:
        flags.extend(log_.sample_corrected.values())
    fraction = sum(flags) / len(flags) if flags else 0.0
    return EfficiencyReport(
        pre_inference_seconds=pre,
        initial_generation_seconds=initial,
        correction_seconds=correction,
        llm_calls=calls,
        corrected_fraction=fraction,
    )


# ---------------------------------------------------------------------------
# demonstration selection


def pick_initial_demos(
    pool: Sequence[Demonstration], count: int, seed: int, sample_id: str
) -> tuple[Demonstration, ...]:
    """Uniform per-sample draw from the demonstration pool."""
    if count >= len(pool):
        return tuple(pool)
    rng = stable_rng(seed, "init-demos", sample_id)
    idx = rng.sample(range(len(pool)), count)
    return tuple(pool[i] for i in idx)


def pick_similar_demos(
    pool: Sequence[Demonstration],
    count: int,
    sample: LabeledSample,
    encoder: RationaleSupervisor,
) -> tuple[Demonstration, ...]:
    """Sentence-similarity demonstration retrieval with an untrained encoder.

    Ranks pool sentences by embedding similarity to the query sentence,
    descending, ties by pool order.
    """
    if count >= len(pool):
        return tuple(pool)
    q = encoder.embed(sample.sentence)
    sims = np.array([float(np.dot(q, encoder.embed(d.sample.sentence))) for d in pool])
    order = np.argsort(-sims, kind="stable")[:count]
    return tuple(pool[int(i)] for i in order)


def prediction_row(sample_id: str, pred: Prediction) -> dict:
    """JSON-safe output row; infinite indicator scores become strings."""

    def enc(x: float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x

    return {
        "id": sample_id,
        "label": pred.label.name,
        "rationale": pred.rationale_text,
        "p_b_trace": [enc(x) for x in pred.p_b_trace],
        "iterations_used": pred.iterations_used,
        "llm_calls": pred.llm_calls,
    }


# ---------------------------------------------------------------------------
# benchmark


@dataclass(frozen=True)
class BenchConfig:
    """Everything a benchmark run needs, JSON-friendly."""

    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    methods: tuple[str, ...] = ("icl", "srvf")
    backend: dict = field(default_factory=lambda: {"llm": "mock"})
    loop: LoopConfig = LoopConfig()
    collection: CollectionConfig = CollectionConfig()
    train: dict = field(default_factory=dict)
    demo_count: int = 4
    self_consistency_n: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {KNOWN_METHODS}")
        if self.demo_count < 0:
            raise ValueError("demo_count cannot be negative")
        if self.self_consistency_n < 1:
            raise ValueError("self_consistency_n must be at least 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown benchmark config keys: {unknown}")
        loop_raw = dict(raw.get("loop", {}))
        if "fallback" in loop_raw:
            loop_raw["fallback"] = Fallback(loop_raw["fallback"])
        coll_raw = raw.get("collection", {})
        return cls(
            dataset=dict(raw.get("dataset", {"kind": "synthetic"})),
            methods=tuple(raw.get("methods", ("icl", "srvf"))),
            backend=dict(raw.get("backend", {"llm": "mock"})),
            loop=LoopConfig(**loop_raw),
            collection=CollectionConfig(**coll_raw),
            train=dict(raw.get("train", {})),
            demo_count=int(raw.get("demo_count", 4)),
            self_consistency_n=int(raw.get("self_consistency_n", 5)),
            seed=int(raw.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "methods": list(self.methods),
            "backend": self.backend,
            "loop": {
                "max_iters": self.loop.max_iters,
                "k": self.loop.k,
                "feedback_demo_count": self.loop.feedback_demo_count,
                "fallback": self.loop.fallback.value,
            },
            "collection": {
                "lgi_retries": self.collection.lgi_retries,
                "di_attempts": self.collection.di_attempts,
                "max_reject_fraction": self.collection.max_reject_fraction,
            },
            "train": self.train,
            "demo_count": self.demo_count,
            "self_consistency_n": self.self_consistency_n,
            "seed": self.seed,
        }


@dataclass
class MethodResult:
    name: str
    f1: float | None = None
    errors: ErrorMatrix | None = None
    efficiency: EfficiencyReport | None = None
    preds: list[dict] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        if self.error is not None:
            return {"error": self.error}
        assert self.efficiency is not None and self.errors is not None
        return {
            "f1": self.f1,
            "llm_calls": self.efficiency.llm_calls,
            "corrected_fraction": self.efficiency.corrected_fraction,
            "error_matrix": self.errors.to_dict(),
            "preds": self.preds,
        }


@dataclass
class EvalReport:
    config: dict
    labels: tuple[str, ...]
    methods: dict[str, MethodResult]
    # Live pipeline objects (store, model, ...) for callers that keep going
    # where the benchmark left off. Never serialized.
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Deterministic report body; wall-clock times live in timings()."""
        return {
            "config": self.config,
            "labels": list(self.labels),
            "methods": {name: m.to_dict() for name, m in sorted(self.methods.items())},
        }

    def timings(self) -> dict:
        out = {}
        for name, m in sorted(self.methods.items()):
            if m.efficiency is not None:
                out[name] = {
                    "pre_inference_seconds": m.efficiency.pre_inference_seconds,
                    "initial_generation_seconds": m.efficiency.initial_generation_seconds,
                    "correction_seconds": m.efficiency.correction_seconds,
                }
        return out


def _resolve_dataset(raw: dict) -> tuple[LabelSet, list[LabeledSample], list[LabeledSample]]:
    kind = raw.get("kind", "synthetic")
    if kind == "synthetic":
        train, test, labelset = synthetic.make_corpus(
            n_train_per_label=int(raw.get("train_per_label", 20)),
            n_test_per_label=int(raw.get("test_per_label", 50)),
            seed=int(raw.get("seed", 7)),
        )
        return labelset, train, test
    if kind == "files":
        from .core import load_samples

        names = raw.get("labels")
        if names is None:
            names = sorted(
                {row["label"] for path in (raw["train"], raw["test"]) for row in _peek(path)}
            )
        labelset = LabelSet.from_names(list(names), negatives=raw.get("negatives", ("Other",)))
        return labelset, load_samples(raw["train"], labelset), load_samples(raw["test"], labelset)
    raise DataError(f"unknown dataset kind {kind!r}")


def _peek(path: str) -> list[dict]:
    import json

    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _make_backend(cfg: BenchConfig, call_log: CallLog):
    raw = cfg.backend
    llm = raw.get("llm", "mock")
    if llm == "mock":
        bias = BiasModel.from_dict(raw.get("bias", {}))
        return MockBackend(
            bias=bias, seed=stable_u64(cfg.seed, "backend"), call_log=call_log
        )
    if llm == "http":
        return HttpBackend(
            base_url=raw["endpoint"],
            model=raw["model"],
            temperature=float(raw.get("temperature", 1.0)),
            max_tokens=int(raw.get("max_tokens", 512)),
            max_inflight=int(raw.get("max_inflight", 4)),
            call_log=call_log,
        )
    raise DataError(f"unknown backend {llm!r}")


def run_benchmark(cfg: BenchConfig) -> EvalReport:
    """Run every configured method over the shared dataset and seeds.

    All methods draw initial demonstrations from the same collected pool
    with the same per-sample seeds, so initial generations are identical
    across methods; a failing method is reported in its column without
    stopping the others.
    """
    labelset, train_samples, test_samples = _resolve_dataset(cfg.dataset)
    fallback = default_fallback_label(labelset)
    demo_seed = stable_u64(cfg.seed, "demo-selection")
    infer_seed = stable_u64(cfg.seed, "inference")

    # Shared pre-inference pipeline: collection feeds the demonstration pool
    # every method prompts with; supervisor training only matters to srvf.
    pre_log = CallLog()
    t0 = time.perf_counter()
    store, coll_report = collect(
        train_samples,
        _make_backend(cfg, pre_log),
        labelset,
        config=cfg.collection,
        seed=stable_u64(cfg.seed, "collect"),
    )
    pool = store.demonstration_pool()
    log.info(
        "demonstration pool ready: %d entries (%d/%d samples accepted)",
        len(pool), coll_report.accepted, coll_report.total_samples,
    )

    model = None
    index = None
    if "srvf" in cfg.methods:
        hyper = dict(cfg.train)
        hyper.setdefault("seed", stable_u64(cfg.seed, "train") % 2**32)
        model = RationaleSupervisor(**hyper)
        model.fit(store)
        index = AnchorIndex.build(store, model)
    pre_log.add_seconds("pre_inference", time.perf_counter() - t0)

    artifacts = {
        "labelset": labelset,
        "train": train_samples,
        "test": test_samples,
        "store": store,
        "collection_report": coll_report,
        "pool": pool,
        "model": model,
        "index": index,
    }

    results: dict[str, MethodResult] = {}
    for name in cfg.methods:
        try:
            results[name] = _run_method(
                name, cfg, labelset, test_samples, pool, model, index,
                fallback, demo_seed, infer_seed, pre_log,
            )
        except Exception as exc:  # isolate per-method failures
            log.exception("method %s failed", name)
            results[name] = MethodResult(name=name, error=f"{type(exc).__name__}: {exc}")

    return EvalReport(
        config=cfg.to_dict(),
        labels=labelset.names,
        methods=results,
        artifacts=artifacts,
    )


def _run_method(
    name: str,
    cfg: BenchConfig,
    labelset: LabelSet,
    test_samples: Sequence[LabeledSample],
    pool: Sequence[Demonstration],
    model: RationaleSupervisor | None,
    index: AnchorIndex | None,
    fallback: RelationLabel,
    demo_seed: int,
    infer_seed: int,
    pre_log: CallLog,
) -> MethodResult:
    method_log = CallLog()
    backend = _make_backend(cfg, method_log)
    pairs: list[tuple[RelationLabel, RelationLabel]] = []
    rows: list[dict] = []

    if name == "srvf":
        if model is None or index is None:
            raise RuntimeError("supervisor was not trained")
        for sample in test_samples:
            demos = pick_initial_demos(pool, cfg.demo_count, demo_seed, sample.id)
            pred = predict_with_feedback(
                sample, backend, model, index, demos, labelset, cfg.loop,
                seed=infer_seed, fallback_label=fallback, call_log=method_log,
            )
            pairs.append((sample.gold, pred.label))
            rows.append(prediction_row(sample.id, pred))
        efficiency = efficiency_report(pre_log, method_log)
    elif name == "icl":
        for sample in test_samples:
            demos = pick_initial_demos(pool, cfg.demo_count, demo_seed, sample.id)
            rationale, label, raw, calls = initial_generation(
                sample, backend, demos, labelset, fallback, seed=infer_seed
            )
            pred = Prediction(
                rationale_text=rationale, label=label, raw_response=raw,
                iterations_used=0, llm_calls=calls,
            )
            pairs.append((sample.gold, pred.label))
            rows.append(prediction_row(sample.id, pred))
        efficiency = efficiency_report(method_log)
    elif name == "self_consistency":
        for sample in test_samples:
            demos = pick_initial_demos(pool, cfg.demo_count, demo_seed, sample.id)
            spec = PromptSpec(
                instruction=RE_INSTRUCTION,
                demonstrations=demos,
                inference_sample=sample,
                labelset=labelset,
            )
            label = self_consistency(
                backend, spec, cfg.self_consistency_n,
                seed=stable_u64(infer_seed, "sc-sample", sample.id),
                fallback_label=fallback,
            )
            pred = Prediction(
                rationale_text="majority vote", label=label, raw_response="",
                iterations_used=0, llm_calls=cfg.self_consistency_n,
            )
            pairs.append((sample.gold, pred.label))
            rows.append(prediction_row(sample.id, pred))
        efficiency = efficiency_report(method_log)
    else:
        raise ValueError(f"unknown method {name!r}")

    return MethodResult(
        name=name,
        f1=micro_f1(pairs, labelset.negatives()),
        errors=error_matrix(pairs),
        efficiency=efficiency,
        preds=rows,
    )
