"""Verification, feedback retrieval, and the iterative correction loop.

A prediction's rationale is scored against stored anchors: the indicator is
the best similarity to biased anchors minus the best similarity to unbiased
anchors, both restricted to the predicted label. Flagged predictions are
regenerated under feedback demonstrations retrieved through the most similar
biased anchors, until the verdict flips or the iteration budget runs out.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    Demonstration,
    DocumentSample,
    LabelSet,
    LabeledSample,
    Prediction,
    Rationale,
    RelationLabel,
    RationaleStore,
    Triplet,
)
from .gateway import (
    CallLog,
    GatewayError,
    LlmBackend,
    ParseError,
    PromptSpec,
    RE_INSTRUCTION,
    generate_prediction,
    parse_pairs_response,
    parse_re_response,
    parse_triplets_response,
    render_doc_stage1,
    render_doc_stage2,
    render_re_prompt,
)
from .seeding import stable_u64
from .supervisor import RationaleSupervisor

__all__ = [
    "Verdict",
    "Fallback",
    "LoopConfig",
    "AnchorIndex",
    "NoAnchorsError",
    "verify",
    "retrieve_feedback",
    "initial_generation",
    "predict_with_feedback",
    "predict_document",
    "self_consistency",
    "default_fallback_label",
]

log = logging.getLogger("srvf.feedback")


class Verdict(str, enum.Enum):
    UNBIASED = "unbiased"
    BIASED = "biased"


class Fallback(str, enum.Enum):
    """What to return when no iterate is ever verified unbiased."""

    LAST_PREDICTION = "last"
    MIN_PB_PREDICTION = "min_pb"


class NoAnchorsError(LookupError):
    """The predicted label has no biased anchors to retrieve from."""


@dataclass(frozen=True)
class LoopConfig:
    max_iters: int = 5
    k: int = 5
    feedback_demo_count: int = 5
    fallback: Fallback = Fallback.MIN_PB_PREDICTION

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.feedback_demo_count < 1:
            raise ValueError("feedback_demo_count must be at least 1")


@dataclass(frozen=True)
class _Anchor:
    rationale: Rationale
    embedding: np.ndarray


class AnchorIndex:
    """Stored rationales grouped by predicted label, with embeddings attached.

    Anchors keep store insertion order within each label, which is the
    tie-break order for retrieval. Embeddings are computed once with the
    supervisor that will score queries, so lookups reduce to dot products.
    """

    def __init__(
        self,
        biased: dict[str, list[_Anchor]],
        unbiased: dict[str, list[_Anchor]],
        store: RationaleStore,
    ):
        self._biased = biased
        self._unbiased = unbiased
        self._store = store

    @classmethod
    def build(cls, store: RationaleStore, model: RationaleSupervisor) -> "AnchorIndex":
        biased: dict[str, list[_Anchor]] = {}
        unbiased: dict[str, list[_Anchor]] = {}
        for r in store.unbiased:
            unbiased.setdefault(r.predicted.name, []).append(_Anchor(r, model.embed(r.text)))
        for r in store.biased:
            biased.setdefault(r.predicted.name, []).append(_Anchor(r, model.embed(r.text)))
        return cls(biased, unbiased, store)

    def biased_anchors(self, label: RelationLabel) -> list[_Anchor]:
        return self._biased.get(label.name, [])

    def unbiased_anchors(self, label: RelationLabel) -> list[_Anchor]:
        return self._unbiased.get(label.name, [])

    def in_universe(self, label: RelationLabel) -> bool:
        return label.name in self._biased or label.name in self._unbiased

    def demonstration_for(self, sample_id: str) -> Demonstration | None:
        """The feedback demonstration of an anchor's source sample, if usable."""
        sample = self._store.samples.get(sample_id)
        if sample is None:
            return None
        text = self._store.unbiased_text_for(sample_id)
        if text is None:
            return None
        return Demonstration(sample=sample, rationale_text=text, label=sample.gold)


def verify(
    model: RationaleSupervisor,
    index: AnchorIndex,
    rationale_text: str,
    label: RelationLabel,
) -> tuple[float, Verdict]:
    """Score a (rationale, label) pair against the anchors for that label.

    The indicator is max similarity over biased anchors minus max similarity
    over unbiased anchors; a strictly positive value means Biased. Labels
    with no biased anchors cannot be flagged (-inf); labels with biased but
    no unbiased anchors, and labels absent from the anchor universe
    entirely, are always flagged (+inf).
    """
    if not index.in_universe(label):
        return float("inf"), Verdict.BIASED
    biased = index.biased_anchors(label)
    if not biased:
        return float("-inf"), Verdict.UNBIASED
    unbiased = index.unbiased_anchors(label)
    if not unbiased:
        return float("inf"), Verdict.BIASED
    q = model.embed(rationale_text)
    # Per-anchor dots keep this path bit-identical to a brute-force scan.
    best_b = max(float(np.dot(q, a.embedding)) for a in biased)
    best_u = max(float(np.dot(q, a.embedding)) for a in unbiased)
    p_b = best_b - best_u
    return p_b, (Verdict.BIASED if p_b > 0 else Verdict.UNBIASED)


def retrieve_feedback(
    model: RationaleSupervisor,
    index: AnchorIndex,
    rationale_text: str,
    label: RelationLabel,
    cfg: LoopConfig,
) -> tuple[Demonstration, ...]:
    """Feedback demonstrations via the k most similar biased anchors.

    Anchors are ranked by similarity descending with ties broken by
    insertion order, mapped to their source samples' demonstrations,
    deduplicated by sample id preserving rank, and truncated to
    feedback_demo_count. Samples without an unbiased rationale cannot be
    demonstrated and are skipped.
    """
    anchors = index.biased_anchors(label)
    if not anchors:
        raise NoAnchorsError(f"no biased anchors for label {label.name!r}")
    q = model.embed(rationale_text)
    sims = np.array([float(np.dot(q, a.embedding)) for a in anchors])
    order = np.argsort(-sims, kind="stable")[: cfg.k]

    demos: list[Demonstration] = []
    seen: set[str] = set()
    for i in order:
        sid = anchors[int(i)].rationale.sample_id
        if sid in seen:
            continue
        seen.add(sid)
        demo = index.demonstration_for(sid)
        if demo is None:
            continue
        demos.append(demo)
    return tuple(demos[: cfg.feedback_demo_count])


def default_fallback_label(labelset: LabelSet) -> RelationLabel:
    """The label emitted when parsing fails outright: first negative, else first."""
    negatives = labelset.negatives()
    return negatives[0] if negatives else next(iter(labelset))


def initial_generation(
    sample: LabeledSample,
    backend: LlmBackend,
    demos: Sequence[Demonstration],
    labelset: LabelSet,
    fallback_label: RelationLabel,
    seed: int = 0,
) -> tuple[str, RelationLabel, str, int]:
    """The plain in-context generation every method starts from.

    Kept as a single shared entry point so baseline and feedback runs see
    byte-identical initial prompts and seeds.
    """
    spec = PromptSpec(
        instruction=RE_INSTRUCTION,
        demonstrations=tuple(demos),
        inference_sample=sample,
        labelset=labelset,
    )
    prompt = render_re_prompt(spec, phase="initial_generation")
    return generate_prediction(
        backend, prompt, labelset, fallback_label, seed=stable_u64(seed, "init", sample.id)
    )


def predict_with_feedback(
    sample: LabeledSample,
    backend: LlmBackend,
    model: RationaleSupervisor,
    index: AnchorIndex,
    initial_demos: Sequence[Demonstration],
    labelset: LabelSet,
    cfg: LoopConfig = LoopConfig(),
    *,
    seed: int = 0,
    fallback_label: RelationLabel | None = None,
    demo_selector: Callable[[int], Sequence[Demonstration]] | None = None,
    call_log: CallLog | None = None,
) -> Prediction:
    """Generate, verify, and correct one sample's prediction.

    Iteration 0 generates under the initial demonstrations. While the
    verdict is Biased, each round retrieves feedback demonstrations anchored
    on the latest rationale and regenerates. When retrieval has no anchors
    for the predicted label, the round falls back to the initial selection
    strategy (``demo_selector`` when given, else the initial demonstrations).
    A round that would reuse the previous round's demonstrations on an
    unchanged prediction is a fixed point and ends the loop early. On
    exhaustion the configured fallback picks among the iterates.
    """
    if fallback_label is None:
        fallback_label = default_fallback_label(labelset)
    initial_demos = tuple(initial_demos)

    try:
        rationale, label, raw, calls = initial_generation(
            sample, backend, initial_demos, labelset, fallback_label, seed
        )
    except GatewayError as exc:
        log.warning("sample %s: initial generation failed (%s)", sample.id, exc)
        if call_log is not None:
            call_log.record_sample(sample.id, False)
        return Prediction(
            rationale_text="unparseable response",
            label=fallback_label,
            raw_response="",
            iterations_used=0,
            llm_calls=1,
        )
    llm_calls = calls

    p_b, verdict = verify(model, index, rationale, label)
    trace = [p_b]
    if call_log is not None:
        call_log.record_sample(sample.id, verdict is Verdict.BIASED)
    if verdict is Verdict.UNBIASED:
        return Prediction(
            rationale_text=rationale,
            label=label,
            raw_response=raw,
            iterations_used=0,
            llm_calls=llm_calls,
            p_b_trace=tuple(trace),
        )

    iterates = [(p_b, rationale, label, raw)]
    prev_demos: tuple[Demonstration, ...] = initial_demos
    prev_label = label
    rounds = 0
    for round_i in range(1, cfg.max_iters + 1):
        try:
            demos = retrieve_feedback(model, index, rationale, label, cfg)
        except NoAnchorsError:
            demos = tuple(demo_selector(round_i)) if demo_selector else initial_demos
        if demos == prev_demos and label == prev_label:
            log.debug("sample %s: feedback fixed point at round %d", sample.id, round_i)
            break
        prev_demos, prev_label = demos, label

        spec = PromptSpec(
            instruction=RE_INSTRUCTION,
            demonstrations=demos,
            inference_sample=sample,
            labelset=labelset,
        )
        prompt = render_re_prompt(spec, phase="correction")
        try:
            rationale, label, raw, calls = generate_prediction(
                backend, prompt, labelset, fallback_label,
                seed=stable_u64(seed, "round", sample.id, round_i),
            )
        except GatewayError as exc:
            log.warning("sample %s: round %d failed (%s)", sample.id, round_i, exc)
            rounds = round_i
            continue
        llm_calls += calls
        rounds = round_i

        p_b, verdict = verify(model, index, rationale, label)
        trace.append(p_b)
        if verdict is Verdict.UNBIASED:
            return Prediction(
                rationale_text=rationale,
                label=label,
                raw_response=raw,
                iterations_used=rounds,
                llm_calls=llm_calls,
                p_b_trace=tuple(trace),
            )
        iterates.append((p_b, rationale, label, raw))

    if cfg.fallback is Fallback.MIN_PB_PREDICTION:
        chosen = min(iterates, key=lambda it: it[0])
    else:
        chosen = iterates[-1]
    return Prediction(
        rationale_text=chosen[1],
        label=chosen[2],
        raw_response=chosen[3],
        iterations_used=rounds,
        llm_calls=llm_calls,
        p_b_trace=tuple(trace),
    )


def _select_demo_doc(
    demo_docs: Sequence[DocumentSample], biased: Sequence[Triplet]
) -> DocumentSample | None:
    """The labeled document sharing the most relation labels with the biased set."""
    if not demo_docs:
        return None
    wanted = {t.relation.name for t in biased}
    best = demo_docs[0]
    best_shared = -1
    for doc in demo_docs:
        shared = len(wanted & {t.relation.name for t in doc.triplets})
        if shared > best_shared:
            best, best_shared = doc, shared
    return best


def predict_document(
    doc: DocumentSample,
    backend: LlmBackend,
    model: RationaleSupervisor,
    index: AnchorIndex,
    labelset: LabelSet,
    cfg: LoopConfig = LoopConfig(),
    *,
    demo_docs: Sequence[DocumentSample] = (),
    seed: int = 0,
) -> set[Triplet]:
    """Document-level retain/discard loop over two-stage extraction.

    Stage one proposes entity pairs, stage two turns them into explained
    triplets. Each round verifies every triplet's explanation: unbiased ones
    accumulate (set semantics), biased ones drive demonstration re-selection
    and regeneration of just their pairs. Verification runs for at most
    max_iters rounds and stops early once nothing is flagged.
    """
    if not doc.entities:
        return set()

    demo = demo_docs[0] if demo_docs else None
    prompt1 = render_doc_stage1(doc, labelset, demo)
    try:
        raw_pairs = backend.complete(prompt1, seed=stable_u64(seed, "doc1", doc.id))
    except GatewayError as exc:
        log.warning("document %s: pair extraction failed (%s)", doc.id, exc)
        return set()
    pairs = parse_pairs_response(raw_pairs, doc.entities)
    if not pairs:
        return set()

    def _generate(pair_list: Sequence[tuple[str, str]], demo_doc, round_i: int):
        prompt2 = render_doc_stage2(doc, pair_list, labelset, demo_doc)
        raw = backend.complete(prompt2, seed=stable_u64(seed, "doc2", doc.id, round_i))
        allowed = set(doc.entities)
        return [
            (t, expl)
            for t, expl in parse_triplets_response(raw, labelset)
            if t.head in allowed and t.tail in allowed
        ]

    try:
        current = _generate(pairs, demo, 0)
    except GatewayError as exc:
        log.warning("document %s: triplet generation failed (%s)", doc.id, exc)
        return set()

    accepted: set[Triplet] = set()
    for round_i in range(cfg.max_iters):
        flagged: list[tuple[Triplet, str]] = []
        for triplet, explanation in current:
            _, verdict = verify(model, index, explanation, triplet.relation)
            if verdict is Verdict.UNBIASED:
                accepted.add(triplet)
            else:
                flagged.append((triplet, explanation))
        if not flagged or round_i == cfg.max_iters - 1:
            break
        demo = _select_demo_doc(demo_docs, [t for t, _ in flagged]) or demo
        flagged_pairs = [(t.head, t.tail) for t, _ in flagged]
        try:
            current = _generate(flagged_pairs, demo, round_i + 1)
        except GatewayError as exc:
            log.warning("document %s: round %d regeneration failed (%s)", doc.id, round_i + 1, exc)
            break
    return accepted


def self_consistency(
    backend: LlmBackend,
    spec: PromptSpec,
    n: int = 5,
    *,
    seed: int = 0,
    fallback_label: RelationLabel | None = None,
) -> RelationLabel:
    """Majority vote over n independent generations.

    Ties go to the label whose first occurrence came earliest; if every
    generation fails to parse, the fallback negative label is returned.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if fallback_label is None:
        fallback_label = default_fallback_label(spec.labelset)
    prompt = render_re_prompt(spec, phase="inference")
    counts: dict[RelationLabel, int] = {}
    first_seen: dict[RelationLabel, int] = {}
    for i in range(n):
        try:
            raw = backend.complete(prompt, seed=stable_u64(seed, "sc", i))
            _, label = parse_re_response(raw, spec.labelset)
        except (GatewayError, ParseError) as exc:
            log.warning("self-consistency draw %d failed (%s)", i, exc)
            continue
        counts[label] = counts.get(label, 0) + 1
        first_seen.setdefault(label, i)
    if not counts:
        return fallback_label
    return max(counts, key=lambda lab: (counts[lab], -first_seen[lab]))
