"""Rationale collection through two prompting interventions.

Unbiased rationales come from a gold-label-guided procedure: generate an
explanation with the gold label revealed, then hide the label and check that
the explanation alone re-derives it. Biased rationales come from deliberate
provocation: prompt with a single demonstration whose label differs from
gold and keep whatever mispredictions fall out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .core import (
    Demonstration,
    LabelSet,
    LabeledSample,
    Rationale,
    RationaleKind,
    RationaleSource,
    RationaleStore,
)
from .gateway import (
    DEFAULT_LGI_DEMO,
    GatewayError,
    LlmBackend,
    ParseError,
    PromptSpec,
    RE_INSTRUCTION,
    parse_label_response,
    parse_re_response,
    render_lgi_step1,
    render_lgi_step2,
    render_re_prompt,
)
from .seeding import stable_rng, stable_u64

__all__ = [
    "CollectionConfig",
    "CollectionReport",
    "CollectionError",
    "induce_unbiased",
    "observe_biased",
    "collect",
]

log = logging.getLogger("srvf.collection")


class CollectionError(RuntimeError):
    """Collection aborted (too many samples failed the acceptance check)."""


@dataclass(frozen=True)
class CollectionConfig:
    lgi_retries: int = 2
    di_attempts: int = 3
    max_reject_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.lgi_retries < 0:
            raise ValueError("lgi_retries cannot be negative")
        if self.di_attempts < 0:
            raise ValueError("di_attempts cannot be negative")
        if not 0.0 <= self.max_reject_fraction <= 1.0:
            raise ValueError("max_reject_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class CollectionReport:
    total_samples: int
    accepted: int
    rejected_ids: tuple[str, ...]
    errored_ids: tuple[str, ...]
    biased_count: int

    @property
    def reject_fraction(self) -> float:
        failed = len(self.rejected_ids) + len(self.errored_ids)
        return failed / self.total_samples if self.total_samples else 0.0


def induce_unbiased(
    sample: LabeledSample,
    backend: LlmBackend,
    labelset: LabelSet,
    demos: Sequence[Demonstration] = (DEFAULT_LGI_DEMO,),
    retries: int = 2,
    seed: int = 0,
) -> Rationale | None:
    """Obtain an unbiased rationale for one sample, or None when rejected.

    Step 1 generates an explanation with the gold label revealed in the
    prompt. Step 2 hides the label and asks what relation the explanation
    supports; the rationale is accepted only when that derived label equals
    gold. Failed attempts retry step 1 under a shifted seed; backend or parse
    errors on the final attempt propagate.
    """
    for attempt in range(retries + 1):
        last = attempt == retries
        try:
            prompt1 = render_lgi_step1(sample, labelset, demos)
            raw1 = backend.complete(prompt1, seed=stable_u64(seed, "lgi1", sample.id, attempt))
            rationale_text, _ = parse_re_response(raw1, labelset)
            prompt2 = render_lgi_step2(sample, rationale_text, labelset, demos)
            raw2 = backend.complete(prompt2, seed=stable_u64(seed, "lgi2", sample.id, attempt))
            derived = parse_label_response(raw2, labelset)
        except (GatewayError, ParseError):
            if last:
                raise
            log.warning("sample %s: induction attempt %d failed, retrying", sample.id, attempt)
            continue
        if derived == sample.gold:
            return Rationale(
                sample_id=sample.id,
                text=rationale_text,
                predicted=sample.gold,
                kind=RationaleKind.UNBIASED,
                source=RationaleSource.LGI,
            )
        log.debug(
            "sample %s: attempt %d derived %s instead of gold %s",
            sample.id, attempt, derived.name, sample.gold.name,
        )
    return None


def observe_biased(
    sample: LabeledSample,
    backend: LlmBackend,
    labelset: LabelSet,
    pool: Sequence[Demonstration],
    attempts: int = 3,
    seed: int = 0,
) -> list[Rationale]:
    """Provoke biased rationales with off-label demonstrations.

    Each attempt prompts with exactly one demonstration whose label differs
    from the sample's gold label, choosing pairwise-distinct demonstration
    labels while the pool offers them. An observed (rationale, label) is kept
    only when the label is wrong. Backend and parse errors skip the attempt.
    """
    by_label: dict[str, list[Demonstration]] = {}
    for demo in pool:
        if demo.label == sample.gold:
            continue
        by_label.setdefault(demo.label.name, []).append(demo)
    if not by_label:
        log.warning("sample %s: no off-label demonstrations available", sample.id)
        return []

    rng = stable_rng(seed, "di", sample.id)
    labels = list(by_label)
    rng.shuffle(labels)

    out: list[Rationale] = []
    seen: set[tuple[str, str]] = set()
    for attempt in range(attempts):
        label_name = labels[attempt % len(labels)]
        demo = rng.choice(by_label[label_name])
        spec = PromptSpec(
            instruction=RE_INSTRUCTION,
            demonstrations=(demo,),
            inference_sample=sample,
            labelset=labelset,
        )
        prompt = render_re_prompt(spec, phase="pre_inference")
        try:
            raw = backend.complete(prompt, seed=stable_u64(seed, "di", sample.id, attempt))
            text, observed = parse_re_response(raw, labelset)
        except (GatewayError, ParseError) as exc:
            log.warning("sample %s: provocation attempt %d skipped (%s)", sample.id, attempt, exc)
            continue
        if observed == sample.gold:
            continue
        key = (text, observed.name)
        if key in seen:
            continue
        seen.add(key)
        out.append(
            Rationale(
                sample_id=sample.id,
                text=text,
                predicted=observed,
                kind=RationaleKind.BIASED,
                source=RationaleSource.DI,
            )
        )
    return out


def collect(
    samples: Sequence[LabeledSample],
    backend: LlmBackend,
    labelset: LabelSet,
    config: CollectionConfig = CollectionConfig(),
    seed: int = 0,
    lgi_demos: Sequence[Demonstration] = (DEFAULT_LGI_DEMO,),
) -> tuple[RationaleStore, CollectionReport]:
    """Run both interventions over a labeled set and assemble the store.

    Phase one induces unbiased rationales; accepted samples become the
    demonstration pool. Phase two provokes biased rationales for every
    sample, rejected ones included (their biased rationales still anchor
    verification; they just cannot serve as feedback demonstrations).
    Per-sample failures are tallied rather than fatal, but the run aborts
    when the rejected fraction exceeds the configured ceiling.
    """
    store = RationaleStore(samples)
    rejected: list[str] = []
    errored: list[str] = []

    demo_pool: list[Demonstration] = []
    for sample in samples:
        try:
            rationale = induce_unbiased(
                sample, backend, labelset, demos=lgi_demos,
                retries=config.lgi_retries, seed=seed,
            )
        except (GatewayError, ParseError) as exc:
            log.warning("sample %s: induction errored (%s)", sample.id, exc)
            errored.append(sample.id)
            continue
        if rationale is None:
            rejected.append(sample.id)
            continue
        store.add(rationale)
        demo_pool.append(
            Demonstration(sample=sample, rationale_text=rationale.text, label=sample.gold)
        )

    if samples:
        failed_fraction = (len(rejected) + len(errored)) / len(samples)
        if failed_fraction > config.max_reject_fraction:
            raise CollectionError(
                f"{len(rejected) + len(errored)}/{len(samples)} samples failed unbiased "
                f"induction, above the {config.max_reject_fraction:.0%} ceiling"
            )

    biased_count = 0
    for sample in samples:
        rationales = observe_biased(
            sample, backend, labelset, demo_pool,
            attempts=config.di_attempts, seed=seed,
        )
        for r in rationales:
            if store.add(r):
                biased_count += 1

    report = CollectionReport(
        total_samples=len(samples),
        accepted=len(demo_pool),
        rejected_ids=tuple(rejected),
        errored_ids=tuple(errored),
        biased_count=biased_count,
    )
    log.info(
        "collected %d unbiased and %d biased rationales from %d samples "
        "(%d rejected, %d errored)",
        report.accepted, report.biased_count, report.total_samples,
        len(rejected), len(errored),
    )
    return store, report
