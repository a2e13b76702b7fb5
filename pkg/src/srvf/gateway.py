"""Prompt construction, response parsing, and LLM backends.

Prompts follow a four-part layout (instruction, demonstrations, hint,
inference block) with each instance wrapped in "(Start of Instance)" /
"(End of Instance)" markers. Two backends speak the same interface: an
OpenAI-compatible HTTP client and a deterministic mock whose mistakes are
governed by a configurable label-confusion model, which is what makes the
whole pipeline testable offline.
"""

from __future__ import annotations

import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from .core import (
    DataError,
    Demonstration,
    DocumentSample,
    LabelSet,
    LabeledSample,
    RelationLabel,
    Triplet,
    normalize_whitespace,
)
from .seeding import hash01, stable_u64

__all__ = [
    "PromptSpec",
    "RenderedPrompt",
    "CallLog",
    "RetryPolicy",
    "BiasModel",
    "MockBackend",
    "HttpBackend",
    "LlmBackend",
    "GatewayError",
    "ConfigurationError",
    "ParseError",
    "EmptyResponseError",
    "MissingSectionError",
    "UnknownLabelError",
    "RE_INSTRUCTION",
    "RE_HINT",
    "render_re_prompt",
    "render_lgi_step1",
    "render_lgi_step2",
    "render_doc_stage1",
    "render_doc_stage2",
    "parse_re_response",
    "parse_label_response",
    "parse_pairs_response",
    "parse_triplets_response",
    "complete",
    "generate_prediction",
    "unbiased_rationale_text",
    "biased_rationale_text",
    "label_halves",
    "DEFAULT_LGI_DEMO",
]

log = logging.getLogger("srvf.gateway")


class GatewayError(RuntimeError):
    """Transport failure or malformed backend reply."""


class ConfigurationError(RuntimeError):
    """The backend is not usable as configured (e.g. missing credential)."""


class ParseError(ValueError):
    """A response could not be interpreted."""


class EmptyResponseError(ParseError):
    pass


class MissingSectionError(ParseError):
    def __init__(self, section: str):
        super().__init__(f"response is missing the {section!r} section")
        self.section = section


class UnknownLabelError(ParseError):
    def __init__(self, line: str, candidate: str | None = None):
        msg = f"no label could be resolved from prediction line {line!r}"
        if candidate is not None:
            msg = f"label {candidate!r} is not in the label set ({line!r})"
        super().__init__(msg)
        self.line = line
        self.candidate = candidate


# ---------------------------------------------------------------------------
# prompt templates

RE_INSTRUCTION = (
    "Determine the relation between the given head entity and tail entity in "
    "the given sentence. The relation category is from the relation type set."
)
RE_HINT = (
    'Please learn the demonstration and follow the instruction, complete the '
    '"Reasoning Explanations" and "Prediction" parts of the new given instance. '
    "You only need to solve the only instance given. Please end with "
    "(End of Instance) when complete the text."
)
LGI_STEP1_INSTRUCTION = (
    "Given a sentence, explain why there is certain relation between the head "
    "and tail entities in the sentence."
)
LGI_STEP1_HINT = (
    'Please learn the demonstration and follow the instruction, complete the '
    '"Reasoning Explanations" and "Prediction" parts of the new given instance.\n'
    "Please end with (End of Instance) when complete the text."
)
LGI_STEP2_INSTRUCTION = (
    "Given a sentence and corresponding explanations, try to derive the "
    "relation label prediction."
)
LGI_STEP2_HINT = (
    "Please learn the demonstration and follow the instruction, output the "
    "inference result of the new given instance."
)
DOC_STAGE1_INSTRUCTION = (
    "Check the document, and find all the possible entity pairs that may hold "
    "certain relations."
)
DOC_STAGE1_HINT = "The head and tail entity must be chosen from the Candidate Entities."
DOC_STAGE2_INSTRUCTION = (
    "Considering the document, and generate a triplet with a proper relation "
    "for each entity pair. The number of triplets must match the given entity pairs."
)

_START = "(Start of Instance)"
_END = "(End of Instance)"
_REASONING = "Reasoning Explanations:"
_PREDICTION = "Prediction:"


@dataclass(frozen=True)
class PromptSpec:
    """What goes into a sentence-level prompt."""

    instruction: str
    demonstrations: tuple[Demonstration, ...]
    inference_sample: LabeledSample
    labelset: LabelSet
    hint: str | None = RE_HINT


@dataclass(frozen=True)
class RenderedPrompt:
    """Prompt text plus structured context.

    The structured fields exist for the mock backend (which needs the sample,
    its gold label, and the demonstration labels to simulate biased behavior)
    and for the call log. HTTP backends send only ``text``.
    """

    text: str
    kind: str  # "re" | "lgi1" | "lgi2" | "doc1" | "doc2"
    labelset: LabelSet | None = None
    sample: LabeledSample | None = None
    demo_labels: tuple[str, ...] = ()
    rationale_text: str | None = None
    doc: DocumentSample | None = None
    pairs: tuple[tuple[str, str], ...] = ()
    phase: str = "inference"


def _prediction_line(head: str, tail: str, label: str) -> str:
    return (
        f'Prediction: Given the sentence, the relation between the head entity '
        f'"{head}" and the tail entity "{tail}" is "{label}".'
    )


def _demo_block(demo: Demonstration, labelset: LabelSet, index: int) -> str:
    s = demo.sample
    return "\n".join(
        [
            f"Demo Index: {index}",
            _START,
            f'Given Sentence: "{s.sentence}"',
            f"Relation Type Set: {labelset.render()}",
            f'Head Entity: "{s.head}"',
            f'Tail Entity: "{s.tail}"',
            f"Reasoning Explanations: {demo.rationale_text}",
            _prediction_line(s.head, s.tail, demo.label.name),
            _END,
        ]
    )


def render_re_prompt(spec: PromptSpec, phase: str = "inference") -> RenderedPrompt:
    """Render the standard relation-extraction prompt.

    Layout: instruction, one block per demonstration, the hint (when present),
    then the inference block left open after its Tail Entity line so the model
    continues with Reasoning Explanations and Prediction.
    """
    parts = [f"Instruction: {spec.instruction}", "Demonstrations:"]
    for i, demo in enumerate(spec.demonstrations):
        parts.append(_demo_block(demo, spec.labelset, i))
    if spec.hint:
        parts.append(spec.hint)
    s = spec.inference_sample
    parts.append(
        "\n".join(
            [
                "Inference:",
                _START,
                f'Given Sentence: "{s.sentence}"',
                f"Relation Type Set: {spec.labelset.render()}",
                f'Head Entity: "{s.head}"',
                f'Tail Entity: "{s.tail}"',
            ]
        )
    )
    return RenderedPrompt(
        text="\n".join(parts),
        kind="re",
        labelset=spec.labelset,
        sample=s,
        demo_labels=tuple(d.label.name for d in spec.demonstrations),
        phase=phase,
    )


# Fixed worked example for the two gold-label-guided prompts. The rationale
# spells out both role words in quotes; the label-derivation prompt leans on
# that convention.
DEFAULT_LGI_DEMO = Demonstration(
    sample=LabeledSample(
        id="lgi-worked-example",
        sentence="The therapist treats the patient with a certain kind of manual therapy.",
        head="therapy",
        tail="therapist",
        gold=RelationLabel("Instrument-Agency"),
    ),
    rationale_text=(
        'In the given sentence, the key phrase "therapist treats the patient with a '
        'certain kind of manual therapy" implies that the therapy is the tool employed '
        'by the therapist to treat the patient. Therefore, the head entity "therapy" '
        'serves as the "Instrument" while the tail entity "therapist" serves as the '
        '"Agency".'
    ),
    label=RelationLabel("Instrument-Agency"),
)


def render_lgi_step1(
    sample: LabeledSample,
    labelset: LabelSet,
    demos: Sequence[Demonstration] = (DEFAULT_LGI_DEMO,),
    phase: str = "pre_inference",
) -> RenderedPrompt:
    """Ask for a rationale with the gold label revealed in the inference block."""
    parts = [f"Instruction: {LGI_STEP1_INSTRUCTION}", "Demonstrations:"]
    for demo in demos:
        d = demo.sample
        parts.append(
            "\n".join(
                [
                    _START,
                    f'Given Sentence: "{d.sentence}"',
                    f'Head Entity: "{d.head}"',
                    f'Tail Entity: "{d.tail}"',
                    f'The relation type between "{d.head}" and "{d.tail}" is '
                    f'"{demo.label.name}"',
                    f"Reasoning Explanations: {demo.rationale_text}",
                    f'Prediction: Given the sentence, the relation between the head entity '
                    f'"{d.head}" and the tail entity "{d.tail}" is "{demo.label.name}"',
                    _END,
                ]
            )
        )
    parts += [
        LGI_STEP1_HINT,
        "Inference:",
        _START,
        f'Given Sentence: "{sample.sentence}"',
        f'Head Entity: "{sample.head}"',
        f'Tail Entity: "{sample.tail}"',
        f'The relation type between "{sample.head}" and "{sample.tail}" is '
        f'"{sample.gold.name}"',
    ]
    return RenderedPrompt(
        text="\n".join(parts),
        kind="lgi1",
        labelset=labelset,
        sample=sample,
        demo_labels=tuple(demo.label.name for demo in demos),
        phase=phase,
    )


def render_lgi_step2(
    sample: LabeledSample,
    rationale_text: str,
    labelset: LabelSet,
    demos: Sequence[Demonstration] = (DEFAULT_LGI_DEMO,),
    phase: str = "pre_inference",
) -> RenderedPrompt:
    """Ask for the label given only the sentence and a rationale (gold hidden)."""
    parts = [f"Instruction: {LGI_STEP2_INSTRUCTION}", "Demonstrations:"]
    for demo in demos:
        d = demo.sample
        parts.append(
            "\n".join(
                [
                    _START,
                    f'Given Sentence: "{d.sentence}"',
                    f"Relation Type Set: {labelset.render()}",
                    f'Head Entity: "{d.head}"',
                    f'Tail Entity: "{d.tail}"',
                    f"Reasoning Explanations: {demo.rationale_text}",
                    f'Based on the above reasoning explanations, the relation between the '
                    f'head entity "{d.head}" and the tail entity "{d.tail}" is '
                    f'"{demo.label.name}"',
                    _END,
                ]
            )
        )
    parts += [
        LGI_STEP2_HINT,
        "Inference:",
        _START,
        f'Given Sentence: "{sample.sentence}"',
        f"Relation Type Set: {labelset.render()}",
        f'Head Entity: "{sample.head}"',
        f'Tail Entity: "{sample.tail}"',
        f"Reasoning Explanations: {rationale_text}",
        "Based on the above reasoning explanations, ",
    ]
    return RenderedPrompt(
        text="\n".join(parts),
        kind="lgi2",
        labelset=labelset,
        sample=sample,
        rationale_text=rationale_text,
        phase=phase,
    )


def _doc_pair_lines(pairs: Sequence[tuple[str, str]], tag: str) -> list[str]:
    return [
        f"{i + 1}. ({tag})(head){h}(/head)(tail){t}(/tail)(/{tag})"
        for i, (h, t) in enumerate(pairs)
    ]


def _doc_triplet_lines(triplets: Sequence[Triplet], explanations: Sequence[str]) -> list[str]:
    return [
        f"{i + 1}. (Triplet)(head){t.head}(/head)(relation){t.relation.name}(/relation)"
        f"(tail){t.tail}(/tail)(explanation){e}(/explanation)(/Triplet)"
        for i, (t, e) in enumerate(zip(triplets, explanations))
    ]


def render_doc_stage1(
    doc: DocumentSample,
    labelset: LabelSet,
    demo_doc: DocumentSample | None = None,
    phase: str = "inference",
) -> RenderedPrompt:
    """Document-level stage 1: propose candidate entity pairs."""
    parts = [f"(Instruction) {DOC_STAGE1_INSTRUCTION} (/Instruction)", "(Demonstrations)"]
    demo_labels: tuple[str, ...] = ()
    if demo_doc is not None:
        demo_pairs = [(t.head, t.tail) for t in demo_doc.triplets]
        parts += [
            "(Instance)",
            f'Given Document: "{demo_doc.text}"',
            f"Candidate Relation Types: {labelset.render()}",
            "Candidate Entities: {" + ", ".join(demo_doc.entities) + "}",
            "Candidate Entity Pairs: ",
            *_doc_pair_lines(demo_pairs, "Pair"),
            "(/Instance)",
        ]
        demo_labels = tuple(t.relation.name for t in demo_doc.triplets)
    parts += [
        "(/Demonstrations)",
        "(Test)",
        f"(Hint){DOC_STAGE1_HINT}(/Hint)",
        "(Instance)",
        f'Given Document: "{doc.text}"',
        f"Candidate Relation Types: {labelset.render()}",
        "Candidate Entities: {" + ", ".join(doc.entities) + "}",
        "Candidate Entity Pairs: ",
    ]
    return RenderedPrompt(
        text="\n".join(parts),
        kind="doc1",
        labelset=labelset,
        doc=doc,
        demo_labels=demo_labels,
        phase=phase,
    )


def render_doc_stage2(
    doc: DocumentSample,
    pairs: Sequence[tuple[str, str]],
    labelset: LabelSet,
    demo_doc: DocumentSample | None = None,
    demo_explanations: Sequence[str] | None = None,
    phase: str = "inference",
) -> RenderedPrompt:
    """Document-level stage 2: turn candidate pairs into labeled triplets."""
    hint = (
        "The relation must be chosen from the given Candidate Relation Types. "
        f"Please generate {len(pairs)} triplets that correspond exactly to the "
        "given entity pairs."
    )
    parts = [f"(Instruction) {DOC_STAGE2_INSTRUCTION}(/Instruction)", "(Demonstrations)"]
    demo_labels: tuple[str, ...] = ()
    if demo_doc is not None:
        demo_pairs = [(t.head, t.tail) for t in demo_doc.triplets]
        if demo_explanations is None:
            demo_explanations = [
                unbiased_rationale_text(t.head, t.tail, demo_doc.text, t.relation.name)
                for t in demo_doc.triplets
            ]
        parts += [
            "(Instance)",
            f'Given Document: "{demo_doc.text}"',
            f"Candidate Relation Types: {labelset.render()}",
            "Candidate Entity Pairs: ",
            *_doc_pair_lines(demo_pairs, "Triplet"),
            "Extracted Triplets: ",
            *_doc_triplet_lines(list(demo_doc.triplets), demo_explanations),
            "(/Instance)",
        ]
        demo_labels = tuple(t.relation.name for t in demo_doc.triplets)
    parts += [
        "(/Demonstrations)",
        "(Test)",
        f"(Hint) {hint} (/Hint)",
        "(Instance)",
        f'Given Document: "{doc.text}"',
        f"Candidate Relation Types: {labelset.render()}",
        "Candidate Entity Pairs: ",
        *_doc_pair_lines(pairs, "Triplet"),
        "Extracted Triplets: ",
    ]
    return RenderedPrompt(
        text="\n".join(parts),
        kind="doc2",
        labelset=labelset,
        doc=doc,
        pairs=tuple(pairs),
        demo_labels=demo_labels,
        phase=phase,
    )


# ---------------------------------------------------------------------------
# response parsing


def parse_re_response(raw: str, labelset: LabelSet) -> tuple[str, RelationLabel]:
    """Extract (rationale text, label) from a standard response.

    The rationale is everything between "Reasoning Explanations:" and
    "Prediction:"; the label is the last double-quoted string on the
    prediction line, resolved against the label set with separator and case
    tolerance. Failures raise typed errors so callers can retry or fall back.
    """
    if not raw or not raw.strip():
        raise EmptyResponseError("response is empty")
    body = raw.strip().removesuffix(_END).rstrip()
    r_at = body.find(_REASONING)
    if r_at < 0:
        raise MissingSectionError("Reasoning Explanations")
    after = body[r_at + len(_REASONING):]
    p_at = after.find(_PREDICTION)
    if p_at < 0:
        raise MissingSectionError("Prediction")
    rationale = after[:p_at].strip()
    if not rationale:
        raise MissingSectionError("Reasoning Explanations")
    pred_tail = after[p_at + len(_PREDICTION):]
    line = pred_tail.split("\n", 1)[0].strip()
    quoted = re.findall(r'"([^"]*)"', line)
    if not quoted:
        raise UnknownLabelError(line)
    label = labelset.resolve(quoted[-1])
    if label is None:
        raise UnknownLabelError(line, candidate=quoted[-1])
    return rationale, label


def parse_label_response(raw: str, labelset: LabelSet) -> RelationLabel:
    """Label-only parse: the last double-quoted string anywhere in the response."""
    if not raw or not raw.strip():
        raise EmptyResponseError("response is empty")
    body = raw.strip().removesuffix(_END).rstrip()
    quoted = re.findall(r'"([^"]*)"', body)
    if not quoted:
        raise UnknownLabelError(body)
    label = labelset.resolve(quoted[-1])
    if label is None:
        raise UnknownLabelError(body, candidate=quoted[-1])
    return label


_PAIR_RX = re.compile(r"\(Pair\)\(head\)(.*?)\(/head\)\(tail\)(.*?)\(/tail\)\(/Pair\)", re.S)
_TRIPLET_RX = re.compile(
    r"\(Triplet\)\(head\)(.*?)\(/head\)\(relation\)(.*?)\(/relation\)"
    r"\(tail\)(.*?)\(/tail\)\(explanation\)(.*?)\(/explanation\)\(/Triplet\)",
    re.S,
)


def parse_pairs_response(
    raw: str, entities: Iterable[str]
) -> list[tuple[str, str]]:
    """Stage-1 parse; pairs using entities outside the candidate set are dropped."""
    allowed = set(entities)
    out: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()
    for head, tail in _PAIR_RX.findall(raw or ""):
        head, tail = head.strip(), tail.strip()
        pair = (head, tail)
        if head in allowed and tail in allowed and pair not in seen:
            seen.add(pair)
            out.append(pair)
    return out


def parse_triplets_response(
    raw: str, labelset: LabelSet
) -> list[tuple[Triplet, str]]:
    """Stage-2 parse into (triplet, explanation); malformed entries are skipped."""
    out: list[tuple[Triplet, str]] = []
    for head, rel, tail, explanation in _TRIPLET_RX.findall(raw or ""):
        label = labelset.resolve(rel.strip())
        if label is None:
            log.warning("dropping triplet with unknown relation %r", rel.strip())
            continue
        explanation = explanation.strip()
        if not explanation:
            continue
        out.append((Triplet(head=head.strip(), relation=label, tail=tail.strip()), explanation))
    return out


# ---------------------------------------------------------------------------
# call accounting


@dataclass
class CallRecord:
    phase: str
    seconds: float
    prompt_chars: int
    response_chars: int


class CallLog:
    """Thread-safe record of generation calls and pipeline timings."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls: list[CallRecord] = []
        self.phase_seconds: dict[str, float] = {}
        self.sample_corrected: dict[str, bool] = {}

    def record_call(self, phase: str, seconds: float, prompt_chars: int, response_chars: int) -> None:
        with self._lock:
            self.calls.append(CallRecord(phase, seconds, prompt_chars, response_chars))

    def add_seconds(self, phase: str, seconds: float) -> None:
        with self._lock:
            self.phase_seconds[phase] = self.phase_seconds.get(phase, 0.0) + seconds

    def record_sample(self, sample_id: str, corrected: bool) -> None:
        with self._lock:
            self.sample_corrected[sample_id] = corrected

    @property
    def llm_calls(self) -> int:
        with self._lock:
            return len(self.calls)

    def seconds_in(self, phase: str) -> float:
        with self._lock:
            total = sum(c.seconds for c in self.calls if c.phase == phase)
            return total + self.phase_seconds.get(phase, 0.0)


# ---------------------------------------------------------------------------
# backends


class LlmBackend(Protocol):
    mode: str

    def complete(self, prompt: RenderedPrompt, seed: int | None = None) -> str: ...


def label_halves(label_name: str) -> tuple[str, str]:
    """Split "Entity-Destination" style names into their two role words."""
    if "-" in label_name:
        a, _, b = label_name.partition("-")
        return a.strip() or label_name, b.strip() or label_name
    return label_name, label_name


def _phrase_of(sample: LabeledSample) -> str:
    """The sentence span from head to tail, used to quote evidence in rationales."""
    sent = normalize_whitespace(sample.sentence)
    h = sent.find(normalize_whitespace(sample.head))
    t = sent.find(normalize_whitespace(sample.tail))
    if h < 0 or t < 0:
        return f"{sample.head} ... {sample.tail}"
    lo = min(h, t)
    hi = max(h + len(sample.head), t + len(sample.tail))
    return sent[lo:hi]


def unbiased_rationale_text(head: str, tail: str, context: str, label_name: str) -> str:
    a, b = label_halves(label_name)
    return (
        f'In the given sentence, the key phrase "{context}" implies that the relation '
        f"is genuinely {label_name}. Therefore, the head entity \"{head}\" serves as "
        f'the "{a}" while the tail entity "{tail}" serves as the "{b}".'
    )


def biased_rationale_text(head: str, tail: str, predicted_name: str, gold_name: str) -> str:
    a, b = label_halves(predicted_name)
    return (
        f'Although the entities "{head}" and "{tail}" appear here, such entities are '
        f"commonly associated with the {predicted_name} pattern, a stereotype that "
        f"overlooks the {gold_name} context of the sentence. Therefore, the head entity "
        f'"{head}" serves as the "{a}" while the tail entity "{tail}" serves as the "{b}".'
    )


@dataclass(frozen=True)
class BiasModel:
    """Label confusion the mock backend exhibits.

    ``confusion`` maps a gold label name to (confused label name, probability).
    When any demonstration in the prompt carries the gold label, the effective
    probability shrinks to p * (1 - steering_strength), which is how feedback
    demonstrations steer the mock away from its bias.
    """

    confusion: dict[str, tuple[str, float]] = field(default_factory=dict)
    steering_strength: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.steering_strength <= 1.0:
            raise DataError("steering_strength must lie in [0, 1]")
        for gold, (conf, p) in self.confusion.items():
            if not 0.0 <= p <= 1.0:
                raise DataError(f"confusion probability for {gold!r} must lie in [0, 1]")
            if conf == gold:
                raise DataError(f"label {gold!r} cannot be confused with itself")

    def effective_probability(self, gold_name: str, demo_labels: Sequence[str]) -> float:
        entry = self.confusion.get(gold_name)
        if entry is None:
            return 0.0
        _, p = entry
        if any(d == gold_name for d in demo_labels):
            return p * (1.0 - self.steering_strength)
        return p

    @classmethod
    def from_dict(cls, raw: dict) -> "BiasModel":
        confusion = {
            str(gold): (str(pair[0]), float(pair[1]))
            for gold, pair in raw.get("confusion", {}).items()
        }
        return cls(confusion=confusion, steering_strength=float(raw.get("steering_strength", 0.0)))


def _variation_clause(demo_labels: Sequence[str]) -> str:
    if not demo_labels:
        return ""
    first = sorted(demo_labels)[0]
    return f" Compared with the {first} demonstration, this reading fits the sentence best."


def _derive_label_from_rationale(text: str, labelset: LabelSet) -> RelationLabel:
    """What a careful reader would conclude a rationale argues for.

    Looks for a label whose two role words both appear double-quoted in the
    text (the way rationales state "serves as the X ... serves as the Y"),
    preferring the latest such claim; falls back to the last quoted full label
    name, then to the first label in the set.
    """
    quoted = re.findall(r'"([^"]*)"', text)
    quoted_set = set(quoted)
    best: tuple[int, RelationLabel] | None = None
    for label in labelset:
        a, b = label_halves(label.name)
        if a in quoted_set and b in quoted_set:
            pos = max(text.rfind(f'"{a}"'), text.rfind(f'"{b}"'))
            if best is None or pos > best[0]:
                best = (pos, label)
    if best is not None:
        return best[1]
    for q in reversed(quoted):
        hit = labelset.resolve(q)
        if hit is not None:
            return hit
    return next(iter(labelset))


def mock_generate(bias: BiasModel, prompt: RenderedPrompt, seed: int) -> str:
    """Deterministic synthetic response for any prompt kind.

    All randomness comes from a hash of (seed, sample id, demonstration label
    multiset), so identical prompts under the same seed always yield identical
    responses. Gold labels are read from the prompt's structured fields, a
    side channel a real backend never sees.
    """
    if prompt.kind in ("re", "lgi1"):
        sample = prompt.sample
        if sample is None or prompt.labelset is None:
            raise GatewayError(f"mock needs sample context for kind={prompt.kind!r}")
        gold = sample.gold
        multiset = tuple(sorted(prompt.demo_labels))
        p_eff = bias.effective_probability(gold.name, prompt.demo_labels)
        u = hash01(seed, sample.id, multiset)
        predicted = gold
        if u < p_eff:
            confused_name = bias.confusion[gold.name][0]
            resolved = prompt.labelset.resolve(confused_name)
            if resolved is None:
                raise GatewayError(f"confused label {confused_name!r} not in label set")
            predicted = resolved
        if predicted == gold:
            rationale = unbiased_rationale_text(
                sample.head, sample.tail, _phrase_of(sample), predicted.name
            )
        else:
            rationale = biased_rationale_text(
                sample.head, sample.tail, predicted.name, gold.name
            )
        rationale += _variation_clause(prompt.demo_labels)
        return "\n".join(
            [
                f"Reasoning Explanations: {rationale}",
                _prediction_line(sample.head, sample.tail, predicted.name),
                _END,
            ]
        )

    if prompt.kind == "lgi2":
        sample = prompt.sample
        if sample is None or prompt.labelset is None or prompt.rationale_text is None:
            raise GatewayError("mock needs sample and rationale context for kind='lgi2'")
        derived = _derive_label_from_rationale(prompt.rationale_text, prompt.labelset)
        return (
            f'the relation between the head entity "{sample.head}" and the tail entity '
            f'"{sample.tail}" is "{derived.name}"\n{_END}'
        )

    if prompt.kind == "doc1":
        doc = prompt.doc
        if doc is None:
            raise GatewayError("mock needs document context for kind='doc1'")
        pairs = [(t.head, t.tail) for t in doc.triplets]
        lines = _doc_pair_lines(pairs, "Pair")
        return "\n".join(lines + ["(/Instance)"])

    if prompt.kind == "doc2":
        doc = prompt.doc
        if doc is None or prompt.labelset is None:
            raise GatewayError("mock needs document context for kind='doc2'")
        gold_by_pair = {(t.head, t.tail): t.relation for t in doc.triplets}
        multiset = tuple(sorted(prompt.demo_labels))
        lines = []
        for i, (head, tail) in enumerate(prompt.pairs):
            gold = gold_by_pair.get((head, tail))
            if gold is None:
                gold = next(iter(prompt.labelset))
            p_eff = bias.effective_probability(gold.name, prompt.demo_labels)
            u = hash01(seed, f"{doc.id}:{head}|{tail}", multiset)
            predicted = gold
            if u < p_eff:
                confused_name = bias.confusion[gold.name][0]
                resolved = prompt.labelset.resolve(confused_name)
                if resolved is None:
                    raise GatewayError(f"confused label {confused_name!r} not in label set")
                predicted = resolved
            if predicted == gold:
                explanation = unbiased_rationale_text(head, tail, doc.text, predicted.name)
            else:
                explanation = biased_rationale_text(head, tail, predicted.name, gold.name)
            lines.append(
                f"{i + 1}. (Triplet)(head){head}(/head)(relation){predicted.name}(/relation)"
                f"(tail){tail}(/tail)(explanation){explanation}(/explanation)(/Triplet)"
            )
        return "\n".join(lines + ["(/Instance)"])

    raise GatewayError(f"unknown prompt kind {prompt.kind!r}")


class MockBackend:
    """Offline backend: deterministic, instant, and biased on request."""

    mode = "mock"

    def __init__(
        self,
        bias: BiasModel | None = None,
        seed: int = 0,
        call_log: CallLog | None = None,
        temperature: float = 1.0,
        max_tokens: int = 512,
    ):
        self.bias = bias or BiasModel()
        self.seed = seed
        self.call_log = call_log
        self.temperature = temperature
        self.max_tokens = max_tokens

    def complete(self, prompt: RenderedPrompt, seed: int | None = None) -> str:
        start = time.perf_counter()
        out = mock_generate(self.bias, prompt, self.seed if seed is None else seed)
        if self.call_log is not None:
            self.call_log.record_call(
                prompt.phase, time.perf_counter() - start, len(prompt.text), len(out)
            )
        return out


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0


class HttpBackend:
    """OpenAI-compatible chat-completions client.

    POSTs {model, messages, temperature, max_tokens} to
    ``{base_url}/chat/completions`` with a bearer credential read from the
    environment. The credential is checked before any network activity.
    Transport errors and 5xx responses are retried with exponential backoff;
    concurrent calls are bounded by ``max_inflight``.
    """

    mode = "http"

    def __init__(
        self,
        base_url: str,
        model: str,
        temperature: float = 1.0,
        max_tokens: int = 512,
        timeout: float = 60.0,
        retry: RetryPolicy = RetryPolicy(),
        max_inflight: int = 4,
        call_log: CallLog | None = None,
        api_key_env: str = "SRVF_API_KEY",
        session=None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.retry = retry
        self.call_log = call_log
        self.api_key_env = api_key_env
        self._session = session
        self._semaphore = threading.BoundedSemaphore(max(1, max_inflight))

    def _ensure_session(self):
        if self._session is None:
            import requests

            self._session = requests.Session()
        return self._session

    def complete(self, prompt: RenderedPrompt, seed: int | None = None) -> str:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise ConfigurationError(
                f"environment variable {self.api_key_env} must hold the API credential"
            )
        session = self._ensure_session()
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        headers = {"Authorization": f"Bearer {key}"}
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        start = time.perf_counter()
        for attempt in range(self.retry.max_attempts):
            if attempt:
                time.sleep(self.retry.backoff_base * self.retry.backoff_factor ** (attempt - 1))
            try:
                with self._semaphore:
                    resp = session.post(url, json=payload, headers=headers, timeout=self.timeout)
            except Exception as exc:  # transport-level failure, retryable
                last_error = exc
                log.warning("request failed (attempt %d): %s", attempt + 1, exc)
                continue
            status = getattr(resp, "status_code", 0)
            if status >= 500:
                last_error = GatewayError(f"server returned {status}")
                log.warning("server error %s (attempt %d)", status, attempt + 1)
                continue
            if status != 200:
                raise GatewayError(f"request rejected with status {status}")
            try:
                body = resp.json()
                content = body["choices"][0]["message"]["content"]
            except Exception as exc:
                raise GatewayError(f"malformed response body: {exc}") from exc
            if not isinstance(content, str):
                raise GatewayError("response content is not a string")
            if self.call_log is not None:
                self.call_log.record_call(
                    prompt.phase, time.perf_counter() - start, len(prompt.text), len(content)
                )
            return content
        raise GatewayError(f"request failed after {self.retry.max_attempts} attempts: {last_error}")


def complete(backend: LlmBackend, prompt: RenderedPrompt, seed: int | None = None) -> str:
    """Run one generation call through whichever backend is configured."""
    return backend.complete(prompt, seed=seed)


def generate_prediction(
    backend: LlmBackend,
    prompt: RenderedPrompt,
    labelset: LabelSet,
    fallback_label: RelationLabel,
    seed: int = 0,
) -> tuple[str, RelationLabel, str, int]:
    """Generate and parse, with one retry and a guaranteed usable result.

    Returns (rationale text, label, raw response, generation calls used).
    Empty or section-less responses trigger a single regeneration under a
    shifted seed. An unknown label falls back to the longest label-set name
    occurring case-insensitively in the prediction line, and finally to the
    configured fallback label with a synthetic rationale.
    """
    calls = 0
    raw = ""
    last_parse_error: ParseError | None = None
    for attempt in range(2):
        raw = backend.complete(prompt, seed=seed if attempt == 0 else stable_u64(seed, "retry"))
        calls += 1
        try:
            rationale, label = parse_re_response(raw, labelset)
            return rationale, label, raw, calls
        except (EmptyResponseError, MissingSectionError) as exc:
            last_parse_error = exc
            log.warning("unparseable response (%s), attempt %d", exc, attempt + 1)
            continue
        except UnknownLabelError as exc:
            line = exc.line.casefold()
            for name in sorted(labelset.names, key=len, reverse=True):
                if name.casefold() in line:
                    resolved = labelset.resolve(name)
                    assert resolved is not None
                    return _rationale_only(raw), resolved, raw, calls
            last_parse_error = exc
            break
    log.warning("falling back to %s after parse failure: %s", fallback_label.name, last_parse_error)
    return "unparseable response", fallback_label, raw, calls


def _rationale_only(raw: str) -> str:
    body = (raw or "").strip().removesuffix(_END).rstrip()
    r_at = body.find(_REASONING)
    if r_at < 0:
        return "unparseable response"
    after = body[r_at + len(_REASONING):]
    p_at = after.find(_PREDICTION)
    text = (after[:p_at] if p_at >= 0 else after).strip()
    return text or "unparseable response"
