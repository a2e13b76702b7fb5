"""Domain types and JSONL persistence for rationale-supervised relation extraction.

Everything downstream (prompting, collection, training, the feedback loop)
works in terms of the records defined here: labeled samples, rationales tagged
as biased or unbiased, and the store that holds both sides together.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

__all__ = [
    "RelationLabel",
    "LabelSet",
    "LabeledSample",
    "RationaleKind",
    "RationaleSource",
    "Rationale",
    "RationaleStore",
    "Demonstration",
    "Prediction",
    "Triplet",
    "DocumentSample",
    "DataError",
    "MergeError",
    "load_samples",
    "save_samples",
    "load_documents",
    "save_documents",
    "store_merge",
    "normalize_label_name",
    "normalize_whitespace",
]


class DataError(ValueError):
    """Malformed input data (bad JSONL line, unknown label, broken record)."""


class MergeError(ValueError):
    """Two stores disagree about the same record."""


def normalize_whitespace(text: str) -> str:
    """Collapse whitespace runs to single spaces and strip the ends."""
    return " ".join(text.split())


def normalize_label_name(name: str) -> str:
    """Canonical form used for tolerant label matching.

    Spaces around hyphens and underscores are dropped and the comparison is
    case-insensitive, so "Member - Collection" and "member-collection" both
    map to the same key.
    """
    out = name.strip()
    for sep in ("-", "_"):
        parts = [p.strip() for p in out.split(sep)]
        out = sep.join(parts)
    return out.casefold()


@dataclass(frozen=True)
class RelationLabel:
    """A relation category; negative labels mean "no relation worth scoring"."""

    name: str
    is_negative: bool = False

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise DataError("relation label name must be non-empty")


class LabelSet:
    """Ordered set of relation labels with tolerant name resolution."""

    def __init__(self, labels: Iterable[RelationLabel]):
        labels = tuple(labels)
        if not labels:
            raise DataError("label set must contain at least one label")
        seen: dict[str, RelationLabel] = {}
        for lab in labels:
            key = normalize_label_name(lab.name)
            if key in seen:
                raise DataError(f"duplicate label (after normalization): {lab.name!r}")
            seen[key] = lab
        self._labels = labels
        self._by_norm = seen

    @classmethod
    def from_names(cls, names: Sequence[str], negatives: Sequence[str] = ()) -> "LabelSet":
        neg = {normalize_label_name(n) for n in negatives}
        return cls(
            RelationLabel(n, is_negative=normalize_label_name(n) in neg) for n in names
        )

    def __iter__(self) -> Iterator[RelationLabel]:
        return iter(self._labels)

    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, label: RelationLabel) -> bool:
        return self._by_norm.get(normalize_label_name(label.name)) == label

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(lab.name for lab in self._labels)

    def negatives(self) -> tuple[RelationLabel, ...]:
        return tuple(lab for lab in self._labels if lab.is_negative)

    def resolve(self, raw: str) -> RelationLabel | None:
        """Match a raw string against the set, tolerating case and separator noise."""
        return self._by_norm.get(normalize_label_name(raw))

    def render(self) -> str:
        """The "{A, B, C}" form used inside prompts."""
        return "{" + ", ".join(self.names) + "}"


@dataclass(frozen=True)
class LabeledSample:
    """One relation-extraction instance: sentence, entity pair, gold label."""

    id: str
    sentence: str
    head: str
    tail: str
    gold: RelationLabel

    def __post_init__(self) -> None:
        if not self.id.strip():
            raise DataError("sample id must be non-empty")
        for name in ("sentence", "head", "tail"):
            if not getattr(self, name):
                raise DataError(f"sample {self.id}: {name} must be non-empty")
        sent = normalize_whitespace(self.sentence)
        for name in ("head", "tail"):
            span = normalize_whitespace(getattr(self, name))
            if span not in sent:
                raise DataError(
                    f"sample {self.id}: {name} {getattr(self, name)!r} does not occur in sentence"
                )


class RationaleKind(str, enum.Enum):
    BIASED = "biased"
    UNBIASED = "unbiased"


class RationaleSource(str, enum.Enum):
    """How a rationale was obtained.

    LGI: induced with the gold label revealed, then re-checked.
    DI: provoked by off-label demonstrations.
    INFERENCE: produced during normal prediction.
    """

    LGI = "lgi"
    DI = "di"
    INFERENCE = "inference"


@dataclass(frozen=True)
class Rationale:
    """A reasoning explanation plus the label the model derived from it."""

    sample_id: str
    text: str
    predicted: RelationLabel
    kind: RationaleKind
    source: RationaleSource

    def __post_init__(self) -> None:
        if not self.sample_id:
            raise DataError("rationale sample_id must be non-empty")
        if not self.text.strip():
            raise DataError(f"rationale for sample {self.sample_id}: text must be non-empty")


@dataclass(frozen=True)
class Demonstration:
    """An in-context example: sample plus its unbiased rationale and gold label."""

    sample: LabeledSample
    rationale_text: str
    label: RelationLabel

    def __post_init__(self) -> None:
        if self.label != self.sample.gold:
            raise DataError(
                f"demonstration label {self.label.name!r} must equal the sample's gold "
                f"label {self.sample.gold.name!r}"
            )
        if not self.rationale_text.strip():
            raise DataError("demonstration rationale must be non-empty")


@dataclass(frozen=True)
class Prediction:
    """Final output of a prediction run for one sample."""

    rationale_text: str
    label: RelationLabel
    raw_response: str
    iterations_used: int
    llm_calls: int
    p_b_trace: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.llm_calls < 1:
            raise DataError("a prediction implies at least one generation call")
        if self.iterations_used < 0:
            raise DataError("iterations_used cannot be negative")


@dataclass(frozen=True)
class Triplet:
    """Document-level extraction unit."""

    head: str
    relation: RelationLabel
    tail: str


@dataclass(frozen=True)
class DocumentSample:
    """A document with its candidate entities and gold triplets."""

    id: str
    text: str
    entities: tuple[str, ...]
    triplets: tuple[Triplet, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise DataError("document id must be non-empty")
        ents = set(self.entities)
        for t in self.triplets:
            if t.head not in ents or t.tail not in ents:
                raise DataError(
                    f"document {self.id}: triplet ({t.head!r}, {t.tail!r}) uses an "
                    "entity outside the candidate set"
                )


class RationaleStore:
    """Unbiased and biased rationales, ordered by insertion, keyed back to samples.

    Exact duplicates (same sample, text, and predicted label) are dropped on
    add; distinct texts for the same sample are kept. Unbiased entries must
    predict their sample's gold label.
    """

    def __init__(self, samples: Iterable[LabeledSample] = ()):
        self.samples: dict[str, LabeledSample] = {}
        self.unbiased: list[Rationale] = []
        self.biased: list[Rationale] = []
        self._seen: set[tuple[str, str, str]] = set()
        for s in samples:
            self.add_sample(s)

    def add_sample(self, sample: LabeledSample) -> None:
        prior = self.samples.get(sample.id)
        if prior is not None and prior != sample:
            raise MergeError(f"conflicting records for sample id {sample.id!r}")
        self.samples[sample.id] = sample

    def add(self, rationale: Rationale) -> bool:
        """Insert a rationale; returns False when it is an exact duplicate."""
        sample = self.samples.get(rationale.sample_id)
        if sample is None:
            raise DataError(f"rationale references unknown sample {rationale.sample_id!r}")
        if rationale.kind is RationaleKind.UNBIASED and rationale.predicted != sample.gold:
            raise DataError(
                f"unbiased rationale for {sample.id} predicts {rationale.predicted.name!r} "
                f"but the gold label is {sample.gold.name!r}"
            )
        key = (rationale.sample_id, rationale.text, rationale.predicted.name)
        if key in self._seen:
            return False
        self._seen.add(key)
        if rationale.kind is RationaleKind.UNBIASED:
            self.unbiased.append(rationale)
        else:
            self.biased.append(rationale)
        return True

    def __len__(self) -> int:
        return len(self.unbiased) + len(self.biased)

    def rationales(self) -> Iterator[Rationale]:
        yield from self.unbiased
        yield from self.biased

    def gold_of(self, sample_id: str) -> RelationLabel:
        return self.samples[sample_id].gold

    def unbiased_text_for(self, sample_id: str) -> str | None:
        """First unbiased rationale recorded for a sample, if any."""
        for r in self.unbiased:
            if r.sample_id == sample_id:
                return r.text
        return None

    def demonstration_pool(self) -> list[Demonstration]:
        """One demonstration per sample that has an unbiased rationale."""
        seen: set[str] = set()
        pool: list[Demonstration] = []
        for r in self.unbiased:
            if r.sample_id in seen:
                continue
            seen.add(r.sample_id)
            sample = self.samples[r.sample_id]
            pool.append(Demonstration(sample=sample, rationale_text=r.text, label=sample.gold))
        return pool

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.rationales():
                row = {
                    "sample_id": r.sample_id,
                    "text": r.text,
                    "predicted": r.predicted.name,
                    "kind": r.kind.value,
                    "source": r.source.value,
                }
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    @classmethod
    def load(
        cls,
        path: str | Path,
        labelset: LabelSet,
        samples: Iterable[LabeledSample] | None = None,
    ) -> "RationaleStore":
        """Read a rationale JSONL file.

        When ``samples`` is omitted, minimal sample records are reconstructed
        from the unbiased rows (whose predicted label is the gold label).
        Biased rows whose sample never received an unbiased rationale are
        dropped in that case, since their gold label cannot be recovered.
        """
        rows: list[tuple[int, dict]] = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
                for fieldname in ("sample_id", "text", "predicted", "kind", "source"):
                    if fieldname not in raw:
                        raise DataError(f"{path}:{lineno}: missing field {fieldname!r}")
                rows.append((lineno, raw))

        store = cls(samples or ())
        reconstructed = samples is None
        if reconstructed:
            for lineno, raw in rows:
                if raw["kind"] != RationaleKind.UNBIASED.value:
                    continue
                gold = labelset.resolve(raw["predicted"])
                if gold is None:
                    raise DataError(f"{path}:{lineno}: unknown label {raw['predicted']!r}")
                sid = str(raw["sample_id"])
                placeholder = LabeledSample(
                    id=sid, sentence=" ", head=" ", tail=" ", gold=gold
                )
                if sid not in store.samples:
                    store.add_sample(placeholder)

        for lineno, raw in rows:
            label = labelset.resolve(raw["predicted"])
            if label is None:
                raise DataError(f"{path}:{lineno}: unknown label {raw['predicted']!r}")
            try:
                kind = RationaleKind(raw["kind"])
                source = RationaleSource(raw["source"])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            sid = str(raw["sample_id"])
            if sid not in store.samples:
                if reconstructed and kind is RationaleKind.BIASED:
                    continue
                raise DataError(f"{path}:{lineno}: rationale references unknown sample {sid!r}")
            store.add(
                Rationale(
                    sample_id=sid,
                    text=str(raw["text"]),
                    predicted=label,
                    kind=kind,
                    source=source,
                )
            )
        return store


def store_merge(a: RationaleStore, b: RationaleStore) -> RationaleStore:
    """Union of two stores; duplicates collapse, conflicting sample ids error."""
    merged = RationaleStore()
    for src in (a, b):
        for sample in src.samples.values():
            merged.add_sample(sample)
    for src in (a, b):
        for r in src.rationales():
            merged.add(r)
    return merged


def load_samples(path: str | Path, labelset: LabelSet) -> list[LabeledSample]:
    """Read sentence-level samples from JSONL, validating every line."""
    out: list[LabeledSample] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for fieldname in ("id", "sentence", "head", "tail", "label"):
                if fieldname not in raw:
                    raise DataError(f"{path}:{lineno}: missing field {fieldname!r}")
            label = labelset.resolve(str(raw["label"]))
            if label is None:
                raise DataError(f"{path}:{lineno}: unknown label {raw['label']!r}")
            sid = str(raw["id"])
            if sid in seen_ids:
                raise DataError(f"{path}:{lineno}: duplicate sample id {sid!r}")
            seen_ids.add(sid)
            try:
                out.append(
                    LabeledSample(
                        id=sid,
                        sentence=str(raw["sentence"]),
                        head=str(raw["head"]),
                        tail=str(raw["tail"]),
                        gold=label,
                    )
                )
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_samples(samples: Iterable[LabeledSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            row = {
                "id": s.id,
                "sentence": s.sentence,
                "head": s.head,
                "tail": s.tail,
                "label": s.gold.name,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_documents(path: str | Path, labelset: LabelSet) -> list[DocumentSample]:
    """Read document-level samples from JSONL."""
    out: list[DocumentSample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for fieldname in ("id", "text", "entities"):
                if fieldname not in raw:
                    raise DataError(f"{path}:{lineno}: missing field {fieldname!r}")
            triplets = []
            for t in raw.get("triplets", ()):
                label = labelset.resolve(str(t["relation"]))
                if label is None:
                    raise DataError(f"{path}:{lineno}: unknown relation {t['relation']!r}")
                triplets.append(Triplet(head=str(t["head"]), relation=label, tail=str(t["tail"])))
            try:
                out.append(
                    DocumentSample(
                        id=str(raw["id"]),
                        text=str(raw["text"]),
                        entities=tuple(str(e) for e in raw["entities"]),
                        triplets=tuple(triplets),
                    )
                )
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_documents(docs: Iterable[DocumentSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            row = {
                "id": d.id,
                "text": d.text,
                "entities": list(d.entities),
                "triplets": [
                    {"head": t.head, "relation": t.relation.name, "tail": t.tail}
                    for t in d.triplets
                ],
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
