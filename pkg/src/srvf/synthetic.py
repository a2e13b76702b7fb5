"""Synthetic relation-extraction corpora for offline benchmarks.

Ten SemEval-flavored relation categories with template sentences per label.
The texts are mundane on purpose: what matters is that every sample is
well-formed, labels are balanced, entity words never collide with the role
words inside relation names, and generation is fully seeded.
"""

from __future__ import annotations

import itertools
import random
from typing import Sequence

from .core import DocumentSample, LabelSet, LabeledSample, Triplet
from .gateway import BiasModel
from .seeding import stable_u64

__all__ = [
    "SEMEVAL_LABELS",
    "CONFUSION_PAIRS",
    "semeval_labelset",
    "make_corpus",
    "make_documents",
    "default_bias",
]

SEMEVAL_LABELS = (
    "Other",
    "Cause-Effect",
    "Component-Whole",
    "Content-Container",
    "Entity-Destination",
    "Entity-Origin",
    "Instrument-Agency",
    "Member-Collection",
    "Message-Topic",
    "Product-Producer",
)

# Disjoint gold -> confused pairs: no label is both a confusion source and a
# confusion target, so a correct prediction can never look like someone
# else's bias situation.
CONFUSION_PAIRS = (
    ("Entity-Destination", "Content-Container"),
    ("Entity-Origin", "Product-Producer"),
    ("Member-Collection", "Component-Whole"),
)

_ADJECTIVES = (
    "old", "small", "heavy", "bright", "quiet",
    "rusty", "modern", "ancient", "narrow", "broken",
)

# label -> (sentence templates, head pool, tail pool). Entity words are kept
# clear of the role words appearing in relation names (no "container",
# "producer", ...), because rationale texts quote those role words.
_TEMPLATES: dict[str, tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]] = {
    "Other": (
        (
            "The {head} stood near the {adj} {tail} without any clear connection.",
            "A {head} and a {adj} {tail} appeared in the same photograph.",
        ),
        ("bicycle", "lantern", "bench", "ladder", "kettle"),
        ("fountain", "hedge", "doorway", "staircase", "windmill"),
    ),
    "Cause-Effect": (
        (
            "The {adj} {head} triggered a wave of {tail} across the region.",
            "Weeks of {head} led to widespread {tail} in the {adj} valley.",
        ),
        ("storm", "blackout", "strike", "drought", "rumor"),
        ("panic", "delays", "flooding", "unrest", "shortages"),
    ),
    "Component-Whole": (
        (
            "The {head} of the {adj} {tail} was replaced last week.",
            "Engineers inspected the {head} inside the {adj} {tail} again.",
        ),
        ("keyboard", "engine", "handle", "lens", "rotor"),
        ("laptop", "tractor", "suitcase", "camera", "helicopter"),
    ),
    "Content-Container": (
        (
            "She packed the {head} into a {adj} {tail} before the trip.",
            "The {head} had been sealed inside the {adj} {tail} for years.",
        ),
        ("apples", "letters", "coins", "spices", "photographs"),
        ("basket", "envelope", "jar", "tin", "album"),
    ),
    "Entity-Destination": (
        (
            "The {head} was moved into the {adj} {tail} yesterday.",
            "Workers hauled the {head} toward the {adj} {tail} at dawn.",
        ),
        ("cargo", "furniture", "shipment", "herd", "scaffolding"),
        ("warehouse", "apartment", "harbor", "pasture", "depot"),
    ),
    "Entity-Origin": (
        (
            "The {head} arrived from a {adj} {tail} over the border.",
            "That {head} originally came out of a {adj} {tail} in the south.",
        ),
        ("singer", "parcel", "recipe", "dialect", "merchant"),
        ("village", "port", "monastery", "province", "island"),
    ),
    "Instrument-Agency": (
        (
            "The {head} is what the {adj} {tail} relies on every day.",
            "With a {head} in hand, the {adj} {tail} finished the work.",
        ),
        ("scalpel", "chisel", "loom", "telescope", "plough"),
        ("surgeon", "sculptor", "weaver", "astronomer", "farmer"),
    ),
    "Member-Collection": (
        (
            "A {head} from the {adj} {tail} stepped forward to speak.",
            "Each {head} in the {adj} {tail} rehearsed a different part.",
        ),
        ("violinist", "senator", "monk", "sailor", "dancer"),
        ("orchestra", "council", "order", "fleet", "troupe"),
    ),
    "Message-Topic": (
        (
            "The {head} covered the {adj} {tail} in great detail.",
            "Her {head} focused on the {adj} {tail} and little else.",
        ),
        ("lecture", "editorial", "documentary", "memo", "sermon"),
        ("election", "famine", "scandal", "merger", "eclipse"),
    ),
    "Product-Producer": (
        (
            "The {head} praised by critics was built by a {adj} {tail}.",
            "A {adj} {tail} spent two years crafting the {head}.",
        ),
        ("violin", "sculpture", "firmware", "quilt", "blade"),
        ("luthier", "artisan", "workshop", "seamstress", "blacksmith"),
    ),
}


def semeval_labelset() -> LabelSet:
    return LabelSet.from_names(SEMEVAL_LABELS, negatives=("Other",))


def default_bias(probability: float = 0.4, steering_strength: float = 0.8) -> BiasModel:
    """The confusion model used by the synthetic benchmark."""
    return BiasModel(
        confusion={gold: (confused, probability) for gold, confused in CONFUSION_PAIRS},
        steering_strength=steering_strength,
    )


def _label_combos(label: str, rng: random.Random) -> list[tuple[int, str, str, str]]:
    templates, heads, tails = _TEMPLATES[label]
    combos = list(itertools.product(range(len(templates)), heads, tails, _ADJECTIVES))
    rng.shuffle(combos)
    return combos


def _sentence(label: str, combo: tuple[int, str, str, str]) -> tuple[str, str, str]:
    templates, _, _ = _TEMPLATES[label]
    t_idx, head, tail, adj = combo
    return templates[t_idx].format(head=head, tail=tail, adj=adj), head, tail


def make_corpus(
    n_train_per_label: int = 20,
    n_test_per_label: int = 50,
    seed: int = 7,
) -> tuple[list[LabeledSample], list[LabeledSample], LabelSet]:
    """Balanced train/test splits with disjoint sentences, fully seeded."""
    labelset = semeval_labelset()
    needed = n_train_per_label + n_test_per_label
    train: list[LabeledSample] = []
    test: list[LabeledSample] = []
    for label in labelset:
        rng = random.Random(stable_u64(seed, "corpus", label.name))
        combos = _label_combos(label.name, rng)
        if needed > len(combos):
            raise ValueError(
                f"label {label.name}: {needed} samples requested but only "
                f"{len(combos)} distinct sentences available"
            )
        slug = label.name.lower()
        for i in range(n_train_per_label):
            sentence, head, tail = _sentence(label.name, combos[i])
            train.append(
                LabeledSample(
                    id=f"train-{slug}-{i:03d}",
                    sentence=sentence, head=head, tail=tail, gold=label,
                )
            )
        for i in range(n_test_per_label):
            sentence, head, tail = _sentence(label.name, combos[n_train_per_label + i])
            test.append(
                LabeledSample(
                    id=f"test-{slug}-{i:03d}",
                    sentence=sentence, head=head, tail=tail, gold=label,
                )
            )
    return train, test, labelset


def make_documents(
    n_docs: int = 12,
    seed: int = 11,
    labels: Sequence[str] | None = None,
) -> list[DocumentSample]:
    """Small synthetic documents with gold triplets for document-level runs.

    Each document concatenates two to four single-relation sentences drawn
    from distinct labels; entity pools are disjoint across labels, so the
    candidate entity set stays unambiguous.
    """
    labelset = semeval_labelset()
    usable = [
        lab.name for lab in labelset
        if not lab.is_negative and (labels is None or lab.name in labels)
    ]
    rng = random.Random(stable_u64(seed, "documents"))
    docs: list[DocumentSample] = []
    for d in range(n_docs):
        count = rng.randint(2, min(4, len(usable)))
        chosen = rng.sample(usable, count)
        sentences: list[str] = []
        entities: list[str] = []
        triplets: list[Triplet] = []
        for label_name in chosen:
            combos = _label_combos(label_name, rng)
            sentence, head, tail = _sentence(label_name, combos[0])
            sentences.append(sentence)
            for ent in (head, tail):
                if ent not in entities:
                    entities.append(ent)
            label = labelset.resolve(label_name)
            assert label is not None
            triplets.append(Triplet(head=head, relation=label, tail=tail))
        docs.append(
            DocumentSample(
                id=f"doc-{d:03d}",
                text=" ".join(sentences),
                entities=tuple(entities),
                triplets=tuple(triplets),
            )
        )
    return docs
