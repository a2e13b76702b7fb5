"""Builders for randomized stores and samples shared across test modules."""

from __future__ import annotations

import random

from srvf.core import (
    LabeledSample,
    LabelSet,
    Rationale,
    RationaleKind,
    RationaleSource,
    RationaleStore,
)

WORDS = (
    "river", "lantern", "archive", "meadow", "circuit", "harbor", "quarry",
    "saddle", "thicket", "furnace", "ledger", "orchard", "pylon", "satchel",
    "tundra", "gable", "mortar", "prism", "vault", "willow", "anchor",
    "beacon", "cistern", "dynamo", "ember", "fathom", "girder", "hollow",
)


def word_salad(rng: random.Random, n: int) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(n))


def make_sample(rng: random.Random, i: int, labelset: LabelSet) -> LabeledSample:
    head, tail = rng.sample(WORDS, 2)
    sentence = f"the {head} stood beside the {tail} while {word_salad(rng, 4)}"
    gold = rng.choice(list(labelset))
    return LabeledSample(id=f"s{i:03d}", sentence=sentence, head=head, tail=tail, gold=gold)


def trainable_store(rng: random.Random, **kwargs) -> tuple[RationaleStore, LabelSet]:
    """Like random_store, but regenerated until it yields positive pairs."""
    from srvf.supervisor import build_pairs

    while True:
        store, labelset = random_store(rng, **kwargs)
        if build_pairs(store).positives:
            return store, labelset


def random_store(
    rng: random.Random,
    n_samples: int = 6,
    n_rationales: int = 12,
    label_names: tuple[str, ...] = ("Alpha-Link", "Beta-Link", "Gamma-Link"),
) -> tuple[RationaleStore, LabelSet]:
    """A store with a random mix of biased and unbiased rationales.

    Every rationale text is unique so stores are safe for pair/verify oracles
    that key on text identity.
    """
    labelset = LabelSet.from_names(label_names)
    samples = [make_sample(rng, i, labelset) for i in range(n_samples)]
    store = RationaleStore(samples)
    labels = list(labelset)
    for j in range(n_rationales):
        sample = rng.choice(samples)
        if rng.random() < 0.5:
            kind, predicted = RationaleKind.UNBIASED, sample.gold
            source = RationaleSource.LGI
        else:
            kind = RationaleKind.BIASED
            predicted = rng.choice(labels)
            source = RationaleSource.DI
        store.add(
            Rationale(
                sample_id=sample.id,
                text=f"r{j:03d} {word_salad(rng, 6)}",
                predicted=predicted,
                kind=kind,
                source=source,
            )
        )
    return store, labelset
