"""Rationale collection: gold-guided induction and off-label provocation."""

import pytest

from srvf.collection import (
    CollectionConfig,
    CollectionError,
    CollectionReport,
    collect,
    induce_unbiased,
    observe_biased,
)
from srvf.core import Demonstration, LabeledSample, LabelSet, RationaleKind, RationaleSource
from srvf.gateway import BiasModel, GatewayError, MockBackend

LS = LabelSet.from_names(
    ["Cause-Effect", "Member-Collection", "Entity-Destination", "Other"],
    negatives=["Other"],
)
DEST = LS.resolve("Entity-Destination")
MEMBER = LS.resolve("Member-Collection")
CAUSE = LS.resolve("Cause-Effect")

SAMPLES = [
    LabeledSample(id="c1", sentence="the storm pushed the boat into the harbor",
                  head="boat", tail="harbor", gold=DEST),
    LabeledSample(id="c2", sentence="a scout joined the troop", head="scout",
                  tail="troop", gold=MEMBER),
    LabeledSample(id="c3", sentence="the frost cracked the pipe", head="frost",
                  tail="pipe", gold=CAUSE),
]


def clean_backend():
    return MockBackend(bias=BiasModel(), seed=0)


class TestInduceUnbiased:
    def test_accepts_when_rationale_rederives_gold(self):
        r = induce_unbiased(SAMPLES[0], clean_backend(), LS)
        assert r is not None
        assert r.kind is RationaleKind.UNBIASED
        assert r.source is RationaleSource.LGI
        assert r.predicted == DEST
        assert r.sample_id == "c1"

    def test_rejects_when_bias_always_wins(self):
        # certain confusion: every induced rationale argues for the wrong label,
        # so the re-derivation check can never return gold
        backend = MockBackend(
            bias=BiasModel(confusion={"Entity-Destination": ("Member-Collection", 1.0)}),
            seed=0,
        )
        assert induce_unbiased(SAMPLES[0], backend, LS, retries=2) is None

    def test_uses_two_calls_per_attempt(self):
        from srvf.gateway import CallLog
        log = CallLog()
        backend = MockBackend(bias=BiasModel(), seed=0, call_log=log)
        induce_unbiased(SAMPLES[0], backend, LS, retries=2)
        assert log.llm_calls == 2  # clean model: first attempt succeeds


class TestObserveBiased:
    def pool(self):
        return [
            Demonstration(sample=s, rationale_text=f"unbiased text for {s.id}", label=s.gold)
            for s in SAMPLES
        ]

    def test_only_off_gold_predictions_kept(self):
        backend = MockBackend(
            bias=BiasModel(confusion={"Entity-Destination": ("Member-Collection", 1.0)}),
            seed=0,
        )
        out = observe_biased(SAMPLES[0], backend, LS, self.pool(), attempts=3)
        assert out, "certain confusion must provoke at least one biased rationale"
        for r in out:
            assert r.kind is RationaleKind.BIASED
            assert r.source is RationaleSource.DI
            assert r.predicted != DEST

    def test_unprovokable_sample_yields_nothing(self):
        # no confusion entry for this gold: the mock always answers correctly
        out = observe_biased(SAMPLES[1], clean_backend(), LS, self.pool(), attempts=3)
        assert out == []

    def test_empty_pool_yields_nothing(self):
        backend = MockBackend(
            bias=BiasModel(confusion={"Entity-Destination": ("Member-Collection", 1.0)}),
            seed=0,
        )
        assert observe_biased(SAMPLES[0], backend, LS, [], attempts=3) == []

    def test_demos_never_carry_the_gold_label(self):
        # a pool that is entirely gold-labeled for this sample leaves nothing to
        # provoke with
        pool = [d for d in self.pool() if d.label == DEST]
        backend = MockBackend(
            bias=BiasModel(confusion={"Entity-Destination": ("Member-Collection", 1.0)}),
            seed=0,
        )
        assert observe_biased(SAMPLES[0], backend, LS, pool, attempts=3) == []

    def test_deduplicates_identical_observations(self):
        backend = MockBackend(
            bias=BiasModel(confusion={"Entity-Destination": ("Member-Collection", 1.0)}),
            seed=0,
        )
        out = observe_biased(SAMPLES[0], backend, LS, self.pool(), attempts=3)
        assert len({(r.text, r.predicted.name) for r in out}) == len(out)


class TestCollect:
    def test_clean_model_accepts_everything(self):
        store, report = collect(SAMPLES, clean_backend(), LS)
        assert report.total_samples == 3
        assert report.accepted == 3
        assert report.rejected_ids == ()
        assert report.errored_ids == ()
        assert len(store.unbiased) == 3
        assert report.biased_count == len(store.biased) == 0

    def test_biased_model_populates_both_sides(self):
        backend = MockBackend(
            bias=BiasModel(confusion={"Entity-Destination": ("Member-Collection", 0.5)},
                           steering_strength=0.0),
            seed=3,
        )
        store, report = collect(SAMPLES, backend, LS, seed=5)
        assert report.accepted >= 2  # c2/c3 have no confusion entry
        for r in store.biased:
            assert r.predicted.name == "Member-Collection"

    def test_abort_when_too_many_rejections(self):
        backend = MockBackend(
            bias=BiasModel(confusion={
                "Entity-Destination": ("Member-Collection", 1.0),
                "Member-Collection": ("Entity-Destination", 1.0),
                "Cause-Effect": ("Member-Collection", 1.0),
            }),
            seed=0,
        )
        with pytest.raises(CollectionError):
            collect(SAMPLES, backend, LS)

    def test_errors_recorded_not_raised_below_threshold(self):
        class FlakyBackend:
            mode = "flaky"

            def __init__(self):
                self.inner = clean_backend()

            def complete(self, prompt, seed=None):
                if prompt.sample is not None and prompt.sample.id == "c2":
                    raise GatewayError("boom")
                return self.inner.complete(prompt, seed)

        store, report = collect(SAMPLES, FlakyBackend(), LS)
        assert report.errored_ids == ("c2",)
        assert report.accepted == 2
        assert report.reject_fraction == pytest.approx(1 / 3)

    def test_report_fraction(self):
        report = CollectionReport(total_samples=4, accepted=3, rejected_ids=("a",),
                                  errored_ids=(), biased_count=0)
        assert report.reject_fraction == pytest.approx(0.25)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CollectionConfig(lgi_retries=-1)
        with pytest.raises(ValueError):
            CollectionConfig(max_reject_fraction=1.5)
