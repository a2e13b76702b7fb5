"""Session fixtures: the synthetic benchmark is expensive enough to share."""

from __future__ import annotations

import json
import time
from pathlib import Path

import pytest

from srvf.collection import collect
from srvf.evalbench import BenchConfig, run_benchmark
from srvf.gateway import MockBackend
from srvf.seeding import stable_u64
from srvf.synthetic import default_bias, make_corpus

REPO_ROOT = Path(__file__).resolve().parents[1]
BENCH_CONFIG_PATH = REPO_ROOT / "configs" / "bench.synthetic.json"


@pytest.fixture(scope="session")
def bench_config() -> BenchConfig:
    with open(BENCH_CONFIG_PATH, encoding="utf-8") as fh:
        return BenchConfig.from_dict(json.load(fh))


@pytest.fixture(scope="session")
def bench_runs(bench_config):
    """Two full benchmark runs under the same master seed, with durations."""
    t0 = time.perf_counter()
    first = run_benchmark(bench_config)
    d1 = time.perf_counter() - t0
    t0 = time.perf_counter()
    second = run_benchmark(bench_config)
    d2 = time.perf_counter() - t0
    return first, second, d1, d2


@pytest.fixture(scope="session")
def small_collected():
    """A collected store on a 3-per-label corpus, for cheap training tests."""
    train, _, labelset = make_corpus(n_train_per_label=3, n_test_per_label=1, seed=7)
    backend = MockBackend(bias=default_bias(), seed=stable_u64(0, "backend"))
    store, report = collect(train, backend, labelset, seed=stable_u64(0, "collect"))
    return store, labelset, report
