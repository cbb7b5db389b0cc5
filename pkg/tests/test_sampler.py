import itertools
from collections import Counter

import numpy as np
import pytest

from flowbench import sampler
from flowbench.errors import EmptyDataset, InvalidConfig, InvalidWeights, UnknownDataset
from flowbench.sampler import WeightStrategy, resolve_weights
from flowbench.unify import DatasetEntry, DatasetManifest, SequenceEntry

COUNTS = {"a": 23500, "b": 16700, "c": 4180}


def _manifest(sizes):
    """Synthetic manifest with ``n + 1`` consecutive frames per dataset (n pairs)."""
    datasets = []
    for ds, n in sizes.items():
        frames = list(range(n + 1))
        datasets.append(DatasetEntry(ds, f"/nowhere/{ds}", 10.0, 10.0, [SequenceEntry("s", frames, frames)]))
    return DatasetManifest(datasets, {ds: 1 / len(sizes) for ds in sizes})


def test_resolve_examples():
    p = resolve_weights(COUNTS, WeightStrategy.proportional())
    assert p["a"] == pytest.approx(0.530, abs=5e-4)
    assert p["b"] == pytest.approx(0.376, abs=5e-4)
    assert p["c"] == pytest.approx(0.094, abs=5e-4)
    assert resolve_weights(COUNTS, WeightStrategy.uniform()) == pytest.approx({k: 1 / 3 for k in COUNTS})
    h = resolve_weights(COUNTS, WeightStrategy.heavy("a"))
    assert h == pytest.approx({"a": 0.90, "b": 0.05, "c": 0.05})
    assert resolve_weights({"a": 3}, WeightStrategy.heavy("a")) == {"a": 1.0}


def test_resolve_errors():
    with pytest.raises(UnknownDataset):
        resolve_weights(COUNTS, WeightStrategy.heavy("zzz"))
    with pytest.raises(UnknownDataset):
        resolve_weights(COUNTS, WeightStrategy.explicit({"zzz": 1.0}))
    with pytest.raises(InvalidWeights):
        resolve_weights(COUNTS, WeightStrategy.explicit({"a": 0.5, "b": 0.4}))
    with pytest.raises(EmptyDataset):
        resolve_weights({}, WeightStrategy.uniform())


def test_parse():
    assert WeightStrategy.parse("uniform") == WeightStrategy.uniform()
    assert WeightStrategy.parse("heavy:a:0.8") == WeightStrategy.heavy("a", 0.8)
    assert WeightStrategy.parse('explicit:{"a": 0.6, "b": 0.4}').weights == {"a": 0.6, "b": 0.4}
    for bad in ("nope", "explicit:{", "uniform:x"):
        with pytest.raises(InvalidConfig):
            WeightStrategy.parse(bad)


def test_zero_weight_never_drawn():
    m = _manifest({"a": 5, "b": 5, "c": 5})
    refs = list(itertools.islice(sampler.sample_stream(m, {"a": 0.5, "b": 0.0, "c": 0.5}, 1), 20000))
    assert "b" not in {r.dataset_id for r in refs}


def test_empty_dataset_with_weight_rejected():
    m = _manifest({"a": 5, "b": 0})
    with pytest.raises(EmptyDataset):
        next(sampler.sample_stream(m, {"a": 0.5, "b": 0.5}, 0))
    # an empty dataset with zero weight is fine
    assert next(sampler.sample_stream(m, {"a": 1.0, "b": 0.0}, 0)).dataset_id == "a"


def test_missing_weight_rejected():
    with pytest.raises(InvalidWeights):
        next(sampler.sample_stream(_manifest({"a": 2, "b": 2}), {"a": 1.0}, 0))


def test_epoch_coverage_exact():
    m = _manifest({"a": 7})
    refs = list(itertools.islice(sampler.sample_stream(m, {"a": 1.0}, 9), 7 * 5))
    for e in range(5):
        epoch = refs[7 * e : 7 * (e + 1)]
        assert sorted(r.first for r in epoch) == list(range(7))
    assert [r.first for r in refs[:7]] != [r.first for r in refs[7:14]]


def test_deterministic_and_seed_sensitive():
    m = _manifest({"a": 4, "b": 6})
    w = {"a": 0.3, "b": 0.7}
    assert sampler.sample_log(m, w, 3, 500) == sampler.sample_log(m, w, 3, 500)
    assert sampler.sample_log(m, w, 3, 500) != sampler.sample_log(m, w, 4, 500)
    # chunking does not change the stream
    a = list(itertools.islice(sampler.sample_stream(m, w, 3, chunk=7), 300))
    b = list(itertools.islice(sampler.sample_stream(m, w, 3), 300))
    assert a == b


def test_frequencies_within_three_sigma():
    m = _manifest({"a": 50, "b": 30, "c": 10})
    w = {"a": 0.6, "b": 0.25, "c": 0.15}
    n = 30000
    counts = Counter(r.dataset_id for r in itertools.islice(sampler.sample_stream(m, w, 0), n))
    for ds, p in w.items():
        assert abs(counts[ds] / n - p) <= 3 * np.sqrt(p * (1 - p) / n)
