"""Weighted multi-dataset sampling.

Dataset draws are i.i.d. with replacement according to the resolved weights;
within a dataset, pairs are served from a shuffled epoch that is reshuffled
once exhausted.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import EmptyDataset, InvalidConfig, InvalidWeights, UnknownDataset
from .unify import WEIGHT_TOL, DatasetManifest, PairRef


class StrategyKind(str, enum.Enum):
    PROPORTIONAL = "proportional"
    UNIFORM = "uniform"
    HEAVY = "heavy"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class WeightStrategy:
    kind: StrategyKind
    dataset_id: str | None = None  # HEAVY target
    heavy_weight: float = 0.90
    weights: Mapping[str, float] = field(default_factory=dict)  # EXPLICIT

    @classmethod
    def uniform(cls) -> WeightStrategy:
        return cls(StrategyKind.UNIFORM)

    @classmethod
    def proportional(cls) -> WeightStrategy:
        return cls(StrategyKind.PROPORTIONAL)

    @classmethod
    def heavy(cls, dataset_id: str, w: float = 0.90) -> WeightStrategy:
        return cls(StrategyKind.HEAVY, dataset_id=dataset_id, heavy_weight=w)

    @classmethod
    def explicit(cls, weights: Mapping[str, float]) -> WeightStrategy:
        return cls(StrategyKind.EXPLICIT, weights=dict(weights))

    @classmethod
    def parse(cls, text: str) -> WeightStrategy:
        """``uniform``, ``proportional``, ``heavy:<id>[:<w>]`` or ``explicit:<json object>``."""
        head, _, rest = text.partition(":")
        head = head.strip().lower()
        if head == "uniform" and not rest:
            return cls.uniform()
        if head == "proportional" and not rest:
            return cls.proportional()
        if head == "heavy" and rest:
            ds, _, w = rest.partition(":")
            return cls.heavy(ds, float(w) if w else 0.90)
        if head == "explicit" and rest:
            try:
                return cls.explicit({str(k): float(v) for k, v in json.loads(rest).items()})
            except (json.JSONDecodeError, AttributeError, TypeError, ValueError) as exc:
                raise InvalidConfig(f"bad explicit weights {rest!r}: {exc}") from exc
        raise InvalidConfig(f"unknown weight strategy {text!r}")


def resolve_weights(manifest: DatasetManifest | Mapping[str, int], strategy: WeightStrategy) -> dict[str, float]:
    """Map each dataset id to its sampling probability.

    ``manifest`` may also be a plain ``{dataset_id: pair_count}`` mapping.
    """
    counts = manifest.pair_counts() if isinstance(manifest, DatasetManifest) else dict(manifest)
    ids = sorted(counts)
    if not ids:
        raise EmptyDataset("cannot resolve weights for an empty manifest")
    n = len(ids)
    kind = StrategyKind(strategy.kind)
    if kind is StrategyKind.UNIFORM:
        weights = {i: 1.0 / n for i in ids}
    elif kind is StrategyKind.PROPORTIONAL:
        total = sum(counts.values())
        if total <= 0:
            raise EmptyDataset("proportional weights need at least one pair")
        weights = {i: counts[i] / total for i in ids}
    elif kind is StrategyKind.HEAVY:
        if strategy.dataset_id not in counts:
            raise UnknownDataset(f"heavy strategy names unknown dataset {strategy.dataset_id!r}")
        if n == 1:
            weights = {strategy.dataset_id: 1.0}
        else:
            rest = (1.0 - strategy.heavy_weight) / (n - 1)
            weights = {i: strategy.heavy_weight if i == strategy.dataset_id else rest for i in ids}
    else:
        weights = {str(k): float(v) for k, v in strategy.weights.items()}
        unknown = set(weights) - set(ids)
        if unknown:
            raise UnknownDataset(f"explicit weights name unknown datasets {sorted(unknown)}")
        weights = {i: weights.get(i, 0.0) for i in ids}
    if any(w < 0 for w in weights.values()) or abs(math.fsum(weights.values()) - 1.0) > WEIGHT_TOL:
        raise InvalidWeights(f"resolved weights {weights} do not form a distribution")
    return weights


class _Epoch:
    """Shuffled-epoch server for one dataset's pairs."""

    def __init__(self, pairs: list, rng: np.random.Generator):
        self.pairs = pairs
        self.rng = rng
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0
        self.epoch = -1

    def next(self):
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(len(self.pairs))
            self.pos = 0
            self.epoch += 1
        item = self.pairs[self.order[self.pos]]
        self.pos += 1
        return item


def sample_stream(manifest: DatasetManifest, weights: Mapping[str, float], seed: int, chunk: int = 4096) -> Iterator[PairRef]:
    """Infinite, deterministic stream of pair references."""
    ids = manifest.dataset_ids
    missing = set(ids) - set(weights)
    if missing:
        raise InvalidWeights(f"no weight for datasets {sorted(missing)}")
    p = np.array([float(weights[i]) for i in ids])
    if np.any(p < 0) or abs(math.fsum(p) - 1.0) > WEIGHT_TOL:
        raise InvalidWeights("sampling weights must be non-negative and sum to 1")
    epochs = []
    root = np.random.SeedSequence([int(seed) & (2**64 - 1)])
    children = root.spawn(len(ids) + 1)
    for i, ds in enumerate(ids):
        pairs = manifest.pairs(ds)
        if p[i] > 0 and not pairs:
            raise EmptyDataset(f"dataset {ds!r} has positive weight but no pairs")
        epochs.append(_Epoch(pairs, np.random.Generator(np.random.Philox(children[i + 1]))))
    choose = np.random.Generator(np.random.Philox(children[0]))
    cdf = np.cumsum(p)
    last = int(np.flatnonzero(p > 0)[-1])
    while True:
        u = choose.random(chunk)
        picks = np.minimum(np.searchsorted(cdf, u, side="right"), last)
        for d in picks.tolist():
            yield epochs[d].next()


def sample_log(manifest: DatasetManifest, weights: Mapping[str, float], seed: int, n: int) -> list[dict]:
    """The first ``n`` draws as JSON-ready records."""
    out = []
    for i, ref in zip(range(n), sample_stream(manifest, weights, seed)):
        out.append({"draw": i, "dataset_id": ref.dataset_id, "sequence_id": ref.sequence_id, "first": ref.first, "second": ref.second})
    return out
