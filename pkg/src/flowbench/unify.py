"""Cross-dataset unification: frame-rate standardization, annotated-frame
pairing, coarse taxonomy mapping and manifest construction."""

from __future__ import annotations

import fnmatch
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

from .core import CoarseClass, FramePair, FrameSequence
from .errors import FormatError, IncompatibleRate, InvalidWeights, ManifestMismatch, UnmappedClass

WEIGHT_TOL = 1e-9
DT_JITTER = 1e-6


class TaxonomyMap:
    """(dataset_id, raw_class) -> CoarseClass lookup backed by plain data.

    ``aliases`` maps fnmatch patterns of dataset ids onto a table name, so
    ``synth-a`` or ``waymo-fast2`` reuse the ``synth``/``waymo`` tables.
    """

    def __init__(self, datasets: dict, aliases: dict | None = None):
        self.datasets = {
            ds: {raw: CoarseClass[str(coarse).upper()] for raw, coarse in table.items()} for ds, table in datasets.items()
        }
        self.aliases = dict(aliases or {})

    @classmethod
    def from_dict(cls, d: dict) -> TaxonomyMap:
        return cls(d.get("datasets", {}), d.get("aliases", {}))

    @classmethod
    def load(cls, path) -> TaxonomyMap:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "aliases": dict(self.aliases),
            "datasets": {ds: {raw: c.name for raw, c in t.items()} for ds, t in self.datasets.items()},
        }

    def table_for(self, dataset_id: str) -> dict:
        if dataset_id in self.datasets:
            return self.datasets[dataset_id]
        for pattern in sorted(self.aliases):
            if fnmatch.fnmatchcase(dataset_id, pattern):
                return self.datasets.get(self.aliases[pattern], {})
        return {}

    def map(self, dataset_id: str, raw_class: str) -> CoarseClass:
        try:
            return self.table_for(dataset_id)[raw_class]
        except KeyError:
            raise UnmappedClass(f"no coarse class for {raw_class!r} in dataset {dataset_id!r}") from None

    def validate(self, items) -> None:
        """Single pass over ``(dataset_id, raw_class)`` pairs; reports every gap at once."""
        missing = sorted({(d, r) for d, r in items if r not in self.table_for(d)})
        if missing:
            raise UnmappedClass("unmapped classes: " + ", ".join(f"{d}:{r}" for d, r in missing))


@lru_cache(maxsize=1)
def _default_taxonomy_dict() -> str:
    return resources.files("flowbench").joinpath("data/taxonomy.json").read_text()


def default_taxonomy() -> TaxonomyMap:
    return TaxonomyMap.from_dict(json.loads(_default_taxonomy_dict()))


def map_taxonomy(tax: TaxonomyMap, dataset_id: str, raw_class: str) -> CoarseClass:
    return tax.map(dataset_id, raw_class)


def rate_ratio(native_hz: float, target_hz: float) -> int:
    if native_hz <= 0 or target_hz <= 0:
        raise IncompatibleRate("frame rates must be positive")
    if target_hz > native_hz:
        raise IncompatibleRate(f"cannot upsample {native_hz} Hz to {target_hz} Hz")
    k = native_hz / target_hz
    ik = int(round(k))
    if abs(k - ik) > 1e-9 * max(1.0, k) or ik < 1:
        raise IncompatibleRate(f"{native_hz} Hz / {target_hz} Hz is not an integer ratio")
    return ik


def resample_framerate(frames: Sequence, native_hz: float, target_hz: float) -> list:
    """Keep every k-th frame starting at index 0, k = native_hz / target_hz."""
    k = rate_ratio(native_hz, target_hz)
    return list(frames)[::k]


def resample_sequence(seq: FrameSequence, target_hz: float) -> FrameSequence:
    """:func:`resample_framerate` on a whole sequence; keyframes dropped by the
    decimation are dropped from ``annotated`` as well."""
    frames = resample_framerate(seq.frames, seq.native_hz, target_hz)
    kept = {f.frame_index for f in frames}
    return seq.replace(
        frames=tuple(frames),
        annotations={i: a for i, a in seq.annotations.items() if i in kept},
        annotated=tuple(i for i in seq.annotated if i in kept),
        native_hz=float(target_hz),
    )


def annotated_pair_indices(frame_indices: Sequence[int], annotated: Sequence[int]) -> list[tuple[int, int]]:
    """(first, second) frame indices for each keyframe that has a following scan."""
    position = {idx: i for i, idx in enumerate(frame_indices)}
    pairs = []
    for a in sorted(annotated):
        if a not in position:
            raise ManifestMismatch(f"annotated frame {a} is not part of the sequence")
        i = position[a]
        if i + 1 < len(frame_indices):
            pairs.append((a, frame_indices[i + 1]))
    return pairs


def pair_annotated_frames(
    seq: FrameSequence, annotated_frame_indices: Sequence[int] | None = None, target_hz: float | None = None
) -> list[FramePair]:
    """One pair per keyframe and its real successor scan; nothing is interpolated.

    With ``target_hz`` set, pairs whose time step is not ``1/target_hz`` (a gap
    in the recording) are skipped.
    """
    annotated = seq.annotated if annotated_frame_indices is None else annotated_frame_indices
    by_index = {f.frame_index: f for f in seq.frames}
    pairs = []
    for a, b in annotated_pair_indices(seq.frame_indices, annotated):
        first, second = by_index[a], by_index[b]
        if target_hz is not None and abs((second.timestamp - first.timestamp) - 1.0 / target_hz) > DT_JITTER:
            continue
        pairs.append(
            FramePair(
                first=first,
                second=second,
                annotations_first=seq.annotations.get(a, ()),
                annotations_second=seq.annotations.get(b, ()),
                sequence_id=seq.sequence_id,
            )
        )
    return pairs


class PairRef(NamedTuple):
    dataset_id: str
    sequence_id: str
    first: int
    second: int

    @property
    def key(self) -> str:
        return f"{self.dataset_id}/{self.sequence_id}/{self.first}-{self.second}"


@dataclass
class SequenceEntry:
    sequence_id: str
    frame_indices: list
    annotated_frame_indices: list

    def __post_init__(self):
        self.frame_indices = [int(i) for i in self.frame_indices]
        self.annotated_frame_indices = [int(i) for i in self.annotated_frame_indices]
        if not set(self.annotated_frame_indices) <= set(self.frame_indices):
            raise ManifestMismatch(f"sequence {self.sequence_id!r}: annotated frames outside the frame list")


@dataclass
class DatasetEntry:
    dataset_id: str
    root: str
    native_hz: float
    annotation_hz: float
    sequences: list = field(default_factory=list)
    target_hz: float | None = None  # rate the frame lists were resampled to

    def __post_init__(self):
        self.sequences = [s if isinstance(s, SequenceEntry) else SequenceEntry(**s) for s in self.sequences]
        if self.native_hz < self.annotation_hz:
            raise ManifestMismatch(f"{self.dataset_id}: native_hz below annotation_hz")

    def pairs(self) -> list[PairRef]:
        out = []
        for s in self.sequences:
            for a, b in annotated_pair_indices(s.frame_indices, s.annotated_frame_indices):
                out.append(PairRef(self.dataset_id, s.sequence_id, a, b))
        return out


def _check_weights(weights: dict, ids) -> None:
    if set(weights) != set(ids):
        raise InvalidWeights(f"weights cover {sorted(weights)} but datasets are {sorted(ids)}")
    if any(w < 0 or not math.isfinite(w) for w in weights.values()):
        raise InvalidWeights("weights must be finite and non-negative")
    total = math.fsum(weights.values())
    if abs(total - 1.0) > WEIGHT_TOL:
        raise InvalidWeights(f"weights sum to {total!r}, expected 1")


@dataclass
class DatasetManifest:
    datasets: list
    weights: dict

    def __post_init__(self):
        self.datasets = sorted(
            (d if isinstance(d, DatasetEntry) else DatasetEntry(**d) for d in self.datasets), key=lambda d: d.dataset_id
        )
        for d in self.datasets:
            d.sequences.sort(key=lambda s: s.sequence_id)
        ids = [d.dataset_id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise ManifestMismatch("duplicate dataset ids in manifest")
        self.weights = {k: float(v) for k, v in self.weights.items()}
        _check_weights(self.weights, ids)

    @property
    def dataset_ids(self) -> list[str]:
        return [d.dataset_id for d in self.datasets]

    def dataset(self, dataset_id: str) -> DatasetEntry:
        for d in self.datasets:
            if d.dataset_id == dataset_id:
                return d
        raise KeyError(dataset_id)

    def pairs(self, dataset_id: str | None = None) -> list[PairRef]:
        if dataset_id is not None:
            return self.dataset(dataset_id).pairs()
        return [p for d in self.datasets for p in d.pairs()]

    def pair_counts(self) -> dict:
        return {d.dataset_id: len(d.pairs()) for d in self.datasets}

    def with_weights(self, weights: dict) -> DatasetManifest:
        return DatasetManifest(datasets=self.datasets, weights=weights)

    def to_dict(self) -> dict:
        return {
            "datasets": [
                {
                    "dataset_id": d.dataset_id,
                    "root": d.root,
                    "native_hz": d.native_hz,
                    "annotation_hz": d.annotation_hz,
                    "target_hz": d.target_hz,
                    "sequences": [
                        {
                            "sequence_id": s.sequence_id,
                            "frame_indices": s.frame_indices,
                            "annotated_frame_indices": s.annotated_frame_indices,
                        }
                        for s in d.sequences
                    ],
                }
                for d in self.datasets
            ],
            "weights": dict(sorted(self.weights.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> DatasetManifest:
        try:
            return cls(datasets=d["datasets"], weights=d["weights"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc

    def save(self, path) -> None:
        from .io import write_json

        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> DatasetManifest:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc


def build_manifest(roots: Sequence, weights: dict | None = None, target_hz: float = 10.0) -> DatasetManifest:
    """Scan unified-format dataset roots into a manifest at ``target_hz``.

    ``weights=None`` means uniform weights.
    """
    from . import io

    entries = []
    for root in roots:
        meta = io.read_dataset_meta(root)
        native = float(meta["native_hz"])
        seqs = []
        for sid in io.list_sequences(root):
            frames, annotated = io.scan_sequence(root, sid)
            missing = set(annotated) - set(frames)
            if missing:
                raise FormatError(f"{root}/{sid}: keyframes {sorted(missing)[:5]} have no frame file")
            kept = resample_framerate(frames, native, target_hz)
            keep = set(kept)
            seqs.append(SequenceEntry(sid, kept, [i for i in annotated if i in keep]))
        entries.append(
            DatasetEntry(
                dataset_id=meta["dataset_id"],
                root=str(Path(root).resolve()),
                native_hz=native,
                annotation_hz=float(meta["annotation_hz"]),
                sequences=seqs,
                target_hz=float(target_hz),
            )
        )
    if weights is None:
        weights = {e.dataset_id: 1.0 / len(entries) for e in entries}
    return DatasetManifest(datasets=entries, weights=weights)


def load_pair(manifest: DatasetManifest, ref: PairRef, taxonomy: TaxonomyMap | None = None) -> FramePair:
    """Materialize one manifest pair from disk."""
    from . import io

    entry = manifest.dataset(ref.dataset_id)
    seq = io.read_sequence(entry.root, ref.sequence_id, taxonomy=taxonomy or default_taxonomy(), frame_indices=[ref.first, ref.second])
    return FramePair(
        first=seq.frames[0],
        second=seq.frames[1],
        annotations_first=seq.annotations.get(ref.first, ()),
        annotations_second=seq.annotations.get(ref.second, ()),
        sequence_id=ref.sequence_id,
    )
