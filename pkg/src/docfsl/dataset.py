"""Manifest ingestion, the meta-class registry, and meta-train/meta-test splits.

A manifest is a UTF-8 CSV with header ``id,image_path,label,meta_class,dataset_id``.
Image paths are resolved relative to the manifest's own directory. Meta-classes
are document families (country of issuance for ID cards); splits partition
meta-classes, never individual samples.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageDecodeError, ManifestError

MANIFEST_FIELDS = ("id", "image_path", "label", "meta_class", "dataset_id")

# Receipt/ID transfer datasets ship "altered" rather than "fake".
DEFAULT_LABEL_ALIASES = {"altered": "fake"}


class Label(str, Enum):
    GENUINE = "genuine"
    FAKE = "fake"

    @property
    def index(self) -> int:
        return 0 if self is Label.GENUINE else 1

    @classmethod
    def from_index(cls, i: int) -> "Label":
        return cls.GENUINE if i == 0 else cls.FAKE


LABELS = (Label.GENUINE, Label.FAKE)


@dataclass(frozen=True)
class DocumentSample:
    id: str
    image_path: Path
    label: Label
    meta_class: str
    dataset_id: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("sample id must be non-empty")
        if not self.meta_class:
            raise ValueError(f"sample {self.id!r}: meta_class must be non-empty")
        if not isinstance(self.label, Label):
            object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "image_path", Path(self.image_path))


@dataclass(frozen=True, eq=False)
class DatasetIndex:
    """Immutable collection of samples with per-(meta_class, label) bookkeeping."""

    samples: tuple[DocumentSample, ...]
    meta_classes: frozenset[str] = field(init=False)
    counts: Mapping[tuple[str, Label], int] = field(init=False)

    def __post_init__(self):
        samples = tuple(self.samples)
        seen = set()
        for s in samples:
            if s.id in seen:
                raise ManifestError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
        groups: dict[tuple[str, Label], list[DocumentSample]] = {}
        for s in samples:
            groups.setdefault((s.meta_class, s.label), []).append(s)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "meta_classes", frozenset(s.meta_class for s in samples))
        object.__setattr__(self, "counts", dict(Counter((s.meta_class, s.label) for s in samples)))
        object.__setattr__(self, "_groups", {k: tuple(v) for k, v in groups.items()})
        object.__setattr__(self, "_by_id", {s.id: s for s in samples})

    def __eq__(self, other):
        if not isinstance(other, DatasetIndex):
            return NotImplemented
        return self.samples == other.samples

    def __len__(self):
        return len(self.samples)

    def group(self, meta_class: str, label: Label) -> tuple[DocumentSample, ...]:
        """Samples of one (meta_class, label) cell, in manifest order."""
        return self._groups.get((meta_class, Label(label)), ())

    def count(self, meta_class: str, label: Label) -> int:
        return self.counts.get((meta_class, Label(label)), 0)

    def get(self, sample_id: str) -> DocumentSample:
        return self._by_id[sample_id]

    def restrict(self, meta_classes: Iterable[str]) -> "DatasetIndex":
        keep = set(meta_classes)
        return DatasetIndex(tuple(s for s in self.samples if s.meta_class in keep))

    @property
    def dataset_ids(self) -> tuple[str, ...]:
        return tuple(sorted({s.dataset_id for s in self.samples}))

    def summary(self) -> dict:
        return {
            mc: {lab.value: self.count(mc, lab) for lab in LABELS}
            for mc in sorted(self.meta_classes)
        }


@dataclass(frozen=True)
class MetaSplit:
    train_meta_classes: frozenset[str]
    test_meta_classes: frozenset[str]
    repetition_index: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "train_meta_classes", frozenset(self.train_meta_classes))
        object.__setattr__(self, "test_meta_classes", frozenset(self.test_meta_classes))
        if self.train_meta_classes & self.test_meta_classes:
            raise ValueError("train and test meta-classes overlap")
        if self.repetition_index < 0:
            raise ValueError("repetition_index must be >= 0")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "repetition_index": self.repetition_index,
            "train": sorted(self.train_meta_classes),
            "test": sorted(self.test_meta_classes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetaSplit":
        return cls(frozenset(d["train"]), frozenset(d["test"]), int(d["repetition_index"]), int(d["seed"]))

    def validate_for(self, index: DatasetIndex) -> None:
        union = self.train_meta_classes | self.test_meta_classes
        if union != index.meta_classes:
            missing = sorted(index.meta_classes - union)
            extra = sorted(union - index.meta_classes)
            raise ManifestError(f"split does not partition the index meta-classes (missing={missing}, unknown={extra})")


def _parse_label(token: str, aliases: Mapping[str, str]) -> Label | None:
    token = token.strip().lower()
    token = aliases.get(token, token)
    try:
        return Label(token)
    except ValueError:
        return None


def load_manifest(path, label_aliases: Mapping[str, str] | None = None) -> DatasetIndex:
    """Read a manifest CSV into a :class:`DatasetIndex`, preserving row order.

    Errors name the offending line (the header is line 1).
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    aliases = DEFAULT_LABEL_ALIASES if label_aliases is None else label_aliases
    base = path.parent
    samples = []
    seen: dict[str, int] = {}
    with path.open("r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty file, expected header {','.join(MANIFEST_FIELDS)}")
        header = [h.strip() for h in header]
        if tuple(header) != MANIFEST_FIELDS:
            raise ManifestError(f"{path}: bad header {header}, expected {list(MANIFEST_FIELDS)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise ManifestError(f"{path}: line {line}: expected {len(MANIFEST_FIELDS)} fields, got {len(row)}")
            sid, image_path, label_tok, meta_class, dataset_id = (c.strip() for c in row)
            if not sid or not image_path or not meta_class or not dataset_id:
                raise ManifestError(f"{path}: line {line}: empty field")
            label = _parse_label(label_tok, aliases)
            if label is None:
                raise ManifestError(f"{path}: line {line}: unknown label {label_tok!r}")
            if sid in seen:
                raise ManifestError(f"{path}: line {line}: duplicate id {sid!r} (first seen on line {seen[sid]})")
            seen[sid] = line
            resolved = Path(os.path.normpath(base / image_path))
            samples.append(DocumentSample(sid, resolved, label, meta_class, dataset_id))
    return DatasetIndex(tuple(samples))


def load_manifests(paths: Sequence) -> DatasetIndex:
    """Concatenate several manifests; ids must stay unique across all of them."""
    samples = []
    for p in paths:
        samples.extend(load_manifest(p).samples)
    return DatasetIndex(tuple(samples))


def write_manifest(index: DatasetIndex, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for s in index.samples:
            rel = os.path.relpath(Path(s.image_path).resolve(), base)
            w.writerow([s.id, Path(rel).as_posix(), s.label.value, s.meta_class, s.dataset_id])
    return path


def _split_rng(seed: int, repetition_index: int, attempt: int = 0) -> np.random.Generator:
    key = [seed, repetition_index] if attempt == 0 else [seed, repetition_index, attempt]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _draw_split(names: list[str], n_train: int, seed: int, repetition_index: int, attempt: int = 0) -> MetaSplit:
    order = _split_rng(seed, repetition_index, attempt).permutation(len(names))
    shuffled = [names[i] for i in order]
    return MetaSplit(frozenset(shuffled[:n_train]), frozenset(shuffled[n_train:]), repetition_index, seed)


def _check_n_train(index: DatasetIndex, n_train: int) -> None:
    n = len(index.meta_classes)
    if not 1 <= n_train < n:
        raise ValueError(f"n_train must satisfy 1 <= n_train < {n} (number of meta-classes), got {n_train}")


def split_meta_classes(index: DatasetIndex, n_train: int, seed: int, repetition_index: int = 0) -> MetaSplit:
    """Shuffle the sorted meta-class names with a Philox stream keyed by
    ``(seed, repetition_index)`` and take the first ``n_train`` for meta-train."""
    _check_n_train(index, n_train)
    return _draw_split(sorted(index.meta_classes), n_train, seed, repetition_index)


def repetition_plan(index: DatasetIndex, repetitions: int, n_train: int, seed: int) -> list[MetaSplit]:
    """One split per repetition.

    A draw that repeats an earlier split is redrawn (sub-keyed by an attempt
    counter) until every distinct partition has been used once; only then may
    splits recur.
    """
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    _check_n_train(index, n_train)
    names = sorted(index.meta_classes)
    n_distinct = math.comb(len(names), n_train)
    used: set[frozenset[str]] = set()
    plan = []
    for i in range(repetitions):
        if len(used) >= n_distinct:
            used.clear()
        attempt = 0
        split = _draw_split(names, n_train, seed, i, attempt)
        while split.train_meta_classes in used:
            attempt += 1
            split = _draw_split(names, n_train, seed, i, attempt)
        used.add(split.train_meta_classes)
        plan.append(split)
    return plan


def write_split_plan(plan: Sequence[MetaSplit], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([s.to_dict() for s in plan], indent=2) + "\n", encoding="utf-8")
    return path


def load_image(sample: DocumentSample) -> np.ndarray:
    """Decode a sample's image to an (H, W, 3) uint8 array.

    Grayscale is replicated to three channels and alpha is dropped.
    """
    try:
        with Image.open(sample.image_path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                im = Image.fromarray(np.clip(arr / 256.0, 0, 255).astype(np.uint8), mode="L")
            if im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.array(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError, SyntaxError) as e:
        raise ImageDecodeError(f"sample {sample.id!r}: cannot decode {sample.image_path}: {e}") from e
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageDecodeError(f"sample {sample.id!r}: unexpected image shape {arr.shape}")
    return arr
