"""Two-way episodic few-shot machinery: episodes, prototypes, distance head, loss.

Class index 0 is genuine and 1 is fake throughout. Queries are scored by
squared Euclidean distance to each class; probabilities are the softmax of the
negated distances and equal distances resolve to genuine.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .dataset import LABELS, DatasetIndex, DocumentSample, Label
from .errors import InsufficientSamplesError

EPS = 1e-12
HEADS = ("prototype", "nearest_support")


class Mode(str, Enum):
    CONDITIONAL = "conditional"
    UNCONDITIONAL = "unconditional"

    @classmethod
    def parse(cls, token) -> "Mode":
        if isinstance(token, Mode):
            return token
        t = str(token).strip().lower().replace("_", "-")
        if t in ("conditional", "c-fsl", "cfsl", "c"):
            return cls.CONDITIONAL
        if t in ("unconditional", "u-fsl", "ufsl", "u"):
            return cls.UNCONDITIONAL
        raise ValueError(f"unknown few-shot mode {token!r}")

    @property
    def short(self) -> str:
        return "C-FSL" if self is Mode.CONDITIONAL else "U-FSL"


@dataclass(frozen=True)
class Episode:
    mode: Mode
    support: tuple[DocumentSample, ...]
    query: tuple[DocumentSample, ...]
    meta_class: str | None
    k: int
    q: int
    rng_tag: str = ""

    @property
    def support_labels(self) -> tuple[Label, ...]:
        return tuple(s.label for s in self.support)

    @property
    def query_labels(self) -> tuple[Label, ...]:
        return tuple(s.label for s in self.query)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "meta_class": self.meta_class,
            "k": self.k,
            "q": self.q,
            "support": [{"id": s.id, "label": s.label.value} for s in self.support],
            "query": [{"id": s.id, "label": s.label.value} for s in self.query],
            "rng_state": self.rng_tag,
        }


def _rng_tag(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha1(state.encode()).hexdigest()[:12]


def sample_episode(index: DatasetIndex, split_side: Iterable[str], mode, k: int, q: int,
                   rng: np.random.Generator) -> Episode:
    """Draw one 2-way episode with ``k`` support and ``q`` query samples per label.

    Conditional episodes come from a single meta-class picked uniformly among
    those with enough samples; the pick consumes no randomness when only one
    meta-class qualifies, so a single-meta-class side yields the same draws in
    both modes.
    """
    mode = Mode.parse(mode)
    if k < 1 or q < 1:
        raise ValueError(f"k and q must be >= 1, got k={k}, q={q}")
    side = sorted(set(split_side))
    need = k + q
    if not side:
        raise InsufficientSamplesError("episode requested over an empty set of meta-classes")
    tag = _rng_tag(rng)
    if mode is Mode.CONDITIONAL:
        eligible = [mc for mc in side if all(index.count(mc, lab) >= need for lab in LABELS)]
        if not eligible:
            mc = max(side, key=lambda c: min(index.count(c, lab) for lab in LABELS))
            worst = min(LABELS, key=lambda lab: index.count(mc, lab))
            raise InsufficientSamplesError(
                f"no meta-class has {need} samples of each label (k={k}, q={q}); best candidate "
                f"{mc!r} has only {index.count(mc, worst)} {worst.value}")
        meta_class = eligible[int(rng.integers(len(eligible)))] if len(eligible) > 1 else eligible[0]
        groups = {lab: index.group(meta_class, lab) for lab in LABELS}
    else:
        meta_class = None
        groups = {lab: tuple(s for mc in side for s in index.group(mc, lab)) for lab in LABELS}
        # restore manifest order so the pool matches the conditional pool for one meta-class
        order = {s.id: i for i, s in enumerate(index.samples)}
        groups = {lab: tuple(sorted(g, key=lambda s: order[s.id])) for lab, g in groups.items()}
        for lab in LABELS:
            if len(groups[lab]) < need:
                raise InsufficientSamplesError(
                    f"meta-classes {side} hold only {len(groups[lab])} {lab.value} samples, need {need}")
    support_blocks, query_blocks = {}, {}
    for lab in LABELS:
        pool = groups[lab]
        pick = rng.choice(len(pool), size=need, replace=False)
        support_blocks[lab] = tuple(pool[i] for i in pick[:k])
        query_blocks[lab] = tuple(pool[i] for i in pick[k:])
    block_order = [LABELS[i] for i in rng.permutation(2)]
    support = tuple(s for lab in block_order for s in support_blocks[lab])
    query = tuple(s for lab in block_order for s in query_blocks[lab])
    return Episode(mode, support, query, meta_class, k, q, tag)


@dataclass(frozen=True, eq=False)
class PrototypePair:
    genuine_prototype: np.ndarray
    fake_prototype: np.ndarray
    genuine_support: np.ndarray | None = None
    fake_support: np.ndarray | None = None

    def support_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        if self.genuine_support is None or self.fake_support is None:
            raise ValueError("this prototype pair carries no support vectors")
        s = np.concatenate([self.genuine_support, self.fake_support])
        y = np.array([0] * len(self.genuine_support) + [1] * len(self.fake_support))
        return s, y


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    distances: np.ndarray
    probabilities: np.ndarray
    predictions: tuple[Label, ...]
    loss: float | None = None


def compute_prototypes(support_embeddings: Sequence[tuple[Sequence[float], Label]]) -> PrototypePair:
    by_label: dict[Label, list[np.ndarray]] = {lab: [] for lab in LABELS}
    for vec, lab in support_embeddings:
        by_label[Label(lab)].append(np.asarray(vec, dtype=np.float64))
    for lab in LABELS:
        if not by_label[lab]:
            raise ValueError(f"no {lab.value} support embeddings")
    g, f = (np.stack(by_label[lab]) for lab in LABELS)
    return PrototypePair(g.mean(axis=0), f.mean(axis=0), g, f)


# -- differentiable core ---------------------------------------------------

def class_distances(query: torch.Tensor, support: torch.Tensor, support_labels: torch.Tensor,
                    head: str = "prototype") -> torch.Tensor:
    """(Q, 2) squared distances of each query to the genuine and fake classes."""
    cols = []
    for c in (0, 1):
        members = support[support_labels == c]
        if len(members) == 0:
            raise ValueError(f"no {LABELS[c].value} support embeddings")
        if head == "prototype":
            cols.append(((query - members.mean(dim=0)) ** 2).sum(dim=1))
        elif head == "nearest_support":
            cols.append(((query[:, None, :] - members[None]) ** 2).sum(dim=2).min(dim=1).values)
        else:
            raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
    return torch.stack(cols, dim=1)


def distance_loss(distances: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of softmax(-distances), probabilities clamped to [EPS, 1-EPS]."""
    p = torch.softmax(-distances, dim=1)
    p_true = p.gather(1, labels[:, None]).squeeze(1)
    return -torch.log(p_true.clamp(EPS, 1 - EPS)).mean()


def _predict(d: np.ndarray) -> tuple[Label, ...]:
    return tuple(Label.FAKE if dg_df[1] < dg_df[0] else Label.GENUINE for dg_df in d)


def _pair_distances(pair: PrototypePair, queries: np.ndarray, head: str) -> np.ndarray:
    q = torch.as_tensor(queries, dtype=torch.float64)
    if head == "prototype":
        s = torch.as_tensor(np.stack([pair.genuine_prototype, pair.fake_prototype]), dtype=torch.float64)
        y = torch.tensor([0, 1])
    else:
        s_np, y_np = pair.support_matrix()
        s, y = torch.as_tensor(s_np, dtype=torch.float64), torch.as_tensor(y_np)
    return class_distances(q, s, y, head).numpy()


def classify_queries(prototypes: PrototypePair | None, queries, mode=Mode.UNCONDITIONAL,
                     per_meta_prototypes: Mapping[str, PrototypePair] | None = None,
                     query_meta_classes: Sequence[str] | None = None,
                     head: str = "prototype") -> EpisodeResult:
    """Score queries against the genuine/fake classes.

    Unconditional mode uses ``prototypes``. Conditional mode scores each query
    against the pair of its own meta-class from ``per_meta_prototypes``
    (falling back to ``prototypes`` when no map is given, i.e. a
    single-meta-class episode).
    """
    mode = Mode.parse(mode)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if mode is Mode.CONDITIONAL and per_meta_prototypes is not None:
        if query_meta_classes is None or len(query_meta_classes) != len(queries):
            raise ValueError("conditional classification needs one meta-class per query")
        d = np.empty((len(queries), 2))
        for mc in dict.fromkeys(query_meta_classes):
            if mc not in per_meta_prototypes:
                raise KeyError(f"no prototypes for meta-class {mc!r}")
            rows = [i for i, x in enumerate(query_meta_classes) if x == mc]
            d[rows] = _pair_distances(per_meta_prototypes[mc], queries[rows], head)
    else:
        if prototypes is None:
            raise ValueError("prototypes are required")
        d = _pair_distances(prototypes, queries, head)
    p = torch.softmax(-torch.as_tensor(d), dim=1).numpy()
    return EpisodeResult(d, p, _predict(d))


def episode_loss(result: EpisodeResult, true_labels: Sequence[Label]) -> float:
    if len(true_labels) != len(result.probabilities):
        raise ValueError(f"{len(true_labels)} labels for {len(result.probabilities)} queries")
    idx = np.array([Label(l).index for l in true_labels])
    p_true = np.clip(result.probabilities[np.arange(len(idx)), idx], EPS, 1 - EPS)
    return float(-np.log(p_true).mean())
