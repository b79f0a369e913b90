"""Episodic training, evaluation and repetition aggregation.

Every random stream derives from ``SeedSequence([config.seed, repetition_index,
stream])`` so one repetition is fully determined by its config and split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import FeatureExtractor, load_backbone
from .config import TrainConfig
from .dataset import DatasetIndex, DocumentSample, Label, MetaSplit
from .encoding import DocumentEncoder
from .errors import CompatibilityError, ManifestError, NumericError
from .fsl import Episode, Mode, class_distances, distance_loss, sample_episode
from .metrics import accuracy, auc
from .recurrent import (
    RecurrentUnit,
    init_ru,
    pad_sequences,
    read_tensor_file,
    ru_from_state,
    ru_state,
    write_tensor_file,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA = "docfsl.report/1"
HISTORY_SCHEMA = "docfsl.history/1"

TRAIN_STREAM, EVAL_STREAM, INIT_STREAM = 1, 2, 3

__all__ = [
    "TrainConfig", "TrainedModel", "EvalReport", "RunReport", "History",
    "train_run", "evaluate_run", "aggregate_repetitions", "build_extractor",
    "build_encoder", "save_model", "load_model",
]


def stream_rng(seed: int, repetition_index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, repetition_index, stream])))


def derived_seed(seed: int, repetition_index: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, repetition_index, stream]).generate_state(1)[0])


@dataclass
class TrainedModel:
    ru: RecurrentUnit
    extractor: FeatureExtractor
    head: str = "prototype"
    backbone_module: torch.nn.Module | None = None
    config: TrainConfig | None = None

    def parameters(self):
        yield from self.ru.parameters()
        if self.backbone_module is not None:
            yield from self.backbone_module.parameters()

    def checksum(self) -> str:
        import hashlib

        d = hashlib.sha256(self.ru.checksum().encode())
        if self.backbone_module is not None:
            for _, v in sorted(self.backbone_module.state_dict().items()):
                d.update(v.detach().cpu().numpy().tobytes())
        return d.hexdigest()

    def embed(self, samples: Sequence[DocumentSample], encoder: DocumentEncoder) -> torch.Tensor:
        dtype = next(self.ru.parameters()).dtype
        if self.backbone_module is None:
            seqs = [fs.features for fs in encoder.features_many(samples)]
            x, lengths = pad_sequences(seqs, self.ru.input_dim, dtype)
        else:
            rows = []
            for s in samples:
                pre = torch.as_tensor(encoder.head_inputs(s), dtype=dtype)
                rows.append(self.backbone_module(pre))
            lengths = torch.as_tensor([len(r) for r in rows], dtype=torch.long)
            x = torch.nn.utils.rnn.pad_sequence(rows, batch_first=True)
            if x.shape[2] != self.ru.input_dim:
                raise CompatibilityError(f"backbone width {x.shape[2]} != RU input_dim {self.ru.input_dim}")
        return self.ru(x, lengths)

    def episode_distances(self, episode: Episode, encoder: DocumentEncoder) -> tuple[torch.Tensor, torch.Tensor]:
        samples = episode.support + episode.query
        emb = self.embed(samples, encoder)
        n_s = len(episode.support)
        s_lab = torch.as_tensor([s.label.index for s in episode.support])
        q_lab = torch.as_tensor([s.label.index for s in episode.query])
        return class_distances(emb[n_s:], emb[:n_s], s_lab, self.head), q_lab


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    n_queries: int
    per_episode: list[tuple[float, float]] = field(default_factory=list)

    @property
    def mean_episode_accuracy(self) -> float:
        return float(np.mean([a for a, _ in self.per_episode])) if self.per_episode else self.accuracy

    @property
    def mean_loss(self) -> float:
        return float(np.mean([l for _, l in self.per_episode])) if self.per_episode else float("nan")

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "n_queries": self.n_queries,
            "mean_episode_accuracy": self.mean_episode_accuracy,
            "mean_loss": self.mean_loss,
            "per_episode": [{"accuracy": a, "loss": l} for a, l in self.per_episode],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(float(d["accuracy"]), float(d["auc"]), int(d["n_queries"]),
                   [(float(e["accuracy"]), float(e["loss"])) for e in d.get("per_episode", [])])


@dataclass
class RunReport:
    per_repetition: list[EvalReport]
    mean_accuracy: float
    std_accuracy: float
    mean_auc: float
    std_auc: float

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
            "per_repetition": [r.to_dict() for r in self.per_repetition],
        }


@dataclass
class History:
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, EvalReport]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": HISTORY_SCHEMA,
            "losses": self.losses,
            "evals": [{"episode": e, **r.to_dict()} for e, r in self.evals],
        }


def aggregate_repetitions(reports: Sequence[EvalReport]) -> RunReport:
    if not reports:
        raise ValueError("no reports to aggregate")
    acc = np.array([r.accuracy for r in reports])
    au = np.array([r.auc for r in reports])
    return RunReport(list(reports), float(acc.mean()), float(acc.std()), float(au.mean()), float(au.std()))


def build_extractor(config: TrainConfig) -> FeatureExtractor:
    return load_backbone(config.backbone_file, config.backbone, frozen=config.frozen,
                         feature_dim=config.effective_feature_dim if config.backbone == "mock" else None,
                         seed=config.backbone_seed)


def build_encoder(config: TrainConfig, extractor: FeatureExtractor | None = None, cache_dir=None) -> DocumentEncoder:
    return DocumentEncoder(extractor or build_extractor(config), config.patch_size, config.rescale,
                           config.ref_size, cache_dir)


def _check_side(index: DatasetIndex, side) -> None:
    missing = sorted(set(side) - index.meta_classes)
    if missing:
        raise ManifestError(f"meta-classes {missing} are not in the dataset")


def evaluate_run(model: TrainedModel, index: DatasetIndex, split_side, config: TrainConfig,
                 encoder: DocumentEncoder | None = None, repetition_index: int = 0,
                 episode_log: list | None = None) -> EvalReport:
    """Run ``config.eval_episodes`` episodes on ``split_side`` without updates.

    Scores are p(fake); accuracy and AUC pool every query of every episode.
    Sampled episodes are appended to ``episode_log`` (as dicts) when given.
    """
    _check_side(index, split_side)
    encoder = encoder or build_encoder(config, model.extractor)
    rng = stream_rng(config.seed, repetition_index, EVAL_STREAM)
    scores: list[float] = []
    preds: list[Label] = []
    truths: list[Label] = []
    per_episode = []
    with torch.no_grad():
        for _ in range(config.eval_episodes):
            ep = sample_episode(index, split_side, config.mode, config.k, config.q, rng)
            if episode_log is not None:
                episode_log.append(ep.to_dict())
            d, y = model.episode_distances(ep, encoder)
            loss = float(distance_loss(d, y))
            p_fake = torch.softmax(-d, dim=1)[:, 1].tolist()
            ep_pred = [Label.FAKE if df < dg else Label.GENUINE for dg, df in d.tolist()]
            ep_true = list(ep.query_labels)
            per_episode.append((accuracy(ep_pred, ep_true), loss))
            scores.extend(p_fake)
            preds.extend(ep_pred)
            truths.extend(ep_true)
    return EvalReport(accuracy(preds, truths), auc(scores, truths), len(truths), per_episode)


def init_model(config: TrainConfig, extractor: FeatureExtractor, repetition_index: int = 0) -> TrainedModel:
    ru = init_ru(config.ru_kind, extractor.feature_dim, config.hidden_dim,
                 seed=derived_seed(config.seed, repetition_index, INIT_STREAM))
    module = None
    if not config.frozen:
        module = extractor.torch_head(next(ru.parameters()).dtype)
    return TrainedModel(ru, extractor, config.head, module, config)


def train_run(config: TrainConfig, index: DatasetIndex, split: MetaSplit,
              encoder: DocumentEncoder | None = None,
              on_eval: Callable[[int, TrainedModel, EvalReport], None] | None = None) -> tuple[TrainedModel, History]:
    """Episodic training on the split's meta-train side.

    Every ``eval_every`` episodes, ``eval_episodes`` episodes are evaluated on
    the meta-test side; ``on_eval`` then sees the episode number, model and report.
    """
    config.validate()
    _check_side(index, split.train_meta_classes | split.test_meta_classes)
    encoder = encoder or build_encoder(config)
    rep = split.repetition_index
    model = init_model(config, encoder.extractor, rep)
    optimizer = torch.optim.Adam(list(model.parameters()), lr=config.lr)
    rng = stream_rng(config.seed, rep, TRAIN_STREAM)
    train_side = sorted(split.train_meta_classes)
    history = History()
    for episode_no in range(1, config.episodes + 1):
        ep = sample_episode(index, train_side, config.mode, config.k, config.q, rng)
        optimizer.zero_grad()
        d, y = model.episode_distances(ep, encoder)
        loss = distance_loss(d, y)
        if not torch.isfinite(loss):
            ids = [s.id for s in ep.support + ep.query]
            raise NumericError(f"non-finite loss at episode {episode_no} (repetition {rep}); samples {ids}")
        loss.backward()
        optimizer.step()
        history.losses.append(loss.item())
        if episode_no % config.eval_every == 0:
            report = evaluate_run(model, index, sorted(split.test_meta_classes), config, encoder, rep)
            history.evals.append((episode_no, report))
            log.info("rep %d episode %d: loss %.4f acc %.4f auc %.4f", rep, episode_no,
                     history.losses[-1], report.accuracy, report.auc)
            if on_eval is not None:
                on_eval(episode_no, model, report)
    return model, history


def final_report(model: TrainedModel, history: History, index: DatasetIndex, split: MetaSplit,
                 config: TrainConfig, encoder: DocumentEncoder | None = None) -> EvalReport:
    """Meta-test report after training; reuses the last periodic evaluation when it ran at the end."""
    if history.evals and history.evals[-1][0] == config.episodes:
        return history.evals[-1][1]
    return evaluate_run(model, index, sorted(split.test_meta_classes), config, encoder, split.repetition_index)


# -- model files -----------------------------------------------------------

def save_model(model: TrainedModel, path) -> Path:
    tensors = ru_state(model.ru)
    if model.backbone_module is not None:
        for k, v in model.backbone_module.state_dict().items():
            tensors[f"backbone.{k}"] = v.detach().cpu().numpy()
    header = {
        "ru": model.ru.describe(),
        "backbone": model.extractor.describe(),
        "fine_tuned": model.backbone_module is not None,
        "head": model.head,
        "config": model.config.to_dict() if model.config is not None else None,
    }
    return write_tensor_file(path, header, tensors)


def load_model(path, extractor: FeatureExtractor | None = None) -> TrainedModel:
    head, tensors = read_tensor_file(path)
    ru = ru_from_state(head["ru"], tensors)
    config = TrainConfig.from_dict(head["config"]) if head.get("config") else None
    if extractor is None:
        bb = head["backbone"]
        extractor = load_backbone(bb.get("file"), bb["kind"], feature_dim=bb.get("feature_dim"),
                                  seed=bb.get("seed", 0))
    if extractor.feature_dim != ru.input_dim:
        raise CompatibilityError(
            f"backbone {extractor.kind} yields {extractor.feature_dim}-d features but the checkpoint's "
            f"recurrent unit expects {ru.input_dim}")
    module = None
    if head.get("fine_tuned"):
        module = extractor.torch_head(next(ru.parameters()).dtype)
        state = {k[len("backbone."):]: torch.as_tensor(v) for k, v in tensors.items() if k.startswith("backbone.")}
        try:
            module.load_state_dict(state)
        except RuntimeError as e:
            raise CompatibilityError(f"fine-tuned backbone weights do not fit {extractor.kind}: {e}") from e
    return TrainedModel(ru, extractor, head.get("head", "prototype"), module, config)
