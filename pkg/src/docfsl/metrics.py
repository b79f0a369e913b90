"""Accuracy and ROC AUC. Fake is the positive class; higher scores mean more fake."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import Label


def accuracy(predictions: Sequence[Label], truths: Sequence[Label]) -> float:
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} truths")
    if not truths:
        raise ValueError("accuracy of an empty set is undefined")
    correct = sum(Label(p) is Label(t) for p, t in zip(predictions, truths))
    return correct / len(truths)


def auc(scores: Sequence[float], truths: Sequence[Label]) -> float:
    """P(score of a random fake > score of a random genuine), ties counting 1/2.

    Uses the rank-sum form of the Mann-Whitney U statistic with average ranks.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(truths):
        raise ValueError(f"{len(scores)} scores for {len(truths)} truths")
    pos = np.array([Label(t) is Label.FAKE for t in truths], dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both genuine and fake samples")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
