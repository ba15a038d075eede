from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np
from sklearn.metrics import f1_score

from .model import LabeledBatch, MultiModalModel


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ValueError("empty split")
    return float(np.mean(y_true == np.asarray(y_pred)))


def macro_f1(y_true, y_pred, n_classes: int) -> float:
    """Unweighted mean of per-class F1; undefined precision/recall count as 0.

    Every class in ``range(n_classes)`` contributes, including classes
    that are neither predicted nor present.
    """
    return float(f1_score(y_true, y_pred, labels=np.arange(n_classes), average="macro",
                          zero_division=0))


@dataclass
class Evaluation:
    accuracy: float
    macro_f1: float
    branch_accuracy: List[float]


def evaluate(model: MultiModalModel, batch: LabeledBatch) -> Evaluation:
    if len(batch) == 0:
        raise ValueError("cannot evaluate an empty split")
    truth = batch.labels
    pred = model.predict_joint(batch.xs).argmax(axis=1)
    branches = [
        accuracy(truth, model.predict_unimodal(batch.xs, k).argmax(axis=1))
        for k in range(model.n_modalities)
    ]
    return Evaluation(accuracy(truth, pred), macro_f1(truth, pred, model.spec.n_classes), branches)
