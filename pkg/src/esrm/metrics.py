"""Accuracy-matrix metrics and entropy diagnostics.

``A[t][j]`` is the test accuracy on task ``j`` after training task ``t``.
Relative forgetting uses the normalised max-over-time drop::

    RF = mean_{j < T-1} (max_{t >= j} A[t][j] - A[T-1][j]) / max_{t >= j} A[t][j]

with a task's term taken as 0 when its best accuracy is 0.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .data import Sample, samples_to_tensor
from .model import PROJECTION_DIM, LearnerModel, embed, inference_mode, predict_entropy

HISTOGRAM_BINS = 50


class AccuracyMatrix:
    """Square matrix of per-task accuracies; entries with ``j > t`` are pre-exposure."""

    def __init__(self, values):
        a = np.array(values, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"accuracy matrix must be square, got shape {a.shape}")
        finite = a[np.isfinite(a)]
        if finite.size and (finite.min() < 0 or finite.max() > 1):
            raise ValueError("accuracies must lie in [0, 1]")
        self.values = a

    @classmethod
    def empty(cls, n_tasks: int) -> "AccuracyMatrix":
        return cls(np.full((n_tasks, n_tasks), np.nan))

    @property
    def n_tasks(self) -> int:
        return self.values.shape[0]

    def pre_exposure_mask(self) -> np.ndarray:
        return np.triu(np.ones_like(self.values, dtype=bool), k=1)

    def tolist(self) -> list[list[float | None]]:
        return [[None if math.isnan(v) else float(v) for v in row] for row in self.values]

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and np.array_equal(self.values, other.values, equal_nan=True)

    def __repr__(self):
        return f"AccuracyMatrix({self.tolist()})"


def _as_array(A) -> np.ndarray:
    return A.values if isinstance(A, AccuracyMatrix) else np.asarray(A, dtype=np.float64)


def final_average_accuracy(A) -> float:
    a = _as_array(A)
    if a.shape[0] < 1:
        raise ValueError("empty accuracy matrix")
    last = a[-1]
    if np.isnan(last).any():
        raise ValueError("last row of the accuracy matrix is incomplete")
    return float(last.mean())


def learning_accuracy(A) -> float:
    a = _as_array(A)
    diag = np.diag(a)
    if diag.size == 0 or np.isnan(diag).any():
        raise ValueError("accuracy matrix diagonal is incomplete")
    return float(diag.mean())


def relative_forgetting(A) -> float:
    a = _as_array(A)
    T = a.shape[0]
    if T < 2:
        raise ValueError("relative forgetting needs at least two tasks")
    terms = []
    for j in range(T - 1):
        col = a[j:, j]
        if np.isnan(col).any():
            raise ValueError(f"accuracy matrix column {j} is incomplete")
        best = col.max()
        terms.append(0.0 if best == 0 else (best - a[-1, j]) / best)
    return float(np.mean(terms))


def synthetic_roc_auc(entropies, is_synthetic) -> float:
    """AUC for ranking real samples (positives) above synthetic ones by entropy.

    Computed as the Mann-Whitney statistic with average ranks, so ties count 0.5.
    """
    scores = np.asarray(entropies, dtype=np.float64)
    syn = np.asarray(is_synthetic, dtype=bool)
    n_pos, n_neg = int((~syn).sum()), int(syn.sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both real and synthetic samples")
    ranks = rankdata(scores)
    u = ranks[~syn].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(entropies, is_synthetic) -> tuple[np.ndarray, np.ndarray]:
    """False/true positive rates (real = positive) over all distinct entropy thresholds."""
    scores = np.asarray(entropies, dtype=np.float64)
    pos = ~np.asarray(is_synthetic, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], pos[order]
    tp, fp = np.cumsum(p), np.cumsum(~p)
    # keep the last index of each run of equal scores
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tp[cut] / max(pos.sum(), 1)]
    fpr = np.r_[0.0, fp[cut] / max((~pos).sum(), 1)]
    return fpr, tpr


def dataset_entropies(model: LearnerModel, samples: Sequence[Sample], batch_size: int = 256) -> np.ndarray:
    if not samples:
        return np.empty(0)
    return np.concatenate(
        [
            predict_entropy(model, samples_to_tensor(samples[i : i + batch_size]), batch_size).numpy()
            for i in range(0, len(samples), batch_size)
        ]
    ).astype(np.float64)


def entropy_histogram(model: LearnerModel, samples: Sequence[Sample], bins: int = HISTOGRAM_BINS) -> dict:
    """Entropy histograms over ``[0, ln C]`` for real and synthetic samples separately."""
    ents = dataset_entropies(model, samples)
    return histogram_from_entropies(ents, [s.provenance.is_synthetic for s in samples], model.num_classes, bins)


def histogram_from_entropies(entropies, is_synthetic, num_classes: int, bins: int = HISTOGRAM_BINS) -> dict:
    ents = np.asarray(entropies, dtype=np.float64)
    syn = np.asarray(is_synthetic, dtype=bool)
    edges = np.linspace(0.0, math.log(num_classes), bins + 1)
    real_counts, _ = np.histogram(np.clip(ents[~syn], edges[0], edges[-1]), bins=edges)
    syn_counts, _ = np.histogram(np.clip(ents[syn], edges[0], edges[-1]), bins=edges)
    return {"edges": edges.tolist(), "real": real_counts.tolist(), "synthetic": syn_counts.tolist()}


def evaluate_accuracy(model: LearnerModel, samples: Sequence[Sample], batch_size: int = 256) -> float:
    """Top-1 accuracy over all classes, inference mode, no augmentation."""
    if not samples:
        return float("nan")
    correct = 0
    with inference_mode(model):
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            pred = model(samples_to_tensor(chunk)).argmax(dim=1)
            correct += int((pred == torch.tensor([s.label for s in chunk])).sum())
    return correct / len(samples)


def export_embeddings(model: LearnerModel, buffer, path: str | Path, class_filter=None) -> int:
    """Write one CSV row (id, label, provenance, source_tag, z_0..z_127) per matching slot.

    ``class_filter`` is a collection of labels or None for all slots.  Rows are
    ordered by sample id.  Returns the number of rows written.
    """
    wanted = None if class_filter is None else set(int(c) for c in class_filter)
    chosen = sorted(
        (s for s in buffer.samples if wanted is None or s.label in wanted),
        key=lambda s: s.id,
    )
    header = ["id", "label", "provenance", "source_tag"] + [f"z{k}" for k in range(PROJECTION_DIM)]
    rows = []
    if chosen:
        with inference_mode(model):
            z = torch.cat([embed(model, samples_to_tensor(chosen[i : i + 256])) for i in range(0, len(chosen), 256)])
        for s, vec in zip(chosen, z.tolist()):
            rows.append([s.id, s.label, s.provenance.kind, s.provenance.source_tag or ""] + [f"{v:.7g}" for v in vec])
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return len(rows)
