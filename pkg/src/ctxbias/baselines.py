"""Dataset and loss-weight transforms behind the strong baselines."""

from __future__ import annotations

import numpy as np

from .data import DataError, LabeledDataset, pair_masks
from .losses import class_balanced_weight

WEIGHT_METHODS = ("weighted", "negative_penalty", "class_balancing")
DATA_METHODS = ("remove_labels", "remove_images", "split_biased")


def _check_pairs(dataset: LabeledDataset, pairs):
    m = dataset.num_categories
    for b, c in pairs:
        if not (0 <= b < m and 0 <= c < m) or b == c:
            raise DataError(f"pair ({b}, {c}) references a missing category")


def remove_cooccur_labels(dataset: LabeledDataset, pairs) -> LabeledDataset:
    """Drop the ``c`` label wherever ``b`` and ``c`` co-occur."""
    _check_pairs(dataset, pairs)
    labels = dataset.labels.copy()
    for b, c in pairs:
        co, _, _ = pair_masks(dataset.labels, b, c)
        labels[co, c] = 0
    return dataset.with_labels(labels)


def cooccur_rows(labels: np.ndarray, pairs) -> np.ndarray:
    flagged = np.zeros(len(labels), bool)
    for b, c in pairs:
        flagged |= pair_masks(labels, b, c)[0]
    return flagged


def remove_cooccur_images(dataset: LabeledDataset, pairs) -> LabeledDataset:
    _check_pairs(dataset, pairs)
    keep = np.flatnonzero(~cooccur_rows(dataset.labels, pairs))
    return dataset.subset(keep)


def split_biased_labels(dataset: LabeledDataset, pairs) -> LabeledDataset:
    """Column ``b`` becomes ``b \\ c``; one new column ``b & c`` per pair."""
    _check_pairs(dataset, pairs)
    bs = [b for b, _ in pairs]
    if len(set(bs)) != len(bs):
        raise DataError("split-biased needs one pair per biased category")
    names = list(dataset.category_names)
    labels = dataset.labels.copy()
    extra = []
    for b, c in pairs:
        co, ex, _ = pair_masks(dataset.labels, b, c)
        labels[:, b] = ex
        extra.append(co.astype(np.uint8))
        names.append(f"{names[b]}&{names[c]}")
    labels = np.concatenate([labels, np.stack(extra, axis=1)], axis=1) if extra else labels
    return dataset.with_labels(labels, names)


def merge_split_scores(scores: np.ndarray, pairs, num_categories: int,
                       mode: str = "max") -> np.ndarray:
    """Fold the ``b & c`` columns back into ``b``.

    "max" keeps the larger of the two probabilities; "sum" ranks by their
    sum (halved so results stay in [0, 1]).
    """
    out = np.array(scores[:, :num_categories], dtype=np.float64)
    for k, (b, _) in enumerate(pairs):
        other = scores[:, num_categories + k]
        if mode == "max":
            out[:, b] = np.maximum(out[:, b], other)
        elif mode == "sum":
            out[:, b] = 0.5 * (out[:, b] + other)
        else:
            raise ValueError(f"unknown combine mode {mode!r}")
    return out


class LossWeighter:
    """Maps a batch of label rows to per-sample, per-class loss weights."""

    def __init__(self, method: str, pairs, train_labels: np.ndarray | None = None,
                 factor: float = 10.0, beta: float = 0.99):
        if method not in WEIGHT_METHODS:
            raise ValueError(f"{method!r} is not a loss-weighting method")
        self.method = method
        self.pairs = [(int(b), int(c)) for b, c in pairs]
        self.factor = factor
        self.beta = beta
        self.group_weights = {}
        if method == "class_balancing":
            if train_labels is None:
                raise ValueError("class balancing needs the training labels")
            for b, c in self.pairs:
                co, ex, ot = pair_masks(train_labels, b, c)
                self.group_weights[(b, c)] = tuple(
                    class_balanced_weight(int(m.sum()), beta) for m in (co, ex, ot))

    def __call__(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        w = np.ones(labels.shape, dtype=np.float64)
        for b, c in self.pairs:
            co, ex, ot = pair_masks(labels, b, c)
            if self.method == "weighted":
                w[ex, b] = self.factor
            elif self.method == "negative_penalty":
                w[ex, c] = self.factor
            else:
                g_co, g_ex, g_ot = self.group_weights[(b, c)]
                w[co, b] = g_co
                w[ex, b] = g_ex
                w[ot, b] = g_ot
        return w


def apply_baseline_transform(method: str, dataset: LabeledDataset, pairs, **kw):
    """Return ``(dataset, weighter)`` for a baseline; one of them is unchanged/None."""
    pairs = [(int(b), int(c)) for b, c in pairs]
    _check_pairs(dataset, pairs)
    if method == "remove_labels":
        return remove_cooccur_labels(dataset, pairs), None
    if method == "remove_images":
        return remove_cooccur_images(dataset, pairs), None
    if method == "split_biased":
        return split_biased_labels(dataset, pairs), None
    if method in WEIGHT_METHODS:
        return dataset, LossWeighter(method, pairs, dataset.labels, **kw)
    raise ValueError(f"{method!r} is not a baseline transform")
