"""Bias ratio between category pairs and top-K biased pair selection."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .data import DataError, LabeledDataset, PairImageSets, image_sets_for_pair

log = logging.getLogger(__name__)


class InsufficientPairsWarning(UserWarning):
    """Fewer eligible categories than the requested K."""


@dataclass
class PredictionMatrix:
    """N x M probabilities aligned row-for-row with ``ids``."""

    scores: np.ndarray
    ids: list[str]
    category_names: list[str] | None = None

    def __post_init__(self):
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        self.ids = [str(i) for i in self.ids]
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.ids):
            raise ValueError(f"scores shape {self.scores.shape} does not match {len(self.ids)} ids")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores contain non-finite entries")
        if self.scores.size and (self.scores.min() < 0 or self.scores.max() > 1):
            raise ValueError("scores must lie in [0, 1]")

    def check_aligned(self, dataset: LabeledDataset):
        if self.ids != dataset.ids or self.scores.shape[1] != dataset.num_categories:
            raise ValueError("prediction matrix is not aligned with the dataset")

    def save(self, path):
        np.savez(path, scores=self.scores, ids=np.array(self.ids),
                 category_names=np.array(self.category_names or []))

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            names = [str(n) for n in z["category_names"]] or None
            return cls(z["scores"], [str(i) for i in z["ids"]], names)


@dataclass(frozen=True)
class BiasedPair:
    b: int
    c: int
    bias_value: float
    sets: PairImageSets | None = None

    def to_json(self, names=None) -> dict:
        out = {"b": self.b, "c": self.c, "bias": self.bias_value}
        if names is not None:
            out["b_name"], out["c_name"] = names[self.b], names[self.c]
        if self.sets is not None:
            out["counts"] = self.sets.counts()
        return out


def mean_prediction(preds: PredictionMatrix, ids, b: int) -> float:
    ids = list(ids)
    if not ids:
        raise ValueError("mean over an empty id set")
    index = {k: i for i, k in enumerate(preds.ids)}
    rows = np.fromiter((index[str(k)] for k in ids), dtype=np.int64, count=len(ids))
    return float(np.mean(preds.scores[rows, b]))


def bias(preds: PredictionMatrix, dataset: LabeledDataset, b: int, z: int) -> float | None:
    """Mean score of ``b`` on images with ``z`` over its mean on images without ``z``.

    Returns None when the ratio is undefined (no b-without-z image or a zero
    denominator).
    """
    lb = dataset.labels[:, b].astype(bool)
    lz = dataset.labels[:, z].astype(bool)
    with_rows = np.flatnonzero(lb & lz)
    without_rows = np.flatnonzero(lb & ~lz)
    if len(with_rows) == 0 or len(without_rows) == 0:
        return None
    den = float(np.mean(preds.scores[without_rows, b]))
    if den == 0.0:
        return None
    return float(np.mean(preds.scores[with_rows, b])) / den


def bias_matrix(preds: PredictionMatrix, dataset: LabeledDataset):
    """All directional bias values at once.

    Returns ``(bias, cooccur_count)`` where ``bias[b, z]`` is NaN when
    undefined and ``cooccur_count[b, z] = |I_b & I_z|``.
    """
    preds.check_aligned(dataset)
    labels = np.ascontiguousarray(dataset.labels)
    with_sum, with_cnt, without_sum, without_cnt = kernels.pair_sums(preds.scores, labels)
    with np.errstate(divide="ignore", invalid="ignore"):
        num = with_sum / with_cnt
        den = without_sum / without_cnt
        out = num / den
    undefined = (with_cnt == 0) | (without_cnt == 0) | (den == 0)
    out[undefined] = np.nan
    np.fill_diagonal(out, np.nan)
    return out, with_cnt


def identify_pairs(preds: PredictionMatrix, dataset: LabeledDataset, k: int = 20,
                   cooccur_threshold: float = 0.2, candidates=None,
                   with_sets: bool = True) -> list[BiasedPair]:
    """Pick, for each candidate ``b``, the context maximising ``bias(b, z)``.

    Only contexts co-occurring with ``b`` in at least ``cooccur_threshold`` of
    ``b``'s images are eligible. The ``k`` strongest pairs are returned in
    descending bias order; ties go to the lower category index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 < cooccur_threshold <= 1:
        raise ValueError("cooccur_threshold must be in (0, 1]")
    m = dataset.num_categories
    values, cooc = bias_matrix(preds, dataset)
    occur = dataset.labels.sum(axis=0).astype(np.int64)
    if candidates is None:
        candidates = range(m)
    else:
        candidates = sorted({dataset.category_index(x) for x in candidates})
    best = []
    for b in candidates:
        if occur[b] == 0:
            continue
        top_z, top_v = -1, -np.inf
        for z in range(m):
            v = values[b, z]
            if z == b or np.isnan(v) or cooc[b, z] / occur[b] < cooccur_threshold:
                continue
            if v > top_v:
                top_z, top_v = z, v
        if top_z >= 0:
            best.append((b, top_z, float(top_v)))
    best.sort(key=lambda t: (-t[2], t[0]))
    if len(best) < k:
        warnings.warn(f"only {len(best)} eligible categories for k={k}",
                      InsufficientPairsWarning, stacklevel=2)
    return [BiasedPair(b, c, v, image_sets_for_pair(dataset, b, c) if with_sets else None)
            for b, c, v in best[:k]]


def save_pairs(pairs, path, category_names=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [p.to_json(category_names) for p in pairs]
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_pairs(path, dataset: LabeledDataset | None = None) -> list[BiasedPair]:
    """Read a pair list; entries may name categories by index or by name.

    Names (``b``/``c`` as strings, or ``b_name``/``c_name``) need ``dataset``
    to resolve them. ``bias`` is optional for externally supplied lists.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(raw, list):
        raise DataError(f"{path}: expected a JSON list of pairs")
    pairs = []
    for k, entry in enumerate(raw):
        try:
            b, c = entry.get("b", entry.get("b_name")), entry.get("c", entry.get("c_name"))
            if isinstance(b, str) or isinstance(c, str):
                if dataset is None:
                    raise DataError(f"{path}: pair {k} uses names but no dataset was given")
                b, c = dataset.category_index(b), dataset.category_index(c)
            b, c = int(b), int(c)
        except (AttributeError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed pair record {k}: {exc}") from None
        sets = image_sets_for_pair(dataset, b, c) if dataset is not None else None
        pairs.append(BiasedPair(b, c, float(entry.get("bias", float("nan"))), sets))
    return pairs


def pairs_as_tuples(pairs) -> list[tuple[int, int]]:
    return [(p.b, p.c) if isinstance(p, BiasedPair) else (int(p[0]), int(p[1])) for p in pairs]
