"""Exclusive / co-occur test distributions, AP and top-3 recall, reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .bias import PredictionMatrix, pairs_as_tuples
from .data import DataError, LabeledDataset, pair_masks

log = logging.getLogger(__name__)

METRICS = ("mAP", "top3_recall")
KINDS = ("exclusive", "cooccur")


class MissingPositivesWarning(UserWarning):
    pass


def distribution_mask(labels: np.ndarray, b: int, c: int, kind: str) -> np.ndarray:
    co, ex, other = pair_masks(labels, b, c)
    if kind == "exclusive":
        return ex | other
    if kind == "cooccur":
        return co | other
    raise ValueError(f"unknown distribution kind {kind!r}")


def build_distribution(dataset: LabeledDataset, pair, kind: str) -> list[str]:
    """Ids of the exclusive (or co-occur) images plus every image without ``b``."""
    b, c = pair
    mask = distribution_mask(dataset.labels, b, c, kind)
    return [dataset.ids[i] for i in np.flatnonzero(mask)]


def average_precision(scores, labels, ids=None) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Ranking is by descending score; ties go to the smaller image id (or the
    earlier position when ``ids`` is omitted). NaN when there is no positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if ids is None:
        order = np.argsort(-scores, kind="stable")
    else:
        ids = [str(i) for i in ids]
        order = np.array(sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i])),
                         dtype=np.int64)
    ranked = np.ascontiguousarray((labels[order] > 0).astype(np.int8))
    return float(kernels.ranked_ap(ranked))


def top3_recall(scores: np.ndarray, labels, b: int, k: int = 3) -> float:
    """Share of ``b``-positive rows where ``b`` is among the row's top-k scores.

    ``labels`` is either the full (n, M) matrix or the (n,) column for ``b``.
    Equal scores rank the lower category index first.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    col = labels[:, b] if labels.ndim == 2 else labels
    pos = np.flatnonzero(col > 0)
    if len(pos) == 0:
        return float("nan")
    ranks = kernels.column_rank(np.ascontiguousarray(scores[pos]), b)
    return float(np.mean(ranks < k))


def _metric(kind: str, scores: np.ndarray, labels: np.ndarray, rows: np.ndarray, b: int) -> float:
    if kind == "mAP":
        return average_precision(scores[rows, b], labels[rows, b])
    return top3_recall(scores[rows], labels[rows], b)


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class EvalReport:
    metric: str
    pairs: list[tuple[int, int]]
    per_pair: dict[tuple[int, int], dict[str, float]]
    per_category: dict[int, float] = field(default_factory=dict)
    category_names: list[str] | None = None
    non_biased: list[int] | None = None

    @property
    def aggregates(self) -> dict[str, float]:
        out = {kind: _nanmean([v[kind] for v in self.per_pair.values()]) for kind in KINDS}
        out["all"] = _nanmean(self.per_category.values()) if self.per_category else float("nan")
        if self.non_biased:
            out["non_biased"] = _nanmean([self.per_category.get(k, float("nan"))
                                          for k in self.non_biased])
        else:
            out["non_biased"] = float("nan")
        return out

    def _name(self, k):
        return self.category_names[k] if self.category_names else str(k)

    def to_dict(self) -> dict:
        def num(v):
            return None if v is None or math.isnan(v) else float(v)

        return {
            "metric": self.metric,
            "aggregates": {k: num(v) for k, v in self.aggregates.items()},
            "pairs": [
                {"b": b, "c": c, "b_name": self._name(b), "c_name": self._name(c),
                 "exclusive": num(self.per_pair[(b, c)]["exclusive"]),
                 "cooccur": num(self.per_pair[(b, c)]["cooccur"])}
                for b, c in self.pairs
            ],
            "per_category": {self._name(k): num(v) for k, v in sorted(self.per_category.items())},
            "non_biased": self.non_biased,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["b", "c", "exclusive", "cooccur"])
        for row in self.to_dict()["pairs"]:
            fmt = lambda v: "" if v is None else repr(v)  # noqa: E731
            w.writerow([row["b_name"], row["c_name"], fmt(row["exclusive"]), fmt(row["cooccur"])])
        return buf.getvalue()

    def save(self, directory, stem: str = "eval") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(self.to_json(), encoding="utf-8")
        (directory / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")


def evaluate(preds, dataset: LabeledDataset, pairs, metric: str = "mAP",
             non_biased=None, full_set: bool = True, **predict_kw) -> EvalReport:
    """Per-pair exclusive/co-occur metrics plus whole-test-set per-category values.

    ``preds`` is a PredictionMatrix or a model (scored via
    :func:`ctxbias.inference.predict` with ``predict_kw``). Categories with
    no positive image in a distribution are left out of the means.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if not isinstance(preds, PredictionMatrix):
        from .inference import predict

        preds = predict(preds, dataset, **predict_kw)
    preds.check_aligned(dataset)
    scores, labels = preds.scores, dataset.labels
    pairs = pairs_as_tuples(pairs)
    per_pair = {}
    for b, c in pairs:
        per_pair[(b, c)] = {}
        for kind in KINDS:
            rows = np.flatnonzero(distribution_mask(labels, b, c, kind))
            v = _metric(metric, scores, labels, rows, b)
            if math.isnan(v):
                warnings.warn(f"no positives of category {b} in {kind} distribution of "
                              f"({b}, {c}); excluded", MissingPositivesWarning, stacklevel=2)
            per_pair[(b, c)][kind] = v
    per_category = {}
    if full_set:
        rows = np.arange(len(dataset))
        for k in range(dataset.num_categories):
            v = _metric(metric, scores, labels, rows, k)
            if not math.isnan(v):
                per_category[k] = v
    nb = None
    if non_biased is not None:
        nb = sorted({dataset.category_index(x) for x in non_biased})
    return EvalReport(metric, pairs, per_pair, per_category, dataset.category_names, nb)


def cosine_similarity_report(weight: np.ndarray, pairs, o_rows=None, seed: int = 0) -> float:
    """Mean cosine between ``W_o[:, b]`` and ``W_s[:, b]`` over the pairs' ``b``.

    ``weight`` is the D x M matrix. Without ``o_rows`` a seeded random half
    split is drawn (for heads that were never split).
    """
    weight = np.asarray(weight, dtype=np.float64)
    d = weight.shape[0]
    if o_rows is None:
        if d % 2:
            raise ValueError("a random half split needs an even feature dimension")
        o_rows = np.random.default_rng(seed).choice(d, size=d // 2, replace=False)
    o_rows = np.sort(np.asarray(o_rows, dtype=np.int64))
    s_rows = np.setdiff1d(np.arange(d), o_rows)
    if len(o_rows) != len(s_rows):
        raise ValueError("column-wise cosine needs equal-sized subspaces")
    sims = []
    for b in dict.fromkeys(b for b, _ in pairs_as_tuples(pairs)):
        wo, ws = weight[o_rows, b], weight[s_rows, b]
        no, ns = np.linalg.norm(wo), np.linalg.norm(ws)
        if no == 0 or ns == 0:
            warnings.warn(f"zero-norm weight column for category {b}; excluded", stacklevel=2)
            continue
        sims.append(float(wo @ ws / (no * ns)))
    return float(np.mean(sims)) if sims else float("nan")


def cross_dataset_evaluate(preds: PredictionMatrix, external: LabeledDataset, categories,
                           source_names=None) -> dict:
    """AP on an external test set for categories shared by name.

    ``preds`` holds the source model's scores on ``external``'s images, its
    columns named by ``source_names`` (or ``preds.category_names``).
    ``categories`` are the source category names of interest (e.g. the
    biased ``b`` of each pair).
    """
    source_names = list(source_names or preds.category_names or [])
    if preds.ids != external.ids:
        raise ValueError("predictions are not aligned with the external dataset")
    overlap = [n for n in dict.fromkeys(categories)
               if n in source_names and n in external.category_names]
    if not overlap:
        raise DataError("no category overlaps between source pairs and external dataset")
    per = {}
    for name in overlap:
        v = average_precision(preds.scores[:, source_names.index(name)],
                              external.labels[:, external.category_names.index(name)])
        if math.isnan(v):
            warnings.warn(f"{name!r} has no positive in the external set; excluded",
                          MissingPositivesWarning, stacklevel=2)
            continue
        per[name] = v
    return {"categories": overlap, "per_category": per, "mean": _nanmean(per.values())}
