"""Hot inner loops for evaluation and bias analysis.

Every kernel exists twice: a ``@njit`` loop version and a vectorised numpy
version. The public name resolves to one of them at import time (see
:mod:`ctxbias._accel`); both stay importable so they can be cross-checked.
"""

import numpy as np

from ._accel import njit, pick


# -- average precision over an already-ranked label vector -------------------

def _ranked_ap_numpy(ranked_labels):
    labels = np.asarray(ranked_labels, dtype=np.float64)
    pos = labels > 0
    if not pos.any():
        return np.nan
    hits = np.cumsum(labels)
    ranks = np.arange(1, labels.size + 1, dtype=np.float64)
    return float(np.mean(hits[pos] / ranks[pos]))


@njit
def _ranked_ap_numba(ranked_labels):
    hits = 0.0
    total = 0.0
    for i in range(ranked_labels.shape[0]):
        if ranked_labels[i] > 0:
            hits += 1.0
            total += hits / (i + 1.0)
    if hits == 0.0:
        return np.nan
    return total / hits


# -- per-row rank of one column (ties -> lower column index ranks first) -----

def _column_rank_numpy(scores, col):
    scores = np.asarray(scores, dtype=np.float64)
    target = scores[:, col:col + 1]
    higher = (scores > target).sum(axis=1)
    tied_before = (scores[:, :col] == target).sum(axis=1)
    return (higher + tied_before).astype(np.int64)


@njit
def _column_rank_numba(scores, col):
    n, m = scores.shape
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        s = scores[i, col]
        r = 0
        for k in range(m):
            v = scores[i, k]
            if v > s or (v == s and k < col):
                r += 1
        out[i] = r
    return out


# -- conditional score sums for every ordered category pair ------------------

def _pair_sums_numpy(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    sl = s * lab
    absent = 1.0 - lab
    with_sum = sl.T @ lab
    without_sum = sl.T @ absent
    with_cnt = np.rint(lab.T @ lab).astype(np.int64)
    without_cnt = np.rint(lab.T @ absent).astype(np.int64)
    return with_sum, with_cnt, without_sum, without_cnt


@njit
def _pair_sums_numba(scores, labels):
    n, m = scores.shape
    with_sum = np.zeros((m, m))
    without_sum = np.zeros((m, m))
    with_cnt = np.zeros((m, m), dtype=np.int64)
    without_cnt = np.zeros((m, m), dtype=np.int64)
    for i in range(n):
        for b in range(m):
            if labels[i, b] == 0:
                continue
            s = scores[i, b]
            for z in range(m):
                if labels[i, z] != 0:
                    with_sum[b, z] += s
                    with_cnt[b, z] += 1
                else:
                    without_sum[b, z] += s
                    without_cnt[b, z] += 1
    return with_sum, with_cnt, without_sum, without_cnt


ranked_ap = pick(_ranked_ap_numba, _ranked_ap_numpy)
column_rank = pick(_column_rank_numba, _column_rank_numpy)
pair_sums = pick(_pair_sums_numba, _pair_sums_numpy)

IMPLEMENTATIONS = {
    "ranked_ap": {"numba": _ranked_ap_numba, "numpy": _ranked_ap_numpy},
    "column_rank": {"numba": _column_rank_numba, "numpy": _column_rank_numpy},
    "pair_sums": {"numba": _pair_sums_numba, "numpy": _pair_sums_numpy},
}
