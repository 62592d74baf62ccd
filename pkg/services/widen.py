"""
WIDEN: merge homologous checkpoints with importance scores derived from how
far each model's column magnitudes and directions moved away from the backbone.

Per tensor: disentangle -> divergence -> rank within each model -> softmax
across models -> calibrate crucial columns to `s` -> weighted sum of deltas.
"""
import logging
import math
from fractions import Fraction
from typing import List, Sequence

import numpy as np

from utils.errors import EmptyModelList, ShapeMismatch
from utils.linalg import (
    check_finite,
    normalize_columns,
    column_cosine_similarity,
    ascending_ranks,
    min_max_normalize,
    softmax_over_models,
)
from utils.models import WidenParams, ImportanceScores

logger = logging.getLogger(__name__)


# ---- Divergences ----
def magnitude_divergence(m_n: np.ndarray, m_pre: np.ndarray) -> np.ndarray:
    m_n = check_finite(m_n, "magnitudes")
    m_pre = check_finite(m_pre, "backbone magnitudes")
    if m_n.shape != m_pre.shape:
        raise ShapeMismatch(f"magnitude vectors differ in length: {m_n.shape} vs {m_pre.shape}")
    return np.abs(m_n - m_pre)


def direction_divergence(D_n: np.ndarray, D_pre: np.ndarray) -> np.ndarray:
    """1 - cosine per column, in [0, 2]"""
    return 1.0 - column_cosine_similarity(D_n, D_pre)


# ---- Scores ----
# relative band around the threshold inside which a value does not count as exceeding it
THRESHOLD_RTOL = 1e-9


def crucial_set(v_tilde: np.ndarray, t: float) -> np.ndarray:
    """
    0-based indices whose normalized importance strictly exceeds t times the mean.

    Values within THRESHOLD_RTOL of the threshold are not crucial, so a value
    that equals it in exact arithmetic is never promoted by rounding.
    """
    v_tilde = check_finite(v_tilde, "importance")
    threshold = t / v_tilde.shape[-1] * v_tilde.sum()
    band = THRESHOLD_RTOL * max(abs(threshold), float(np.abs(v_tilde).max(initial=0.0)))
    return np.flatnonzero(v_tilde > threshold + band)


def crucial_ranks(ranks: np.ndarray, t: float) -> np.ndarray:
    """
    crucial_set for integer ordinal ranks 1..k, decided exactly.

    rank / k > (t / k) * sum(rank / k) reduces to rank > t * (k + 1) / 2.
    """
    ranks = np.asarray(ranks, dtype=np.int64)
    k = ranks.shape[-1]
    cutoff = math.floor(Fraction(float(t)) * (k + 1) / 2)
    return np.flatnonzero(ranks > cutoff)


def calibrate_scores(raw: np.ndarray, crucial: Sequence[np.ndarray], s: float) -> np.ndarray:
    """Overwrite crucial entries of each model's row with `s`; other entries are left as-is"""
    out = np.array(raw, dtype=np.float64, copy=True)
    for n, idx in enumerate(crucial):
        out[n, np.asarray(idx, dtype=np.intp)] = s
    return out


def score_table(divergence: np.ndarray, params: WidenParams) -> np.ndarray:
    """Turn an (N, k) divergence table into calibrated importance scores"""
    if params.variant == "no_rank":
        normed = min_max_normalize(divergence)
        raw = softmax_over_models(normed)
        crucial = [crucial_set(row, params.t) for row in normed]
        return calibrate_scores(raw, crucial, params.s)

    ranks = ascending_ranks(divergence)
    raw = softmax_over_models(ranks.astype(np.float64) / ranks.shape[-1])
    if params.variant == "no_sc":
        return raw
    crucial = [crucial_ranks(row, params.t) for row in ranks]
    return calibrate_scores(raw, crucial, params.s)


def _check_models(W_pre: np.ndarray, models: Sequence[np.ndarray], ndim: int):
    if len(models) == 0:
        raise EmptyModelList("no models to merge")
    W_pre = check_finite(W_pre, "backbone")
    if W_pre.ndim != ndim:
        raise ShapeMismatch(f"expected a {ndim}-D backbone tensor, got shape {W_pre.shape}")
    checked = []
    for n, W in enumerate(models):
        W = check_finite(W, f"model {n}")
        if W.shape != W_pre.shape:
            raise ShapeMismatch(f"model {n} has shape {W.shape}, backbone has {W_pre.shape}")
        checked.append(W)
    return W_pre, checked


def compute_importance(W_pre: np.ndarray, models: Sequence[np.ndarray], params: WidenParams) -> ImportanceScores:
    """
    Calibrated importance scores for one tensor.

    2-D tensors get magnitude and direction tables of shape (N, k); 1-D
    tensors are treated as pure magnitudes (entry-wise |w_n - w_pre|) and get
    a single (N, k) magnitude table.
    """
    W_pre = np.asarray(W_pre)
    if W_pre.ndim == 1:
        w_pre, vectors = _check_models(W_pre, models, 1)
        divergence = np.stack([np.abs(w - w_pre) for w in vectors])
        return ImportanceScores(magnitude=score_table(divergence, params))

    W_pre, matrices = _check_models(W_pre, models, 2)
    if params.variant == "no_wd":
        divergence = np.stack([1.0 - column_cosine_similarity(W, W_pre) for W in matrices])
        scores = score_table(divergence, params)
        return ImportanceScores(magnitude=scores, direction=scores.copy())

    m_pre, D_pre = normalize_columns(W_pre, params.c)
    mag_rows: List[np.ndarray] = []
    dir_rows: List[np.ndarray] = []
    for W in matrices:
        m_n, D_n = normalize_columns(W, params.c)
        mag_rows.append(magnitude_divergence(m_n, m_pre))
        dir_rows.append(direction_divergence(D_n, D_pre))
    return ImportanceScores(
        magnitude=score_table(np.stack(mag_rows), params),
        direction=score_table(np.stack(dir_rows), params),
    )


# ---- Merging ----
def _weighted_delta_sum(W_pre: np.ndarray, models: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    out = np.array(W_pre, dtype=np.float64, copy=True)
    for n, W in enumerate(models):
        # weights[n] has length k and broadcasts across the rows of a matrix
        out += weights[n] * (np.asarray(W, dtype=np.float64) - W_pre)
    return out


def widen_merge_2d(W_pre: np.ndarray, models: Sequence[np.ndarray], params: WidenParams) -> np.ndarray:
    """W_pre + sum_n ((M[n] + D[n]) / 2) * (W_n - W_pre), column-wise"""
    W_pre, matrices = _check_models(W_pre, models, 2)
    scores = compute_importance(W_pre, matrices, params)
    return _weighted_delta_sum(W_pre, matrices, scores.combined)


def widen_merge_1d(w_pre: np.ndarray, models: Sequence[np.ndarray], params: WidenParams) -> np.ndarray:
    """w_pre + sum_n M[n] * (w_n - w_pre), entry-wise, magnitude scores only"""
    w_pre, vectors = _check_models(w_pre, models, 1)
    scores = compute_importance(w_pre, vectors, params)
    return _weighted_delta_sum(w_pre, vectors, scores.magnitude)


def widen_merge(W_pre: np.ndarray, models: Sequence[np.ndarray], params: WidenParams) -> np.ndarray:
    """Dispatch on tensor rank"""
    if np.ndim(W_pre) == 1:
        return widen_merge_1d(W_pre, models, params)
    return widen_merge_2d(W_pre, models, params)


__all__ = [
    'THRESHOLD_RTOL', 'magnitude_divergence', 'direction_divergence', 'crucial_set', 'crucial_ranks',
    'calibrate_scores', 'score_table',
    'compute_importance', 'widen_merge_2d', 'widen_merge_1d', 'widen_merge',
]
