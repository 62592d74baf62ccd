"""
Dense column kernels shared by every merge method.

All kernels accept numpy arrays of any float dtype and accumulate in float64.
Matrices are (d, k): the second axis is the column axis, so a "column" is
W[:, j] and per-column results are length-k vectors.
"""
import numpy as np
from scipy.special import softmax
from scipy.stats import rankdata

from utils.errors import InvalidTensor, ShapeMismatch

# Columns with a norm at or below EPS carry no direction.
EPS = 1e-12


def check_finite(array: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Return `array` as float64, raising InvalidTensor on NaN / Inf"""
    out = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise InvalidTensor(f"{what} contains non-finite values")
    return out


def _as_matrix(W: np.ndarray, what: str) -> np.ndarray:
    W = check_finite(W, what)
    if W.ndim != 2:
        raise ShapeMismatch(f"{what} must be 2-D, got shape {W.shape}")
    return W


def column_norms(W: np.ndarray, c: int = 2) -> np.ndarray:
    """l_c norm of every column of W"""
    if c not in (1, 2):
        raise ValueError(f"norm order must be 1 or 2, got {c}")
    W = _as_matrix(W, "W")
    return np.linalg.norm(W, ord=c, axis=0)


def normalize_columns(W: np.ndarray, c: int = 2):
    """
    Split W into per-column magnitudes and unit directions.

    Returns:
        (m, D) with m of shape (k,) and D of shape (d, k); columns whose norm
        is <= EPS get an all-zero direction.
    """
    W = _as_matrix(W, "W")
    m = column_norms(W, c)
    live = m > EPS
    D = np.zeros_like(W)
    D[:, live] = W[:, live] / m[live]
    return m, D


def column_cosine_similarity(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Per-column cosine of A and B; degenerate (zero-norm) columns count as 1"""
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if A.shape != B.shape:
        raise ShapeMismatch(f"cosine operands differ in shape: {A.shape} vs {B.shape}")
    dots = np.einsum("ij,ij->j", A, B)
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    live = (na > EPS) & (nb > EPS)
    out = np.ones(A.shape[1], dtype=np.float64)
    out[live] = dots[live] / (na[live] * nb[live])
    return np.clip(out, -1.0, 1.0)


def ascending_ranks(v: np.ndarray) -> np.ndarray:
    """Integer ordinal ranks 1..k along the last axis; ties keep index order"""
    v = check_finite(v, "rank input")
    if v.shape[-1] < 1:
        raise ValueError("cannot rank an empty vector")
    return rankdata(v, method="ordinal", axis=-1).astype(np.int64)


def ascending_rank_normalize(v: np.ndarray) -> np.ndarray:
    """
    Map values to their ascending rank divided by the length.

    Works along the last axis, so an (N, k) table is ranked row by row.
    Ties keep their original index order (ordinal ranking).
    """
    ranks = ascending_ranks(v)
    return ranks.astype(np.float64) / ranks.shape[-1]


def min_max_normalize(v: np.ndarray) -> np.ndarray:
    """Affine map of the last axis onto [0, 1]; a constant row maps to 0.5"""
    v = check_finite(v, "min-max input")
    lo = v.min(axis=-1, keepdims=True)
    hi = v.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span == 0
    out = (v - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def softmax_over_models(S: np.ndarray) -> np.ndarray:
    """Softmax down axis 0 of an (N, k) score table (one distribution per column)"""
    S = check_finite(S, "score table")
    if S.ndim != 2 or S.shape[0] < 1:
        raise ShapeMismatch(f"score table must be (N, k) with N >= 1, got {S.shape}")
    return softmax(S, axis=0)


__all__ = [
    'EPS', 'check_finite', 'column_norms', 'normalize_columns', 'column_cosine_similarity',
    'ascending_ranks', 'ascending_rank_normalize', 'min_max_normalize', 'softmax_over_models',
]
