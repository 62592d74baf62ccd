"""
Comparison merge methods. Every function is element-wise over whole tensors
(any rank), works in float64 and never mutates its inputs.
"""
import hashlib
import logging
import math
from typing import List, Sequence

import numpy as np

from utils.errors import ArityError, ConfigError, EmptyModelList, ShapeMismatch
from utils.linalg import EPS, check_finite

logger = logging.getLogger(__name__)


def _prepare(W_pre: np.ndarray, models: Sequence[np.ndarray]):
    if len(models) == 0:
        raise EmptyModelList("no models to merge")
    base = check_finite(W_pre, "backbone")
    out: List[np.ndarray] = []
    for n, W in enumerate(models):
        W = check_finite(W, f"model {n}")
        if W.shape != base.shape:
            raise ShapeMismatch(f"model {n} has shape {W.shape}, backbone has {base.shape}")
        out.append(W)
    return base, out


def _count(fraction: float, size: int) -> int:
    """Number of entries a fraction of `size` stands for (nearest integer, halves round up)"""
    return int(min(size, max(0, math.floor(fraction * size + 0.5))))


def tensor_seed(global_seed: int, name: str, index: int = 0) -> int:
    """Stable 64-bit seed for one (tensor, model) pair, independent of thread scheduling"""
    digest = hashlib.sha256(f"{global_seed}:{name}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# ---- Arithmetic ----
def average_merge(W_pre: np.ndarray, models: Sequence[np.ndarray]) -> np.ndarray:
    _, models = _prepare(W_pre, models)
    return np.mean(np.stack(models), axis=0)


def task_arithmetic(W_pre: np.ndarray, models: Sequence[np.ndarray], lam: float) -> np.ndarray:
    base, models = _prepare(W_pre, models)
    total = np.zeros_like(base)
    for W in models:
        total += W - base
    return base + lam * total


# ---- Geometric ----
def slerp_merge(W_a: np.ndarray, W_b: np.ndarray, phi: float) -> np.ndarray:
    """
    Spherical interpolation between two whole tensors.

    One angle is computed over the flattened tensors; near-colinear inputs
    (sin of the angle below 1e-6) fall back to linear interpolation.
    """
    a = check_finite(W_a, "model a")
    b = check_finite(W_b, "model b")
    if a.shape != b.shape:
        raise ShapeMismatch(f"slerp operands differ in shape: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= EPS or nb <= EPS:
        return (1.0 - phi) * a + phi * b
    cos = np.clip(np.dot(a.ravel(), b.ravel()) / (na * nb), -1.0, 1.0)
    omega = np.arccos(cos)
    sin_omega = np.sin(omega)
    if sin_omega < 1e-6:
        return (1.0 - phi) * a + phi * b
    return (np.sin((1.0 - phi) * omega) / sin_omega) * a + (np.sin(phi * omega) / sin_omega) * b


def slerp_models(W_pre: np.ndarray, models: Sequence[np.ndarray], phi: float) -> np.ndarray:
    if len(models) != 2:
        raise ArityError(f"slerp merges exactly 2 models, got {len(models)}")
    _prepare(W_pre, models)
    return slerp_merge(models[0], models[1], phi)


def model_stock_ratio(deltas: Sequence[np.ndarray]) -> float:
    """Interpolation ratio N*cos / ((N-1)*(1+cos)) from the mean pairwise cosine, clamped to [0, 1]"""
    n = len(deltas)
    flat = [d.ravel() for d in deltas]
    norms = [np.linalg.norm(f) for f in flat]
    if any(x <= EPS for x in norms):
        return 0.0
    cosines = [
        np.dot(flat[i], flat[j]) / (norms[i] * norms[j])
        for i in range(n) for j in range(i + 1, n)
    ]
    cos = float(np.clip(np.mean(cosines), -1.0, 1.0))
    if 1.0 + cos <= EPS:
        return 0.0
    ratio = n * cos / ((n - 1) * (1.0 + cos))
    return float(np.clip(ratio, 0.0, 1.0))


def model_stock(W_pre: np.ndarray, models: Sequence[np.ndarray]) -> np.ndarray:
    if len(models) < 2:
        raise ArityError(f"model_stock needs at least 2 models, got {len(models)}")
    base, models = _prepare(W_pre, models)
    ratio = model_stock_ratio([W - base for W in models])
    if ratio == 0.0:
        return base
    return ratio * np.mean(np.stack(models), axis=0) + (1.0 - ratio) * base


# ---- Pruning ----
def _order_by_magnitude(delta: np.ndarray) -> np.ndarray:
    """Flat indices sorted by ascending |value|, ties by index"""
    return np.argsort(np.abs(delta).ravel(), kind="stable")


def magnitude_prune(delta: np.ndarray, drop_rate: float) -> np.ndarray:
    """Zero the `drop_rate` fraction of entries with the smallest |value|; no rescaling"""
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigError(f"drop_rate must lie in [0, 1), got {drop_rate}")
    delta = check_finite(delta, "delta")
    out = delta.copy()
    drop = _count(drop_rate, out.size)
    out.ravel()[_order_by_magnitude(delta)[:drop]] = 0.0
    return out


def _keep_top(delta: np.ndarray, keep_ratio: float) -> np.ndarray:
    out = np.zeros_like(delta)
    keep = _count(keep_ratio, delta.size)
    if keep:
        idx = _order_by_magnitude(delta)[delta.size - keep:]
        out.ravel()[idx] = delta.ravel()[idx]
    return out


def ties_merge(W_pre: np.ndarray, models: Sequence[np.ndarray], keep_ratio: float, lam: float) -> np.ndarray:
    """
    Trim each delta to its top `keep_ratio` entries by magnitude, elect a sign
    per entry from the summed trimmed deltas, then add lam times the mean of the
    deltas agreeing with that sign. Entries with no agreeing delta stay at W_pre.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    base, models = _prepare(W_pre, models)
    trimmed = np.stack([_keep_top(W - base, keep_ratio) for W in models])
    elected = np.sign(trimmed.sum(axis=0))
    agree = (np.sign(trimmed) == elected) & (trimmed != 0)
    contributors = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    mean = np.divide(total, contributors, out=np.zeros_like(total), where=contributors > 0)
    return base + lam * mean


def breadcrumbs_mask(delta: np.ndarray, mask_top: float, keep_ratio: float) -> np.ndarray:
    """Keep the middle band of |delta|: drop the top mask_top and the bottom (1 - keep_ratio - mask_top)"""
    bottom = 1.0 - keep_ratio - mask_top
    if mask_top < 0.0 or not 0.0 < keep_ratio <= 1.0 or bottom < -1e-9:
        raise ConfigError(f"infeasible breadcrumbs band: mask_top={mask_top}, keep_ratio={keep_ratio}")
    out = np.array(delta, dtype=np.float64, copy=True)
    order = _order_by_magnitude(out)
    n_top = _count(mask_top, out.size)
    n_bottom = _count(max(bottom, 0.0), out.size)
    flat = out.ravel()
    flat[order[:n_bottom]] = 0.0
    if n_top:
        flat[order[out.size - n_top:]] = 0.0
    return out


def breadcrumbs_merge(W_pre: np.ndarray, models: Sequence[np.ndarray], mask_top: float, keep_ratio: float, lam: float) -> np.ndarray:
    base, models = _prepare(W_pre, models)
    total = np.zeros_like(base)
    for W in models:
        total += breadcrumbs_mask(W - base, mask_top, keep_ratio)
    return base + lam * total


def dare_sparsify(delta: np.ndarray, p: float, seed: int) -> np.ndarray:
    """Drop each entry with probability p and rescale survivors by 1 / (1 - p)"""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"DARE drop rate must lie in [0, 1), got {p}")
    delta = check_finite(delta, "delta")
    if p == 0.0:
        return delta.copy()
    rng = np.random.default_rng(seed)
    keep = rng.random(delta.shape) >= p
    return np.where(keep, delta / (1.0 - p), 0.0)


def dare_task_arithmetic(W_pre: np.ndarray, models: Sequence[np.ndarray], p: float, lam: float, global_seed: int, name: str) -> np.ndarray:
    base, models = _prepare(W_pre, models)
    total = np.zeros_like(base)
    for n, W in enumerate(models):
        total += dare_sparsify(W - base, p, tensor_seed(global_seed, name, n))
    return base + lam * total


def magnitude_prune_task_arithmetic(W_pre: np.ndarray, models: Sequence[np.ndarray], drop_rate: float, lam: float) -> np.ndarray:
    base, models = _prepare(W_pre, models)
    total = np.zeros_like(base)
    for W in models:
        total += magnitude_prune(W - base, drop_rate)
    return base + lam * total


__all__ = [
    'tensor_seed', 'average_merge', 'task_arithmetic', 'slerp_merge', 'slerp_models',
    'model_stock_ratio', 'model_stock', 'magnitude_prune', 'ties_merge', 'breadcrumbs_mask',
    'breadcrumbs_merge', 'dare_sparsify', 'dare_task_arithmetic', 'magnitude_prune_task_arithmetic',
]
