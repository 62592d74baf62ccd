"""
Diagnostics over WIDEN importance scores and delta parameters: score
histograms, Low / Medium / High tier transitions between two variants, and
decile statistics of deltas.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np
import pandas as pd

from services.widen import compute_importance
from utils.checkpoint_io import CheckpointHandle, open_checkpoint
from utils.errors import ConfigError, ShapeMismatch, TooSmall, UnsupportedRank
from utils.linalg import check_finite
from utils.models import MergeRecipe, WidenParams, VARIANTS

logger = logging.getLogger(__name__)

TIERS = ("L", "M", "H")
AGGREGATES = ("model", "tensor")
DECILE_LABELS = [f"q{10 * i}" for i in range(11)]


@dataclass
class ImportanceRecord:
    name: str
    component: str  # magnitude, direction or combined
    scores: np.ndarray  # (N, k) post-calibration


@dataclass
class TierTransition:
    """3x3 fractions over (from tier, to tier); rows L, M, H"""
    counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def matrix(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros((3, 3))
        return self.counts / self.total

    def __add__(self, other: "TierTransition") -> "TierTransition":
        return TierTransition(counts=self.counts + other.counts)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.matrix, index=list(TIERS), columns=list(TIERS))

    def to_dict(self) -> dict:
        return {"tiers": list(TIERS), "fractions": self.matrix.tolist(), "counts": self.counts.tolist()}


# ---- Tiers ----
def _tier_codes(scores: np.ndarray) -> np.ndarray:
    scores = check_finite(scores, "scores").ravel()
    k = scores.size
    if k < 3:
        raise TooSmall(f"tier classification needs at least 3 scores, got {k}")
    third = k // 3
    codes = np.empty(k, dtype=np.int64)
    order = np.argsort(scores, kind="stable")
    codes[order[:third]] = 0
    codes[order[third:2 * third]] = 1
    codes[order[2 * third:]] = 2
    return codes


def tier_classify(scores: np.ndarray) -> np.ndarray:
    """
    Label each position L, M or H by its ascending sorted position.

    The first floor(k/3) positions are L, the next floor(k/3) are M and the
    remainder (which absorbs k mod 3) is H. Ties keep index order.
    """
    return np.array(TIERS)[_tier_codes(scores)]


def tier_transition(scores_a: np.ndarray, scores_b: np.ndarray) -> TierTransition:
    """Fraction of positions labeled x under scores_a and y under scores_b"""
    a = np.ravel(scores_a)
    b = np.ravel(scores_b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"score vectors differ in length: {a.size} vs {b.size}")
    ia = _tier_codes(a)
    ib = _tier_codes(b)
    counts = np.zeros((3, 3), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    return TierTransition(counts=counts)


# ---- Histograms ----
def importance_histogram(records: Iterable[ImportanceRecord], bins: int, s: float = 1.0) -> Dict[int, dict]:
    """
    Histogram of scores per model over [0, max(1, s)] with `bins` equal bins.

    Scores outside the range are clipped into the edge bins so counts always
    add up to the number of score entries.
    """
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    upper = max(1.0, s)
    edges = np.linspace(0.0, upper, bins + 1)
    per_model: Dict[int, np.ndarray] = {}
    for record in records:
        for n, row in enumerate(np.atleast_2d(record.scores)):
            counts, _ = np.histogram(np.clip(row, 0.0, upper), bins=edges)
            per_model[n] = per_model.get(n, np.zeros(bins, dtype=np.int64)) + counts
    return {n: {"edges": edges.tolist(), "counts": c.tolist()} for n, c in sorted(per_model.items())}


# ---- Deltas ----
def _decile_positions(n: int) -> np.ndarray:
    return np.floor(np.arange(11) * (n - 1) / 10 + 0.5).astype(np.int64)


def delta_deciles(delta: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    """Sorted values at positions floor(q * (len - 1) + 0.5) for q = 0, 0.1, ..., 1"""
    if isinstance(delta, (list, tuple)):
        flat = np.concatenate([np.ravel(d) for d in delta]) if delta else np.empty(0)
    else:
        flat = np.ravel(delta)
    if flat.size == 0:
        raise TooSmall("delta deciles need at least one value")
    positions = _decile_positions(flat.size)
    return np.partition(check_finite(flat, "delta"), positions)[positions]


# ---- Checkpoint-wide ----
def collect_importance(backbone: CheckpointHandle, models: List[CheckpointHandle], params: WidenParams) -> List[ImportanceRecord]:
    """Importance records for every 1-D / 2-D tensor shared by all checkpoints"""
    records: List[ImportanceRecord] = []
    for name in backbone.names():
        if not all(name in m for m in models):
            logger.warning(f"[Analysis] skipping {name}: not present in every model")
            continue
        if backbone.meta(name).rank not in (1, 2):
            raise UnsupportedRank(f"{name!r} has rank {backbone.meta(name).rank}")
        base = backbone.read_tensor(name)
        scores = compute_importance(base, [m.read_tensor(name) for m in models], params)
        records.append(ImportanceRecord(name, "magnitude", scores.magnitude))
        if scores.direction is not None:
            records.append(ImportanceRecord(name, "direction", scores.direction))
        records.append(ImportanceRecord(name, "combined", scores.combined))
    return records


def _combined_rows(records: List[ImportanceRecord]) -> Dict[str, np.ndarray]:
    return {r.name: r.scores for r in records if r.component == "combined"}


def transitions_between(records_a: List[ImportanceRecord], records_b: List[ImportanceRecord], aggregate: str = "model") -> Dict[int, TierTransition]:
    """
    Per-model tier transitions from variant a to variant b on combined scores.

    aggregate="model" tiers the concatenation of all tensors' scores;
    aggregate="tensor" tiers each tensor separately and sums the counts
    (tensors with fewer than 3 columns are skipped).
    """
    if aggregate not in AGGREGATES:
        raise ConfigError(f"aggregate must be one of {AGGREGATES}, got {aggregate!r}")
    a, b = _combined_rows(records_a), _combined_rows(records_b)
    names = [n for n in a if n in b]
    if not names:
        return {}
    n_models = a[names[0]].shape[0]
    out: Dict[int, TierTransition] = {}
    for n in range(n_models):
        if aggregate == "model":
            out[n] = tier_transition(
                np.concatenate([a[name][n] for name in names]),
                np.concatenate([b[name][n] for name in names]),
            )
        else:
            total = TierTransition()
            for name in names:
                if a[name].shape[1] >= 3:
                    total = total + tier_transition(a[name][n], b[name][n])
            out[n] = total
    return out


def model_delta_deciles(backbone: CheckpointHandle, models: List[CheckpointHandle]) -> Dict[int, np.ndarray]:
    """
    Deciles of every model's concatenated deltas against the backbone.

    Deltas are computed per tensor in float64 and gathered into one float32
    buffer per model, so peak memory is about 4 bytes per parameter
    (28 GB for a 7B model) plus the largest tensor. Models are handled one at
    a time and the deciles are selected in place.
    """
    out: Dict[int, np.ndarray] = {}
    for n, model in enumerate(models):
        names = [name for name in backbone.names() if name in model]
        total = sum(backbone.meta(name).numel for name in names)
        if total == 0:
            raise TooSmall("delta deciles need at least one value")
        buf = np.empty(total, dtype=np.float32)
        pos = 0
        for name in names:
            delta = model.read_tensor(name).astype(np.float64) - backbone.read_tensor(name)
            delta = check_finite(delta, f"delta of {name!r}").ravel()
            buf[pos:pos + delta.size] = delta
            pos += delta.size
        positions = _decile_positions(total)
        buf.partition(positions)
        out[n] = buf[positions].astype(np.float64)
        logger.info(f"[Analysis] model {n}: deciles over {total} deltas")
    return out


def run_analysis(
    recipe: MergeRecipe,
    out_dir: Union[str, Path],
    variant_a: str = "no_sc",
    variant_b: str = "full",
    bins: int = 20,
    aggregate: str = "model",
) -> dict:
    """
    Compute importance histograms, tier transitions (variant_a -> variant_b)
    and delta deciles for the recipe's models; write JSON and CSV into out_dir.
    """
    for v in (variant_a, variant_b):
        if v not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {v!r}")
    backbone = open_checkpoint(recipe.backbone)
    models = [open_checkpoint(p) for p in recipe.models]
    base_params = recipe.params.widen()

    records = {}
    for variant in dict.fromkeys((variant_a, variant_b)):
        params = WidenParams(t=base_params.t, s=base_params.s, c=base_params.c, variant=variant)
        logger.info(f"[Analysis] computing importance for variant {variant}")
        records[variant] = collect_importance(backbone, models, params)

    histograms = {
        variant: importance_histogram([r for r in recs if r.component == "combined"], bins, s=base_params.s)
        for variant, recs in records.items()
    }
    transitions = transitions_between(records[variant_a], records[variant_b], aggregate)
    deciles = model_delta_deciles(backbone, models)

    result = {
        "backbone": recipe.backbone,
        "models": list(recipe.models),
        "params": {"t": base_params.t, "s": base_params.s, "norm_order": base_params.c},
        "bins": bins,
        "aggregate": aggregate,
        "tier_remainder": "H",
        "histograms": {v: {str(n): h for n, h in hs.items()} for v, hs in histograms.items()},
        "transitions": {"from": variant_a, "to": variant_b, "per_model": {str(n): t.to_dict() for n, t in transitions.items()}},
        "deciles": {str(n): d.tolist() for n, d in deciles.items()},
    }
    _write_outputs(result, Path(out_dir), recipe.models)
    return result


def _write_outputs(result: dict, out_dir: Path, model_paths: List[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "analysis.json", "w", encoding="utf-8") as f:
        json.dump(result, f, indent=2)

    rows = []
    for variant, per_model in result["histograms"].items():
        for n, h in per_model.items():
            edges = h["edges"]
            for i, count in enumerate(h["counts"]):
                rows.append({"variant": variant, "model": model_paths[int(n)], "bin_lo": edges[i], "bin_hi": edges[i + 1], "count": count})
    pd.DataFrame(rows, columns=["variant", "model", "bin_lo", "bin_hi", "count"]).to_csv(out_dir / "histograms.csv", index=False)

    rows = []
    for n, t in result["transitions"]["per_model"].items():
        for i, src in enumerate(TIERS):
            for j, dst in enumerate(TIERS):
                rows.append({"model": model_paths[int(n)], "from": src, "to": dst, "fraction": t["fractions"][i][j]})
    pd.DataFrame(rows, columns=["model", "from", "to", "fraction"]).to_csv(out_dir / "transitions.csv", index=False)

    frame = pd.DataFrame(
        [[model_paths[int(n)]] + values for n, values in result["deciles"].items()],
        columns=["model"] + DECILE_LABELS,
    )
    frame.to_csv(out_dir / "deciles.csv", index=False)
    logger.info(f"[Analysis] wrote analysis.json, histograms.csv, transitions.csv, deciles.csv to {out_dir}")


__all__ = [
    'TIERS', 'ImportanceRecord', 'TierTransition', 'tier_classify', 'tier_transition',
    'importance_histogram', 'delta_deciles', 'collect_importance', 'transitions_between',
    'model_delta_deciles', 'run_analysis',
]
