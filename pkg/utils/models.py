import json
import math
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from utils.errors import ConfigError, ArityError, EmptyModelList

# ---- Vocabularies ----
METHODS = (
    "widen", "average", "task_arithmetic", "slerp", "model_stock",
    "ties", "breadcrumbs", "dare_task_arithmetic", "magnitude_prune_task_arithmetic",
)
VARIANTS = ("full", "no_wd", "no_rank", "no_sc")
DTYPES = ("fp32", "fp16", "bf16")
DTYPE_POLICIES = ("preserve-input", "force-fp32", "force-bf16")
MISSING_TENSOR_POLICIES = ("error", "copy_backbone")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


# ---- Tensors ----
@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str  # fp32, fp16 or bf16
    shape: Tuple[int, ...]

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


@dataclass(frozen=True)
class WidenParams:
    """t: crucial-threshold multiple, s: calibrated score, c: norm order"""
    t: float = 1.0
    s: float = 1.0
    c: int = 2
    variant: str = "full"

    def __post_init__(self):
        if not _is_number(self.t) or not math.isfinite(self.t):
            raise ConfigError(f"t must be a finite number, got {self.t!r}")
        if not _is_number(self.s) or not math.isfinite(self.s):
            raise ConfigError(f"s must be a finite number, got {self.s!r}")
        if self.c not in (1, 2):
            raise ConfigError(f"norm order must be 1 or 2, got {self.c!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class ImportanceScores:
    """Calibrated per-model scores; `direction` is None for 1-D tensors"""
    magnitude: np.ndarray
    direction: Optional[np.ndarray] = None

    @property
    def combined(self) -> np.ndarray:
        if self.direction is None:
            return self.magnitude
        return (self.magnitude + self.direction) / 2.0


# ---- Recipes ----
@dataclass
class MergeParams:
    t: float = 1.0
    s: float = 1.0
    norm_order: int = 2
    variant: str = "full"
    lambda_: float = 1.0
    phi: float = 0.5
    keep_ratio: float = 0.9
    mask_top: float = 0.01
    drop_rate: float = 0.9
    seed: Optional[int] = None

    # JSON uses "lambda"; the attribute cannot.
    _ALIASES = {"lambda": "lambda_"}

    @classmethod
    def field_names(cls) -> List[str]:
        return ["lambda" if f.name == "lambda_" else f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MergeParams":
        if not isinstance(data, dict):
            raise ConfigError(f"params must be an object, got {type(data).__name__}")
        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown params: {', '.join(unknown)}")
        kwargs = {cls._ALIASES.get(k, k): v for k, v in data.items()}
        params = cls(**kwargs)
        params.validate()
        return params

    def validate(self) -> None:
        for key in ("t", "s", "lambda_", "phi", "keep_ratio", "mask_top", "drop_rate"):
            value = getattr(self, key)
            if not _is_number(value) or not math.isfinite(value):
                raise ConfigError(f"param {key.rstrip('_')} must be a finite number, got {value!r}")
        if self.norm_order not in (1, 2) or isinstance(self.norm_order, bool):
            raise ConfigError(f"norm_order must be 1 or 2, got {self.norm_order!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.phi <= 1.0:
            raise ConfigError(f"phi must lie in [0, 1], got {self.phi}")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        if not 0.0 <= self.mask_top < 1.0:
            raise ConfigError(f"mask_top must lie in [0, 1), got {self.mask_top}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.seed is not None and (isinstance(self.seed, bool) or not isinstance(self.seed, int)):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")

    def widen(self) -> WidenParams:
        return WidenParams(t=self.t, s=self.s, c=self.norm_order, variant=self.variant)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["lambda"] = out.pop("lambda_")
        return out


@dataclass
class MergeRecipe:
    """One fully determined merge run"""
    backbone: str
    models: List[str]
    output: str
    method: str = "widen"
    params: MergeParams = field(default_factory=MergeParams)
    missing_tensor_policy: str = "error"
    dtype_policy: str = "preserve-input"
    threads: Union[int, str] = "auto"
    max_shard_bytes: Optional[int] = None

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MergeRecipe":
        if not isinstance(data, dict):
            raise ConfigError("recipe must be a JSON object")
        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown recipe keys: {', '.join(unknown)}")
        missing = [k for k in ("backbone", "models", "output") if k not in data]
        if missing:
            raise ConfigError(f"recipe is missing required keys: {', '.join(missing)}")
        kwargs = dict(data)
        kwargs["params"] = MergeParams.from_dict(data.get("params", {}))
        recipe = cls(**kwargs)
        recipe.validate()
        return recipe

    def validate(self) -> None:
        if not isinstance(self.backbone, str) or not self.backbone:
            raise ConfigError("backbone must be a non-empty path")
        if not isinstance(self.output, str) or not self.output:
            raise ConfigError("output must be a non-empty path")
        if not isinstance(self.models, list) or not all(isinstance(p, str) for p in self.models):
            raise ConfigError("models must be a list of paths")
        if not self.models:
            raise EmptyModelList("recipe lists no models to merge")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.missing_tensor_policy not in MISSING_TENSOR_POLICIES:
            raise ConfigError(f"missing_tensor_policy must be one of {MISSING_TENSOR_POLICIES}")
        if self.dtype_policy not in DTYPE_POLICIES:
            raise ConfigError(f"dtype_policy must be one of {DTYPE_POLICIES}")
        if self.threads != "auto" and (isinstance(self.threads, bool) or not isinstance(self.threads, int) or self.threads < 1):
            raise ConfigError(f"threads must be a positive integer or 'auto', got {self.threads!r}")
        if self.max_shard_bytes is not None and (not isinstance(self.max_shard_bytes, int) or self.max_shard_bytes < 1):
            raise ConfigError("max_shard_bytes must be a positive integer")
        n = len(self.models)
        if self.method == "slerp" and n != 2:
            raise ArityError(f"slerp merges exactly 2 models, got {n}")
        if self.method == "model_stock" and n < 2:
            raise ArityError(f"model_stock needs at least 2 models, got {n}")
        if self.method == "breadcrumbs" and self.params.mask_top + self.params.keep_ratio > 1.0 + 1e-9:
            raise ConfigError(
                f"breadcrumbs band is infeasible: mask_top ({self.params.mask_top}) + "
                f"keep_ratio ({self.params.keep_ratio}) exceeds 1"
            )

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["params"] = self.params.to_dict()
        return out


def load_recipe_document(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a recipe JSON file without validating it"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"recipe file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"recipe {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"recipe {path} must contain a JSON object")
    return data


# ---- Reports ----
@dataclass
class TensorAction:
    name: str
    action: str  # method applied, e.g. "widen_2d", "ties", "copy_backbone"
    shape: Tuple[int, ...]


@dataclass
class MergeReport:
    method: str
    output: str
    params: Dict[str, Any]
    tensors: List[TensorAction] = field(default_factory=list)
    count_1d: int = 0
    count_2d: int = 0
    copied: List[str] = field(default_factory=list)
    threads: int = 1
    wall_time_s: float = 0.0
    peak_resident_bytes: int = 0

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["tensors"] = [
            {"name": t.name, "action": t.action, "shape": list(t.shape)} for t in self.tensors
        ]
        return out


__all__ = [
    'METHODS', 'VARIANTS', 'DTYPES', 'DTYPE_POLICIES', 'MISSING_TENSOR_POLICIES',
    'TensorMeta', 'WidenParams', 'ImportanceScores', 'MergeParams', 'MergeRecipe',
    'load_recipe_document', 'TensorAction', 'MergeReport',
]
