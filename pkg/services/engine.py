import copy
import itertools
import json
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor, Future
from pathlib import Path
from typing import Any, Callable, Deque, Dict, Iterator, List, Optional, Tuple

import numpy as np

from services import baselines
from services.widen import widen_merge_1d, widen_merge_2d
from utils.checkpoint_io import (
    CheckpointHandle,
    open_checkpoint,
    write_checkpoint,
    validate_homologous,
)
from utils.config import default_seed, resolve_threads
from utils.errors import (
    ConfigError,
    HomologyError,
    NumericError,
    UnsupportedRank,
    WidenMergeError,
)
from utils.models import MergeParams, MergeRecipe, MergeReport, TensorAction, TensorMeta

logger = logging.getLogger(__name__)

# name, backbone, models, params -> merged tensor
MergeFn = Callable[[str, np.ndarray, List[np.ndarray], MergeParams], np.ndarray]


# ---- Method registry ----
def _widen(name, base, models, params):
    if base.ndim == 1:
        return widen_merge_1d(base, models, params.widen())
    return widen_merge_2d(base, models, params.widen())


def _dare(name, base, models, params):
    seed = params.seed if params.seed is not None else default_seed()
    return baselines.dare_task_arithmetic(base, models, params.drop_rate, params.lambda_, seed, name)


METHOD_TABLE: Dict[str, MergeFn] = {
    "widen": _widen,
    "average": lambda name, base, models, p: baselines.average_merge(base, models),
    "task_arithmetic": lambda name, base, models, p: baselines.task_arithmetic(base, models, p.lambda_),
    "slerp": lambda name, base, models, p: baselines.slerp_models(base, models, p.phi),
    "model_stock": lambda name, base, models, p: baselines.model_stock(base, models),
    "ties": lambda name, base, models, p: baselines.ties_merge(base, models, p.keep_ratio, p.lambda_),
    "breadcrumbs": lambda name, base, models, p: baselines.breadcrumbs_merge(base, models, p.mask_top, p.keep_ratio, p.lambda_),
    "dare_task_arithmetic": _dare,
    "magnitude_prune_task_arithmetic": lambda name, base, models, p: baselines.magnitude_prune_task_arithmetic(base, models, p.drop_rate, p.lambda_),
}


def action_label(method: str, rank: int) -> str:
    if method == "widen":
        return f"widen_{rank}d"
    return method


# ---- Recipes ----
def apply_overrides(document: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """
    Layer flag overrides onto a raw recipe document.

    Keys that name MergeParams fields go under "params"; everything else is a
    top-level recipe key. None values are ignored.
    """
    out = copy.deepcopy(document)
    param_keys = set(MergeParams.field_names())
    for key, value in overrides.items():
        if value is None:
            continue
        if key in param_keys:
            out.setdefault("params", {})[key] = value
        else:
            out[key] = value
    return out


def _plan(backbone: CheckpointHandle, models: List[CheckpointHandle], recipe: MergeRecipe) -> List[Tuple[TensorMeta, str]]:
    """Validate homology and decide, per backbone tensor, whether to merge or copy"""
    report = validate_homologous([backbone] + models)
    if report.shape_mismatch:
        first = report.shape_mismatch[0]
        raise HomologyError(
            f"{len(report.shape_mismatch)} shape mismatch(es), e.g. {first['name']!r}: "
            f"{first['reference']} in backbone vs {first['other']} in {first['model']}"
        )
    extra = sorted({n for names in report.only_in_other.values() for n in names})
    missing = {n for names in report.only_in_reference.values() for n in names}
    if recipe.missing_tensor_policy == "error" and (extra or missing):
        sample = sorted(missing)[:3] or extra[:3]
        raise HomologyError(
            f"models are not homologous with the backbone: {len(missing)} tensor(s) missing from a model, "
            f"{len(extra)} absent from the backbone (e.g. {sample})"
        )
    if extra:
        logger.warning(f"[Engine] ignoring {len(extra)} tensor(s) not present in the backbone")

    plan: List[Tuple[TensorMeta, str]] = []
    for name in backbone.names():
        meta = backbone.meta(name)
        if meta.rank not in (1, 2):
            raise UnsupportedRank(f"{name!r} has rank {meta.rank}; only 1-D and 2-D tensors are supported")
        action = "copy_backbone" if name in missing else action_label(recipe.method, meta.rank)
        plan.append((meta, action))
    return plan


def merge_tensor(name: str, backbone: CheckpointHandle, models: List[CheckpointHandle], recipe: MergeRecipe) -> np.ndarray:
    """Merge a single tensor exactly as run_merge does"""
    base = backbone.read_tensor(name)
    tensors = [m.read_tensor(name) for m in models]
    try:
        merged = METHOD_TABLE[recipe.method](name, base.astype(np.float64), [t.astype(np.float64) for t in tensors], recipe.params)
    except NumericError as e:
        raise NumericError(f"{name}: {e}") from e
    except (FloatingPointError, ValueError) as e:
        raise NumericError(f"{name}: {e}") from e
    if not np.all(np.isfinite(merged)):
        raise NumericError(f"{name}: merged tensor contains non-finite values")
    return merged


def _merged_stream(
    plan: List[Tuple[TensorMeta, str]],
    backbone: CheckpointHandle,
    models: List[CheckpointHandle],
    recipe: MergeRecipe,
    threads: int,
) -> Iterator[Tuple[str, np.ndarray]]:
    """Yield merged tensors in plan order while at most `threads` are in flight"""

    def task(meta: TensorMeta, action: str) -> np.ndarray:
        if action == "copy_backbone":
            return backbone.read_tensor(meta.name)
        logger.debug(f"[Engine] merging {meta.name} {list(meta.shape)} via {action}")
        return merge_tensor(meta.name, backbone, models, recipe)

    pending: Deque[Tuple[str, Future]] = deque()
    items = iter(plan)
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="merge") as pool:
        try:
            for meta, action in itertools.islice(items, threads):
                pending.append((meta.name, pool.submit(task, meta, action)))
            while pending:
                name, future = pending.popleft()
                result = future.result()
                nxt = next(items, None)
                if nxt is not None:
                    pending.append((nxt[0].name, pool.submit(task, *nxt)))
                yield name, result
        finally:
            for _, future in pending:
                future.cancel()


def run_merge(recipe: MergeRecipe) -> MergeReport:
    """
    Merge the recipe's checkpoints and write the output.

    All validation happens before the output file is created; a failure while
    merging any tensor removes the partial output and re-raises with the tensor name.
    """
    start = time.perf_counter()
    threads = resolve_threads(recipe.threads)
    logger.info(f"[Engine] {recipe.method} merge of {len(recipe.models)} model(s) into {recipe.output} ({threads} thread(s))")

    backbone = open_checkpoint(recipe.backbone)
    models = [open_checkpoint(p) for p in recipe.models]
    plan = _plan(backbone, models, recipe)

    metadata = {"merge_method": recipe.method, "merge_params": _params_metadata(recipe)}
    write_checkpoint(
        [meta for meta, _ in plan],
        _merged_stream(plan, backbone, models, recipe, threads),
        recipe.output,
        dtype_policy=recipe.dtype_policy,
        metadata=metadata,
        max_shard_bytes=recipe.max_shard_bytes,
    )

    largest = max((meta.numel for meta, _ in plan), default=0)
    report = MergeReport(
        method=recipe.method,
        output=recipe.output,
        params=recipe.params.to_dict(),
        tensors=[TensorAction(name=meta.name, action=action, shape=meta.shape) for meta, action in plan],
        count_1d=sum(1 for meta, _ in plan if meta.rank == 1),
        count_2d=sum(1 for meta, _ in plan if meta.rank == 2),
        copied=[meta.name for meta, action in plan if action == "copy_backbone"],
        threads=threads,
        wall_time_s=round(time.perf_counter() - start, 6),
        peak_resident_bytes=threads * (len(models) + 2) * largest * 8,
    )
    logger.info(f"[Engine] done in {report.wall_time_s:.2f}s ({report.count_2d} 2-D, {report.count_1d} 1-D, {len(report.copied)} copied)")
    return report


def _params_metadata(recipe: MergeRecipe) -> str:
    return ",".join(f"{k}={v}" for k, v in sorted(recipe.params.to_dict().items()))


# ---- Grid search ----
def grid_search_expand(document: Dict[str, Any]) -> List[MergeRecipe]:
    """
    Expand list-valued params of a recipe document into one recipe per combination.

    Each recipe's output path gets a suffix naming the varied values, e.g.
    out.safetensors -> out__t=2.0.safetensors. Output collisions are rejected.
    """
    params = dict(document.get("params", {}))
    axes = [(k, v) for k, v in sorted(params.items()) if isinstance(v, list)]
    for key, values in axes:
        if not values:
            raise ConfigError(f"grid axis {key!r} is empty")
    output = document.get("output")
    if not isinstance(output, str) or not output:
        raise ConfigError("recipe is missing required key: output")

    recipes: List[MergeRecipe] = []
    for combo in itertools.product(*[values for _, values in axes]):
        doc = copy.deepcopy(document)
        doc["params"] = {**params, **{k: v for (k, _), v in zip(axes, combo)}}
        if axes:
            doc["output"] = _suffixed(output, [(k, v) for (k, _), v in zip(axes, combo)])
        recipes.append(MergeRecipe.from_dict(doc))
    if not recipes:
        raise ConfigError("grid expands to no recipes")

    outputs = [str(Path(r.output).resolve()) for r in recipes]
    duplicates = sorted({o for o in outputs if outputs.count(o) > 1})
    if duplicates:
        raise ConfigError(f"grid produces colliding output paths: {duplicates}")
    return recipes


def _suffixed(output: str, values: List[Tuple[str, Any]]) -> str:
    path = Path(output)
    tag = "__" + "_".join(f"{k}={v}" for k, v in values)
    if path.suffix:
        return str(path.with_name(f"{path.stem}{tag}{path.suffix}"))
    return str(path.with_name(f"{path.name}{tag}"))


def run_grid(document: Dict[str, Any], manifest_path: Optional[str] = None) -> Dict[str, Any]:
    """Run every recipe of a grid, writing a manifest of completed outputs as it goes"""
    recipes = grid_search_expand(document)
    if manifest_path is None:
        manifest_path = str(Path(document["output"]).with_suffix("")) + ".manifest.json"
    manifest: Dict[str, Any] = {"manifest": manifest_path, "runs": []}
    for i, recipe in enumerate(recipes, 1):
        logger.info(f"[Engine] grid run {i}/{len(recipes)} -> {recipe.output}")
        try:
            report = run_merge(recipe)
        except WidenMergeError:
            _write_manifest(manifest)
            raise
        manifest["runs"].append({"output": recipe.output, "params": recipe.params.to_dict(), "wall_time_s": report.wall_time_s})
        _write_manifest(manifest)
    return manifest


def _write_manifest(manifest: Dict[str, Any]) -> None:
    path = Path(manifest["manifest"])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)


__all__ = [
    'METHOD_TABLE', 'apply_overrides', 'merge_tensor', 'run_merge', 'grid_search_expand', 'run_grid',
]
