"""
Command-line front end.

    python cli.py merge --recipe recipe.json [--method widen --t 1.0 ...]
    python cli.py validate a.safetensors b.safetensors
    python cli.py analyze --recipe recipe.json --out-dir analysis/
    python cli.py grid --recipe grid.json

Exit codes: 0 ok, 1 not homologous (validate), 2 config error,
3 checkpoint error, 4 numeric error.
"""
import json
import logging
import sys
from functools import wraps
from typing import Any, Dict, Optional

import click

from services.analysis import AGGREGATES, run_analysis
from services.engine import apply_overrides, run_grid, run_merge
from utils.checkpoint_io import open_checkpoint, validate_homologous
from utils.config import setup_logging
from utils.errors import WidenMergeError
from utils.models import DTYPE_POLICIES, METHODS, VARIANTS, MergeRecipe, load_recipe_document

logger = logging.getLogger(__name__)


def _threads(value: Optional[str]):
    if value is None or value == "auto":
        return value
    try:
        return int(value)
    except ValueError:
        raise click.BadParameter("must be a positive integer or 'auto'")


def recipe_overrides(fn):
    """Flags that override recipe fields; omitted flags leave the recipe untouched"""
    options = [
        click.option("--method", type=click.Choice(METHODS), default=None),
        click.option("--t", "t", type=float, default=None, help="WIDEN crucial-threshold multiple"),
        click.option("--s", "s", type=float, default=None, help="WIDEN calibrated score"),
        click.option("--lambda", "lambda_", type=float, default=None, help="scaling term"),
        click.option("--phi", type=float, default=None, help="SLERP interpolation factor"),
        click.option("--keep-ratio", type=float, default=None),
        click.option("--mask-top", type=float, default=None),
        click.option("--drop-rate", type=float, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--variant", type=click.Choice(VARIANTS), default=None),
        click.option("--threads", type=str, default=None, callback=lambda ctx, p, v: _threads(v)),
        click.option("--dtype-policy", type=click.Choice(DTYPE_POLICIES), default=None),
        click.option("--output", type=str, default=None),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _overrides(kwargs: Dict[str, Any]) -> Dict[str, Any]:
    keys = {
        "method": "method", "t": "t", "s": "s", "lambda_": "lambda", "phi": "phi",
        "keep_ratio": "keep_ratio", "mask_top": "mask_top", "drop_rate": "drop_rate",
        "seed": "seed", "variant": "variant", "threads": "threads",
        "dtype_policy": "dtype_policy", "output": "output",
    }
    return {recipe_key: kwargs.get(arg) for arg, recipe_key in keys.items()}


def _load_recipe(path: str, kwargs: Dict[str, Any]) -> MergeRecipe:
    document = apply_overrides(load_recipe_document(path), _overrides(kwargs))
    return MergeRecipe.from_dict(document)


def handle_errors(fn):
    """Translate toolkit exceptions into documented exit codes"""
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except WidenMergeError as e:
            logger.error(f"[CLI] {type(e).__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)
    return wrapper


def _emit(payload: dict, path: Optional[str]) -> None:
    text = json.dumps(payload, indent=2)
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        click.echo(text)


@click.group()
@click.option("-v", "--verbose", count=True, help="more logging (-vv for everything)")
@click.option("-q", "--quiet", is_flag=True, help="warnings and errors only")
def cli(verbose: int, quiet: bool):
    """Merge homologous safetensors checkpoints with WIDEN and baseline methods."""
    setup_logging(-1 if quiet else verbose)


@cli.command("merge")
@click.option("--recipe", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--report", type=click.Path(dir_okay=False), default=None, help="write the JSON report here instead of stdout")
@recipe_overrides
@handle_errors
def cmd_merge(recipe: str, report: Optional[str], **kwargs):
    """Run one merge described by a recipe file."""
    merge_recipe = _load_recipe(recipe, kwargs)
    result = run_merge(merge_recipe)
    _emit(result.to_dict(), report)


@cli.command("validate")
@click.argument("paths", nargs=-1, type=click.Path())
@handle_errors
def cmd_validate(paths):
    """Check that checkpoints share tensor names and shapes (first path is the reference)."""
    if len(paths) < 2:
        raise click.UsageError("validate needs at least 2 checkpoint paths")
    handles = [open_checkpoint(p) for p in paths]
    report = validate_homologous(handles)
    click.echo(json.dumps(report.to_dict(), indent=2))
    sys.exit(0 if report.homologous else 1)


@cli.command("analyze")
@click.option("--recipe", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--variant-a", type=click.Choice(VARIANTS), default="no_sc", show_default=True)
@click.option("--variant-b", type=click.Choice(VARIANTS), default="full", show_default=True)
@click.option("--bins", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--aggregate", type=click.Choice(AGGREGATES), default="model", show_default=True)
@recipe_overrides
@handle_errors
def cmd_analyze(recipe: str, out_dir: str, variant_a: str, variant_b: str, bins: int, aggregate: str, **kwargs):
    """Importance histograms, tier transitions and delta deciles for a recipe's models."""
    merge_recipe = _load_recipe(recipe, kwargs)
    result = run_analysis(merge_recipe, out_dir, variant_a=variant_a, variant_b=variant_b, bins=bins, aggregate=aggregate)
    click.echo(json.dumps({"out_dir": out_dir, "transitions": result["transitions"], "deciles": result["deciles"]}, indent=2))


@cli.command("grid")
@click.option("--recipe", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False), default=None, help="defaults to <output-stem>.manifest.json")
@handle_errors
def cmd_grid(recipe: str, manifest: Optional[str]):
    """Expand list-valued params into a grid of merges and run them all."""
    result = run_grid(load_recipe_document(recipe), manifest_path=manifest)
    click.echo(json.dumps(result, indent=2))


if __name__ == "__main__":
    cli()
