import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from cli import cli
from tests.conftest import save_checkpoint, write_recipe
from utils.checkpoint_io import open_checkpoint


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def recipe(family):
    return write_recipe(
        family["dir"] / "recipe.json",
        backbone=family["backbone"],
        models=family["models"],
        output=str(family["dir"] / "merged.safetensors"),
        threads=1,
    )


def test_merge(runner, recipe, family):
    result = runner.invoke(cli, ["merge", "--recipe", recipe])
    assert result.exit_code == 0, result.output
    assert os.path.exists(family["dir"] / "merged.safetensors")
    report = json.loads(result.stdout)
    assert report["method"] == "widen"
    assert report["count_2d"] == 3


def test_merge_report_file(runner, recipe, family):
    report_path = family["dir"] / "report.json"
    result = runner.invoke(cli, ["merge", "--recipe", recipe, "--report", str(report_path)])
    assert result.exit_code == 0, result.output
    assert json.loads(report_path.read_text())["output"].endswith("merged.safetensors")


def test_flag_overrides_match_task_arithmetic(runner, recipe, family):
    widen_out = str(family["dir"] / "w.safetensors")
    ta_out = str(family["dir"] / "ta.safetensors")
    assert runner.invoke(cli, ["merge", "--recipe", recipe, "--t", "-1", "--s", "0.5", "--output", widen_out]).exit_code == 0
    assert runner.invoke(cli, ["merge", "--recipe", recipe, "--method", "task_arithmetic", "--lambda", "0.5", "--output", ta_out]).exit_code == 0
    a, b = open_checkpoint(widen_out), open_checkpoint(ta_out)
    for name in a.names():
        np.testing.assert_allclose(a.read_tensor(name), b.read_tensor(name), rtol=1e-6, atol=1e-7)


def test_slerp_with_three_models_is_config_error(runner, recipe, family):
    result = runner.invoke(cli, ["merge", "--recipe", recipe, "--method", "slerp"])
    assert result.exit_code == 2
    assert not os.path.exists(family["dir"] / "merged.safetensors")


def test_unknown_recipe_key_is_config_error(runner, family):
    path = write_recipe(family["dir"] / "bad.json", backbone=family["backbone"], models=family["models"], output="x", colour="red")
    assert runner.invoke(cli, ["merge", "--recipe", path]).exit_code == 2


def test_unreadable_checkpoint_is_checkpoint_error(runner, family):
    bogus = family["dir"] / "bogus.safetensors"
    bogus.write_bytes(b"\x01")
    path = write_recipe(family["dir"] / "r.json", backbone=str(bogus), models=family["models"], output=str(family["dir"] / "o.safetensors"))
    assert runner.invoke(cli, ["merge", "--recipe", path]).exit_code == 3


def test_non_finite_model_is_numeric_error(runner, family):
    broken = dict(family["tensors"][0])
    broken["norm.weight"] = np.full_like(broken["norm.weight"], np.inf)
    model = save_checkpoint(family["dir"] / "inf.safetensors", broken)
    path = write_recipe(family["dir"] / "r.json", backbone=family["backbone"], models=[model], output=str(family["dir"] / "o.safetensors"), threads=1)
    result = runner.invoke(cli, ["merge", "--recipe", path])
    assert result.exit_code == 4
    assert not os.path.exists(family["dir"] / "o.safetensors")


def test_validate(runner, family):
    assert runner.invoke(cli, ["validate", family["backbone"], *family["models"]]).exit_code == 0


def test_validate_mismatch(runner, family):
    other = save_checkpoint(family["dir"] / "other.safetensors", {"w": np.ones(3, dtype=np.float32)})
    result = runner.invoke(cli, ["validate", family["backbone"], other])
    assert result.exit_code == 1
    assert json.loads(result.stdout)["homologous"] is False


def test_validate_needs_two_paths(runner, family):
    assert runner.invoke(cli, ["validate", family["backbone"]]).exit_code == 2


def test_analyze(runner, recipe, family):
    out_dir = family["dir"] / "analysis"
    result = runner.invoke(cli, ["analyze", "--recipe", recipe, "--out-dir", str(out_dir), "--bins", "8", "--aggregate", "tensor"])
    assert result.exit_code == 0, result.output
    for name in ("analysis.json", "histograms.csv", "transitions.csv", "deciles.csv"):
        assert (out_dir / name).exists()


def test_grid(runner, family):
    path = write_recipe(
        family["dir"] / "grid.json",
        backbone=family["backbone"],
        models=family["models"],
        output=str(family["dir"] / "g.safetensors"),
        threads=1,
        params={"t": [0.5, 1.0]},
    )
    result = runner.invoke(cli, ["grid", "--recipe", path])
    assert result.exit_code == 0, result.output
    assert (family["dir"] / "g__t=0.5.safetensors").exists()
    assert (family["dir"] / "g__t=1.0.safetensors").exists()
    assert (family["dir"] / "g.manifest.json").exists()


def test_grid_collision_is_config_error(runner, family):
    path = write_recipe(
        family["dir"] / "grid.json",
        backbone=family["backbone"],
        models=family["models"],
        output=str(family["dir"] / "g.safetensors"),
        params={"t": [1.0, 1.0]},
    )
    assert runner.invoke(cli, ["grid", "--recipe", path]).exit_code == 2
