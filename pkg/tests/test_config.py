import json
import logging

import pytest

from utils.config import SEED_ENV, THREADS_ENV, default_seed, resolve_threads, setup_logging
from utils.errors import ArityError, ConfigError, EmptyModelList
from utils.models import MergeParams, MergeRecipe, load_recipe_document

BASE = {"backbone": "b.safetensors", "models": ["m1.safetensors", "m2.safetensors"], "output": "o.safetensors"}


class TestThreads:
    def test_explicit(self):
        assert resolve_threads(3) == 3

    def test_auto_from_env(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "5")
        assert resolve_threads("auto") == 5

    def test_auto_without_env(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert resolve_threads("auto") >= 1

    @pytest.mark.parametrize("value", [0, -2, "many", True])
    def test_invalid(self, value):
        with pytest.raises(ConfigError):
            resolve_threads(value)


def test_default_seed(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "17")
    assert default_seed() == 17
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError):
        default_seed()


def test_setup_logging_levels():
    setup_logging(1)
    assert logging.getLogger().level == logging.DEBUG
    setup_logging(-1)
    assert logging.getLogger().level == logging.WARNING


class TestRecipe:
    def test_defaults(self):
        recipe = MergeRecipe.from_dict(BASE)
        assert recipe.method == "widen"
        assert recipe.params == MergeParams()
        assert recipe.params.widen().c == 2

    def test_lambda_alias(self):
        recipe = MergeRecipe.from_dict({**BASE, "params": {"lambda": 0.3}})
        assert recipe.params.lambda_ == 0.3
        assert recipe.to_dict()["params"]["lambda"] == 0.3

    @pytest.mark.parametrize("document, error", [
        ({**BASE, "method": "slerp", "models": ["a", "b", "c"]}, ArityError),
        ({**BASE, "method": "model_stock", "models": ["a"]}, ArityError),
        ({**BASE, "models": []}, EmptyModelList),
        ({**BASE, "method": "frankenmerge"}, ConfigError),
        ({**BASE, "params": {"temperature": 1.0}}, ConfigError),
        ({**BASE, "params": {"norm_order": 3}}, ConfigError),
        ({**BASE, "params": {"drop_rate": 1.0}}, ConfigError),
        ({**BASE, "method": "breadcrumbs", "params": {"mask_top": 0.2, "keep_ratio": 0.9}}, ConfigError),
        ({**BASE, "threads": 0}, ConfigError),
        ({"backbone": "b", "models": ["m"]}, ConfigError),
    ])
    def test_rejected(self, document, error):
        with pytest.raises(error):
            MergeRecipe.from_dict(document)

    def test_load_document(self, tmp_path):
        path = tmp_path / "r.json"
        path.write_text(json.dumps(BASE))
        assert load_recipe_document(path) == BASE

    def test_load_invalid_json(self, tmp_path):
        path = tmp_path / "r.json"
        path.write_text("{")
        with pytest.raises(ConfigError):
            load_recipe_document(path)
