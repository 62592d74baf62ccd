import json
from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest
import safetensors.numpy

# backbone layout shared by the checkpoint fixtures
SHAPES = {
    "embed.weight": (6, 4),
    "layers.0.bias": (5,),
    "layers.0.weight": (4, 5),
    "layers.1.weight": (5, 6),
    "norm.weight": (6,),
}


def save_checkpoint(path, tensors: Dict[str, np.ndarray]) -> str:
    """Write fp32/fp16 fixtures with the reference safetensors implementation"""
    safetensors.numpy.save_file({k: np.ascontiguousarray(v) for k, v in tensors.items()}, str(path))
    return str(path)


def write_recipe(path, **fields) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(fields, f)
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def backbone_tensors(rng) -> Dict[str, np.ndarray]:
    return {name: rng.normal(0.0, 0.05, size=shape).astype(np.float32) for name, shape in SHAPES.items()}


@pytest.fixture
def family(tmp_path, rng, backbone_tensors):
    """Backbone plus three perturbed models on disk"""
    backbone = save_checkpoint(tmp_path / "backbone.safetensors", backbone_tensors)
    models: List[str] = []
    tensors: List[Dict[str, np.ndarray]] = []
    for n, scale in enumerate((1e-3, 5e-3, 2e-2)):
        perturbed = {
            name: (w + rng.normal(0.0, scale, size=w.shape)).astype(np.float32)
            for name, w in backbone_tensors.items()
        }
        tensors.append(perturbed)
        models.append(save_checkpoint(tmp_path / f"model{n}.safetensors", perturbed))
    return {"backbone": backbone, "backbone_tensors": backbone_tensors, "models": models, "tensors": tensors, "dir": Path(tmp_path)}
