"""Shared fixtures: toy model specs, synthetic datasets and data roots."""
import numpy as np
import pytest

from data_loader import Dataset, write_idx
from glimpse import GlimpseConfig
from models import ModelSpec, RecurrentAttentionModel


def toy_spec(variant: str = "RAM", **overrides) -> ModelSpec:
    """A model small enough for finite differences."""
    values = dict(
        variant=variant,
        hidden=6,
        glimpse_hidden=5,
        loc_hidden=4,
        num_glimpses=3,
        glimpse_cfg=GlimpseConfig(patch_size=4, num_scales=1),
        baseline_mode="single",
        num_classes=3,
        image_size=8,
        baseline_hidden=4,
    )
    values.update(overrides)
    return ModelSpec(**values)


def toy_model(variant: str = "RAM", dtype=np.float64, seed: int = 3, **overrides) -> RecurrentAttentionModel:
    return RecurrentAttentionModel(toy_spec(variant, **overrides), seed=seed, dtype=dtype)


def toy_dataset(n: int = 10, size: int = 8, num_classes: int = 3, seed: int = 0, split: str = "train") -> Dataset:
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n, size, size)).astype(np.float32)
    labels = rng.integers(0, num_classes, size=n)
    return Dataset(images, labels, split, "toy", num_classes)


def zero_grads(model):
    for tensor in model.parameters().values():
        tensor.zero_grad()


def grad_norms(model):
    return {name: float(np.abs(t.grad).sum()) for name, t in model.parameters().items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def images(rng):
    return rng.normal(size=(2, 8, 8))


@pytest.fixture
def mnist_root(tmp_path):
    """A fake MNIST root with 40 training and 12 test 28x28 images."""
    rng = np.random.default_rng(7)
    folder = tmp_path / "mnist"
    folder.mkdir()
    for prefix, n in (("train", 40), ("t10k", 12)):
        write_idx(folder / f"{prefix}-images-idx3-ubyte", rng.integers(0, 256, size=(n, 28, 28)))
        write_idx(folder / f"{prefix}-labels-idx1-ubyte", np.arange(n) % 10)
    return tmp_path
