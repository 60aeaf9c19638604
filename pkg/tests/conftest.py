import numpy as np
import pytest

from candle.packs import FeaturePack
from candle.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def random_pack(seed: int = 0, kind: str = "image", num_classes: int = 3,
                dim: int = 5, per_class: int = 4, normalized: bool = False) -> FeaturePack:
    """Small arbitrary pack for format/sampling tests (not unit-normalized)."""
    r = Rng(seed)
    if kind == "text":
        count = num_classes
        labels = np.arange(num_classes, dtype=np.uint32)
    else:
        count = num_classes * per_class
        labels = np.repeat(np.arange(num_classes, dtype=np.uint32), per_class)
    feats = r.gaussians(count * dim).reshape(count, dim)
    if normalized:
        feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    return FeaturePack(
        kind=kind,
        features=feats.astype(np.float32),
        labels=labels,
        class_names=tuple(f"c{i}" for i in range(num_classes)),
        normalized=normalized,
        seed=seed,
        dataset="test",
        split="train",
    )
