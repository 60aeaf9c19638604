"""Visual, textual, and virtual class prototypes.

Visual prototypes are normalized per-class means of training features and
stay frozen, as do the textual prototypes.  Virtual prototypes stand in for
the missing visual prototypes of new classes: they start at the new class's
textual prototype plus a small jitter and are the only block the training
loop is allowed to mutate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, DegenerateVectorError
from .packs import FeaturePack
from .rng import Rng
from .sampling import ClassSplit


@dataclass
class PrototypeSet:
    visual: np.ndarray  # (K_b, D) float64, unit rows, frozen
    textual: np.ndarray  # (K, D) float64, unit rows, frozen
    virtual: np.ndarray  # (K_n, D) float64, trainable
    base_ids: tuple[int, ...]
    new_ids: tuple[int, ...]

    @property
    def dim(self) -> int:
        return int(self.textual.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.textual.shape[0])


def visual_prototypes(train_pack: FeaturePack, split: ClassSplit) -> np.ndarray:
    """Row b = normalized mean of training features labeled split.base_ids[b]."""
    feats = train_pack.features.astype(np.float64)
    labels = train_pack.labels.astype(np.int64)
    rows = np.empty((len(split.base_ids), feats.shape[1]), dtype=np.float64)
    for b, class_id in enumerate(split.base_ids):
        mask = labels == class_id
        if not mask.any():
            raise CoverageError(
                f"base class {class_id} ({train_pack.class_names[class_id]})"
                " has no training samples"
            )
        mean = feats[mask].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise DegenerateVectorError(f"mean of class {class_id} has zero norm")
        rows[b] = mean / norm
    return rows


def init_virtual(
    textual: np.ndarray, new_ids, jitter: float, seed: int,
    random_init: bool = False,
) -> np.ndarray:
    """V_hat[j] = normalize(textual[new_ids[j]] + N(0, jitter^2 I)).

    The text embedding is the best available estimate of a missing visual
    prototype in a joint embedding space; ``random_init`` replaces it with a
    unit random vector (ablation baseline).
    """
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    new_ids = tuple(int(i) for i in new_ids)
    dim = textual.shape[1]
    rng = Rng(seed).split("virtual-init")
    if random_init:
        rows = np.empty((len(new_ids), dim), dtype=np.float64)
        for j in range(len(new_ids)):
            v = rng.gaussians(dim)
            rows[j] = v / np.linalg.norm(v)
        return rows
    if jitter == 0.0:
        return textual[list(new_ids)].astype(np.float64).copy()
    rows = np.empty((len(new_ids), dim), dtype=np.float64)
    for j, class_id in enumerate(new_ids):
        v = textual[class_id].astype(np.float64) + jitter * rng.gaussians(dim)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise DegenerateVectorError(f"virtual prototype for class {class_id} collapsed")
        rows[j] = v / norm
    return rows


def build_prototypes(
    train_pack: FeaturePack,
    text_pack: FeaturePack,
    split: ClassSplit,
    jitter: float = 0.01,
    seed: int = 0,
    random_virtual: bool = False,
) -> PrototypeSet:
    """Assemble the full prototype set for a training run."""
    textual = text_pack.features.astype(np.float64)
    return PrototypeSet(
        visual=visual_prototypes(train_pack, split),
        textual=textual,
        virtual=init_virtual(textual, split.new_ids, jitter, seed, random_virtual),
        base_ids=tuple(split.base_ids),
        new_ids=tuple(split.new_ids),
    )
