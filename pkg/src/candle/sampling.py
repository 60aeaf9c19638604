"""Long-tailed subset construction and base/new class splits.

All sampling is a pure function of (pack, arguments, seed).  Per-class
choices use independent substreams keyed by class id, so adding or removing
a class never shifts the samples chosen for the others.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ParameterError, ValidationError
from .packs import FeaturePack
from .rng import Rng


@dataclass(frozen=True)
class ImbalanceProfile:
    """Per-class training counts for the base classes, head first."""

    counts: tuple[int, ...]
    max_per_class: int
    ratio: float

    def __post_init__(self):
        if len(self.counts) < 1:
            raise ValidationError("counts: at least one base class required")
        if min(self.counts) < 1:
            raise ValidationError("counts: every base class needs at least 1 sample")
        if any(a < b for a, b in zip(self.counts, self.counts[1:])):
            raise ValidationError("counts: must be nonincreasing head to tail")


def profile_from_counts(counts: Sequence[int]) -> ImbalanceProfile:
    counts = tuple(int(c) for c in counts)
    return ImbalanceProfile(
        counts=counts,
        max_per_class=max(counts),
        ratio=max(counts) / min(counts),
    )


@dataclass(frozen=True)
class ClassSplit:
    base_ids: tuple[int, ...]
    new_ids: tuple[int, ...]

    def __post_init__(self):
        if set(self.base_ids) & set(self.new_ids):
            raise ValidationError("base_ids/new_ids: splits must be disjoint")

    def validate_for(self, num_classes: int) -> None:
        union = set(self.base_ids) | set(self.new_ids)
        if union != set(range(num_classes)):
            raise ValidationError(
                f"base_ids/new_ids: union must cover all {num_classes} classes"
            )

    @property
    def num_classes(self) -> int:
        return len(self.base_ids) + len(self.new_ids)


def exp_decay_counts(num_base: int, n_max: int, ratio: float) -> ImbalanceProfile:
    """Counts n_i = round(n_max * ratio^(-i/(K_b-1))), clamped at 1.

    The exponent makes the head/tail ratio equal ``ratio`` exactly before
    rounding.  Rounding is half-up for portability.
    """
    if num_base < 1:
        raise ParameterError("num_base must be >= 1")
    if n_max < 1:
        raise ParameterError("n_max must be >= 1")
    if ratio < 1:
        raise ParameterError("ratio must be >= 1")
    if num_base == 1:
        counts = (n_max,)
    else:
        counts = []
        for i in range(num_base):
            if i == num_base - 1:
                raw = n_max / ratio  # exact division at the tail endpoint
            else:
                raw = n_max * ratio ** (-i / (num_base - 1))
            n = max(1, int(np.floor(raw + 0.5)))
            if counts:
                n = min(n, counts[-1])  # guard rounding against ulp crossovers
            counts.append(n)
        counts = tuple(counts)
    return ImbalanceProfile(counts=counts, max_per_class=n_max, ratio=ratio)


def split_base_new(class_names: Sequence[str], policy="first-half") -> ClassSplit:
    """Partition class ids into base and new sets.

    ``policy`` is either the string "first-half" (base = first ceil(K/2) ids
    in pack order) or an explicit sequence of base class ids, which must be a
    proper nonempty subset.
    """
    k = len(class_names)
    if k < 2:
        raise ParameterError("need at least 2 classes to split")
    if isinstance(policy, str):
        if policy != "first-half":
            raise ParameterError(f"unknown split policy {policy!r}")
        cut = (k + 1) // 2
        return ClassSplit(base_ids=tuple(range(cut)), new_ids=tuple(range(cut, k)))
    base = tuple(int(i) for i in policy)
    if len(base) == 0 or len(set(base)) != len(base):
        raise ParameterError("explicit base ids must be nonempty and distinct")
    if any(i < 0 or i >= k for i in base):
        raise ParameterError(f"explicit base ids must lie in [0, {k})")
    new = tuple(i for i in range(k) if i not in set(base))
    if not new:
        raise ParameterError("explicit base ids must leave at least one new class")
    return ClassSplit(base_ids=base, new_ids=new)


def _take_per_class(
    pack: FeaturePack, wanted: dict[int, int], seed: int, policy: str
) -> tuple[FeaturePack, dict]:
    labels = pack.labels.astype(np.int64)
    rng = Rng(seed)
    chosen: list[np.ndarray] = []
    manifest_rows = []
    for class_id, requested in wanted.items():
        idx = np.nonzero(labels == class_id)[0]
        take = min(requested, idx.size)
        perm = rng.split(f"class:{class_id}").permutation(idx.size)
        picked = np.sort(idx[perm[:take]])
        chosen.append(picked)
        manifest_rows.append(
            {
                "class_id": int(class_id),
                "name": pack.class_names[class_id],
                "requested": int(requested),
                "actual": int(take),
                "shortfall": int(requested - take),
            }
        )
    order = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    if order.size == 0:
        raise ParameterError("sampling produced an empty pack")
    out = replace(
        pack,
        features=pack.features[order].copy(),
        labels=pack.labels[order].copy(),
    )
    manifest = {"policy": policy, "seed": int(seed), "per_class": manifest_rows}
    return out, manifest


def subsample(
    pack: FeaturePack, profile: ImbalanceProfile, split: ClassSplit, seed: int
) -> tuple[FeaturePack, dict]:
    """Down-sample base classes to the profile counts; new classes are dropped.

    profile.counts[i] applies to split.base_ids[i].  When a class has fewer
    samples than requested, all available samples are taken and the shortfall
    is recorded in the manifest.
    """
    if pack.kind != "image":
        raise ParameterError("subsample expects an image pack")
    if len(profile.counts) != len(split.base_ids):
        raise ParameterError(
            f"profile covers {len(profile.counts)} classes,"
            f" split has {len(split.base_ids)} base classes"
        )
    wanted = {c: n for c, n in zip(split.base_ids, profile.counts)}
    return _take_per_class(pack, wanted, seed, policy="exp-decay")


def few_shot_sample(
    pack: FeaturePack, shots: int, seed: int, class_ids: Sequence[int] | None = None
) -> tuple[FeaturePack, dict]:
    """Balanced subset with min(shots, available) samples per class."""
    if shots < 1:
        raise ParameterError("shots must be >= 1")
    if class_ids is None:
        class_ids = sorted(set(pack.labels.astype(np.int64).tolist()))
    wanted = {int(c): shots for c in class_ids}
    return _take_per_class(pack, wanted, seed, policy=f"few-shot-{shots}")
