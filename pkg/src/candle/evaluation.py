"""Metrics and evaluation protocols.

Mean-class accuracy (the unweighted mean of per-class recall) replaces
overall accuracy everywhere, since test sets may themselves be imbalanced.
Base-to-new evaluation scores base-class and new-class test samples
separately and combines them with the harmonic mean 2bn/(b+n) to surface
the generalization trade-off.

The default label-space policy is "separate": base samples are scored
against base classes only and new samples against new classes only.  The
"joint" policy scores everything against all K classes; both are reported
because the aggregated visual logits are defined over the full class set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FormatError, ParameterError, ProtocolError
from .model import (
    ModelParams,
    attention_forward,
    attention_allow_mask,
    predict,
    textual_logits_t,
    argmax_labels,
)
from . import autodiff as ad
from .autodiff import Tensor
from .packs import FeaturePack
from .prototypes import PrototypeSet
from .sampling import ClassSplit


@dataclass
class EvalReport:
    per_class_accuracy: tuple[float, ...]
    base_acc: float
    new_acc: float
    harmonic: float
    protocol: str  # "base_to_new" | "transfer" | "single"
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "base_acc": self.base_acc,
            "new_acc": self.new_acc,
            "harmonic": self.harmonic,
            "per_class_accuracy": list(self.per_class_accuracy),
            "config": self.config,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def mean_class_accuracy(preds, labels, label_space: Sequence[int]) -> float:
    """Unweighted mean over classes of per-class accuracy."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    accs = []
    for class_id in label_space:
        mask = labels == class_id
        if not mask.any():
            raise ProtocolError(f"class {class_id} has no test samples")
        accs.append(float((preds[mask] == class_id).mean()))
    return float(np.mean(accs))


def harmonic_mean(base_acc: float, new_acc: float) -> float:
    """2bn/(b+n); zero if either side is zero."""
    if base_acc <= 0.0 or new_acc <= 0.0:
        return 0.0
    return 2.0 * base_acc * new_acc / (base_acc + new_acc)


def per_class_accuracy(preds, labels, num_classes: int) -> dict[int, float]:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    out = {}
    for class_id in range(num_classes):
        mask = labels == class_id
        if mask.any():
            out[class_id] = float((preds[mask] == class_id).mean())
    return out


def report_from_split_preds(
    preds_base, labels_base, preds_new, labels_new,
    split: ClassSplit, protocol: str = "base_to_new",
    config: dict | None = None, seed: int = 0,
) -> EvalReport:
    """Assemble an EvalReport from predictions on the two test subsets."""
    base_acc = mean_class_accuracy(preds_base, labels_base, split.base_ids)
    new_acc = mean_class_accuracy(preds_new, labels_new, split.new_ids)
    k = split.num_classes
    per_class = np.zeros(k)
    for class_id, acc in per_class_accuracy(preds_base, labels_base, k).items():
        per_class[class_id] = acc
    for class_id, acc in per_class_accuracy(preds_new, labels_new, k).items():
        per_class[class_id] = acc
    return EvalReport(
        per_class_accuracy=tuple(float(a) for a in per_class),
        base_acc=base_acc,
        new_acc=new_acc,
        harmonic=harmonic_mean(base_acc, new_acc),
        protocol=protocol,
        config=dict(config or {}),
        seed=seed,
    )


def _split_test(test_pack: FeaturePack, split: ClassSplit):
    labels = test_pack.labels.astype(np.int64)
    feats = test_pack.features.astype(np.float64)
    base_mask = np.isin(labels, list(split.base_ids))
    new_mask = np.isin(labels, list(split.new_ids))
    if not base_mask.any() or not new_mask.any():
        raise ProtocolError("test pack must cover both base and new classes")
    return feats[base_mask], labels[base_mask], feats[new_mask], labels[new_mask]


def textual_only_logits(params: ModelParams, x: np.ndarray, textual: np.ndarray,
                        eval_batch: int | None = 1) -> np.ndarray:
    """Post-attention textual logits with no visual or virtual prototype tokens.

    This is the path used for transfer targets, whose classes have neither
    visual nor trained virtual prototypes.  ``eval_batch`` has the same
    semantics as in :func:`candle.model.aggregate_logits`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != params.dim or textual.shape[1] != params.dim:
        raise FormatError(
            f"feature width mismatch: model dim {params.dim},"
            f" images {x.shape[1]}, text {textual.shape[1]}"
        )
    if eval_batch is not None and x.shape[0] > eval_batch:
        return np.concatenate([
            textual_only_logits(params, x[i : i + eval_batch], textual, eval_batch=None)
            for i in range(0, x.shape[0], eval_batch)
        ])
    xp = ad.matmul(Tensor(x), Tensor(params.w_pi))
    tp = ad.matmul(Tensor(np.asarray(textual, dtype=np.float64)), Tensor(params.w_pt))
    b, k = xp.shape[0], tp.shape[0]
    allow = attention_allow_mask("none", b, k)
    out = attention_forward(ad.concat([xp, tp], axis=0), params, allow)
    xp2 = ad.narrow(out, 0, 0, b)
    tp2 = ad.narrow(out, 0, b, k)
    return textual_logits_t(xp2, tp2, params).data


def base_to_new_eval(
    params: ModelParams,
    prototypes: PrototypeSet,
    test_pack: FeaturePack,
    mode: str = "separate",
    *,
    mask: str = "none",
    use_attention: bool = True,
    use_virtual: bool = True,
    predictor: str = "aggregate",  # "aggregate" | "text_only"
    eval_batch: int | None = 1,
    config: dict | None = None,
    seed: int = 0,
) -> EvalReport:
    """Score base and new test samples under the chosen label-space policy."""
    if mode not in ("separate", "joint"):
        raise ParameterError(f"unknown label-space mode {mode!r}")
    split = ClassSplit(base_ids=prototypes.base_ids, new_ids=prototypes.new_ids)
    xb, yb, xn, yn = _split_test(test_pack, split)
    if predictor == "text_only":
        zb = textual_only_logits(params, xb, prototypes.textual, eval_batch)
        zn = textual_only_logits(params, xn, prototypes.textual, eval_batch)
        preds_base = argmax_labels(zb, split.base_ids if mode == "separate" else None)
        preds_new = argmax_labels(zn, split.new_ids if mode == "separate" else None)
    elif predictor == "aggregate":
        kwargs = dict(mask=mask, use_attention=use_attention, use_virtual=use_virtual,
                      eval_batch=eval_batch)
        preds_base = predict(
            xb, prototypes, params,
            label_space=split.base_ids if mode == "separate" else None, **kwargs,
        )
        preds_new = predict(
            xn, prototypes, params,
            label_space=split.new_ids if mode == "separate" else None, **kwargs,
        )
    else:
        raise ParameterError(f"unknown predictor {predictor!r}")
    echo = {
        "mode": mode, "mask": mask, "use_attention": use_attention,
        "use_virtual": use_virtual, "predictor": predictor,
        "tau_t": params.tau_t, "tau_v": params.tau_v,
    }
    echo.update(config or {})
    return report_from_split_preds(
        preds_base, yb, preds_new, yn, split,
        protocol="base_to_new", config=echo, seed=seed,
    )


def transfer_eval(
    params: ModelParams,
    target_text_pack: FeaturePack,
    target_image_pack: FeaturePack,
    eval_batch: int | None = 1,
    config: dict | None = None,
    seed: int = 0,
) -> EvalReport:
    """Cross-dataset transfer: textual path only, joint target label space.

    The transfer score is reported in ``new_acc`` (the target classes are all
    unseen); ``base_acc`` and ``harmonic`` are zero by convention.
    """
    if target_text_pack.kind != "text":
        raise ParameterError("target_text_pack must be a text pack")
    labels = target_image_pack.labels.astype(np.int64)
    feats = target_image_pack.features.astype(np.float64)
    textual = target_text_pack.features.astype(np.float64)
    z = textual_only_logits(params, feats, textual, eval_batch)
    preds = argmax_labels(z, None)
    k = target_text_pack.num_classes
    acc = mean_class_accuracy(preds, labels, sorted(set(labels.tolist())))
    per_class = np.zeros(k)
    for class_id, a in per_class_accuracy(preds, labels, k).items():
        per_class[class_id] = a
    echo = {"tau_t": params.tau_t, "target": target_image_pack.dataset}
    echo.update(config or {})
    return EvalReport(
        per_class_accuracy=tuple(float(a) for a in per_class),
        base_acc=0.0,
        new_acc=acc,
        harmonic=0.0,
        protocol="transfer",
        config=echo,
        seed=seed,
    )
