"""Feature-space adaptation of frozen vision-language embeddings.

Trains lightweight projections, one cross-modal attention layer, and
learnable virtual prototypes under a compensating logit-adjusted loss, and
evaluates long-tailed base-to-new generalization.
"""

import os as _os

# Must happen before numpy loads its BLAS: cap numeric thread pools.
_threads = _os.environ.get("CANDLE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .packs import FeaturePack, SynthConfig, l2_normalize, read_pack, synth_generate, write_pack
from .sampling import (
    ClassSplit,
    ImbalanceProfile,
    exp_decay_counts,
    few_shot_sample,
    split_base_new,
    subsample,
)
from .prototypes import PrototypeSet, build_prototypes, init_virtual, visual_prototypes
from .model import ModelParams, load_checkpoint, predict, save_checkpoint
from .training import ClassPriors, TrainConfig, cla_loss, estimate_priors, grad_check, train
from .evaluation import EvalReport, base_to_new_eval, harmonic_mean, mean_class_accuracy, transfer_eval

__all__ = [
    "FeaturePack", "SynthConfig", "l2_normalize", "read_pack", "synth_generate", "write_pack",
    "ClassSplit", "ImbalanceProfile", "exp_decay_counts", "few_shot_sample",
    "split_base_new", "subsample",
    "PrototypeSet", "build_prototypes", "init_virtual", "visual_prototypes",
    "ModelParams", "load_checkpoint", "predict", "save_checkpoint",
    "ClassPriors", "TrainConfig", "cla_loss", "estimate_priors", "grad_check", "train",
    "EvalReport", "base_to_new_eval", "harmonic_mean", "mean_class_accuracy", "transfer_eval",
    "__version__",
]
