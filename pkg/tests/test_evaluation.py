import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from candle.errors import FormatError, ParameterError, ProtocolError
from candle.evaluation import (
    EvalReport,
    base_to_new_eval,
    harmonic_mean,
    mean_class_accuracy,
    textual_only_logits,
    transfer_eval,
)
from candle.model import init_identity_params, zero_shot_predict
from candle.packs import FeaturePack, SynthConfig, synth_generate
from candle.prototypes import build_prototypes
from candle.rng import Rng
from candle.sampling import split_base_new


def test_mean_class_accuracy_perfect():
    assert mean_class_accuracy([0, 1, 2], [0, 1, 2], [0, 1, 2]) == 1.0


def test_mean_class_accuracy_ignores_class_sizes():
    # 10 samples of class 0 all right, 1000 of class 1 all wrong -> 0.5,
    # where overall accuracy would be ~0.0099.
    preds = [0] * 10 + [0] * 1000
    labels = [0] * 10 + [1] * 1000
    assert mean_class_accuracy(preds, labels, [0, 1]) == 0.5


def test_mean_class_accuracy_matches_recount():
    rng = Rng(4)
    labels = np.repeat(np.arange(4), 25)
    preds = np.array([rng.randbelow(4) for _ in range(100)])
    got = mean_class_accuracy(preds, labels, range(4))
    want = np.mean([
        np.mean(preds[labels == c] == c) for c in range(4)
    ])  # scalar recount oracle
    assert abs(got - want) <= 1e-12


def test_mean_class_accuracy_duplication_invariant():
    preds = np.array([0, 1, 1, 0, 2, 2])
    labels = np.array([0, 1, 0, 0, 2, 1])
    base = mean_class_accuracy(preds, labels, [0, 1, 2])
    dup_mask = labels == 1
    preds2 = np.concatenate([preds, preds[dup_mask]])
    labels2 = np.concatenate([labels, labels[dup_mask]])
    assert mean_class_accuracy(preds2, labels2, [0, 1, 2]) == base


def test_mean_class_accuracy_empty_class_raises():
    with pytest.raises(ProtocolError, match="class 2"):
        mean_class_accuracy([0, 1], [0, 1], [0, 1, 2])


def test_harmonic_reference_value():
    # Published ablation row: base 80.26, new 61.94 -> harmonic 69.92.
    assert abs(harmonic_mean(0.8026, 0.6194) - 0.6992) <= 5e-4


def test_harmonic_equal_arguments():
    for x in (0.0, 0.25, 1.0):
        assert harmonic_mean(x, x) == x


def test_harmonic_zero_annihilates():
    assert harmonic_mean(1.0, 0.0) == 0.0
    assert harmonic_mean(0.0, 0.7) == 0.0


@given(st.floats(min_value=0, max_value=1), st.floats(min_value=0, max_value=1))
def test_harmonic_below_arithmetic(a, b):
    assert harmonic_mean(a, b) <= (a + b) / 2 + 1e-12


def bench(seed=0):
    cfg = SynthConfig(num_classes=6, dim=16, samples_per_class=12,
                      text_noise=0.2, intra_class_spread=0.2, seed=seed)
    train_pack, text = synth_generate(cfg, split="train")
    test_pack, _ = synth_generate(cfg, split="test")
    split = split_base_new(train_pack.class_names)
    protos = build_prototypes(train_pack, text, split, jitter=0.0, seed=seed)
    params = init_identity_params(16, 4, 0.01, 0.01, Rng(seed).split("p"))
    return params, protos, test_pack, text


def test_base_to_new_report_consistency():
    params, protos, test_pack, _ = bench()
    report = base_to_new_eval(params, protos, test_pack, "separate")
    assert report.protocol == "base_to_new"
    assert 0 <= report.base_acc <= 1 and 0 <= report.new_acc <= 1
    assert abs(report.harmonic - harmonic_mean(report.base_acc, report.new_acc)) <= 1e-12
    per = report.per_class_accuracy
    assert len(per) == 6 and all(0 <= a <= 1 for a in per)
    base_mean = np.mean([per[c] for c in protos.base_ids])
    assert abs(base_mean - report.base_acc) <= 1e-12


def test_base_to_new_modes_differ_or_match_sanely():
    params, protos, test_pack, _ = bench()
    sep = base_to_new_eval(params, protos, test_pack, "separate")
    joint = base_to_new_eval(params, protos, test_pack, "joint")
    # restricted label space can only help
    assert sep.base_acc >= joint.base_acc - 1e-12
    assert sep.new_acc >= joint.new_acc - 1e-12
    with pytest.raises(ParameterError):
        base_to_new_eval(params, protos, test_pack, "bogus")


def test_report_json_stable():
    report = EvalReport(per_class_accuracy=(1.0, 0.5), base_acc=1.0, new_acc=0.5,
                        harmonic=harmonic_mean(1.0, 0.5), protocol="base_to_new",
                        config={"mode": "separate"}, seed=3)
    a = report.to_json()
    b = EvalReport(**{**report.__dict__}).to_json()
    assert a == b
    parsed = json.loads(a)
    assert parsed["seed"] == 3 and parsed["base_acc"] == 1.0


def test_transfer_self_consistency_with_text_only_eval():
    params, protos, test_pack, text = bench()
    transfer = transfer_eval(params, text, test_pack)
    joint_text_only = base_to_new_eval(
        params, protos, test_pack, "joint", predictor="text_only"
    )
    overall_from_b2n = np.mean(joint_text_only.per_class_accuracy)
    assert abs(np.mean(transfer.per_class_accuracy) - overall_from_b2n) <= 1e-12
    assert transfer.protocol == "transfer"
    assert transfer.base_acc == 0.0 and transfer.harmonic == 0.0


def test_transfer_untrained_identity_equals_zero_shot():
    params, protos, test_pack, text = bench()
    transfer = transfer_eval(params, text, test_pack)
    x = test_pack.features.astype(np.float64)
    preds = zero_shot_predict(x, text.features.astype(np.float64))
    want = mean_class_accuracy(preds, test_pack.labels.astype(np.int64), range(6))
    assert abs(transfer.new_acc - want) <= 1e-12


def test_transfer_dimension_mismatch():
    params, protos, test_pack, text = bench()
    from dataclasses import replace

    bad = replace(text, features=np.zeros((6, 8), dtype=np.float32))
    with pytest.raises(FormatError, match="width"):
        textual_only_logits(params, test_pack.features.astype(np.float64),
                            bad.features.astype(np.float64))


def test_transfer_requires_text_pack():
    params, protos, test_pack, text = bench()
    with pytest.raises(ParameterError):
        transfer_eval(params, test_pack, test_pack)


def test_constant_classifier_scores_one_over_k():
    preds = np.zeros(40, dtype=np.int64)
    labels = np.repeat(np.arange(4), 10)
    assert mean_class_accuracy(preds, labels, range(4)) == 0.25
