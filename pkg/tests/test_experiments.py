import numpy as np
import pytest

from candle.errors import ParameterError
from candle.experiments import (
    ABLATION_SUITES,
    BenchConfig,
    ablated_config,
    make_benchmark,
    run_ablation,
    run_candle,
    visual_proto_report,
    zero_shot_report,
)
from candle.training import TrainConfig

TINY = BenchConfig(num_classes=6, dim=16, per_class=24, test_per_class=8,
                   text_noise=0.2, spread=0.2, imbalance=6.0, max_per_class=24)
FAST = TrainConfig(epochs=3, batch_size=32, tau_v=0.05)


def test_make_benchmark_shapes_and_cache():
    data = make_benchmark(TINY, 0)
    assert data.train_pack.num_classes == 6
    assert set(data.train_pack.labels.astype(int)) == {0, 1, 2}
    assert data.test_pack.count == 6 * 8
    assert data.priors.p.shape == (6,)
    assert make_benchmark(TINY, 0) is data  # lru cache hit


def test_run_candle_returns_report_and_tau():
    result, report = run_candle(TINY, FAST, seed=0, mode="joint")
    assert report.protocol == "base_to_new"
    assert result.tau_v_selected == 0.05
    assert 0 <= report.harmonic <= 1


def test_baseline_reports_do_not_require_training():
    zs = zero_shot_report(TINY, 0, "separate")
    vp = visual_proto_report(TINY, 0, "separate")
    assert zs.config["baseline"] == "zero_shot"
    assert vp.config["baseline"] == "visual_proto"
    assert zs.new_acc == vp.new_acc  # both use text prototypes for new classes


def test_zero_shot_joint_vs_separate():
    sep = zero_shot_report(TINY, 0, "separate")
    joint = zero_shot_report(TINY, 0, "joint")
    assert sep.base_acc >= joint.base_acc - 1e-9
    assert sep.new_acc >= joint.new_acc - 1e-9


def test_ablated_config_covers_all_suites():
    for suite in ABLATION_SUITES:
        cfg = ablated_config(suite, FAST)
        assert cfg != FAST or suite == "none"
    assert ablated_config("no_attention", FAST).use_attention is False
    assert ablated_config("no_virtual", FAST).use_virtual is False
    assert ablated_config("ce_loss", FAST).loss == "ce"
    assert ablated_config("mask_cross", FAST).mask == "mask_cross"
    with pytest.raises(ParameterError):
        ablated_config("bogus", FAST)


def test_run_ablation_pairs_and_deltas():
    result = run_ablation("no_virtual", TINY, FAST, seed=0, mode="joint")
    assert result.suite == "no_virtual"
    d = result.deltas
    assert abs(d["harmonic"] - (result.ablated.harmonic - result.full.harmonic)) <= 1e-12
    assert result.full.seed == result.ablated.seed == 0


def test_mask_ablation_shares_checkpoint():
    # Mask suites are inference-time ablations: training is untouched, so the
    # paired runs differ in no trained tensor at all.
    result = run_ablation("mask_cross", TINY, FAST, seed=1, mode="joint")
    assert result.full.config["mask"] == "none"
    assert result.ablated.config["mask"] == "mask_cross"


def test_no_attention_checkpoint_keeps_attention_at_init():
    from candle.model import init_params
    from candle.rng import Rng

    result, _ = run_candle(TINY, ablated_config("no_attention", FAST), seed=2)
    init = init_params(TINY.dim, FAST.heads, FAST.tau_t, 0.05,
                       Rng(2).split("param-init"))
    assert np.array_equal(result.params.w_q, init.w_q)
    assert np.array_equal(result.params.w_o, init.w_o)
    assert not np.array_equal(result.params.w_pi, init.w_pi)  # projections trained


def test_separable_data_reaches_high_base_accuracy():
    # Mild imbalance, tight clusters, clean text: the trained model should
    # be near-perfect on base classes (5-seed mean).
    bcfg = BenchConfig(num_classes=8, dim=32, per_class=60, test_per_class=12,
                       text_noise=0.05, spread=0.08, imbalance=2.0, max_per_class=60)
    tcfg = TrainConfig(epochs=10, batch_size=64, tau_v=0.05)
    accs = []
    for seed in range(5):
        _, report = run_candle(bcfg, tcfg, seed, "separate")
        accs.append(report.base_acc)
    assert float(np.mean(accs)) >= 0.95


def test_transfer_beats_chance_after_training():
    from candle.evaluation import transfer_eval

    result, _ = run_candle(TINY, FAST, seed=3, mode="joint")
    data = make_benchmark(TINY, 3)
    report = transfer_eval(result.params, data.text_pack, data.test_pack)
    assert report.new_acc > 1.0 / TINY.num_classes
