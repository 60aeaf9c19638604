"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

The synthetic benchmark (20 classes split 10 base / 10 new, 64 dims,
imbalance ratio 50, text noise 0.3, spread 0.25, seeds 0-4, default
training configuration) is shared by the experiment criteria through
module-scoped fixtures; reports use the joint label space, where the
base-to-new trade-off the toolkit targets is actually expressed.
"""

import io
import time
from dataclasses import replace

import numpy as np
import pytest

from candle.autodiff import Tensor
from candle.errors import FormatError
from candle.evaluation import harmonic_mean
from candle.experiments import (
    BenchConfig,
    run_ablation,
    run_candle,
    visual_proto_report,
    zero_shot_report,
)
from candle.model import attention_forward, init_identity_params, project_logits
from candle.packs import SynthConfig, read_pack, synth_generate, write_pack
from candle.prototypes import visual_prototypes
from candle.rng import Rng
from candle.sampling import ClassSplit, exp_decay_counts, few_shot_sample
from candle.training import TrainConfig, cla_loss, grad_check, uniform_priors

SEEDS = (0, 1, 2, 3, 4)
BENCH = BenchConfig()  # the acceptance benchmark settings are its defaults
TRAIN = TrainConfig()  # stock defaults; tau_v grid-searched
MODE = "joint"


def report_line(name, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def benchmark_runs():
    runs = {}
    for seed in SEEDS:
        t0 = time.time()
        result, report = run_candle(BENCH, TRAIN, seed, MODE)
        elapsed = time.time() - t0
        runs[seed] = {
            "result": result,
            "report": report,
            "zero_shot": zero_shot_report(BENCH, seed, MODE),
            "visual_proto": visual_proto_report(BENCH, seed, MODE),
            "seconds": elapsed,
        }
    return runs


def test_gradient_correctness():
    t0 = time.time()
    report = grad_check(seed=0, dim=16, heads=2, batch=4, num_base=3, num_new=2,
                        epsilon=1e-5)
    elapsed = time.time() - t0
    ok = report.max_rel_error <= 1e-4 and elapsed < 10.0
    report_line(
        "gradient correctness",
        ok,
        f"max rel error {report.max_rel_error:.3e} ({report.worst_tensor}), {elapsed:.1f}s",
    )


def test_cla_ce_identity():
    rng = Rng(2024)
    worst = 0.0
    for trial in range(1000):
        k = 2 + trial % 7
        z = (3.0 * rng.gaussians(k)).reshape(1, k)
        y = [rng.randbelow(k)]
        cla = cla_loss(z, y, uniform_priors(k))
        m = z.max()
        ce = float(np.log(np.exp(z - m).sum()) + m - z[0, y[0]])
        worst = max(worst, abs(cla - ce))
    report_line("CLA/CE identity", worst <= 1e-12, f"worst |delta| {worst:.2e} over 1000 draws")


def test_attention_identities():
    dim, tokens_n = 16, 9
    rng = Rng(77)
    tokens = rng.gaussians(tokens_n * dim).reshape(tokens_n, dim)
    tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)
    from test_model import make_params

    params = make_params(dim, heads=4, seed=5)
    out = attention_forward(Tensor(tokens), params, None).data
    worst = 0.0
    for i in range(100):
        perm = Rng(i).permutation(tokens_n)
        out_p = attention_forward(Tensor(tokens[perm]), params, None).data
        worst = max(worst, float(np.max(np.abs(out_p - out[perm]))))
    equivariant = worst <= 1e-6

    identity = init_identity_params(dim, 4, 0.01, 0.05, Rng(3))
    text = tokens[:4]
    x = tokens[4:]
    z_direct = project_logits(x, text, identity)
    post = attention_forward(Tensor(np.vstack([x @ identity.w_pi, text @ identity.w_pt])),
                             identity, None).data
    from candle.model import textual_logits

    z_post = textual_logits(post[: x.shape[0]], post[x.shape[0]:], identity)
    residual = float(np.max(np.abs(z_post - z_direct)))
    ok = equivariant and residual <= 1e-6
    report_line("attention identities", ok,
                f"perm delta {worst:.2e}, zero-mix residual {residual:.2e}")


def test_format_fidelity():
    from conftest import random_pack

    fails = []
    for seed in range(100):
        pack = random_pack(seed, num_classes=2 + seed % 5, dim=1 + seed % 7,
                           per_class=1 + seed % 4, kind="text" if seed % 3 == 0 else "image")
        buf = io.BytesIO()
        write_pack(pack, buf)
        data = buf.getvalue()
        back = read_pack(data)
        buf2 = io.BytesIO()
        write_pack(back, buf2)
        if buf2.getvalue() != data:
            fails.append(seed)
    magic_ok = length_ok = False
    sample = io.BytesIO()
    write_pack(random_pack(0), sample)
    try:
        read_pack(b"XXXX" + sample.getvalue()[4:])
    except FormatError:
        magic_ok = True
    try:
        read_pack(sample.getvalue()[:-2])
    except FormatError:
        length_ok = True
    ok = not fails and magic_ok and length_ok
    report_line("format fidelity", ok,
                f"100 round-trips byte-identical, corrupted cases rejected={magic_ok and length_ok}")


def test_imbalance_construction():
    profile = exp_decay_counts(10, 100, 100)
    counts = profile.counts
    endpoints = counts[0] == 100 and counts[-1] == 1
    monotone = all(a >= b for a, b in zip(counts, counts[1:]))
    step = 100 ** (1 / 9)
    ratio_ok = all(abs(counts[i] - counts[i + 1] * step) <= 1.0 for i in range(9))
    ok = endpoints and monotone and ratio_ok
    report_line("imbalance construction", ok, f"counts {counts}")


def test_synthetic_benchmark(benchmark_runs):
    margins = []
    slowest = 0.0
    for seed in SEEDS:
        run = benchmark_runs[seed]
        best_baseline = max(run["zero_shot"].harmonic, run["visual_proto"].harmonic)
        margins.append(run["report"].harmonic - best_baseline)
        slowest = max(slowest, run["seconds"])
    mean_margin = float(np.mean(margins))
    ok = mean_margin >= 0.03 and slowest < 60.0
    report_line(
        "synthetic benchmark",
        ok,
        f"margin over best baseline {100 * mean_margin:+.2f}pts (5-seed mean), "
        f"slowest seed {slowest:.1f}s",
    )


def test_training_loss_trend(benchmark_runs):
    # Net change over the last five epochs is nonincreasing within 5%.
    ok = True
    for seed in SEEDS:
        tail = [h["total"] for h in benchmark_runs[seed]["result"].history[-5:]]
        ok = ok and tail[-1] <= tail[0] * 1.05
    report_line("training loss trend", ok, "last-5-epoch net change within 5% on all seeds")


def test_virtual_prototype_ablation(benchmark_runs):
    deltas = [run_ablation("no_virtual", BENCH, TRAIN, seed, MODE).deltas["new"]
              for seed in SEEDS]
    mean_delta = float(np.mean(deltas))
    ok = mean_delta <= -0.01
    report_line("virtual-prototype ablation", ok,
                f"new-class accuracy delta {100 * mean_delta:+.2f}pts (5-seed mean)")


def test_loss_ablation(benchmark_runs):
    deltas = [run_ablation("ce_loss", BENCH, TRAIN, seed, MODE).deltas["harmonic"]
              for seed in SEEDS]
    mean_delta = float(np.mean(deltas))
    ok = mean_delta < 0.0
    report_line("loss ablation", ok,
                f"harmonic delta {100 * mean_delta:+.2f}pts (5-seed mean)")


def test_mask_ablation(benchmark_runs):
    drops = {}
    for suite in ("mask_within_visual", "mask_within_text", "mask_cross"):
        deltas = []
        for seed in SEEDS:
            d = run_ablation(suite, BENCH, TRAIN, seed, MODE).deltas
            deltas.append(d["base"] + d["new"])
        drops[suite] = float(np.mean(deltas))
    ok = drops["mask_cross"] <= min(drops.values())
    report_line(
        "mask ablation",
        ok,
        "combined deltas: " + ", ".join(f"{k}={100 * v:+.2f}" for k, v in drops.items()),
    )


def test_reliability_study_analog():
    settings = {}
    for noise in (0.5, 0.0):
        vp_accs, zs_accs = [], []
        for seed in SEEDS:
            cfg = SynthConfig(num_classes=10, dim=64, samples_per_class=80,
                              text_noise=noise, intra_class_spread=0.1, seed=seed)
            train_img, text = synth_generate(cfg, "train")
            test_img, _ = synth_generate(cfg, "test")
            shots, _ = few_shot_sample(train_img, 16, seed=seed)
            protos = visual_prototypes(shots, ClassSplit(base_ids=tuple(range(10)), new_ids=()))
            x = test_img.features.astype(np.float64)
            y = test_img.labels.astype(np.int64)
            from candle.evaluation import mean_class_accuracy
            from candle.model import visual_proto_predict, zero_shot_predict

            vp_accs.append(mean_class_accuracy(visual_proto_predict(x, protos), y, range(10)))
            zs_accs.append(mean_class_accuracy(
                zero_shot_predict(x, text.features.astype(np.float64)), y, range(10)))
        settings[noise] = (float(np.mean(vp_accs)), float(np.mean(zs_accs)))
    noisy_vp, noisy_zs = settings[0.5]
    clean_vp, clean_zs = settings[0.0]
    ok = noisy_vp > noisy_zs and clean_zs >= clean_vp
    report_line(
        "prototype-vs-text direction",
        ok,
        f"noise 0.5: vp {noisy_vp:.3f} > zs {noisy_zs:.3f}; "
        f"noise 0.0: zs {clean_zs:.3f} >= vp {clean_vp:.3f}",
    )


def test_determinism(tmp_path):
    import hashlib

    from candle.cli import main as cli_main

    digests = []
    for tag in ("a", "b"):
        root = tmp_path / tag
        assert cli_main(["synth", "--classes", "6", "--dim", "16", "--per-class", "20",
                         "--test-per-class", "8", "--text-noise", "0.2", "--spread", "0.2",
                         "--seed", "3", "--out", str(root / "data")]) == 0
        assert cli_main(["prepare", "--pack", str(root / "data" / "train.cndp"),
                         "--imbalance", "5", "--max-per-class", "20", "--seed", "3",
                         "--out", str(root / "prep")]) == 0
        assert cli_main(["train", "--train", str(root / "prep" / "train.cndp"),
                         "--text", str(root / "data" / "text.cndp"), "--epochs", "2",
                         "--batch", "16", "--tau-v", "0.05", "--seed", "3",
                         "--out", str(root / "model")]) == 0
        assert cli_main(["eval", "--model", str(root / "model" / "model.cndm"),
                         "--test", str(root / "data" / "test.cndp"), "--mode", "joint",
                         "--report", str(root / "report.json"), "--seed", "3"]) == 0
        digests.append((
            hashlib.sha256((root / "model" / "model.cndm").read_bytes()).hexdigest(),
            hashlib.sha256((root / "report.json").read_bytes()).hexdigest(),
        ))
    ok = digests[0] == digests[1]
    report_line("determinism", ok, "checkpoint and report bytes identical across reruns")
