import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from candle.cli import main
from candle.packs import read_pack


def run_cli(*argv):
    return main([str(a) for a in argv])


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = run_cli("synth", "--classes", 6, "--dim", 16, "--per-class", 30,
                   "--test-per-class", 10, "--text-noise", 0.2, "--spread", 0.2,
                   "--seed", 7, "--out", out)
    assert code == 0
    return out


def test_synth_outputs_validate(synth_dir):
    for name in ("train", "test", "text"):
        pack = read_pack(synth_dir / f"{name}.cndp")
        assert pack.num_classes == 6
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 7


def test_synth_deterministic(tmp_path, synth_dir):
    out2 = tmp_path / "again"
    assert run_cli("synth", "--classes", 6, "--dim", 16, "--per-class", 30,
                   "--test-per-class", 10, "--text-noise", 0.2, "--spread", 0.2,
                   "--seed", 7, "--out", out2) == 0
    for name in ("train", "test", "text"):
        assert sha(synth_dir / f"{name}.cndp") == sha(out2 / f"{name}.cndp")


def test_synth_rejects_single_class(tmp_path):
    assert run_cli("synth", "--classes", 1, "--out", tmp_path / "x") == 2


def test_prepare_imbalance_histogram(tmp_path, synth_dir):
    import numpy as np

    out = tmp_path / "prep"
    assert run_cli("prepare", "--pack", synth_dir / "train.cndp",
                   "--imbalance", 30, "--max-per-class", 30,
                   "--seed", 3, "--out", out) == 0
    pack = read_pack(out / "train.cndp")
    hist = np.bincount(pack.labels.astype(int), minlength=6).tolist()
    assert hist == [30, 5, 1, 0, 0, 0]  # round(30 * 30^(-i/2)), new classes empty
    split = json.loads((out / "split.json").read_text())
    assert split == {"base_ids": [0, 1, 2], "new_ids": [3, 4, 5]}


def test_prepare_balanced_when_ratio_one(tmp_path, synth_dir):
    import numpy as np

    out = tmp_path / "prep1"
    assert run_cli("prepare", "--pack", synth_dir / "train.cndp",
                   "--imbalance", 1, "--max-per-class", 30,
                   "--seed", 3, "--out", out) == 0
    pack = read_pack(out / "train.cndp")
    assert np.bincount(pack.labels.astype(int), minlength=6).tolist() == [30, 30, 30, 0, 0, 0]


def test_prepare_shots(tmp_path, synth_dir):
    import numpy as np

    out = tmp_path / "prep16"
    assert run_cli("prepare", "--pack", synth_dir / "train.cndp",
                   "--shots", 16, "--seed", 3, "--out", out) == 0
    pack = read_pack(out / "train.cndp")
    assert np.bincount(pack.labels.astype(int), minlength=6).tolist() == [16, 16, 16, 0, 0, 0]


def test_prepare_requires_exactly_one_mode(tmp_path, synth_dir):
    assert run_cli("prepare", "--pack", synth_dir / "train.cndp",
                   "--out", tmp_path / "p") == 2
    assert run_cli("prepare", "--pack", synth_dir / "train.cndp",
                   "--imbalance", 10, "--shots", 4, "--out", tmp_path / "p") == 2


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, synth_dir):
    prep = tmp_path_factory.mktemp("prep")
    assert run_cli("prepare", "--pack", synth_dir / "train.cndp",
                   "--imbalance", 10, "--max-per-class", 30,
                   "--seed", 5, "--out", prep) == 0
    out = tmp_path_factory.mktemp("model")
    code = run_cli("train", "--train", prep / "train.cndp",
                   "--text", synth_dir / "text.cndp",
                   "--epochs", 3, "--batch", 32, "--tau-v", 0.05,
                   "--seed", 5, "--out", out)
    assert code == 0
    return out


def test_train_outputs(trained_dir):
    assert (trained_dir / "model.cndm").exists()
    history = [json.loads(line) for line in (trained_dir / "history.jsonl").read_text().splitlines()]
    assert len(history) == 3
    assert set(history[0]) == {"epoch", "loss_zP", "loss_zV", "loss_zT", "total"}
    manifest = json.loads((trained_dir / "manifest.json").read_text())
    assert manifest["tau_v_selected"] == 0.05


def test_train_epochs_zero_checkpoint_is_init(tmp_path, synth_dir, trained_dir):
    prep = tmp_path / "prep"
    assert run_cli("prepare", "--pack", synth_dir / "train.cndp",
                   "--imbalance", 10, "--max-per-class", 30,
                   "--seed", 5, "--out", prep) == 0
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        assert run_cli("train", "--train", prep / "train.cndp",
                       "--text", synth_dir / "text.cndp",
                       "--epochs", 0, "--tau-v", 0.05, "--seed", 5, "--out", out) == 0
    assert sha(a / "model.cndm") == sha(b / "model.cndm")


def test_eval_b2n_report(tmp_path, synth_dir, trained_dir):
    report_path = tmp_path / "report.json"
    csv_path = tmp_path / "rows.csv"
    assert run_cli("eval", "--model", trained_dir / "model.cndm",
                   "--test", synth_dir / "test.cndp",
                   "--report", report_path, "--csv", csv_path, "--seed", 5) == 0
    report = json.loads(report_path.read_text())
    assert set(report) >= {"base_acc", "new_acc", "harmonic", "per_class_accuracy"}
    assert report["protocol"] == "base_to_new"
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "dataset,seed,protocol,base_acc,new_acc,harmonic"
    assert rows[1].split(",")[1] == "5"


def test_eval_transfer(tmp_path, synth_dir, trained_dir):
    report_path = tmp_path / "transfer.json"
    assert run_cli("eval", "--model", trained_dir / "model.cndm",
                   "--test", synth_dir / "test.cndp",
                   "--protocol", "transfer", "--text", synth_dir / "text.cndp",
                   "--report", report_path) == 0
    report = json.loads(report_path.read_text())
    assert report["protocol"] == "transfer"
    assert report["base_acc"] == 0.0


def test_eval_transfer_requires_text(tmp_path, trained_dir, synth_dir):
    assert run_cli("eval", "--model", trained_dir / "model.cndm",
                   "--test", synth_dir / "test.cndp",
                   "--protocol", "transfer",
                   "--report", tmp_path / "r.json") == 2


def test_eval_bad_pack_is_data_error(tmp_path, trained_dir):
    bad = tmp_path / "bad.cndp"
    bad.write_bytes(b"XXXX" + b"\x00" * 64)
    assert run_cli("eval", "--model", trained_dir / "model.cndm",
                   "--test", bad, "--report", tmp_path / "r.json") == 3


def test_gradcheck_cli_passes():
    assert run_cli("gradcheck") == 0  # reference instance


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as err:
        main(["synth", "--classes"])  # missing value
    assert err.value.code == 2


def test_console_script_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "candle.cli", "gradcheck", "--dim", "8",
         "--heads", "2", "--batch", "2", "--base", "2", "--new", "1"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "max relative error" in proc.stdout


def test_full_chain_determinism(tmp_path, synth_dir):
    """synth -> prepare -> train -> eval twice: byte-identical artifacts."""
    digests = []
    for tag in ("one", "two"):
        root = tmp_path / tag
        assert run_cli("synth", "--classes", 4, "--dim", 8, "--per-class", 12,
                       "--test-per-class", 6, "--text-noise", 0.1, "--spread", 0.2,
                       "--seed", 11, "--out", root / "data") == 0
        assert run_cli("prepare", "--pack", root / "data" / "train.cndp",
                       "--imbalance", 4, "--max-per-class", 12, "--seed", 11,
                       "--out", root / "prep") == 0
        assert run_cli("train", "--train", root / "prep" / "train.cndp",
                       "--text", root / "data" / "text.cndp", "--epochs", 2,
                       "--batch", 16, "--tau-v", 0.05, "--seed", 11,
                       "--out", root / "model") == 0
        assert run_cli("eval", "--model", root / "model" / "model.cndm",
                       "--test", root / "data" / "test.cndp",
                       "--report", root / "report.json", "--seed", 11) == 0
        digests.append((sha(root / "model" / "model.cndm"), sha(root / "report.json")))
    assert digests[0] == digests[1]


def test_ablate_cli_writes_paired_reports(tmp_path):
    out = tmp_path / "abl"
    assert run_cli("ablate", "--suite", "mask_cross", "--seeds", "0",
                   "--classes", 6, "--dim", 16, "--per-class", 24,
                   "--test-per-class", 8, "--text-noise", 0.2, "--spread", 0.2,
                   "--imbalance", 6, "--max-per-class", 24,
                   "--tau-v", 0.05, "--mode", "joint", "--out", out) == 0
    payload = json.loads((out / "ablation_mask_cross.json").read_text())
    assert payload["suite"] == "mask_cross"
    assert set(payload["mean_deltas"]) == {"base", "new", "harmonic"}
    run = payload["runs"][0]
    assert run["full"]["config"]["mask"] == "none"
    assert run["ablated"]["config"]["mask"] == "mask_cross"
