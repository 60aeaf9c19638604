"""Command-line entry point: one subcommand per pipeline stage.

Every run writes exactly one JSON manifest (flags, seeds, paths, version,
wall-clock) next to its outputs, sufficient to re-run bit-identically.
Exit codes: 0 success, 2 usage, 3 validation/format, 4 numerical failure.

CANDLE_THREADS caps the numeric thread pools; the package __init__ applies
it before numpy loads, so heavy imports stay inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="candle",
        description="Long-tailed base-to-new adaptation over frozen embedding packs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic train/test/text packs")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--text-noise", type=float, default=0.0)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("prepare", help="build a long-tailed or few-shot training subset")
    p.add_argument("--pack", required=True, help="input image pack (training pool)")
    p.add_argument("--imbalance", type=float, default=None, help="imbalance ratio >= 1")
    p.add_argument("--max-per-class", type=int, default=100)
    p.add_argument("--shots", type=int, default=None, help="balanced few-shot count")
    p.add_argument("--split-policy", default="first-half", choices=["first-half", "explicit"])
    p.add_argument("--base-ids", default=None, help="comma-separated ids for --split-policy explicit")
    p.add_argument("--head-order", default="index", choices=["index", "random"],
                   help="which base classes become the long-tail head")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("train", help="train projections, attention, and virtual prototypes")
    p.add_argument("--train", required=True, help="prepared training pack")
    p.add_argument("--text", required=True, help="text prototype pack")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--wd", type=float, default=5e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--tau-t", type=float, default=0.01)
    p.add_argument("--tau-v", type=float, default=None)
    p.add_argument("--tau-v-grid", action="store_true",
                   help="grid-search tau_v (default when --tau-v is absent)")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--loss", choices=["cla", "ce"], default="cla")
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--no-virtual", action="store_true")
    p.add_argument("--mask", default="none",
                   choices=["none", "mask_within_visual", "mask_within_text", "mask_cross"])
    p.add_argument("--virtual-jitter", type=float, default=0.01)
    p.add_argument("--virtual-random", action="store_true",
                   help="random virtual-prototype init instead of textual anchors")
    p.add_argument("--split-policy", default="first-half", choices=["first-half", "explicit"])
    p.add_argument("--base-ids", default=None)
    p.add_argument("--split-file", default=None, help="JSON with base_ids/new_ids")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True, help="test image pack")
    p.add_argument("--protocol", choices=["b2n", "transfer"], default="b2n")
    p.add_argument("--mode", choices=["separate", "joint"], default="separate")
    p.add_argument("--text", default=None, help="target text pack for --protocol transfer")
    p.add_argument("--eval-batch", type=int, default=1,
                   help="test rows per attention window (0 = all at once)")
    p.add_argument("--report", required=True, help="output report JSON path")
    p.add_argument("--csv", default=None, help="append a CSV row to this file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("ablate", help="paired full-vs-ablated benchmark runs")
    p.add_argument("--suite", required=True,
                   choices=["no_attention", "no_virtual", "ce_loss",
                            "mask_within_visual", "mask_within_text", "mask_cross"])
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--per-class", type=int, default=600)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--text-noise", type=float, default=0.3)
    p.add_argument("--spread", type=float, default=0.25)
    p.add_argument("--imbalance", type=float, default=50.0)
    p.add_argument("--max-per-class", type=int, default=600)
    p.add_argument("--tau-v", type=float, default=None)
    p.add_argument("--mode", choices=["separate", "joint"], default="joint")
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--base", type=int, default=3)
    p.add_argument("--new", type=int, default=2)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--json", action="store_true")
    return parser


def _write_manifest(path: Path, command: str, args: argparse.Namespace,
                    inputs: list, outputs: list, started: float, extra: dict | None = None):
    from . import __version__

    manifest = {
        "command": command,
        "flags": {k: v for k, v in vars(args).items() if k != "command"},
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    manifest.update(extra or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _parse_base_ids(raw):
    if raw is None:
        return None
    return [int(tok) for tok in raw.split(",") if tok.strip() != ""]


def _resolve_split(args, class_names):
    from .errors import ParameterError
    from .sampling import ClassSplit, split_base_new

    if getattr(args, "split_file", None):
        data = json.loads(Path(args.split_file).read_text())
        return ClassSplit(base_ids=tuple(data["base_ids"]), new_ids=tuple(data["new_ids"]))
    if args.split_policy == "explicit":
        ids = _parse_base_ids(args.base_ids)
        if not ids:
            raise ParameterError("--split-policy explicit requires --base-ids")
        return split_base_new(class_names, ids)
    return split_base_new(class_names, "first-half")


def _cmd_synth(args) -> dict:
    from .packs import SynthConfig, synth_generate, write_pack

    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SynthConfig(
        num_classes=args.classes, dim=args.dim, samples_per_class=args.per_class,
        text_noise=args.text_noise, intra_class_spread=args.spread, seed=args.seed,
    )
    cfg.validate()
    train_pack, text_pack = synth_generate(cfg, split="train")
    from dataclasses import replace

    test_pack, _ = synth_generate(replace(cfg, samples_per_class=args.test_per_class),
                                  split="test")
    paths = {name: out / f"{name}.cndp" for name in ("train", "test", "text")}
    write_pack(train_pack, paths["train"])
    write_pack(test_pack, paths["test"])
    write_pack(text_pack, paths["text"])
    return _write_manifest(out / "manifest.json", "synth", args, [], list(paths.values()), started)


def _cmd_prepare(args) -> dict:
    from .errors import ParameterError
    from .packs import read_pack, write_pack
    from .sampling import exp_decay_counts, few_shot_sample, subsample

    started = time.time()
    if (args.imbalance is None) == (args.shots is None):
        raise ParameterError("pass exactly one of --imbalance or --shots")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pack = read_pack(args.pack)
    split = _resolve_split(args, pack.class_names)
    if getattr(args, "head_order", "index") == "random":
        from .rng import Rng
        from .sampling import ClassSplit

        perm = Rng(args.seed).split("head-order").permutation(len(split.base_ids))
        split = ClassSplit(
            base_ids=tuple(split.base_ids[i] for i in perm),
            new_ids=split.new_ids,
        )
    if args.shots is not None:
        prepared, manifest = few_shot_sample(pack, args.shots, args.seed,
                                             class_ids=split.base_ids)
    else:
        profile = exp_decay_counts(len(split.base_ids), args.max_per_class, args.imbalance)
        prepared, manifest = subsample(pack, profile, split, args.seed)
    train_path = out / "train.cndp"
    write_pack(prepared, train_path)
    (out / "sampling_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out / "split.json").write_text(json.dumps(
        {"base_ids": list(split.base_ids), "new_ids": list(split.new_ids)}) + "\n")
    return _write_manifest(
        out / "manifest.json", "prepare", args, [args.pack],
        [train_path, out / "sampling_manifest.json", out / "split.json"], started,
        extra={"per_class": manifest["per_class"]},
    )


def _cmd_train(args) -> dict:
    import numpy as np

    from .errors import ParameterError
    from .model import save_checkpoint
    from .packs import l2_normalize, read_pack
    from .prototypes import build_prototypes
    from .training import ClassPriors, TrainConfig, train

    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_pack = read_pack(args.train)
    text_pack = read_pack(args.text)
    if text_pack.kind != "text":
        raise ParameterError("--text must point to a text pack")
    if not train_pack.normalized:
        train_pack = l2_normalize(train_pack)
    if not text_pack.normalized:
        text_pack = l2_normalize(text_pack)
    split = _resolve_split(args, train_pack.class_names)
    labels = train_pack.labels.astype(np.int64)
    counts = np.zeros(len(train_pack.class_names))
    for class_id in split.base_ids:
        n = int((labels == class_id).sum())
        if n == 0:
            raise ParameterError(f"base class {class_id} has no training samples")
        counts[class_id] = n
    for class_id in split.new_ids:
        counts[class_id] = 1.0  # effective count for classes without images
    priors = ClassPriors(p=counts / counts.sum())

    tau_v = None if args.tau_v_grid else args.tau_v
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
        weight_decay=args.wd, momentum=args.momentum, tau_t=args.tau_t,
        tau_v=tau_v, loss=args.loss, use_attention=not args.no_attention,
        use_virtual=not args.no_virtual, heads=args.heads, mask=args.mask,
        virtual_jitter=args.virtual_jitter, seed=args.seed,
    )
    prototypes = build_prototypes(train_pack, text_pack, split,
                                  jitter=cfg.virtual_jitter, seed=args.seed,
                                  random_virtual=args.virtual_random)
    result = train(train_pack, prototypes, priors, cfg)
    model_path = out / "model.cndm"
    save_checkpoint(model_path, result.params, result.prototypes, train_pack.class_names)
    history_path = out / "history.jsonl"
    with open(history_path, "w") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return _write_manifest(
        out / "manifest.json", "train", args, [args.train, args.text],
        [model_path, history_path], started,
        extra={"tau_v_selected": result.tau_v_selected,
               "grid_scores": {str(k): v for k, v in result.grid_scores.items()}},
    )


def _cmd_eval(args) -> dict:
    from .errors import ParameterError
    from .evaluation import base_to_new_eval, transfer_eval
    from .model import load_checkpoint
    from .packs import l2_normalize, read_pack

    started = time.time()
    params, prototypes, class_names = load_checkpoint(args.model)
    test_pack = read_pack(args.test)
    if not test_pack.normalized:
        test_pack = l2_normalize(test_pack)
    eval_batch = None if args.eval_batch == 0 else args.eval_batch
    if args.protocol == "transfer":
        if args.text is None:
            raise ParameterError("--protocol transfer requires --text")
        text_pack = read_pack(args.text)
        report = transfer_eval(params, text_pack, test_pack, seed=args.seed)
    else:
        report = base_to_new_eval(
            params, prototypes, test_pack, args.mode,
            eval_batch=eval_batch, seed=args.seed,
        )
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json() + "\n")
    if args.csv:
        row = (f"{test_pack.dataset},{args.seed},{report.protocol},"
               f"{report.base_acc:.6f},{report.new_acc:.6f},{report.harmonic:.6f}\n")
        csv_path = Path(args.csv)
        header = "" if csv_path.exists() else "dataset,seed,protocol,base_acc,new_acc,harmonic\n"
        with open(csv_path, "a") as fh:
            fh.write(header + row)
    manifest = _write_manifest(
        Path(str(report_path) + ".manifest.json"), "eval", args,
        [args.model, args.test] + ([args.text] if args.text else []),
        [report_path], started,
    )
    manifest["report"] = report.to_dict()
    return manifest


def _cmd_ablate(args) -> dict:
    from .experiments import BenchConfig, run_ablation
    from .training import TrainConfig

    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bcfg = BenchConfig(
        num_classes=args.classes, dim=args.dim, per_class=args.per_class,
        test_per_class=args.test_per_class, text_noise=args.text_noise,
        spread=args.spread, imbalance=args.imbalance, max_per_class=args.max_per_class,
    )
    tcfg = TrainConfig(tau_v=args.tau_v)
    seeds = [int(s) for s in args.seeds.split(",")]
    runs = []
    for seed in seeds:
        result = run_ablation(args.suite, bcfg, tcfg, seed, args.mode)
        runs.append({
            "seed": seed,
            "full": result.full.to_dict(),
            "ablated": result.ablated.to_dict(),
            "deltas": result.deltas,
        })
    mean_deltas = {
        key: sum(r["deltas"][key] for r in runs) / len(runs)
        for key in ("base", "new", "harmonic")
    }
    payload = {"suite": args.suite, "mode": args.mode, "runs": runs,
               "mean_deltas": mean_deltas}
    report_path = out / f"ablation_{args.suite}.json"
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    manifest = _write_manifest(out / "manifest.json", "ablate", args, [],
                               [report_path], started,
                               extra={"mean_deltas": mean_deltas})
    manifest["mean_deltas"] = mean_deltas
    return manifest


def _cmd_gradcheck(args) -> dict:
    from .errors import NumericalError
    from .training import grad_check

    report = grad_check(seed=args.seed, dim=args.dim, heads=args.heads,
                        batch=args.batch, num_base=args.base, num_new=args.new,
                        epsilon=args.epsilon)
    payload = {
        "max_rel_error": report.max_rel_error,
        "worst_tensor": report.worst_tensor,
        "per_tensor": report.per_tensor,
        "epsilon": report.epsilon,
        "passed": report.passed,
    }
    print(f"max relative error {report.max_rel_error:.3e} ({report.worst_tensor})")
    if not report.passed:
        raise NumericalError(
            f"gradient check failed: {report.max_rel_error:.3e} > 1e-4"
            f" on {report.worst_tensor}"
        )
    return payload


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    from .errors import (
        CoverageError,
        DegenerateVectorError,
        FormatError,
        NumericalError,
        ParameterError,
        ProtocolError,
        ValidationError,
    )

    handlers = {
        "synth": _cmd_synth,
        "prepare": _cmd_prepare,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        payload = handlers[args.command](args)
    except ParameterError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, FormatError, DegenerateVectorError,
            CoverageError, ProtocolError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
