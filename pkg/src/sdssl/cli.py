"""Command-line entry points: train, eval, ablate, dataset-fetch.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 data or
I/O error. ``SDSSL_CACHE_DIR`` and ``SDSSL_OUTPUT_DIR`` override the cache
and output roots; ``--set dotted.path=value`` overrides any config key.
"""

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import torch

from .config import apply_override, from_mapping, load_config, to_mapping
from .data import fetch_cifar10, load_dataset
from .errors import (CheckpointFormatError, ConfigurationError, DataError,
                     NumericFailure)
from .evaluation import (MetricConfig, ProbeConfig, extract_layer_banks,
                         knn_classify, linear_probe, multi_exit_eval,
                         representation_metrics)
from .plots import per_layer_chart
from .seeding import generator_for
from .trainer import load_checkpoint, run

EVAL_KINDS = ("knn", "linear", "multiexit", "metrics")
ABLATE_VARIANTS = ("no_anneal", "no_pred", "pred_only", "same_view")


def cmd_train(args) -> int:
    config = load_config(args.config, args.set or ())
    checkpoint = run(config, resume=args.resume)
    print(f"run complete: checkpoint at {checkpoint}")
    print(f"metrics at {Path(config.output_dir) / 'metrics.csv'}")
    return 0


def _load_eval_dataset(config, name, split):
    kwargs = {}
    if name == "synthetic":
        kwargs = {"num_samples": config.data.synthetic_samples,
                  "num_classes": config.data.synthetic_classes,
                  "image_size": config.encoder.image_size}
    return load_dataset(name, split, config.data.cache_dir, seed=config.seed, **kwargs)


def _bank_indices(n, cap, seed, tag):
    if cap is None or cap >= n:
        return list(range(n))
    order = torch.randperm(n, generator=generator_for(seed, "eval-bank", tag))
    return order[:cap].tolist()


def cmd_eval(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    mapping = to_mapping(trainer.config)
    reference = copy.deepcopy(mapping)
    for spec in args.set or ():
        apply_override(mapping, spec)
    for frozen in ("framework", "sdssl_enabled", "encoder", "heads", "loss", "schedule"):
        if mapping.get(frozen) != reference.get(frozen):
            raise CheckpointFormatError(
                f"override of {frozen!r} conflicts with the checkpointed model configuration")
    config = from_mapping(mapping)
    dataset_name = args.dataset or config.data.dataset
    encoder = trainer.student.encoder

    train_ds = _load_eval_dataset(config, dataset_name, "train")
    test_ds = _load_eval_dataset(config, dataset_name, "test")

    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.kind}"
    out_dir.mkdir(parents=True, exist_ok=True)
    eval_cfg = config.eval
    train_idx = _bank_indices(len(train_ds), eval_cfg.train_bank_size, config.seed, "train")
    test_idx = _bank_indices(len(test_ds), eval_cfg.test_bank_size, config.seed, "test")

    if args.kind in ("knn", "linear"):
        train_bank = extract_layer_banks(encoder, train_ds, train_idx, split="train")[-1]
        test_bank = extract_layer_banks(encoder, test_ds, test_idx, split="test")[-1]
        if args.kind == "knn":
            acc = knn_classify(train_bank, test_bank, eval_cfg.knn_k, eval_cfg.knn_temperature)
        else:
            probe = ProbeConfig(epochs=eval_cfg.probe_epochs, lr=eval_cfg.probe_lr,
                                batch_size=eval_cfg.probe_batch_size, seed=config.seed)
            acc = linear_probe(train_bank, test_bank, probe)
        rows = [{"kind": args.kind, "dataset": dataset_name, "accuracy": acc}]
        with open(out_dir / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "dataset", "accuracy"])
            writer.writerow([args.kind, dataset_name, repr(acc)])
        (out_dir / "report.json").write_text(json.dumps(rows, indent=2))
        print(f"{args.kind} accuracy on {dataset_name}: {acc:.4f}")
    elif args.kind == "multiexit":
        probe = ProbeConfig(epochs=eval_cfg.probe_epochs, lr=eval_cfg.probe_lr,
                            batch_size=eval_cfg.probe_batch_size, seed=config.seed)
        accs = multi_exit_eval(encoder, train_ds, test_ds, kind=args.probe,
                               train_indices=train_idx, test_indices=test_idx,
                               k=eval_cfg.knn_k, knn_temperature=eval_cfg.knn_temperature,
                               probe=probe)
        with open(out_dir / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "accuracy"])
            for layer, acc in enumerate(accs, start=1):
                writer.writerow([layer, repr(acc)])
        (out_dir / "report.json").write_text(json.dumps(
            [{"layer": i + 1, "accuracy": a} for i, a in enumerate(accs)], indent=2))
        per_layer_chart({f"{args.probe} accuracy": accs}, "accuracy",
                        out_dir / "accuracy.svg")
        print("per-layer accuracy: " + ", ".join(f"{a:.3f}" for a in accs))
    elif args.kind == "metrics":
        metric_cfg = MetricConfig(gamma=eval_cfg.gamma, t=eval_cfg.t,
                                  pair_sampling=eval_cfg.pair_sampling,
                                  subsample_pairs=eval_cfg.subsample_pairs, seed=config.seed)
        idx = _bank_indices(len(test_ds), eval_cfg.metric_sample_size, config.seed, "metrics")
        report = representation_metrics(encoder, test_ds, config.data.recipe, idx,
                                        metric_cfg, seed=config.seed)
        report.write_csv(out_dir / "report.csv")
        report.write_csv_long(out_dir / "report_long.csv")
        report.write_json(out_dir / "report.json")
        per_layer_chart({"L_ali": report.column("L_ali")}, "alignment",
                        out_dir / "alignment.svg")
        per_layer_chart({"-L_uni": [-v for v in report.column("L_uni")]}, "-uniformity",
                        out_dir / "neg_uniformity.svg")
        per_layer_chart({"D": report.column("D")}, "alignment difference",
                        out_dir / "alignment_difference.svg")
        print(f"geometry metrics for {len(report.rows)} layers written")
    else:
        raise ConfigurationError(f"unknown eval kind {args.kind!r}")
    print(f"reports in {out_dir}")
    return 0


def _variant_mapping(base: dict, name: str) -> dict:
    mapping = copy.deepcopy(base)
    mapping["output_dir"] = str(Path(base["output_dir"]) / name)
    mapping["sdssl_enabled"] = name != "baseline"
    if name == "no_anneal":
        mapping["schedule"]["anneal_alpha"] = False
    elif name == "no_pred":
        mapping["loss"]["beta"] = 0.0
    elif name == "pred_only":
        mapping["schedule"]["alpha_max"] = 0.0
    elif name == "same_view":
        mapping["distill_view"] = "same_view"
        mapping["loss"]["distill_view"] = "same_view"
    elif name not in ("baseline", "sdssl"):
        raise ConfigurationError(f"unknown ablation variant {name!r}")
    return mapping


def run_ablation(config, suites) -> list:
    """Train baseline, the self-distilled reference, and each requested variant
    under a shared seed; report final-layer k-NN accuracy side by side."""
    base = to_mapping(config)
    variants = ["baseline", "sdssl"] + list(suites)
    rows = []
    for name in variants:
        variant_cfg = from_mapping(_variant_mapping(base, name))
        checkpoint = run(variant_cfg, log=None)
        trainer = load_checkpoint(checkpoint)
        dataset_name = variant_cfg.data.dataset
        train_ds = _load_eval_dataset(variant_cfg, dataset_name, "train")
        test_ds = _load_eval_dataset(variant_cfg, dataset_name, "test")
        train_idx = _bank_indices(len(train_ds), variant_cfg.eval.train_bank_size,
                                  variant_cfg.seed, "train")
        test_idx = _bank_indices(len(test_ds), variant_cfg.eval.test_bank_size,
                                 variant_cfg.seed, "test")
        train_bank = extract_layer_banks(trainer.student.encoder, train_ds, train_idx,
                                         split="train")[-1]
        test_bank = extract_layer_banks(trainer.student.encoder, test_ds, test_idx,
                                        split="test")[-1]
        k = min(variant_cfg.eval.knn_k, len(train_bank))
        acc = knn_classify(train_bank, test_bank, k, variant_cfg.eval.knn_temperature)
        rows.append({"variant": name, "knn_accuracy": acc})
    reference = next(r["knn_accuracy"] for r in rows if r["variant"] == "sdssl")
    for row in rows:
        row["delta_vs_sdssl"] = row["knn_accuracy"] - reference
    return rows


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.set or ())
    suites = []
    for item in args.suite:
        names = ABLATE_VARIANTS if item == "all" else [item]
        for name in names:
            if name not in ABLATE_VARIANTS:
                raise ConfigurationError(
                    f"suite must be one of {ABLATE_VARIANTS + ('all',)}, got {name!r}")
            if name not in suites:
                suites.append(name)
    rows = run_ablation(config, suites)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "knn_accuracy", "delta_vs_sdssl"])
        for row in rows:
            writer.writerow([row["variant"], repr(row["knn_accuracy"]),
                             repr(row["delta_vs_sdssl"])])
    print(f"{'variant':<12} {'k-NN acc':>10} {'vs sdssl':>10}")
    for row in rows:
        print(f"{row['variant']:<12} {row['knn_accuracy']:>10.4f} {row['delta_vs_sdssl']:>+10.4f}")
    print(f"table written to {out_dir / 'ablation.csv'}")
    return 0


def cmd_dataset_fetch(args) -> int:
    if args.dataset != "cifar10":
        raise ConfigurationError(f"dataset-fetch supports cifar10, got {args.dataset!r}")
    cache_dir = args.cache_dir or os.environ.get("SDSSL_CACHE_DIR", "data")
    manifest = fetch_cifar10(cache_dir, force=args.force)
    print(f"cifar10 ready under {Path(cache_dir) / 'cifar10'}: "
          f"{', '.join(manifest['files'])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdssl",
                                     description="Self-distilled self-supervised training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    p_train.add_argument("--config", help="YAML config file (defaults apply if omitted)")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a config key, e.g. --set schedule.alpha_max=0")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--kind", required=True, choices=EVAL_KINDS)
    p_eval.add_argument("--dataset", help="override the evaluation dataset")
    p_eval.add_argument("--probe", default="knn", choices=("knn", "linear"),
                        help="per-layer probe for --kind multiexit")
    p_eval.add_argument("--out", help="report directory")
    p_eval.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run ablation variants side by side")
    p_ablate.add_argument("--config", help="YAML config file")
    p_ablate.add_argument("--suite", action="append", required=True,
                          choices=ABLATE_VARIANTS + ("all",))
    p_ablate.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_ablate.set_defaults(func=cmd_ablate)

    p_fetch = sub.add_parser("dataset-fetch", help="download and verify a dataset cache")
    p_fetch.add_argument("--dataset", default="cifar10")
    p_fetch.add_argument("--cache-dir")
    p_fetch.add_argument("--force", action="store_true")
    p_fetch.set_defaults(func=cmd_dataset_fetch)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, CheckpointFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
