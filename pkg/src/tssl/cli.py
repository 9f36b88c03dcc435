"""Command-line front end.

Subcommands: pretrain, probe, corrupt-eval, ki-trace, ood, gen-data,
diff-grids. Global flags --config/--seed/--out/--threads; TSSL_THREADS in
the environment overrides --threads and is the only environment variable
read. Exit codes: 0 success, 1 runtime failure, 2 usage or config failure.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import config as config_mod
from . import corruptions
from . import data as data_mod
from . import evaluation, models, training
from .config import ConfigError
from .imageio import FormatError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tssl",
        description="Selective-invariance self-supervised pretraining and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=False):
        p.add_argument("--config", required=needs_config,
                       help="experiment config JSON (see the shipped schema for defaults)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="augmentation worker threads (TSSL_THREADS overrides)")

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    add_common(p, needs_config=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    for name, desc in (("probe", "train a linear probe on frozen features"),
                       ("corrupt-eval", "evaluate the corruption grid"),
                       ("ki-trace", "trace conflict and ignorance over severities"),
                       ("ood", "run the OOD detector suite")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--checkpoint", required=True)
        add_common(p)

    p = sub.add_parser("gen-data", help="synthesize and save a dataset pair")
    add_common(p, needs_config=True)

    p = sub.add_parser("diff-grids", help="per-cell difference of two grid CSVs")
    p.add_argument("grid_a")
    p.add_argument("grid_b")
    p.add_argument("--out", default=None, help="output CSV (default: stdout)")
    return parser


def _threads(args) -> int:
    env = os.environ.get("TSSL_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"TSSL_THREADS must be an integer, got {env!r}")
    return max(1, args.threads)


def _load_experiment(args, checkpoint_meta=None) -> dict:
    """Resolve the experiment config: --config flag, else checkpoint-embedded."""
    if args.config is not None:
        raw = config_mod.load_config(args.config)
    elif checkpoint_meta is not None and "experiment_config" in checkpoint_meta:
        raw = checkpoint_meta["experiment_config"]
    else:
        raise ConfigError(
            "no config: pass --config or use a checkpoint that embeds one")
    if args.seed is not None:
        raw = dict(raw)
        raw["seed"] = args.seed
    return config_mod.canonicalize(raw)


def _out_dir(args, canon) -> str:
    out = args.out if args.out is not None else canon["out_dir"]
    os.makedirs(out, exist_ok=True)
    return out


def _load_model(path):
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    meta, arrays = models.load_checkpoint(path)
    mc = dict(meta["model"])
    mc["conv_widths"] = tuple(mc["conv_widths"])
    model = models.restore_model(models.ModelConfig(**mc), arrays)
    return model, meta


def cmd_pretrain(args) -> int:
    canon = _load_experiment(args)
    out = _out_dir(args, canon)
    settings = config_mod.build_settings(canon, threads=_threads(args))
    train, _ = config_mod.load_dataset_pair(canon)

    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(canon, f, indent=2, sort_keys=True)
        f.write("\n")

    def log(m):
        print(f"epoch {m.epoch + 1}/{settings.epochs} "
              f"total {m.mean_total:.4f} base {m.mean_base:.4f} "
              f"lr {m.lr:.5f}", flush=True)

    inventory = training.run_pretraining(train, settings, out, resume=args.resume,
                                         experiment_config=canon, log=log)
    files = ["config.json", inventory["metrics"], inventory["steps"]]
    files += inventory["checkpoints"]
    config_mod.write_manifest(out, canon, files, "pretrain")
    print(f"run complete: {out} (config hash {config_mod.config_hash(canon)[:12]})")
    return 0


def _probe_for(model, canon, seed):
    train, test = config_mod.load_dataset_pair(canon)
    ev = canon["evaluation"]
    train_feats = models.encode_features(model, train.images)
    test_feats = models.encode_features(model, test.images)
    result = evaluation.linear_probe(
        train_feats, train.labels, test_feats, test.labels,
        seed=seed, epochs=ev["probe_epochs"], lr=ev["probe_lr"],
        batch_size=ev["probe_batch_size"], val_fraction=ev["probe_val_fraction"],
        dataset_id=canon["dataset"]["source"])
    return result, train, test


def cmd_probe(args) -> int:
    model, meta = _load_model(args.checkpoint)
    canon = _load_experiment(args, meta)
    out = _out_dir(args, canon)
    result, train, test = _probe_for(model, canon, canon["seed"])
    payload = result.to_dict()
    payload.update(num_train=len(train), num_test=len(test),
                   checkpoint=os.path.basename(args.checkpoint))
    config_mod.validate_report("probe", payload)
    evaluation.write_json(payload, os.path.join(out, "probe.json"))
    print(f"probe accuracy {result.accuracy:.2f} "
          f"(val {result.val_accuracy:.2f} at epoch {result.best_epoch})")
    return 0


def cmd_corrupt_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    canon = _load_experiment(args, meta)
    out = _out_dir(args, canon)
    result, _, test = _probe_for(model, canon, canon["seed"])
    grid = evaluation.corruption_grid(model, result, test.images, test.labels,
                                      seed=canon["seed"])
    path = os.path.join(out, "grid.csv")
    evaluation.grid_to_csv(grid, path)
    print(f"clean {grid['clean']:.2f}; grid written to {path}")
    return 0


def cmd_ki_trace(args) -> int:
    model, meta = _load_model(args.checkpoint)
    evaluation.require_evidential_variant(meta.get("variant", "<unknown>"))
    canon = _load_experiment(args, meta)
    out = _out_dir(args, canon)
    _, test = config_mod.load_dataset_pair(canon)
    trace = evaluation.ki_trajectory(model, test.images, seed=canon["seed"],
                                     n_pairs=canon["evaluation"]["ki_pairs"])
    trace["checkpoint"] = os.path.basename(args.checkpoint)
    config_mod.validate_report("ki_trace", trace)
    evaluation.write_json(trace, os.path.join(out, "ki_trace.json"))
    csv_path = os.path.join(out, "ki_trace.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["family", "severity", "k_mean", "i_mean"])
        rows = [trace["baseline"]] + trace["rows"]
        for row in rows:
            writer.writerow([row["family"], row["severity"],
                             f"{row['k_mean']:.6f}", f"{row['i_mean']:.6f}"])
    base = trace["baseline"]
    print(f"baseline K {base['k_mean']:.4f} I {base['i_mean']:.4f}; "
          f"{len(trace['rows'])} cells written to {csv_path}")
    return 0


def cmd_ood(args) -> int:
    model, meta = _load_model(args.checkpoint)
    canon = _load_experiment(args, meta)
    out = _out_dir(args, canon)
    train, test = config_mod.load_dataset_pair(canon)
    ev = canon["evaluation"]
    if "native_ki" in ev["detectors"]:
        evaluation.require_evidential_variant(meta.get("variant", "<unknown>"))
    report = evaluation.ood_report(
        model, train.images, test.images, seed=canon["seed"],
        detectors=tuple(ev["detectors"]), shifts=tuple(ev["ood_shifts"]),
        energy_tau=ev["energy_tau"], ki_draws=ev["ki_view_draws"])
    report["checkpoint"] = os.path.basename(args.checkpoint)
    config_mod.validate_report("ood", report)
    evaluation.write_json(report, os.path.join(out, "ood.json"))
    for shift, row in report["shifts"].items():
        cells = " ".join(f"{k}={v:.3f}" for k, v in sorted(row.items()))
        print(f"{shift}: {cells}")
    return 0


def cmd_gen_data(args) -> int:
    canon = _load_experiment(args)
    out = _out_dir(args, canon)
    train, test = config_mod.load_dataset_pair(canon)
    files = []
    for split, ds in (("train", train), ("test", test)):
        split_dir = os.path.join(out, split)
        manifest = data_mod.save_dataset(ds, split_dir, ppm_samples=8)
        names = ["manifest.json", manifest["images"]] + manifest.get("previews", [])
        files += [os.path.join(split, rel) for rel in names]
    config_mod.write_manifest(out, canon, files, "gen-data")
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")
    return 0


def cmd_diff_grids(args) -> int:
    for path in (args.grid_a, args.grid_b):
        if not os.path.exists(path):
            raise ConfigError(f"grid file not found: {path}")
    diff = evaluation.diff_grids(evaluation.grid_from_csv(args.grid_a),
                                 evaluation.grid_from_csv(args.grid_b))
    rows = [["family", "clean"] + [f"s{s}" for s in corruptions.SEVERITIES]]
    for family in corruptions.CORRUPTION_FAMILIES:
        row = diff["cells"][family]
        rows.append([family, f"{diff['clean']:+.4f}"]
                    + [f"{row[s]:+.4f}" for s in corruptions.SEVERITIES])
    if args.out:
        with open(args.out, "w", newline="") as f:
            csv.writer(f).writerows(rows)
        print(f"diff written to {args.out}")
    else:
        for row in rows:
            print(",".join(row))
    return 0


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "corrupt-eval": cmd_corrupt_eval,
    "ki-trace": cmd_ki_trace,
    "ood": cmd_ood,
    "gen-data": cmd_gen_data,
    "diff-grids": cmd_diff_grids,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        # A checkpoint without the heads a command needs is a usage error.
        if "no evidential heads" in str(e):
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(f"error: {e}", file=sys.stderr)
        return 1
    except training.TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
