"""Command-line front end.

Exit codes: 0 success, 2 usage, 3 malformed config, 4 missing file,
5 unknown setting, 1 other runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_experiment_config
from .distill import parse_snapshots
from .metrics import aggregate_report
from .network import build_arch, build_network, count_parameters, load_checkpoint
from .synthdata import build_dataset, load_dataset
from .trainer import evaluate_split, load_csv, run_training

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_SETTING = 5

# CLI spelling -> internal setting name
SETTING_NAMES = {
    "individual": "individual",
    "joint": "joint",
    "joint-kd": "joint_kd",
    "y": "y_shaped",
    "x": "x_shaped",
    "chilopod": "chilopod",
    "ours": "ours",
}


def _setting(name: str) -> str:
    if name not in SETTING_NAMES:
        raise KeyError(name)
    return SETTING_NAMES[name]


def _workers() -> int:
    cap = int(os.environ.get("CMD_THREADS", "1"))
    return max(1, cap)


def _train_one(cfg: ExperimentConfig, setting: str, seed: int, data_dir: str,
               out_dir: str) -> str:
    dataset = load_dataset(data_dir)
    tcfg = replace(cfg.training, setting=setting, seed=seed)
    arch = build_arch(cfg.arch.name, dataset.num_classes, cfg.arch.norm,
                      cfg.arch.input_channels, setting)
    run_training(tcfg, dataset, arch, out_dir=out_dir)
    return out_dir


def _train_one_star(args) -> str:
    return _train_one(*args)


def _run_jobs(jobs):
    workers = min(_workers(), len(jobs))
    if workers <= 1:
        return [_train_one_star(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_one_star, jobs))


def _eval_report(checkpoint_path, data_dir, split, setting_label=""):
    arch, store = load_checkpoint(checkpoint_path)
    dataset = load_dataset(data_dir)
    per_case = {}
    for modality in ("A", "B"):
        cases = evaluate_split(arch, store, dataset, split, modality)
        per_case[modality] = cases
    return arch, aggregate_report(per_case)


# -- subcommand handlers ----------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_experiment_config(args.config)
    build_dataset(cfg.dataset, root=args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    data_dir = args.data or cfg.data_dir
    if data_dir is None:
        raise ConfigError("no dataset directory: pass --data or set data_dir in the config")
    _train_one(cfg, _setting(args.setting), args.seed, data_dir, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    arch, report = _eval_report(args.checkpoint, args.data, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv", setting=arch.setting)
    return EXIT_OK


def cmd_compare_settings(args) -> int:
    cfg = load_experiment_config(args.config)
    data_dir = args.data or cfg.data_dir
    if data_dir is None:
        raise ConfigError("no dataset directory: pass --data or set data_dir in the config")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(data_dir)

    jobs = []
    for cli_name, setting in SETTING_NAMES.items():
        for seed in seeds:
            run_dir = out / f"{cli_name}_seed{seed}"
            jobs.append((cfg, setting, seed, data_dir, str(run_dir)))
    _run_jobs(jobs)

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "seed", "modality", "mean_dice", "mean_hausdorff",
                         "params_total", "params_shared", "params_a", "params_b"])
        for cli_name, setting in SETTING_NAMES.items():
            arch = build_arch(cfg.arch.name, dataset.num_classes, cfg.arch.norm,
                              cfg.arch.input_channels, setting)
            total, by_scope = count_parameters(build_network(arch, seed=0))
            for seed in seeds:
                run_dir = out / f"{cli_name}_seed{seed}"
                _arch, report = _eval_report(run_dir / "checkpoint.zip", data_dir, "test")
                for modality in ("A", "B"):
                    writer.writerow([
                        cli_name, seed, modality,
                        repr(report.modality_mean(modality, "dice")),
                        repr(report.modality_mean(modality, "hausdorff")),
                        total, by_scope["shared"], by_scope["A"], by_scope["B"],
                    ])
    return EXIT_OK


def _parse_values(spec: str) -> list[float]:
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
    except ValueError as err:
        raise ConfigError(f"bad --values spec {spec!r}; expected start:stop:step") from err
    if step <= 0:
        raise ConfigError("--values step must be positive")
    values = []
    v = start
    while v <= stop + 1e-12:
        values.append(round(v, 10))
        v += step
    return values


def cmd_sweep_alpha(args) -> int:
    cfg = load_experiment_config(args.config)
    data_dir = args.data or cfg.data_dir
    if data_dir is None:
        raise ConfigError("no dataset directory: pass --data or set data_dir in the config")
    values = _parse_values(args.values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    for alpha in values:
        run_dir = out / f"alpha_{alpha}"
        swept = replace(cfg, training=replace(cfg.training, alpha=alpha))
        jobs.append((swept, "ours", args.seed, data_dir, str(run_dir)))
    _run_jobs(jobs)

    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "seed", "modality", "mean_dice", "kd_val_final"])
        for alpha in values:
            run_dir = out / f"alpha_{alpha}"
            _arch, report = _eval_report(run_dir / "checkpoint.zip", data_dir, "test")
            validations = load_csv(run_dir / "validation.csv")
            kd_final = validations[-1]["kd_val"] if validations else "nan"
            for modality in ("A", "B"):
                writer.writerow([alpha, args.seed, modality,
                                 repr(report.modality_mean(modality, "dice")), kd_final])
    return EXIT_OK


def cmd_export_curves(args) -> int:
    log_dir = Path(args.log)
    val_path = log_dir / "validation.csv"
    snap_path = log_dir / "snapshots.txt"
    if not val_path.exists():
        raise FileNotFoundError(f"no validation log at {val_path}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    validations = load_csv(val_path)
    with open(out / "kd_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "kd_val"])
        for rec in validations:
            writer.writerow([rec["iter"], rec["kd_val"]])

    lines = []
    rows = [["iter", "mean_abs_diff"]]
    if snap_path.exists():
        records = parse_snapshots(snap_path.read_text())
        by_iter: dict[int, dict] = {}
        for rec in records:
            by_iter.setdefault(rec["iteration"], {})[rec["modality"]] = rec
        for iteration in sorted(by_iter):
            pair = by_iter[iteration]
            if "A" not in pair or "B" not in pair:
                continue
            diff = np.abs(pair["A"]["matrix"] - pair["B"]["matrix"])
            mutual = ~np.isnan(diff).any(axis=1)
            mean_diff = float(diff[mutual].mean()) if mutual.any() else float("nan")
            rows.append([iteration, repr(mean_diff)])
            lines.append(f"iteration {iteration}: mean |q_a - q_b| = {mean_diff!r}")
            lines.append("difference plane (rows = class, NaN = absent):")
            for r in diff:
                lines.append("  " + " ".join(f"{v:.6f}" for v in r))
            lines.append("")
    with open(out / "confusion_evolution.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    (out / "confusion_evolution.txt").write_text("\n".join(lines))
    return EXIT_OK


# -- argument parsing -------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmdseg",
        description="Unpaired two-modality segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic bimodal dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training setting")
    p.add_argument("--setting", required=True,
                   help=f"one of {', '.join(SETTING_NAMES)}")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-settings", help="run all seven settings x seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_settings)

    p = sub.add_parser("sweep-alpha", help="sweep the distillation weight")
    p.add_argument("--config", required=True)
    p.add_argument("--values", required=True, help="start:stop:step")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("export-curves", help="export KD curve and confusion evolution")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_curves)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return err.code if err.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except KeyError as err:
        print(f"error: unknown setting {err}", file=sys.stderr)
        return EXIT_SETTING
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
