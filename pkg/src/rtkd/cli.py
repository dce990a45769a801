"""Command-line entry point.

Subcommands: ``train-teacher``, ``distill``, ``baseline``, ``eval``,
``export-attn``. Hyperparameters come from a JSON config file (see README),
individual flags (which win over the file), or a named profile. Every
training run writes its artifacts under a fresh ``<timestamp>-<name>-seed<seed>``
directory below the run root (``--run-root`` or ``$RTKD_RUN_ROOT``, default
``./runs``). Exit codes: 0 success, 2 usage/config error, 1 runtime failure;
failures emit a one-line JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

from . import data as data_mod
from . import metrics as metrics_mod
from .errors import ConfigError, DataError, DimensionError, DivergenceError, FormatError
from .models import load_backbone, student4_config, teacher8_config
from .train import TrainerConfig, desk_profile, paper_profile, predict_scores, train_student_rtk, train_teacher

TRAINER_KEYS = (
    "epochs", "batch_size", "lr", "weight_decay", "momentum", "lr_drop_epochs",
    "lr_drop_factor", "seed", "attn_dim", "selection_cadence", "eval_batch_size",
)


def _add_common_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--profile", choices=["desk", "paper"], default=None,
                   help="named hyperparameter profile used as the base (default desk)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--drop-epochs", default=None, help="comma-separated epoch indices, e.g. 25,32,37")
    p.add_argument("--drop-factor", type=float, default=None)
    p.add_argument("--augment", dest="augment", action="store_true", default=None)
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    p.add_argument("--arch", choices=["teacher8", "student4"], default=None,
                   help="named backbone (full configs go in the config file)")
    p.add_argument("--run-root", default=None, help="artifact root (or $RTKD_RUN_ROOT, default ./runs)")
    p.add_argument("--run-name", default=None, help="run directory name (default timestamp-based)")
    _add_dataset_flags(p)


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=["synth", "cifar10"], default=None)
    p.add_argument("--data-dir", default=None, help="directory with CIFAR-10 binary batches")
    p.add_argument("--data-cache", default=None, help="cache directory for synthetic datasets")
    p.add_argument("--synth-classes", type=int, default=None)
    p.add_argument("--synth-train", type=int, default=None)
    p.add_argument("--synth-test", type=int, default=None)
    p.add_argument("--synth-size", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtkd", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_teacher = sub.add_parser("train-teacher", help="stage 1: cross-entropy training")
    _add_common_training_flags(p_teacher)

    p_distill = sub.add_parser("distill", help="stage 2: student training with attention-selected teacher features")
    _add_common_training_flags(p_distill)
    p_distill.add_argument("--teacher-ckpt", default=None, required=False)
    p_distill.add_argument("--alpha", type=float, default=None)
    p_distill.add_argument("--beta", type=float, default=None)
    p_distill.add_argument("--temperature", type=float, default=None)
    p_distill.add_argument("--k", type=int, default=None)
    p_distill.add_argument("--tau", type=float, default=None)
    p_distill.add_argument("--renormalize", action="store_true", default=None)
    p_distill.add_argument("--attn-dim", type=int, default=None)
    p_distill.add_argument("--selection-cadence", choices=["epoch", "step"], default=None)

    p_base = sub.add_parser("baseline", help="student baselines: scratch or soft-target-only")
    _add_common_training_flags(p_base)
    p_base.add_argument("--mode", choices=["scratch", "kd_only"], required=True)
    p_base.add_argument("--teacher-ckpt", default=None)
    p_base.add_argument("--alpha", type=float, default=None)
    p_base.add_argument("--temperature", type=float, default=None)

    p_eval = sub.add_parser("eval", help="accuracy and ROC-AUC of a checkpoint on a dataset")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--eval-batch-size", type=int, default=256)
    _add_dataset_flags(p_eval)

    p_exp = sub.add_parser("export-attn", help="re-emit one epoch's attention matrix from a run directory")
    p_exp.add_argument("run_dir")
    p_exp.add_argument("--epoch", type=int, required=True)
    p_exp.add_argument("--out", default=None, help="output CSV path (default stdout)")

    return parser


# -- config assembly ---------------------------------------------------------------


def _load_config_file(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg

def _parse_drop_epochs(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"--drop-epochs needs comma-separated integers, got {text!r}")


def _named_arch(name: str | None, num_classes: int, input_channels: int):
    if name is None:
        return None
    build = {"teacher8": teacher8_config, "student4": student4_config}[name]
    return build(num_classes=num_classes, input_channels=input_channels)


def _resolve_dataset(args, file_cfg: dict):
    ds = dict(file_cfg.get("dataset") or {})
    if args.dataset is not None:
        ds["kind"] = args.dataset
    for flag, key in (("data_dir", "dir"), ("data_cache", "cache_dir"), ("synth_classes", "num_classes"),
                      ("synth_train", "n_train"), ("synth_test", "n_test"), ("synth_size", "size"),
                      ("data_seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            ds[key] = v
    ds.setdefault("kind", "synth")
    if ds["kind"] == "synth":
        ds.setdefault("num_classes", 10)
        ds.setdefault("n_train", 2000)
        ds.setdefault("n_test", 1000)
        ds.setdefault("size", 16)
        ds.setdefault("seed", 1234)
        data = data_mod.synth_dataset(ds["num_classes"], ds["n_train"], ds["n_test"],
                                      ds["size"], ds["seed"], cache_dir=ds.get("cache_dir"))
    elif ds["kind"] == "cifar10":
        if "dir" not in ds:
            raise ConfigError("cifar10 dataset needs --data-dir (or dataset.dir in the config file)")
        data = data_mod.load_cifar10_binary(ds["dir"])
        limit = ds.get("train_limit")
        if limit:
            data = (data[0][: int(limit)], data[1])
    else:
        raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
    ds["num_classes_actual"] = 1 + max(s.label for s in data[0])
    return data, ds


def _assemble_trainer(args, file_cfg: dict, mode: str, data, ds_info) -> TrainerConfig:
    profile_name = args.profile or file_cfg.get("profile") or "desk"
    base = desk_profile(mode) if profile_name == "desk" else paper_profile(mode)
    merged = base.to_dict()
    merged.update({k: v for k, v in (file_cfg.get("trainer") or {}).items() if v is not None})
    merged["mode"] = mode

    flag_map = {
        "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size,
        "lr": args.lr, "weight_decay": args.weight_decay, "momentum": args.momentum,
        "lr_drop_factor": args.drop_factor,
    }
    for key, value in flag_map.items():
        if value is not None:
            merged[key] = value
    if args.drop_epochs is not None:
        merged["lr_drop_epochs"] = list(_parse_drop_epochs(args.drop_epochs))

    loss_d = dict(merged.get("loss") or {})
    rtk_d = dict(merged.get("rtk") or {})
    for attr, sink, key in (("alpha", loss_d, "alpha"), ("beta", loss_d, "beta"),
                            ("temperature", loss_d, "temperature"), ("k", rtk_d, "k"),
                            ("tau", rtk_d, "tau"), ("renormalize", rtk_d, "renormalize")):
        v = getattr(args, attr, None)
        if v is not None:
            sink[key] = v
    merged["loss"] = loss_d
    merged["rtk"] = rtk_d
    for attr, key in (("attn_dim", "attn_dim"), ("selection_cadence", "selection_cadence")):
        v = getattr(args, attr, None)
        if v is not None:
            merged[key] = v

    num_classes = int(ds_info["num_classes_actual"])
    input_channels = data[0][0].image.shape[0]
    named = _named_arch(args.arch, num_classes, input_channels)
    if named is not None:
        merged["arch"] = named.to_dict()
    if merged.get("arch") is None:
        default = teacher8_config if mode == "teacher" else student4_config
        merged["arch"] = default(num_classes=num_classes, input_channels=input_channels).to_dict()

    if args.augment is not None:
        merged["augment"] = {"pad": 2, "crop": None, "hflip_prob": 0.5, "enabled": True} if args.augment else None

    return TrainerConfig.from_dict(merged)


def _make_run_dir(args, name: str, seed: int) -> Path:
    root = Path(args.run_root or os.environ.get("RTKD_RUN_ROOT", "runs"))
    if args.run_name:
        run_dir = root / args.run_name
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = root / f"{stamp}-{name}-seed{seed}"
        bump = 1
        while run_dir.exists():
            bump += 1
            run_dir = root / f"{stamp}-{name}-seed{seed}-{bump}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


# -- subcommand bodies ----------------------------------------------------------------


def _cmd_train_teacher(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    data, ds_info = _resolve_dataset(args, file_cfg)
    cfg = _assemble_trainer(args, file_cfg, "teacher", data, ds_info)
    run_dir = _make_run_dir(args, "teacher", cfg.seed)
    artifacts = train_teacher(cfg, data, run_dir)
    print(json.dumps({"run_dir": str(artifacts.run_dir), **artifacts.summary}, sort_keys=True))
    return 0


def _cmd_student(args, mode: str) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    if mode == "scratch":
        for flag in ("alpha", "temperature", "teacher_ckpt"):
            if getattr(args, flag, None) is not None:
                raise ConfigError(f"--{flag.replace('_', '-')} does not apply to scratch mode")
    data, ds_info = _resolve_dataset(args, file_cfg)
    cfg = _assemble_trainer(args, file_cfg, mode, data, ds_info)
    teacher_ckpt = getattr(args, "teacher_ckpt", None) or (file_cfg.get("teacher_ckpt") if file_cfg else None)
    if mode in ("kd_only", "rtk") and not teacher_ckpt:
        raise ConfigError(f"{mode} mode needs --teacher-ckpt")
    run_dir = _make_run_dir(args, mode, cfg.seed)
    artifacts = train_student_rtk(cfg, teacher_ckpt, data, run_dir)
    print(json.dumps({"run_dir": str(artifacts.run_dir), **artifacts.summary}, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    file_cfg = {}
    data, _ds = _resolve_dataset(args, file_cfg)
    model = load_backbone(args.ckpt)
    scores, labels = predict_scores(model, data[1], args.eval_batch_size)
    micro, per_class = metrics_mod.roc_auc(scores, labels)
    out = {
        "accuracy": metrics_mod.accuracy(scores, labels),
        "micro_auc": None if micro != micro else micro,
        "per_class_auc": [None if v != v else float(v) for v in per_class],
        "parameter_count": model.parameter_count(),
    }
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_export_attn(args) -> int:
    run_dir = Path(args.run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise DataError(f"{run_dir} has no config.json; not a run directory")
    record = json.loads(config_path.read_text())
    student_arch = (record.get("trainer") or {}).get("arch")
    teacher_arch = record.get("teacher_arch")
    if not teacher_arch:
        raise DataError(f"{run_dir} was not a distillation run; nothing to export")
    n_s = len(student_arch["tap_points"])
    n_t = len(teacher_arch["tap_points"])
    src = run_dir / "attn" / f"epoch_{args.epoch:04d}.csv"
    if not src.exists():
        raise DataError(f"no attention export for epoch {args.epoch} under {run_dir}")
    with open(src, newline="") as fh:
        matrix = [row for row in csv.reader(fh)]
    if len(matrix) != n_s or any(len(row) != n_t for row in matrix):
        raise FormatError(
            f"{src}: matrix is {len(matrix)}x{len(matrix[0]) if matrix else 0}, run config expects {n_s}x{n_t}"
        )
    text = "\n".join(",".join(row) for row in matrix) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train-teacher":
            return _cmd_train_teacher(args)
        if args.command == "distill":
            return _cmd_student(args, "rtk")
        if args.command == "baseline":
            return _cmd_student(args, args.mode)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "export-attn":
            return _cmd_export_attn(args)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, DimensionError, FormatError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2
    except (DataError, DivergenceError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
