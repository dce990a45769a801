"""Two-stage training orchestration, metrics, and artifact export.

Stage 1 trains a teacher with cross entropy. Stage 2 trains a student
against the combined objective; the teacher runs frozen in eval mode and
never receives gradients. Inactive loss terms are skipped structurally
(never computed), so a distillation run with both extra weights at zero
executes the exact instruction stream of scratch training and reproduces
its checkpoint bit for bit.

Per epoch in distillation mode: the attention matrix is computed on the
epoch's first batch, impact scores and the retained teacher set follow, and
the matrix plus selection are exported. Each training step then rebuilds the
attention matrix inside the autograd graph and masks it with the epoch's
retained set, so attention parameters are trained jointly with the student.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import attention as attn_mod
from . import data as data_mod
from . import losses as loss_mod
from . import metrics as metrics_mod
from .checkpoint import save_checkpoint
from .errors import ConfigError, DivergenceError
from .models import Backbone, BackboneConfig, build_backbone, load_backbone, student4_config, teacher8_config
from .optim import SGD, lr_at_epoch
from .tensor import Tensor

logger = logging.getLogger("rtkd")

MODES = ("teacher", "scratch", "kd_only", "rtk")

METRIC_FIELDS = ("epoch", "lr", "loss_total", "loss_ce", "loss_kl", "loss_rtk", "test_acc", "retained_count")


@dataclass(frozen=True)
class TrainerConfig:
    mode: str
    epochs: int
    batch_size: int = 64
    lr: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr_drop_epochs: tuple[int, ...] = ()
    lr_drop_factor: float = 0.1
    seed: int = 0
    loss: loss_mod.LossConfig = field(default_factory=loss_mod.LossConfig)
    rtk: attn_mod.RTKConfig = field(default_factory=attn_mod.RTKConfig)
    arch: Optional[BackboneConfig] = None
    attn_dim: int = 64
    selection_cadence: str = "epoch"
    augment: Optional[data_mod.AugmentConfig] = None
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        drops = tuple(int(d) for d in self.lr_drop_epochs)
        object.__setattr__(self, "lr_drop_epochs", drops)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if drops and drops[-1] >= self.epochs:
            raise ConfigError(f"lr_drop_epochs {drops} must lie below epochs={self.epochs}")
        if not 0.0 < self.lr_drop_factor <= 1.0:
            raise ConfigError(f"lr_drop_factor must lie in (0, 1], got {self.lr_drop_factor}")
        if self.selection_cadence not in ("epoch", "step"):
            raise ConfigError(f"selection_cadence must be 'epoch' or 'step', got {self.selection_cadence!r}")
        if self.attn_dim < 1:
            raise ConfigError(f"attn_dim must be >= 1, got {self.attn_dim}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "momentum": self.momentum,
            "lr_drop_epochs": list(self.lr_drop_epochs),
            "lr_drop_factor": self.lr_drop_factor,
            "seed": self.seed,
            "loss": {
                "alpha": self.loss.alpha,
                "beta": self.loss.beta,
                "temperature": self.loss.temperature,
                "kl_temp_sq": self.loss.kl_temp_sq,
                "kl_teacher_ref": self.loss.kl_teacher_ref,
            },
            "rtk": {"k": self.rtk.k, "tau": self.rtk.tau, "renormalize": self.rtk.renormalize},
            "arch": self.arch.to_dict() if self.arch else None,
            "attn_dim": self.attn_dim,
            "selection_cadence": self.selection_cadence,
            "augment": None if self.augment is None else {
                "pad": self.augment.pad,
                "crop": self.augment.crop,
                "hflip_prob": self.augment.hflip_prob,
                "enabled": self.augment.enabled,
            },
            "eval_batch_size": self.eval_batch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        loss_d = d.get("loss") or {}
        rtk_d = d.get("rtk") or {}
        aug_d = d.get("augment")
        return cls(
            mode=d["mode"],
            epochs=int(d["epochs"]),
            batch_size=int(d.get("batch_size", 64)),
            lr=float(d.get("lr", 0.01)),
            weight_decay=float(d.get("weight_decay", 5e-4)),
            momentum=float(d.get("momentum", 0.9)),
            lr_drop_epochs=tuple(d.get("lr_drop_epochs", ())),
            lr_drop_factor=float(d.get("lr_drop_factor", 0.1)),
            seed=int(d.get("seed", 0)),
            loss=loss_mod.LossConfig(**loss_d),
            rtk=attn_mod.RTKConfig(**rtk_d),
            arch=BackboneConfig.from_dict(d["arch"]) if d.get("arch") else None,
            attn_dim=int(d.get("attn_dim", 64)),
            selection_cadence=d.get("selection_cadence", "epoch"),
            augment=None if aug_d is None else data_mod.AugmentConfig(**aug_d),
            eval_batch_size=int(d.get("eval_batch_size", 256)),
        )


def desk_profile(mode: str, **overrides) -> TrainerConfig:
    """Minutes-scale defaults: 40 epochs, drops at 25/32/37, mild decay."""
    base = dict(mode=mode, epochs=40, batch_size=64, lr=0.01, weight_decay=5e-4,
                momentum=0.9, lr_drop_epochs=(25, 32, 37), lr_drop_factor=0.1)
    base.update(overrides)
    return TrainerConfig(**base)


def paper_profile(mode: str, **overrides) -> TrainerConfig:
    """Full-scale defaults: 240 epochs, drops at 150/180/210, decay 0.05."""
    base = dict(mode=mode, epochs=240, batch_size=64, lr=0.01, weight_decay=0.05,
                momentum=0.9, lr_drop_epochs=(150, 180, 210), lr_drop_factor=0.1)
    base.update(overrides)
    return TrainerConfig(**base)


@dataclass
class RunArtifacts:
    run_dir: Path
    checkpoint_path: Path
    metrics_path: Path
    summary_path: Path
    attn_dir: Optional[Path]
    metrics: list[dict]
    summary: dict


# -- shape pre-flight -----------------------------------------------------------


def stage_spatial_sizes(num_stages: int, h: int, w: int) -> list[tuple[int, int]]:
    """Spatial extent of every stage's blocks (stride-2 entry per later stage)."""
    sizes = [(h, w)]
    for _ in range(1, num_stages):
        h, w = (h + 1) // 2, (w + 1) // 2
        sizes.append((h, w))
    return sizes


def check_tap_compatibility(teacher_cfg: BackboneConfig, student_cfg: BackboneConfig,
                            input_hw: tuple[int, int]) -> None:
    """Every (teacher tap, student tap) pair must resample by integer ratios."""
    t_sizes = stage_spatial_sizes(len(teacher_cfg.stage_depths), *input_hw)
    s_sizes = stage_spatial_sizes(len(student_cfg.stage_depths), *input_hw)
    for ts, _tb in teacher_cfg.tap_points:
        for ss, _sb in student_cfg.tap_points:
            for axis in (0, 1):
                a, b = s_sizes[ss][axis], t_sizes[ts][axis]
                if a % b and b % a:
                    raise ConfigError(
                        f"student tap stage {ss} ({a}) cannot be resampled to teacher tap stage "
                        f"{ts} ({b}): non-integer ratio; adjust tap points"
                    )


# -- evaluation -----------------------------------------------------------------


def predict_scores(model: Backbone, samples, batch_size: int = 256):
    """Softmax class probabilities and labels over a dataset, eval mode."""
    probs, labels = [], []
    for xb, yb in data_mod.eval_batches(samples, batch_size):
        logits = model.forward(xb, training=False).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs.append(e / e.sum(axis=1, keepdims=True))
        labels.append(yb)
    return np.concatenate(probs), np.concatenate(labels)


def evaluate_accuracy(model: Backbone, samples, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions (ties resolve to the lowest class)."""
    scores, labels = predict_scores(model, samples, batch_size)
    return metrics_mod.accuracy(scores, labels)


# -- artifact writers -------------------------------------------------------------


def _write_metrics_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("lr", "loss_total", "loss_ce", "loss_kl", "loss_rtk", "test_acc"):
                out[key] = repr(float(out[key]))
            writer.writerow(out)


def _jsonable(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _write_summary(path: Path, summary: dict) -> None:
    path.write_text(json.dumps(summary, sort_keys=True, indent=2, default=str) + "\n")


def _finalize(model: Backbone, cfg: TrainerConfig, run_dir: Path, rows: list[dict],
              test_samples, extra_summary: dict, attn_params=None) -> RunArtifacts:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = run_dir / "model.ckpt"
    model.save(ckpt_path, meta={"mode": cfg.mode, "epochs": cfg.epochs, "seed": cfg.seed})
    if attn_params is not None:
        arrays = [(p.name, "param", p.data) for p in attn_params.parameters()]
        save_checkpoint(run_dir / "attention.ckpt", arrays, config=None,
                        meta={"kind": "attention", "d": attn_params.d})
    metrics_path = run_dir / "metrics.csv"
    _write_metrics_csv(metrics_path, rows)
    scores, labels = predict_scores(model, test_samples, cfg.eval_batch_size)
    micro, per_class = metrics_mod.roc_auc(scores, labels)
    summary = {
        "mode": cfg.mode,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "final_test_accuracy": metrics_mod.accuracy(scores, labels),
        "micro_auc": _jsonable(micro),
        "per_class_auc": [_jsonable(float(v)) for v in per_class],
        "parameter_count": model.parameter_count(),
        "checkpoint": ckpt_path.name,
        "metrics": metrics_path.name,
    }
    summary.update(extra_summary)
    summary_path = run_dir / "summary.json"
    _write_summary(summary_path, summary)
    attn_dir = run_dir / "attn"
    return RunArtifacts(
        run_dir=run_dir,
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        summary_path=summary_path,
        attn_dir=attn_dir if attn_dir.exists() else None,
        metrics=rows,
        summary=summary,
    )


def _save_run_config(run_dir: Path, cfg: TrainerConfig, extra: dict) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    record = {"trainer": cfg.to_dict()}
    record.update(extra)
    (run_dir / "config.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")


# -- stage 1 -----------------------------------------------------------------------


def train_teacher(cfg: TrainerConfig, data, run_dir) -> RunArtifacts:
    """Cross-entropy-only training of the (future) teacher network."""
    if cfg.mode != "teacher":
        raise ConfigError(f"train_teacher requires mode='teacher', got {cfg.mode!r}")
    train_samples, test_samples = data
    arch = cfg.arch or teacher8_config(input_channels=train_samples[0].image.shape[0])
    cfg = replace(cfg, arch=arch)
    run_dir = Path(run_dir)
    _save_run_config(run_dir, cfg, {"role": "teacher"})
    model = build_backbone(arch, cfg.seed)
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rows = []
    for epoch in range(cfg.epochs):
        opt.lr = lr_at_epoch(cfg.lr, cfg.lr_drop_epochs, cfg.lr_drop_factor, epoch)
        ce_sum = 0.0
        count = 0
        for step, (xb, yb) in enumerate(
            data_mod.batches(train_samples, cfg.batch_size, cfg.seed, epoch, cfg.augment)
        ):
            logits = model.forward(xb, training=True)
            ce = loss_mod.cross_entropy_loss(logits, yb)
            value = ce.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            ce.backward()
            opt.step()
            opt.zero_grad()
            ce_sum += value
            count += 1
        acc = evaluate_accuracy(model, test_samples, cfg.eval_batch_size)
        mean_ce = ce_sum / max(count, 1)
        rows.append({
            "epoch": epoch, "lr": opt.lr, "loss_total": mean_ce, "loss_ce": mean_ce,
            "loss_kl": 0.0, "loss_rtk": 0.0, "test_acc": acc, "retained_count": 0,
        })
    return _finalize(model, cfg, run_dir, rows, test_samples, {"role": "teacher"})


# -- stage 2 -----------------------------------------------------------------------


def train_student_rtk(cfg: TrainerConfig, teacher_ckpt, data, run_dir) -> RunArtifacts:
    """Student training in scratch, kd_only, or full rtk mode.

    The teacher checkpoint is required unless the run never consults the
    teacher (scratch mode, or weights that disable both guidance terms).
    """
    if cfg.mode not in ("scratch", "kd_only", "rtk"):
        raise ConfigError(f"train_student_rtk requires a student mode, got {cfg.mode!r}")
    train_samples, test_samples = data
    arch = cfg.arch or student4_config(input_channels=train_samples[0].image.shape[0])
    cfg = replace(cfg, arch=arch)
    run_dir = Path(run_dir)

    kd_active = cfg.mode in ("kd_only", "rtk") and cfg.loss.alpha > 0
    rtk_active = cfg.mode == "rtk" and cfg.loss.beta > 0
    teacher = None
    teacher_cfg_dict = None
    if cfg.mode != "scratch":
        if teacher_ckpt is None:
            raise ConfigError(f"mode {cfg.mode!r} needs a teacher checkpoint")
        teacher = load_backbone(teacher_ckpt)
        teacher.set_requires_grad(False)
        teacher_cfg_dict = teacher.cfg.to_dict()
        if teacher.cfg.num_classes != arch.num_classes:
            raise ConfigError(
                f"teacher has {teacher.cfg.num_classes} classes, student config has {arch.num_classes}"
            )

    input_hw = train_samples[0].image.shape[1:]
    rtk_cfg = None
    attn_params = None
    if rtk_active:
        check_tap_compatibility(teacher.cfg, arch, input_hw)
        rtk_cfg = cfg.rtk.resolved(n_s=len(arch.tap_points))
        attn_params = attn_mod.AttentionParams(
            teacher_channels=teacher.cfg.tap_channels,
            student_channels=arch.tap_channels,
            d=cfg.attn_dim,
            seed=cfg.seed,
        )
    _save_run_config(run_dir, cfg, {
        "role": "student",
        "teacher_arch": teacher_cfg_dict,
        "rtk_resolved": None if rtk_cfg is None else
            {"k": rtk_cfg.k, "tau": rtk_cfg.tau, "renormalize": rtk_cfg.renormalize},
    })

    student = build_backbone(arch, cfg.seed)
    params = student.parameters() + (attn_params.parameters() if attn_params else [])
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    rows = []
    retained_counts = []
    for epoch in range(cfg.epochs):
        opt.lr = lr_at_epoch(cfg.lr, cfg.lr_drop_epochs, cfg.lr_drop_factor, epoch)
        blist = data_mod.batches(train_samples, cfg.batch_size, cfg.seed, epoch, cfg.augment)

        retained: list[int] = []
        epoch_scores = None
        if rtk_active:
            xb0, _ = blist[0]
            _, t_feats0 = teacher.forward_with_taps(xb0, training=False)
            _, s_feats0 = student.forward_with_taps(xb0, training=False)
            attn0 = attn_mod.compute_attention(t_feats0, s_feats0, attn_params)
            epoch_scores = attn_mod.impact_scores(attn0.matrix, rtk_cfg.k)
            sel0 = attn_mod.select_rtk(epoch_scores, attn0.matrix.data, rtk_cfg)
            retained = sel0.retained
            attn_mod.export_attention(
                run_dir / "attn" / f"epoch_{epoch:04d}.csv",
                run_dir / "attn" / f"epoch_{epoch:04d}.json",
                attn0.matrix, sel0, epoch, rtk_cfg,
            )
            if not retained:
                logger.warning("epoch %d: no teacher feature passed tau=%.4g; feature loss is 0", epoch, rtk_cfg.tau)

        sums = {"total": 0.0, "ce": 0.0, "kl": 0.0, "rtk": 0.0}
        count = 0
        for step, (xb, yb) in enumerate(blist):
            s_logits, s_feats = student.forward_with_taps(xb, training=True)
            ce = loss_mod.cross_entropy_loss(s_logits, yb)
            total = ce
            kl_value = 0.0
            rtk_value = 0.0
            need_teacher = kd_active or (rtk_active and (retained or cfg.selection_cadence == "step"))
            if need_teacher:
                t_logits, t_feats = teacher.forward_with_taps(xb, training=False)
            if kd_active:
                kl = loss_mod.kl_soft_loss(
                    s_logits, t_logits, cfg.loss.temperature,
                    temp_sq=cfg.loss.kl_temp_sq, teacher_ref=cfg.loss.kl_teacher_ref,
                )
                kl_value = kl.item()
                total = total + kl * cfg.loss.alpha
            if rtk_active:
                if cfg.selection_cadence == "step":
                    step_attn = attn_mod.compute_attention(t_feats, s_feats, attn_params)
                    step_scores = attn_mod.impact_scores(step_attn.matrix, rtk_cfg.k)
                    sel = attn_mod.select_rtk(step_scores, step_attn.matrix, rtk_cfg)
                elif retained:
                    step_attn = attn_mod.compute_attention(t_feats, s_feats, attn_params)
                    sel = attn_mod.select_rtk(epoch_scores, step_attn.matrix, rtk_cfg)
                else:
                    sel = None
                if sel is not None and sel.retained:
                    rtk = loss_mod.rtk_loss(t_feats, s_feats, sel)
                    rtk_value = rtk.item()
                    total = total + rtk * cfg.loss.beta
            total_value = total.item()
            if not np.isfinite(total_value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            total.backward()
            opt.step()
            opt.zero_grad()
            sums["total"] += total_value
            sums["ce"] += ce.item()
            sums["kl"] += kl_value
            sums["rtk"] += rtk_value
            count += 1
        acc = evaluate_accuracy(student, test_samples, cfg.eval_batch_size)
        retained_counts.append(len(retained))
        rows.append({
            "epoch": epoch, "lr": opt.lr,
            "loss_total": sums["total"] / max(count, 1),
            "loss_ce": sums["ce"] / max(count, 1),
            "loss_kl": sums["kl"] / max(count, 1),
            "loss_rtk": sums["rtk"] / max(count, 1),
            "test_acc": acc, "retained_count": len(retained),
        })

    extra = {"role": "student", "retained_counts": retained_counts}
    if teacher is not None:
        extra["teacher_parameter_count"] = teacher.parameter_count()
    return _finalize(student, cfg, run_dir, rows, test_samples, extra, attn_params=attn_params)
