"""Distillation losses: feature matching over retained teacher keys, softened
KL targets, cross entropy, and the weighted total objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import nn_ops, tensor as T
from .attention import RTKSelection
from .errors import ConfigError, DataError, DimensionError, ResampleError
from .models import FeatureSet
from .nn_ops import softpool2d  # re-exported: it is this module's resampling kernel
from .tensor import Tensor

__all__ = [
    "LossConfig", "softpool2d", "resample_to", "channel_pool_l2norm",
    "rtk_loss", "soften", "kl_soft_loss", "cross_entropy_loss", "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    """Weights of the combined objective: total = ce + alpha*kl + beta*rtk.

    ``kl_temp_sq`` keeps the classic T^2 factor on the KL term so its gradient
    scale stays comparable across temperatures. ``kl_teacher_ref`` selects
    KL(teacher || student); flipping it measures KL(student || teacher).
    """

    alpha: float = 0.9
    beta: float = 8.0
    temperature: float = 4.0
    kl_temp_sq: bool = True
    kl_teacher_ref: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")


def _factor(current: int, target: int, axis_name: str) -> tuple[int, int]:
    """(pool window, upsample factor) for one axis; identity is (1, 1)."""
    if current == target:
        return 1, 1
    if current > target:
        if current % target:
            raise ResampleError(
                f"cannot pool {axis_name}={current} down to {target}: non-integer ratio; "
                f"choose tap points with compatible spatial sizes"
            )
        return current // target, 1
    if target % current:
        raise ResampleError(
            f"cannot upsample {axis_name}={current} to {target}: non-integer ratio; "
            f"choose tap points with compatible spatial sizes"
        )
    return 1, target // current


def resample_to(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Match a feature map to a target spatial size: softpool down-sampling for
    integer reductions, nearest-neighbor up-sampling for integer enlargements."""
    if x.ndim != 4:
        raise DimensionError(f"resample_to: expected NCHW input, got shape {x.shape}")
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"resample_to: targets must be positive, got ({target_h}, {target_w})")
    h, w = x.shape[2], x.shape[3]
    pool_h, up_h = _factor(h, target_h, "height")
    pool_w, up_w = _factor(w, target_w, "width")
    out = x
    if up_h > 1 or up_w > 1:
        out = nn_ops.upsample_nearest(out, up_h, up_w)
    if pool_h > 1 or pool_w > 1:
        out = softpool2d(out, window=(pool_h, pool_w), stride=(pool_h, pool_w))
    return out


def channel_pool_l2norm(x: Tensor) -> Tensor:
    """Mean over channels, flatten spatially, L2-normalize each sample.

    Output rows are unit vectors in R^(H*W); an all-zero map stays zero."""
    if x.ndim != 4:
        raise DimensionError(f"channel_pool_l2norm: expected NCHW input, got shape {x.shape}")
    n, _, h, w = x.shape
    pooled = T.tmean(x, axis=1)
    flat = T.reshape(pooled, (n, h * w))
    return T.l2_normalize(flat, axis=1)


def rtk_loss(teacher_feats: FeatureSet, student_feats: FeatureSet, sel: RTKSelection) -> Tensor:
    """Weighted feature-matching loss over retained teacher keys.

    For every retained teacher index R and every student index s, the student
    map is resampled to the teacher map's spatial size and both are reduced by
    ``channel_pool_l2norm``; the per-sample Euclidean distances are averaged
    over the batch and weighted by the masked attention entry [s, R].
    Gradients reach student features and, through the mask, the attention
    parameters; teacher features enter as constants.
    """
    n_t, n_s = teacher_feats.count, student_feats.count
    masked = sel.masked
    m_shape = masked.shape if isinstance(masked, Tensor) else np.asarray(masked).shape
    if m_shape != (n_s, n_t):
        raise DimensionError(f"selection matrix {m_shape} does not match (n_s={n_s}, n_t={n_t})")
    if not sel.retained:
        dtype = student_feats.maps[0].dtype if student_feats.maps else np.float32
        return Tensor(np.zeros((), dtype=dtype))
    masked_t = masked if isinstance(masked, Tensor) else Tensor(np.asarray(masked))
    total: Optional[Tensor] = None
    teacher_flat = {r: channel_pool_l2norm(teacher_feats.maps[r].detach()) for r in sel.retained}
    student_flat: dict[tuple[int, int, int], Tensor] = {}
    for r in sel.retained:
        t_map = teacher_feats.maps[r]
        th, tw = t_map.shape[2], t_map.shape[3]
        for s in range(n_s):
            key = (s, th, tw)
            if key not in student_flat:
                student_flat[key] = channel_pool_l2norm(resample_to(student_feats.maps[s], th, tw))
            dist = T.l2_norm(teacher_flat[r] - student_flat[key], axis=1)  # [N]
            term = T.entry(masked_t, (s, r)) * T.tmean(dist)
            total = term if total is None else total + term
    return total


def soften(logits: Tensor, temperature: float) -> Tensor:
    """Temperature-scaled row softmax."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if logits.ndim != 2:
        raise DimensionError(f"soften: expected [N x K] logits, got shape {logits.shape}")
    return T.softmax(logits * (1.0 / temperature), axis=1)


def kl_soft_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float,
                 temp_sq: bool = True, teacher_ref: bool = True) -> Tensor:
    """Mean KL divergence between softened teacher and student predictions.

    Teacher probabilities are constants (no gradient flows back into the
    teacher). With ``temp_sq`` the result carries the T^2 factor that keeps
    gradient magnitudes temperature-invariant.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if student_logits.shape != teacher_logits.shape or student_logits.ndim != 2:
        raise DimensionError(
            f"logit shapes {student_logits.shape} and {teacher_logits.shape} must match as [N x K]"
        )
    inv_t = 1.0 / temperature
    log_p_s = T.log_softmax(student_logits * inv_t, axis=1)
    t_scaled = teacher_logits.data * inv_t
    t_shift = t_scaled - t_scaled.max(axis=1, keepdims=True)
    log_p_t = t_shift - np.log(np.exp(t_shift).sum(axis=1, keepdims=True))
    p_t = np.exp(log_p_t)
    if teacher_ref:
        # KL(p_t || p_s) = sum p_t * (log p_t - log p_s)
        row_kl = T.tsum(Tensor(p_t) * (Tensor(log_p_t) - log_p_s), axis=1)
    else:
        p_s = T.softmax(student_logits * inv_t, axis=1)
        row_kl = T.tsum(p_s * (log_p_s - Tensor(log_p_t)), axis=1)
    loss = T.tmean(row_kl)
    if temp_sq:
        loss = loss * (temperature * temperature)
    return loss


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true label."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_loss: expected [N x K] logits, got shape {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy_loss: {n} rows but label shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise DataError(f"label {bad} outside [0, {k})")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    log_probs = T.log_softmax(logits, axis=1)
    picked = T.tsum(log_probs * Tensor(onehot), axis=1)
    return T.tmean(picked) * -1.0


def total_loss(ce, kl, rtk, cfg: LossConfig) -> Tensor:
    """Combined objective ce + alpha*kl + beta*rtk."""
    parts = []
    for name, value in (("ce", ce), ("kl", kl), ("rtk", rtk)):
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float32))
        if t.size != 1:
            raise DimensionError(f"total_loss: {name} must be scalar, got shape {t.shape}")
        parts.append(t)
    ce_t, kl_t, rtk_t = parts
    return ce_t + kl_t * cfg.alpha + rtk_t * cfg.beta
