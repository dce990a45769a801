"""Teacher-student feature attention and representative-key selection.

Each tapped teacher map ``i`` is summarized into a query vector and each
student map ``j`` into a key vector (global average pooling, batch mean,
learned projection, relu). A bilinear form plus a positional-encoding dot
product gives compatibility logits ``z[i, j]``; a softmax over the student
axis of each teacher row yields the column-stochastic attention matrix
``A [n_s x n_t]``. Teacher features whose top-k column average exceeds the
threshold are retained; the distillation loss only sees those columns.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import nn_ops, seeding, tensor as T
from .errors import ConfigError, DimensionError
from .models import FeatureSet
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class RTKConfig:
    """Selection knobs: top-k count, retention threshold, renormalize flag.

    ``k=None`` resolves to ceil(n_s/2) and ``tau=None`` to 1/n_s (the
    uniform-attention level) once the student tap count is known.
    """

    k: Optional[int] = None
    tau: Optional[float] = None
    renormalize: bool = False

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.tau is not None and not (0.0 <= self.tau <= 1.0):
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")

    def resolved(self, n_s: int) -> "RTKConfig":
        k = self.k if self.k is not None else math.ceil(n_s / 2)
        tau = self.tau if self.tau is not None else 1.0 / n_s
        if k > n_s:
            raise ConfigError(f"k={k} exceeds the student tap count n_s={n_s}")
        return RTKConfig(k=k, tau=tau, renormalize=self.renormalize)


@dataclass
class AttentionMatrix:
    """Pre-softmax logits ``z [n_t x n_s]`` and the stochastic matrix ``A [n_s x n_t]``."""

    logits: Tensor
    matrix: Tensor

    @property
    def n_t(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_s(self) -> int:
        return self.matrix.shape[0]


@dataclass
class RTKSelection:
    """Retained teacher indices, per-teacher impact scores, and the masked matrix."""

    retained: list[int]
    impact: np.ndarray
    masked: Union[Tensor, np.ndarray]


class AttentionParams:
    """Trainable projections for the attention pathway.

    One query projection and one positional vector per teacher tap; one key
    projection, one bilinear matrix and one positional vector per student
    tap. Projections use fan-in scaled normal init; bilinear and positional
    vectors use std 1/sqrt(d). Positional vectors opt out of weight decay.
    """

    def __init__(self, teacher_channels: Sequence[int], student_channels: Sequence[int],
                 d: int = 64, seed: int = 0):
        if d < 1:
            raise ConfigError(f"embedding width d must be >= 1, got {d}")
        self.d = d
        rng = seeding.stream(seed, seeding.ATTENTION_INIT)
        self.query_proj = [
            Parameter(rng.normal(0.0, np.sqrt(2.0 / c), size=(d, c)).astype(np.float32), f"attn.query{i}")
            for i, c in enumerate(teacher_channels)
        ]
        self.key_proj = [
            Parameter(rng.normal(0.0, np.sqrt(2.0 / c), size=(d, c)).astype(np.float32), f"attn.key{j}")
            for j, c in enumerate(student_channels)
        ]
        scale = 1.0 / np.sqrt(d)
        self.bilinear = [
            Parameter(rng.normal(0.0, scale, size=(d, d)).astype(np.float32), f"attn.bilinear{j}")
            for j in range(len(student_channels))
        ]
        self.pos_teacher = [
            Parameter(rng.normal(0.0, scale, size=(d, 1)).astype(np.float32), f"attn.pos_t{i}", weight_decay=False)
            for i in range(len(teacher_channels))
        ]
        self.pos_student = [
            Parameter(rng.normal(0.0, scale, size=(d, 1)).astype(np.float32), f"attn.pos_s{j}", weight_decay=False)
            for j in range(len(student_channels))
        ]

    @property
    def n_t(self) -> int:
        return len(self.query_proj)

    @property
    def n_s(self) -> int:
        return len(self.key_proj)

    def parameters(self) -> list[Parameter]:
        return [*self.query_proj, *self.key_proj, *self.bilinear, *self.pos_teacher, *self.pos_student]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _pooled_column(feat: Tensor, proj: Parameter, side: str, index: int) -> Tensor:
    """Batch-averaged pooled feature projected and rectified: relu(W @ phi)."""
    c = feat.shape[1]
    if proj.data.shape[1] != c:
        raise DimensionError(
            f"{side} projection {index} expects {proj.data.shape[1]} channels, feature has {c}"
        )
    pooled = nn_ops.global_avg_pool(feat)          # [N, C]
    avg = T.tmean(pooled, axis=0)                  # [C], one vector per tap
    return T.relu(T.matmul(proj.tensor, T.reshape(avg, (c, 1))))  # [d, 1]


def compute_queries(teacher_feats: FeatureSet, params: AttentionParams) -> list[Tensor]:
    """Query vector per teacher tap, each shaped [d, 1]."""
    if teacher_feats.count != params.n_t:
        raise DimensionError(f"{teacher_feats.count} teacher taps but {params.n_t} query projections")
    return [_pooled_column(m, params.query_proj[i], "query", i) for i, m in enumerate(teacher_feats.maps)]


def compute_keys(student_feats: FeatureSet, params: AttentionParams) -> list[Tensor]:
    """Key vector per student tap, each shaped [d, 1]."""
    if student_feats.count != params.n_s:
        raise DimensionError(f"{student_feats.count} student taps but {params.n_s} key projections")
    return [_pooled_column(m, params.key_proj[j], "key", j) for j, m in enumerate(student_feats.maps)]


def attention_logits(queries: Sequence[Tensor], keys: Sequence[Tensor], params: AttentionParams) -> Tensor:
    """Compatibility logits z [n_t x n_s]:
    ``z[i, j] = (q_i^T W_j k_j + p_i^T . p_j^S) / sqrt(d)``."""
    if len(queries) != params.n_t or len(keys) != params.n_s:
        raise DimensionError(
            f"got {len(queries)} queries / {len(keys)} keys for {params.n_t} x {params.n_s} attention"
        )
    inv_sqrt_d = 1.0 / math.sqrt(params.d)
    rows = []
    for i, q in enumerate(queries):
        cells = []
        q_row = T.transpose(q)  # [1, d]
        p_t_row = T.transpose(params.pos_teacher[i].tensor)
        for j, k in enumerate(keys):
            bilinear = T.matmul(q_row, T.matmul(params.bilinear[j].tensor, k))
            positional = T.matmul(p_t_row, params.pos_student[j].tensor)
            cells.append((bilinear + positional) * inv_sqrt_d)
        rows.append(T.concat(cells, axis=1))
    return T.concat(rows, axis=0)


def attention_columns(z: Tensor) -> Tensor:
    """A [n_s x n_t]: column i is the softmax over student features of z[i, :]."""
    if z.ndim != 2:
        raise DimensionError(f"attention logits must be rank-2, got shape {z.shape}")
    return T.transpose(T.softmax(z, axis=1))


def compute_attention(teacher_feats: FeatureSet, student_feats: FeatureSet,
                      params: AttentionParams) -> AttentionMatrix:
    q = compute_queries(teacher_feats, params)
    k = compute_keys(student_feats, params)
    z = attention_logits(q, k, params)
    return AttentionMatrix(logits=z, matrix=attention_columns(z))


def _as_array(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a)


def impact_scores(attn, k: int) -> np.ndarray:
    """Mean of the k largest entries of each column of A; shape [n_t]."""
    a = _as_array(attn)
    if a.ndim != 2:
        raise DimensionError(f"attention matrix must be rank-2, got shape {a.shape}")
    n_s = a.shape[0]
    if not 1 <= k <= n_s:
        raise ConfigError(f"k must lie in [1, {n_s}], got {k}")
    top = np.sort(a, axis=0)[n_s - k :, :]
    return top.mean(axis=0)


def select_rtk(scores: np.ndarray, attn, cfg: RTKConfig) -> RTKSelection:
    """Retain teacher features with impact strictly above tau; zero the rest.

    The mask multiplies the matrix entrywise, so when ``attn`` is a graph
    tensor the retained entries stay differentiable. ``renormalize`` re-runs
    the column softmax on retained columns, which leaves their values
    unchanged (columns are already individually normalized); the flag exists
    for variants that normalize across columns.
    """
    scores = np.asarray(scores, dtype=float)
    a = _as_array(attn)
    if scores.shape != (a.shape[1],):
        raise DimensionError(f"impact shape {scores.shape} does not match n_t={a.shape[1]}")
    tau = cfg.tau if cfg.tau is not None else 1.0 / a.shape[0]
    retained = [int(i) for i in np.nonzero(scores > tau)[0]]
    mask = np.zeros(a.shape, dtype=a.dtype)
    mask[:, retained] = 1.0
    if isinstance(attn, Tensor):
        masked: Union[Tensor, np.ndarray] = T.mul(attn, Tensor(mask))
    else:
        masked = a * mask
    return RTKSelection(retained=retained, impact=scores, masked=masked)


def export_attention(csv_path, json_path, matrix, selection: RTKSelection,
                     epoch: int, cfg: RTKConfig) -> None:
    """Per-epoch export: the matrix as CSV (rows = student taps, columns =
    teacher taps) plus a JSON sidecar with the retained set and scores."""
    a = _as_array(matrix)
    csv_path, json_path = Path(csv_path), Path(json_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in a:
            writer.writerow([repr(float(v)) for v in row])
    sidecar = {
        "epoch": int(epoch),
        "n_s": int(a.shape[0]),
        "n_t": int(a.shape[1]),
        "retained": [int(i) for i in selection.retained],
        "impact": [float(v) for v in selection.impact],
        "k": cfg.k,
        "tau": cfg.tau,
    }
    json_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
