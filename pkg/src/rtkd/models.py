"""Small residual CNN backbones with designated feature tap points.

A backbone is: 3x3 stem conv -> BN -> ReLU, then a sequence of stages of
basic residual blocks (two 3x3 convs with BN, post-activation). The first
block of every stage after the first downsamples by stride 2 through both
the main branch and a 1x1 strided shortcut. The head is global average
pooling followed by an affine classifier.

Tap points name (stage, block) positions whose post-activation outputs are
returned as the distillation feature set, in depth order. The tapped tensors
are the exact tensors fed to the next layer, so gradients reaching a tap flow
into the main network as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_ops, seeding, tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DimensionError
from .tensor import Parameter, Tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    stage_depths: tuple[int, ...]
    stage_channels: tuple[int, ...]
    input_channels: int = 3
    num_classes: int = 10
    tap_points: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "tap_points", tuple((int(s), int(b)) for s, b in self.tap_points))
        if len(self.stage_depths) != len(self.stage_channels):
            raise ConfigError(
                f"stage_depths {self.stage_depths} and stage_channels {self.stage_channels} differ in length"
            )
        if not self.stage_depths or any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage_depths must be positive, got {self.stage_depths}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be positive, got {self.stage_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for s, b in self.tap_points:
            if not (0 <= s < len(self.stage_depths)) or not (0 <= b < self.stage_depths[s]):
                raise ConfigError(f"tap point (stage={s}, block={b}) does not exist in {self.stage_depths}")
        if len(set(self.tap_points)) != len(self.tap_points):
            raise ConfigError(f"duplicate tap points in {self.tap_points}")
        # taps are reported in network depth order
        object.__setattr__(self, "tap_points", tuple(sorted(self.tap_points)))

    @property
    def tap_channels(self) -> tuple[int, ...]:
        return tuple(self.stage_channels[s] for s, _ in self.tap_points)

    def to_dict(self) -> dict:
        return {
            "stage_depths": list(self.stage_depths),
            "stage_channels": list(self.stage_channels),
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "tap_points": [list(t) for t in self.tap_points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            stage_depths=tuple(d["stage_depths"]),
            stage_channels=tuple(d["stage_channels"]),
            input_channels=int(d["input_channels"]),
            num_classes=int(d["num_classes"]),
            tap_points=tuple((int(s), int(b)) for s, b in d["tap_points"]),
        )


@dataclass
class FeatureSet:
    """Ordered rank-4 feature maps tapped from one network, depth order."""

    maps: list[Tensor] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.maps)

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [(m.shape[2], m.shape[3], m.shape[1]) for m in self.maps]

    @property
    def channels(self) -> list[int]:
        return [m.shape[1] for m in self.maps]


def default_tap_points(cfg_depths) -> tuple[tuple[int, int], ...]:
    """End of every stage."""
    return tuple((s, d - 1) for s, d in enumerate(cfg_depths))


def teacher8_config(num_classes: int = 10, input_channels: int = 3) -> BackboneConfig:
    """Desk-scale teacher: 2 stages x 2 blocks, 16/32 channels, all blocks tapped."""
    return BackboneConfig(
        stage_depths=(2, 2),
        stage_channels=(16, 32),
        input_channels=input_channels,
        num_classes=num_classes,
        tap_points=((0, 0), (0, 1), (1, 0), (1, 1)),
    )


def student4_config(num_classes: int = 10, input_channels: int = 3) -> BackboneConfig:
    """Desk-scale student: 2 stages x 1 block, 8/16 channels, stage ends tapped."""
    return BackboneConfig(
        stage_depths=(1, 1),
        stage_channels=(8, 16),
        input_channels=input_channels,
        num_classes=num_classes,
        tap_points=((0, 0), (1, 0)),
    )


class _ConvBN:
    """Conv (no bias) + batch norm unit owning its running statistics."""

    def __init__(self, rng, name, c_in, c_out, k, stride):
        fan_in = c_in * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
        self.weight = Parameter(w.astype(np.float32), f"{name}.conv.weight")
        self.gamma = Parameter(np.ones(c_out, dtype=np.float32), f"{name}.bn.gamma", weight_decay=False)
        self.beta = Parameter(np.zeros(c_out, dtype=np.float32), f"{name}.bn.beta", weight_decay=False)
        self.running_mean = np.zeros(c_out, dtype=np.float32)
        self.running_var = np.ones(c_out, dtype=np.float32)
        self.name = name
        self.stride = stride
        self.pad = (k - 1) // 2

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = nn_ops.conv2d(x, self.weight.tensor, stride=self.stride, pad=self.pad)
        return nn_ops.batch_norm2d(
            y, self.gamma.tensor, self.beta.tensor,
            self.running_mean, self.running_var,
            training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
        )

    def parameters(self):
        return [self.weight, self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.bn.running_mean", self.running_mean),
                (f"{self.name}.bn.running_var", self.running_var)]


class _Block:
    """Basic residual block; downsamples when stride is 2."""

    def __init__(self, rng, name, c_in, c_out, stride):
        self.conv1 = _ConvBN(rng, f"{name}.conv1", c_in, c_out, 3, stride)
        self.conv2 = _ConvBN(rng, f"{name}.conv2", c_out, c_out, 3, 1)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = _ConvBN(rng, f"{name}.shortcut", c_in, c_out, 1, stride)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        branch = self.conv2(T.relu(self.conv1(x, training)), training)
        skip = self.shortcut(x, training) if self.shortcut is not None else x
        return T.relu(branch + skip)

    def parameters(self):
        units = [self.conv1, self.conv2] + ([self.shortcut] if self.shortcut else [])
        return [p for u in units for p in u.parameters()]

    def buffers(self):
        units = [self.conv1, self.conv2] + ([self.shortcut] if self.shortcut else [])
        return [b for u in units for b in u.buffers()]


class Backbone:
    def __init__(self, cfg: BackboneConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = seeding.stream(seed, seeding.MODEL_INIT)
        self.stem = _ConvBN(rng, "stem", cfg.input_channels, cfg.stage_channels[0], 3, 1)
        self.stages: list[list[_Block]] = []
        c_in = cfg.stage_channels[0]
        for s, (depth, c_out) in enumerate(zip(cfg.stage_depths, cfg.stage_channels)):
            blocks = []
            for b in range(depth):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(_Block(rng, f"stage{s}.block{b}", c_in, c_out, stride))
                c_in = c_out
            self.stages.append(blocks)
        head_in = cfg.stage_channels[-1]
        self.head_w = Parameter(
            rng.normal(0.0, np.sqrt(1.0 / head_in), size=(head_in, cfg.num_classes)).astype(np.float32),
            "head.weight",
        )
        self.head_b = Parameter(np.zeros(cfg.num_classes, dtype=np.float32), "head.bias", weight_decay=False)

    # -- forward ------------------------------------------------------------

    def forward_with_taps(self, batch: Tensor, training: bool) -> tuple[Tensor, FeatureSet]:
        if batch.ndim != 4 or batch.shape[1] != self.cfg.input_channels:
            raise DimensionError(
                f"expected input [N x {self.cfg.input_channels} x H x W], got shape {batch.shape}"
            )
        taps = {}
        x = T.relu(self.stem(batch, training))
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                x = block(x, training)
                if (s, b) in self.cfg.tap_points:
                    taps[(s, b)] = x
        pooled = nn_ops.global_avg_pool(x)
        logits = T.linear(pooled, self.head_w.tensor, self.head_b.tensor)
        feats = FeatureSet([taps[t] for t in self.cfg.tap_points])
        return logits, feats

    def forward(self, batch: Tensor, training: bool) -> Tensor:
        return self.forward_with_taps(batch, training)[0]

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = self.stem.parameters()
        for blocks in self.stages:
            for block in blocks:
                params.extend(block.parameters())
        params.extend([self.head_w, self.head_b])
        return params

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        bufs = self.stem.buffers()
        for blocks in self.stages:
            for block in blocks:
                bufs.extend(block.buffers())
        return bufs

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.tensor.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- persistence ----------------------------------------------------------

    def save(self, path, meta=None) -> None:
        arrays = [(p.name, "param", p.data) for p in self.parameters()]
        arrays += [(name, "buffer", buf) for name, buf in self.buffers()]
        save_checkpoint(path, arrays, config=self.cfg.to_dict(), meta=meta)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in arrays:
                raise ConfigError(f"checkpoint is missing parameter {p.name}")
            if tuple(arrays[p.name].shape) != p.data.shape:
                raise DimensionError(
                    f"checkpoint parameter {p.name} has shape {arrays[p.name].shape}, model needs {p.data.shape}"
                )
            p.data[...] = arrays[p.name]
        for name, buf in self.buffers():
            if name not in arrays:
                raise ConfigError(f"checkpoint is missing buffer {name}")
            buf[...] = arrays[name]


def build_backbone(cfg: BackboneConfig, seed: int) -> Backbone:
    """Deterministically initialized backbone: Kaiming fan-in conv weights,
    unit affine scales, zero shifts."""
    return Backbone(cfg, seed)


def forward_with_taps(model: Backbone, batch: Tensor, mode: str = "train"):
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model.forward_with_taps(batch, training=(mode == "train"))


def load_backbone(path) -> Backbone:
    cfg_dict, arrays, _meta = load_checkpoint(path)
    model = Backbone(BackboneConfig.from_dict(cfg_dict), seed=0)
    model.load_arrays(arrays)
    return model
