"""Dataset ingestion and deterministic batch iteration.

Two sources: the standard CIFAR-10 binary batches, and a procedural
class-conditional texture generator for minutes-scale experiments. Both
deliver `Sample` records whose images are scaled to [0, 1] and standardized
by per-channel statistics of the training split.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .errors import ConfigError, DataError, FormatError
from .tensor import Tensor

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixel bytes
CIFAR_RECORDS_PER_FILE = 10000

SYNTH_MAGIC = b"RTKS"
SYNTH_VERSION = 1


@dataclass
class Sample:
    image: np.ndarray  # [C, H, W] float32, standardized
    label: int


@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 4
    crop: int | None = None  # None keeps the input size
    hflip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.pad < 0:
            raise ConfigError(f"pad must be >= 0, got {self.pad}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")


# -- CIFAR-10 binary format ----------------------------------------------------


def decode_record(record: bytes) -> tuple[int, np.ndarray]:
    """One 3073-byte record -> (label, uint8 image [3, 32, 32])."""
    if len(record) != CIFAR_RECORD_BYTES:
        raise FormatError(f"record is {len(record)} bytes, expected {CIFAR_RECORD_BYTES}")
    label = record[0]
    image = np.frombuffer(record, dtype=np.uint8, offset=1).reshape(3, 32, 32)
    return int(label), image


def encode_record(label: int, image: np.ndarray) -> bytes:
    """Inverse of `decode_record`; image must be uint8 [3, 32, 32]."""
    image = np.asarray(image)
    if image.shape != (3, 32, 32) or image.dtype != np.uint8:
        raise FormatError(f"image must be uint8 [3, 32, 32], got {image.dtype} {image.shape}")
    if not 0 <= int(label) <= 255:
        raise FormatError(f"label {label} does not fit in one byte")
    return bytes([int(label)]) + image.tobytes()


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    expected = CIFAR_RECORDS_PER_FILE * CIFAR_RECORD_BYTES
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD_BYTES)
    labels = rows[:, 0].astype(np.int64)
    images = rows[:, 1:].reshape(-1, 3, 32, 32)
    return labels, images


def _standardize(images_u8: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    scaled = images_u8.astype(np.float32) / np.float32(255.0)
    return (scaled - mean[None, :, None, None]) / std[None, :, None, None]


def load_cifar10_binary(dir_path) -> tuple[list[Sample], list[Sample]]:
    """Read the six standard binary batches under ``dir_path``.

    Per-channel mean/std of the train split (in [0, 1] scale) standardize both
    splits; the statistics are cached in ``normalization.json`` next to the
    batches so repeat loads are bit-identical and cheap.
    """
    dir_path = Path(dir_path)
    train_parts = [_read_cifar_file(dir_path / name) for name in CIFAR_TRAIN_FILES]
    test_parts = [_read_cifar_file(dir_path / name) for name in CIFAR_TEST_FILES]
    train_labels = np.concatenate([p[0] for p in train_parts])
    train_images = np.concatenate([p[1] for p in train_parts])
    test_labels = np.concatenate([p[0] for p in test_parts])
    test_images = np.concatenate([p[1] for p in test_parts])

    stats_path = dir_path / "normalization.json"
    if stats_path.exists():
        stats = json.loads(stats_path.read_text())
        mean = np.asarray(stats["mean"], dtype=np.float32)
        std = np.asarray(stats["std"], dtype=np.float32)
    else:
        scaled = train_images.astype(np.float32) / np.float32(255.0)
        mean = scaled.mean(axis=(0, 2, 3))
        std = scaled.std(axis=(0, 2, 3))
        std = np.maximum(std, np.float32(1e-8))
        try:
            stats_path.write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}, sort_keys=True))
        except OSError:
            pass  # read-only dataset directory; recompute next time

    train = _to_samples(_standardize(train_images, mean, std), train_labels)
    test = _to_samples(_standardize(test_images, mean, std), test_labels)
    return train, test


def _to_samples(images: np.ndarray, labels: np.ndarray) -> list[Sample]:
    return [Sample(image=images[i], label=int(labels[i])) for i in range(len(labels))]


# -- synthetic class-conditional textures ---------------------------------------


def _balanced_labels(n: int, num_classes: int) -> np.ndarray:
    base, extra = divmod(n, num_classes)
    counts = [base + (1 if c < extra else 0) for c in range(num_classes)]
    return np.concatenate([np.full(cnt, c, dtype=np.int64) for c, cnt in enumerate(counts)])


NOISE_SIGMA = 0.55
AMPLITUDE_RANGE = (0.3, 1.0)


def _texture_batch(labels: np.ndarray, size: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Oriented sinusoidal gratings, one orientation/frequency pair per class.

    Per-sample random phase, random contrast in ``AMPLITUDE_RANGE`` (low-
    contrast samples are genuinely hard), and pixel noise; clipped to [0, 1].
    """
    n = len(labels)
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    half = (num_classes + 1) // 2
    out = np.empty((n, 3, size, size), dtype=np.float32)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    amps = rng.uniform(*AMPLITUDE_RANGE, size=n)
    noise = rng.normal(0.0, NOISE_SIGMA, size=(n, 3, size, size))
    for idx in range(n):
        c = int(labels[idx])
        angle = np.pi * (c % half) / half
        freq = 2.0 + 2.0 * (c // half)
        proj = (xx * np.cos(angle) + yy * np.sin(angle)) / size
        grating = 0.5 + amps[idx] * 0.5 * np.sin(2.0 * np.pi * freq * proj + phases[idx])
        # mild channel tilt keeps the three planes correlated but not equal
        chans = np.stack([grating, 0.85 * grating + 0.075, 0.7 * grating + 0.15])
        out[idx] = np.clip(chans + noise[idx], 0.0, 1.0).astype(np.float32)
    return out


def synth_dataset(
    num_classes: int,
    n_train: int,
    n_test: int,
    size: int,
    seed: int,
    cache_dir=None,
) -> tuple[list[Sample], list[Sample]]:
    """Procedural balanced dataset, fully determined by its arguments.

    With ``cache_dir`` set, the generated arrays are stored in a versioned
    binary file keyed by every generator parameter; a matching cache file is
    loaded instead of regenerating.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if n_train < 1 or n_test < 1 or size < 1:
        raise ConfigError(f"need positive n_train/n_test/size, got {n_train}/{n_test}/{size}")

    cache_path = None
    if cache_dir is not None:
        name = f"synth-v{SYNTH_VERSION}-k{num_classes}-tr{n_train}-te{n_test}-s{size}-seed{seed}.bin"
        cache_path = Path(cache_dir) / name
        if cache_path.exists():
            return _load_synth_cache(cache_path, num_classes, n_train, n_test, size, seed)

    rng = seeding.stream(seed, seeding.SYNTH_DATA)
    train_labels = _balanced_labels(n_train, num_classes)
    test_labels = _balanced_labels(n_test, num_classes)
    train_raw = _texture_batch(train_labels, size, num_classes, rng)
    test_raw = _texture_batch(test_labels, size, num_classes, rng)
    perm = rng.permutation(n_train)
    train_labels, train_raw = train_labels[perm], train_raw[perm]

    mean = train_raw.mean(axis=(0, 2, 3))
    std = np.maximum(train_raw.std(axis=(0, 2, 3)), np.float32(1e-8))
    train_images = (train_raw - mean[None, :, None, None]) / std[None, :, None, None]
    test_images = (test_raw - mean[None, :, None, None]) / std[None, :, None, None]

    if cache_path is not None:
        _save_synth_cache(cache_path, num_classes, n_train, n_test, size, seed,
                          train_images, train_labels, test_images, test_labels)
    return _to_samples(train_images, train_labels), _to_samples(test_images, test_labels)


def _save_synth_cache(path: Path, num_classes, n_train, n_test, size, seed,
                      train_images, train_labels, test_images, test_labels) -> None:
    header = json.dumps(
        {"version": SYNTH_VERSION, "num_classes": num_classes, "n_train": n_train,
         "n_test": n_test, "size": size, "seed": seed},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(SYNTH_MAGIC)
        fh.write(struct.pack("<II", SYNTH_VERSION, len(header)))
        fh.write(header)
        for arr in (train_images, test_images):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for arr in (train_labels, test_labels):
            fh.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())


def _load_synth_cache(path: Path, num_classes, n_train, n_test, size, seed):
    raw = path.read_bytes()
    if raw[:4] != SYNTH_MAGIC:
        raise FormatError(f"{path}: not a synthetic dataset cache")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != SYNTH_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    expected = {"version": SYNTH_VERSION, "num_classes": num_classes, "n_train": n_train,
                "n_test": n_test, "size": size, "seed": seed}
    if header != expected:
        raise FormatError(f"{path}: cache header {header} does not match request {expected}")
    offset = 12 + hlen
    img_elems_train = n_train * 3 * size * size
    img_elems_test = n_test * 3 * size * size
    want = offset + 4 * (img_elems_train + img_elems_test) + 8 * (n_train + n_test)
    if len(raw) != want:
        raise FormatError(f"{path}: expected {want} bytes, found {len(raw)}")
    train_images = np.frombuffer(raw, dtype="<f4", count=img_elems_train, offset=offset)
    offset += 4 * img_elems_train
    test_images = np.frombuffer(raw, dtype="<f4", count=img_elems_test, offset=offset)
    offset += 4 * img_elems_test
    train_labels = np.frombuffer(raw, dtype="<i8", count=n_train, offset=offset)
    offset += 8 * n_train
    test_labels = np.frombuffer(raw, dtype="<i8", count=n_test, offset=offset)
    train = _to_samples(train_images.reshape(n_train, 3, size, size).copy(), train_labels)
    test = _to_samples(test_images.reshape(n_test, 3, size, size).copy(), test_labels)
    return train, test


# -- augmentation and batching ---------------------------------------------------


def augment(s: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Zero-pad, random-crop back to the output size, maybe horizontal flip.

    Label and shape are preserved; the result is a pure function of
    (sample, cfg, rng state).
    """
    if not cfg.enabled:
        return s
    img = s.image
    _, h, w = img.shape
    out_h = cfg.crop if cfg.crop is not None else h
    out_w = cfg.crop if cfg.crop is not None else w
    if out_h > h + 2 * cfg.pad or out_w > w + 2 * cfg.pad:
        raise ConfigError(f"crop {out_h} exceeds padded size {h + 2 * cfg.pad}")
    if cfg.pad or (out_h, out_w) != (h, w):
        padded = np.pad(img, ((0, 0), (cfg.pad, cfg.pad), (cfg.pad, cfg.pad)))
        top = int(rng.integers(0, padded.shape[1] - out_h + 1))
        left = int(rng.integers(0, padded.shape[2] - out_w + 1))
        img = padded[:, top : top + out_h, left : left + out_w]
    if rng.random() < cfg.hflip_prob:
        img = img[:, :, ::-1]
    return Sample(image=np.ascontiguousarray(img), label=s.label)


def batches(
    data: list[Sample],
    batch_size: int,
    shuffle_seed: int,
    epoch: int,
    augment_cfg: AugmentConfig | None = None,
):
    """Deterministic shuffled minibatches: (Tensor [N,C,H,W], int64 labels).

    The permutation depends only on (shuffle_seed, epoch); augmentation, when
    given, draws from its own stream keyed the same way. The final partial
    batch is kept.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not data:
        raise DataError("empty dataset")
    order = seeding.stream(shuffle_seed, seeding.SHUFFLE, epoch).permutation(len(data))
    aug_rng = seeding.stream(shuffle_seed, seeding.AUGMENT, epoch) if augment_cfg else None
    out = []
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        samples = [data[i] for i in chunk]
        if augment_cfg is not None:
            samples = [augment(s, augment_cfg, aug_rng) for s in samples]
        images = np.stack([s.image for s in samples]).astype(np.float32, copy=False)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        out.append((Tensor(images), labels))
    return out


def eval_batches(data: list[Sample], batch_size: int = 256):
    """Unshuffled, unaugmented batches for evaluation."""
    out = []
    for start in range(0, len(data), batch_size):
        samples = data[start : start + batch_size]
        images = np.stack([s.image for s in samples]).astype(np.float32, copy=False)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        out.append((Tensor(images), labels))
    return out
