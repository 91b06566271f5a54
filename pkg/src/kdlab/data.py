"""Deterministic datasets: synthetic generators, the CIFAR binary format, augmentation, batching."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, ParameterError
from .rng import stream

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise DataError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.split, dict(self.provenance))


# synthetic generators ------------------------------------------------------

def gen_gaussian_mixture(
    K: int,
    dims: int,
    per_class: int,
    spread: float,
    seed: int,
    split: str = "train",
    modes_per_class: int = 1,
) -> Dataset:
    """Isotropic Gaussian clusters around seeded unit-variance centroids.

    Centroids depend only on ``seed``; the samples also depend on ``split``, so
    train and test draws share the task but never the points.  With
    ``modes_per_class > 1`` every class is a union of that many clusters and
    samples are spread round-robin across them.
    """
    if K < 2 or per_class < 1 or dims < 1 or modes_per_class < 1:
        raise ParameterError(f"need K>=2, per_class>=1, dims>=1 (got K={K}, per_class={per_class}, dims={dims})")
    if not spread > 0:
        raise ParameterError(f"spread must be > 0, got {spread}")
    centroids = stream(seed, "data").standard_normal((K, modes_per_class, dims))
    rng = stream(seed, f"data-{split}")
    labels = np.repeat(np.arange(K), per_class)
    modes = np.tile(np.arange(per_class) % modes_per_class, K)
    x = centroids[labels, modes] + spread * rng.standard_normal((K * per_class, dims))
    prov = {
        "generator": "gaussian_mixture",
        "K": K,
        "dims": dims,
        "per_class": per_class,
        "spread": spread,
        "seed": seed,
        "split": split,
        "modes_per_class": modes_per_class,
    }
    return Dataset(x, labels, K, split, prov)


def pattern_templates(K: int, H: int, W: int, seed: int, channels: int = 1) -> np.ndarray:
    """Class templates: a seeded 4x4 coarse ±1 pattern upsampled to H×W."""
    coarse = stream(seed, "data").choice([-1.0, 1.0], size=(K, channels, 4, 4))
    reps_h, reps_w = -(-H // 4), -(-W // 4)
    up = np.repeat(np.repeat(coarse, reps_h, axis=2), reps_w, axis=3)
    return up[:, :, :H, :W]


def gen_patterned_images(
    K: int, H: int, W: int, per_class: int, noise: float, seed: int, split: str = "train", channels: int = 1
) -> Dataset:
    if K < 2 or per_class < 1 or H < 8 or W < 8 or channels < 1:
        raise ParameterError(f"need K>=2, per_class>=1, H,W>=8 (got K={K}, H={H}, W={W})")
    if noise < 0:
        raise ParameterError(f"noise must be >= 0, got {noise}")
    templates = pattern_templates(K, H, W, seed, channels)
    labels = np.repeat(np.arange(K), per_class)
    x = templates[labels]
    if noise > 0:
        x = x + noise * stream(seed, f"data-{split}").standard_normal(x.shape)
    prov = {
        "generator": "patterned_images",
        "K": K,
        "H": H,
        "W": W,
        "per_class": per_class,
        "noise": noise,
        "seed": seed,
        "split": split,
        "channels": channels,
    }
    return Dataset(x, labels, K, split, prov)


def nearest_template_accuracy(ds: Dataset, templates: np.ndarray) -> float:
    flat = ds.inputs.reshape(len(ds), -1).astype(np.float64)
    tpl = templates.reshape(len(templates), -1)
    d = ((flat[:, None, :] - tpl[None, :, :]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == ds.labels).mean())


# CIFAR binary format -------------------------------------------------------

def _parse_cifar(raw: bytes, name: str) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise FormatError(f"{name}: incomplete {CIFAR_RECORD}-byte record at byte offset {offset}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    bad = np.flatnonzero(rec[:, 0] >= CIFAR_CLASSES)
    if bad.size:
        raise FormatError(
            f"{name}: label byte {rec[bad[0], 0]} >= {CIFAR_CLASSES} at byte offset {int(bad[0]) * CIFAR_RECORD}"
        )
    return rec[:, 1:].reshape(-1, *CIFAR_SHAPE), rec[:, 0].astype(np.int64)


def load_cifar_binary(paths: Sequence, stats: tuple | None | bool = None, split: str = "train") -> Dataset:
    """Read one or more files of 3073-byte records.

    Pixels are scaled to [0, 1]; then per-channel standardisation is applied
    with ``stats=(mean, std)`` if given, with statistics of this data if
    ``stats`` is None, and not at all if ``stats`` is False.  Every file is
    validated before any output is built.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    pixels, labels, digests = [], [], []
    for p in paths:
        raw = Path(p).read_bytes()
        px, lb = _parse_cifar(raw, str(p))
        pixels.append(px)
        labels.append(lb)
        digests.append(hashlib.sha256(raw).hexdigest())
    x = np.concatenate(pixels).astype(np.float32) / np.float32(255.0)
    y = np.concatenate(labels)
    prov: dict = {"source": "cifar_binary", "files": [str(p) for p in paths], "sha256": digests, "split": split}
    if stats is not False:
        if stats is None:
            if len(x) == 0:
                raise DataError("cannot compute normalisation statistics of an empty file")
            mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
            std = x.std(axis=(0, 2, 3), dtype=np.float64)
            std = np.where(std > 0, std, 1.0)
        else:
            mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
        x = ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
        prov["normalization"] = {"mean": [float(m) for m in mean], "std": [float(s) for s in std]}
    return Dataset(x, y, CIFAR_CLASSES, split, prov)


def write_cifar_binary(path, pixels: np.ndarray, labels: np.ndarray) -> Path:
    """Write uint8 ``N×3×32×32`` pixels (or [0,1] floats, rounded) with labels."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    labels = np.asarray(labels)
    if pixels.shape[1:] != CIFAR_SHAPE or len(pixels) != len(labels):
        raise DataError(f"expected N×3×32×32 pixels with N labels, got {pixels.shape} / {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= CIFAR_CLASSES):
        raise DataError("labels must lie in [0, 10)")
    rec = np.empty((len(labels), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = pixels.reshape(len(labels), -1)
    path = Path(path)
    path.write_bytes(rec.tobytes())
    return path


# augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    pad: int = 4
    crop: bool = True
    flip: bool = True

    @property
    def is_identity(self) -> bool:
        return not (self.crop and self.pad > 0) and not self.flip

    def describe(self) -> str:
        if self.is_identity:
            return "identity"
        parts = []
        if self.crop and self.pad > 0:
            parts.append(f"reflect-pad {self.pad} + random native-size crop")
        if self.flip:
            parts.append("horizontal flip p=0.5")
        return " + ".join(parts)


IDENTITY = AugmentPolicy(pad=0, crop=False, flip=False)
STANDARD = AugmentPolicy()


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def crop_padded(images: np.ndarray, pad: int, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Reflect-pad by ``pad`` and cut the native-size window at per-sample offsets."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out


def augment(inputs: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Label-preserving random crop + flip; consumes only ``rng``."""
    if policy.is_identity:
        return inputs
    if inputs.ndim != 4:
        raise ConfigError(f"augmentation policy {policy.describe()!r} needs image batches, got shape {inputs.shape}")
    n = len(inputs)
    out = inputs
    if policy.crop and policy.pad > 0:
        dy = rng.integers(0, 2 * policy.pad + 1, size=n)
        dx = rng.integers(0, 2 * policy.pad + 1, size=n)
        out = crop_padded(out, policy.pad, dy, dx)
    if policy.flip:
        flips = rng.random(n) < 0.5
        out = out.copy()
        out[flips] = out[flips][..., ::-1]
    return out


# batching ------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def epoch_permutation(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return stream(shuffle_seed, "shuffle", epoch).permutation(n)


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None, epoch: int = 0) -> Iterator[Batch]:
    """Yield the epoch's batches; ``shuffle_seed=None`` keeps dataset order.  The last partial batch is kept."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else epoch_permutation(n, shuffle_seed, epoch)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(dataset.inputs[idx], dataset.labels[idx], idx)
