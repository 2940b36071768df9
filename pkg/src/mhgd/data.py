"""Image datasets: CIFAR-style binary files, a synthetic stand-in, augmentation."""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Tuple

import numpy as np

from .tensor import Tensor

FINE_CLASSES = 100
COARSE_CLASSES = 20


class DatasetFormatError(ValueError):
    pass


class CorruptRecordError(DatasetFormatError):
    def __init__(self, index: int, label: int, num_classes: int):
        self.index = index
        super().__init__(f"record {index}: label {label} outside [0, {num_classes})")


@dataclass
class LabeledImageSet:
    images: np.ndarray       # N x H x W x 3, uint8
    labels: np.ndarray       # N, int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise DatasetFormatError(f"label {int(self.labels.max())} >= {self.num_classes} classes")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "LabeledImageSet":
        return LabeledImageSet(self.images[index], self.labels[index], self.num_classes, self.split)


@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 4
    flip: bool = True
    crop: Optional[int] = None          # defaults to the image size
    normalization: str = "range"


# -- CIFAR binary ---------------------------------------------------------------

def load_cifar_binary(path, variant: str = "fine100", image_size: int = 32,
                      num_classes: Optional[int] = None, split: str = "train") -> LabeledImageSet:
    """Parse ``<coarse byte><fine byte><R plane><G plane><B plane>`` records."""
    if variant not in ("fine100", "coarse"):
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    raw = Path(path).read_bytes()
    plane = image_size * image_size
    record = 2 + 3 * plane
    if len(raw) % record:
        raise DatasetFormatError(f"{len(raw)} bytes is not a multiple of the {record}-byte record "
                                 f"({len(raw) // record} full records, {len(raw) % record} bytes left)")
    n = len(raw) // record
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, record)
    labels = arr[:, 0 if variant == "coarse" else 1].astype(np.int64)
    k = num_classes or (COARSE_CLASSES if variant == "coarse" else FINE_CLASSES)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        raise CorruptRecordError(int(bad[0]), int(labels[bad[0]]), k)
    images = arr[:, 2:].reshape(n, 3, image_size, image_size).transpose(0, 2, 3, 1)
    return LabeledImageSet(np.ascontiguousarray(images), labels, k, split)


def save_cifar_binary(data: LabeledImageSet, path, coarse_labels: Optional[np.ndarray] = None) -> None:
    if data.images.shape[1] != data.images.shape[2]:
        raise DatasetFormatError("only square images fit the binary layout")
    n = len(data)
    coarse = data.labels if coarse_labels is None else np.asarray(coarse_labels)
    planes = data.images.transpose(0, 3, 1, 2).reshape(n, -1)
    rows = np.concatenate([coarse.astype(np.uint8)[:, None], data.labels.astype(np.uint8)[:, None],
                           planes.astype(np.uint8)], axis=1)
    Path(path).write_bytes(rows.tobytes())


# -- synthetic data -------------------------------------------------------------

def class_palette(num_classes: int, amplitude: float = 90.0) -> np.ndarray:
    phase = 2 * np.pi * np.arange(num_classes)[:, None] / num_classes
    offsets = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])[None, :]
    return 128.0 + amplitude * np.cos(phase + offsets)


def generate_synthetic(classes: int = 4, count: int = 2048, size: int = 16, seed: int = 0,
                       difficulty: float = 0.5, split: str = "train") -> LabeledImageSet:
    """Colour-blob images whose class sets the tint, blob colour and blob position.

    ``difficulty`` in [0, 1] trades the global class tint for clutter: pixel
    noise, position jitter, colour jitter and distractor blobs. At 0 the
    class is readable from the mean colour alone.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % classes).astype(np.int64)
    if count == 0:
        return LabeledImageSet(np.zeros((0, size, size, 3), np.uint8), labels, classes, split)

    d = float(np.clip(difficulty, 0.0, 1.0))
    palette = class_palette(classes)
    tint = 0.6 * (1 - d) + 0.05 * d
    noise = 10 + 30 * d
    jitter = 0.03 + 0.12 * d
    colour_jitter = 10 + 50 * d
    distractor_p = 0.9 * d

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    angle = 2 * np.pi * labels / classes
    cy = 0.5 + 0.25 * np.sin(angle) + rng.normal(0, jitter, count)
    cx = 0.5 + 0.25 * np.cos(angle) + rng.normal(0, jitter, count)
    radius = rng.uniform(0.12, 0.22, count)

    colour = palette[labels]
    img = 128.0 + tint * (colour[:, None, None, :] - 128.0)
    img = np.broadcast_to(img, (count, size, size, 3)).copy()
    # Smooth background gradient shared across classes.
    grad = rng.normal(0, 15, (count, 2, 3))
    img += yy[None, :, :, None] * grad[:, None, None, 0, :] + xx[None, :, :, None] * grad[:, None, None, 1, :]

    def blob(y0, x0, r):
        dist2 = (yy[None] - y0[:, None, None]) ** 2 + (xx[None] - x0[:, None, None]) ** 2
        return np.exp(-dist2 / (2 * r[:, None, None] ** 2))[..., None]

    blob_colour = colour + rng.normal(0, colour_jitter, (count, 3))
    m = blob(cy, cx, radius)
    img = img * (1 - m) + blob_colour[:, None, None, :] * m

    has_distractor = rng.random(count) < distractor_p
    dy, dx = rng.uniform(0.15, 0.85, count), rng.uniform(0.15, 0.85, count)
    dcol = rng.uniform(20, 235, (count, 3))
    dm = blob(dy, dx, rng.uniform(0.08, 0.18, count)) * has_distractor[:, None, None, None]
    img = img * (1 - dm) + dcol[:, None, None, :] * dm

    img += rng.normal(0, noise, img.shape)
    images = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return LabeledImageSet(images, labels, classes, split)


# -- augmentation ----------------------------------------------------------------

def normalize(images: np.ndarray) -> np.ndarray:
    """Map bytes linearly onto [-0.5, 0.5]."""
    return images.astype(np.float32) / np.float32(255.0) - np.float32(0.5)


def pad_crop(x: np.ndarray, pad: int, offsets: np.ndarray, crop: int) -> np.ndarray:
    """Zero-pad each image by ``pad`` and cut a ``crop`` square at per-image ``(y, x)`` offsets."""
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    offsets = np.asarray(offsets).reshape(-1, 2)
    ar = np.arange(crop)
    rows = offsets[:, 0, None] + ar[None, :]
    cols = offsets[:, 1, None] + ar[None, :]
    n = np.arange(len(x))[:, None, None]
    return padded[n, rows[:, :, None], cols[:, None, :]]


def augment_batch(batch: np.ndarray, cfg: AugmentConfig, rng: Optional[np.random.Generator],
                  train: bool = True) -> Tensor:
    x = normalize(batch)
    if not train:
        return Tensor(x, dtype=np.float32)
    n, h, w, _ = x.shape
    if cfg.flip:
        flips = rng.random(n) < 0.5
        x = np.where(flips[:, None, None, None], x[:, :, ::-1, :], x)
    crop = cfg.crop or h
    span = h + 2 * cfg.pad - crop
    if span < 0:
        raise ValueError(f"crop {crop} exceeds padded size {h + 2 * cfg.pad}")
    if cfg.pad or crop != h:
        offsets = rng.integers(0, span + 1, size=(n, 2))
        x = pad_crop(x, cfg.pad, offsets, crop)
    return Tensor(np.ascontiguousarray(x), dtype=np.float32)


# -- batching ---------------------------------------------------------------------

def iterate_batches(data: LabeledImageSet, batch_size: int, rng: Optional[np.random.Generator] = None,
                    drop_last: bool = True) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)``; shuffled when ``rng`` is given."""
    order = rng.permutation(len(data)) if rng is not None else np.arange(len(data))
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield data.images[idx], data.labels[idx]


class Prefetcher:
    """Run an iterable on a worker thread behind a bounded queue; order is preserved."""

    _DONE = object()

    def __init__(self, source: Iterable, capacity: int = 4):
        self._queue: queue.Queue = queue.Queue(maxsize=capacity)
        self._error: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._fill, args=(iter(source),), daemon=True)
        self._thread.start()

    def _fill(self, it):
        try:
            for item in it:
                self._queue.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            self._error = exc
        finally:
            self._queue.put(self._DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                self._thread.join()
                if self._error is not None:
                    raise self._error
                return
            yield item
