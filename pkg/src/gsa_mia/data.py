"""Image datasets: procedural synthetic images and the CIFAR-10 binary format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Rng

CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class ImageDataset:
    images: np.ndarray  # (count, channels, height, width) in [-1, 1]
    ids: np.ndarray
    source: str
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (count, C, H, W), got {self.images.shape}")
        if len(self.ids) != len(self.images) or len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("ids must be unique and one per image")
        if self.images.size and (self.images.min() < -1 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [-1, 1]")

    def __len__(self):
        return len(self.ids)

    def take(self, rows) -> "ImageDataset":
        rows = np.asarray(rows, dtype=np.int64)
        labels = None if self.labels is None else self.labels[rows]
        return ImageDataset(self.images[rows], self.ids[rows], self.source, labels)

    def save(self, path) -> None:
        np.savez(path, images=self.images, ids=self.ids,
                 labels=np.full(len(self.ids), -1) if self.labels is None else self.labels,
                 source=np.array(self.source))

    @classmethod
    def load(cls, path) -> "ImageDataset":
        with np.load(path) as z:
            labels = z["labels"]
            return cls(z["images"], z["ids"], str(z["source"]), None if (labels < 0).all() else labels)


def generate_synthetic_dataset(count: int, side: int = 8, classes: int = 10, seed: int = 0,
                               channels: int = 1, pixel_noise: float = 0.3) -> ImageDataset:
    """Class-structured gratings with per-image jitter.

    Class ``c`` fixes a spatial frequency and orientation. Each image draws
    a small phase offset, an amplitude and a contrast offset around the
    class template and adds independent pixel noise, then clips to [-1, 1].
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if side not in (8, 16, 32):
        raise ValueError(f"side must be 8, 16 or 32, got {side}")
    if classes < 1:
        raise ValueError("classes must be >= 1")
    rng = Rng((seed, 0x5EED))
    freq = 1.0 + (np.arange(classes) % 3)
    theta = np.pi * np.arange(classes) / classes
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    labels = rng.integers(0, classes, count)
    phase = (rng.uniform(count) - 0.5) * (np.pi / 2)
    amp = 0.5 + 0.2 * rng.uniform(count)
    offset = 0.2 * (rng.uniform(count) - 0.5)
    chan_gain = 1.0 - 0.25 * np.arange(channels) / max(channels - 1, 1)
    noise = rng.normal((count, channels, side, side)) * pixel_noise
    c = labels
    proj = (xx[None] * np.cos(theta[c])[:, None, None] + yy[None] * np.sin(theta[c])[:, None, None]) / side
    base = amp[:, None, None] * np.cos(2 * np.pi * freq[c][:, None, None] * proj + phase[:, None, None])
    base = base + offset[:, None, None]
    images = base[:, None] * chan_gain[None, :, None, None] + noise
    return ImageDataset(np.clip(images, -1.0, 1.0), np.arange(count), "synthetic", labels)


def import_cifar10(path) -> ImageDataset:
    """Read concatenated 3073-byte CIFAR-10 records (label, then R, G, B planes)."""
    buf = Path(path).read_bytes()
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD
        raise ValueError(f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
                         f"(file size {len(buf)} is not a multiple of {CIFAR_RECORD})")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    pixels = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64)
    return ImageDataset(pixels / 127.5 - 1.0, np.arange(len(raw)), "cifar10", labels)


def export_cifar10(ds: ImageDataset, path) -> None:
    """Inverse of :func:`import_cifar10` for 3x32x32 images on the 1/127.5 grid."""
    if ds.images.shape[1:] != (3, 32, 32):
        raise ValueError("CIFAR-10 export needs 3x32x32 images")
    px = np.rint((ds.images + 1.0) * 127.5)
    if np.any(np.abs(px - (ds.images + 1.0) * 127.5) > 1e-6):
        raise ValueError("pixel values are not on the 8-bit grid")
    labels = np.zeros(len(ds), dtype=np.uint8) if ds.labels is None else ds.labels.astype(np.uint8)
    rec = np.concatenate([labels[:, None], px.reshape(len(ds), -1).astype(np.uint8)], axis=1)
    Path(path).write_bytes(rec.tobytes())
