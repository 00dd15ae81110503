"""Training-time defenses: DP-SGD and data augmentation.

The augmentation policy ``randaug-lite`` picks two distinct ops per image
from {flip, cutout, brightness, translate}; it stands in for RandAugment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

LITE_OPS = ("flip", "cutout", "brightness", "translate")
DEFENSE_KINDS = ("none", "dpsgd", "flip", "cutout", "randaug-lite")


@dataclass(frozen=True)
class DpSgdConfig:
    clip_bound: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValueError("clip bound must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise multiplier must be non-negative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class AugmentationPolicy:
    flip_prob: float = 0.0
    cutout_prob: float = 0.0
    cutout_size: int = 0
    lite_ops: tuple = ()
    brightness: float = 0.2
    max_shift: int = 2

    def __post_init__(self):
        for p in (self.flip_prob, self.cutout_prob):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.cutout_size < 0:
            raise ValueError("cutout size must be non-negative")
        bad = set(self.lite_ops) - set(LITE_OPS)
        if bad:
            raise ValueError(f"unknown augmentation ops {sorted(bad)}")


def clip_per_sample_gradient(grad, clip_bound: float) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    norm = np.linalg.norm(grad)
    if norm == 0.0:
        return grad.copy()
    return grad * min(1.0, clip_bound / norm)


def dp_sgd_step(per_sample_grads, config: DpSgdConfig, rng: Rng) -> np.ndarray:
    """Clip each row to ``clip_bound``, sum, add Gaussian noise, divide by batch size."""
    g = np.asarray(per_sample_grads, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("per-sample gradients must be a nonempty (batch, dim) array")
    scale = clip_factors(np.linalg.norm(g, axis=1), config.clip_bound)
    return noisy_mean((g * scale[:, None]).sum(axis=0), g.shape[0], config, rng)


def clip_factors(norms, clip_bound: float) -> np.ndarray:
    """Per-row multipliers ``min(1, C / norm)``; rows with zero norm keep factor 1."""
    norms = np.asarray(norms, dtype=np.float64)
    with np.errstate(divide="ignore"):
        scale = np.minimum(1.0, clip_bound / norms)
    scale[norms == 0.0] = 1.0
    return scale


def noisy_mean(clipped_sum, batch_size: int, config: DpSgdConfig, rng: Rng) -> np.ndarray:
    total = np.asarray(clipped_sum, dtype=np.float64)
    if config.noise_multiplier > 0:
        total = total + rng.normal(total.shape[0]) * (config.noise_multiplier * config.clip_bound)
    return total / batch_size


def random_horizontal_flip(image, prob: float, rng: Rng) -> np.ndarray:
    image = np.asarray(image)
    if rng.uniform() < prob:
        return image[..., ::-1].copy()
    return image.copy()


def cutout(image, size: int, rng: Rng) -> np.ndarray:
    image = np.array(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if size > min(h, w):
        raise ValueError(f"cutout size {size} exceeds image side {min(h, w)}")
    if size == 0:
        return image
    top = rng.integers(0, h - size + 1)
    left = rng.integers(0, w - size + 1)
    image[..., top:top + size, left:left + size] = 0.0
    return image


def adjust_brightness(image, delta: float) -> np.ndarray:
    return np.clip(np.asarray(image, dtype=np.float64) + delta, -1.0, 1.0)


def translate(image, dy: int, dx: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    out = np.zeros_like(image)
    h, w = image.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = image[..., ys, xs]
    return out


def randaug_lite(image, policy: AugmentationPolicy, rng: Rng) -> np.ndarray:
    ops = policy.lite_ops or LITE_OPS
    picks = rng.choice(len(ops), min(2, len(ops)))
    for i in picks:
        op = ops[int(i)]
        if op == "flip":
            image = np.asarray(image)[..., ::-1].copy()
        elif op == "cutout":
            image = cutout(image, policy.cutout_size, rng)
        elif op == "brightness":
            image = adjust_brightness(image, (2.0 * rng.uniform() - 1.0) * policy.brightness)
        else:
            s = policy.max_shift
            image = translate(image, rng.integers(-s, s + 1), rng.integers(-s, s + 1))
    return image


@dataclass(frozen=True)
class Defense:
    kind: str = "none"
    dp: DpSgdConfig | None = None
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def augment(self, batch: np.ndarray, rng: Rng) -> np.ndarray:
        if self.kind in ("none", "dpsgd"):
            return batch
        out = np.empty_like(batch)
        for i, img in enumerate(batch):
            if self.kind == "flip":
                out[i] = random_horizontal_flip(img, self.policy.flip_prob, rng)
            elif self.kind == "cutout":
                out[i] = cutout(img, self.policy.cutout_size, rng) if rng.uniform() < self.policy.cutout_prob else img
            else:
                out[i] = randaug_lite(img, self.policy, rng)
        return out


def make_defense(kind: str, side: int, clip_bound=1.0, noise_multiplier=1.0, delta=1e-5) -> Defense:
    """Defense with the documented desk-scale defaults for ``kind``."""
    if kind not in DEFENSE_KINDS:
        raise ValueError(f"unknown defense {kind!r}; choose from {DEFENSE_KINDS}")
    if kind == "dpsgd":
        return Defense(kind, dp=DpSgdConfig(clip_bound, noise_multiplier, delta))
    policy = AugmentationPolicy(flip_prob=0.5, cutout_prob=1.0, cutout_size=max(1, side // 2),
                                lite_ops=LITE_OPS)
    return Defense(kind, policy=policy)
