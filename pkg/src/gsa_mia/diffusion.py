"""DDPM noise schedules, forward noising, the denoising loss and training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import DenoiserNet
from .rng import Rng
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables, stored 0-indexed: ``beta[t-1]`` is beta_t."""

    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t):
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")

    @classmethod
    def from_betas(cls, kind: str, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("betas must lie in (0, 1)")
        alpha = 1.0 - beta
        return cls(kind, beta, alpha, np.cumprod(alpha), np.sqrt(beta))


def make_linear_schedule(T_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_steps < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return NoiseSchedule.from_betas("linear", np.linspace(beta_start, beta_end, T_steps))


def cosine_alpha_bar(t, T_steps: int, s: float = 0.008):
    """Closed-form cosine-schedule alpha-bar, normalised so that t=0 gives 1."""
    f = lambda u: np.cos((u / T_steps + s) / (1 + s) * np.pi / 2) ** 2  # noqa: E731
    return f(np.asarray(t, dtype=np.float64)) / f(0.0)


def make_cosine_schedule(T_steps: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T_steps < 1:
        raise ValueError("T must be >= 1")
    ab = cosine_alpha_bar(np.arange(T_steps + 1), T_steps, s)
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    return NoiseSchedule.from_betas("cosine", beta)


def make_schedule(kind: str, T_steps: int) -> NoiseSchedule:
    if kind == "linear":
        return make_linear_schedule(T_steps)
    if kind == "cosine":
        return make_cosine_schedule(T_steps)
    raise ValueError(f"unknown schedule kind {kind!r}")


def _coef(table: np.ndarray, t, ndim: int) -> np.ndarray:
    c = table[np.asarray(t, dtype=np.int64) - 1]
    return c.reshape(c.shape + (1,) * (ndim - c.ndim)) if np.ndim(c) else c


def forward_noise(schedule: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` may be a per-row vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise T.ShapeError(f"forward_noise: x0 shape {x0.shape} != eps shape {eps.shape}")
    schedule.check_t(t)
    ab = _coef(schedule.alpha_bar, t, x0.ndim if np.ndim(t) else 0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def diffusion_loss(net: DenoiserNet, schedule: NoiseSchedule, x0, t, eps) -> Tensor:
    """Squared error ``||eps - net(x_t, t)||^2``.

    A single image gives a scalar; a batch with per-row ``t`` gives one loss
    per row.
    """
    eps = np.asarray(eps, dtype=np.float64)
    x_t = forward_noise(schedule, x0, t, eps)
    diff = T.sub(net(x_t, t), eps)
    sq = T.square(diff)
    if eps.shape == tuple(net.input_shape):
        return T.sum(sq)
    return T.sum(T.reshape(sq, (eps.shape[0], -1)), axis=1)


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


class Adam:
    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, grads=None, lr: float | None = None):
        lr = self.lr if lr is None else lr
        grads = [p.grad for p in self.params] if grads is None else grads
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _lr_at(config: TrainConfig, step: int, total: int) -> float:
    if config.lr_schedule == "cosine":
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))
    return config.learning_rate


def train(net: DenoiserNet, images, schedule: NoiseSchedule, config: TrainConfig, defense=None):
    """Fit ``net`` in place on ``images`` (N, C, H, W) in [-1, 1].

    Returns ``(net, loss_trace)`` where ``loss_trace[e]`` is the mean
    per-sample loss of epoch ``e``. ``defense`` is an optional
    :class:`~gsa_mia.defenses.Defense`.
    """
    from .defenses import clip_factors, noisy_mean

    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if images.min() < -1 - 1e-12 or images.max() > 1 + 1e-12:
        raise ValueError("training images must be normalised to [-1, 1]")
    rng = Rng(config.seed)
    opt = Adam(net.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    names = [p.name for p in net.params]
    shapes = [p.data.shape for p in net.params]
    sizes = [p.data.size for p in net.params]
    dp = defense.dp if defense is not None else None
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x0 = images[idx]
            if defense is not None:
                x0 = defense.augment(x0, rng)
            b = len(idx)
            t = rng.integers(1, schedule.T + 1, b)
            eps = rng.normal(x0.shape)
            net.zero_grad()
            with Tape(capture_linear=dp is not None) as tape:
                losses = diffusion_loss(net, schedule, x0, t, eps)
                total = T.sum(losses) if dp is not None else T.mean(losses)
            batch_loss = float(losses.data.sum())
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
            tape.backward(total)
            if dp is not None:
                # same result as dp_sgd_step on materialised per-sample rows, at matmul cost
                sq = T.grouped_sq_norms(tape, names, 1)
                scale = clip_factors(np.sqrt(sum(sq[k] for k in names)), dp.clip_bound)
                sums = T.weighted_row_grad_sum(tape, names, scale)
                update = noisy_mean(np.concatenate([sums[k].ravel() for k in names]), b, dp, rng)
                grads = [g.reshape(s) for g, s in zip(np.split(update, np.cumsum(sizes)[:-1]), shapes)]
            else:
                grads = None
            opt.step(grads, lr=_lr_at(config, step, total_steps))
            epoch_loss += batch_loss
            step += 1
        trace.append(epoch_loss / n)
        if epoch % 100 == 0 or epoch == config.epochs - 1:
            log.debug("epoch %d mean loss %.5f", epoch, trace[-1])
    return net, trace


def write_loss_trace(path, trace) -> None:
    lines = ["epoch,mean_loss"] + [f"{i},{v!r}" for i, v in enumerate(trace)]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def posterior_mean(schedule: NoiseSchedule, x_t, t: int, eps_hat) -> np.ndarray:
    a = schedule.alpha[t - 1]
    b = schedule.beta[t - 1]
    ab = schedule.alpha_bar[t - 1]
    return (x_t - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


def ancestral_sample(net: DenoiserNet, schedule: NoiseSchedule, rng: Rng, count: int, x_T=None) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    shape = (count, *net.input_shape)
    x = rng.normal(shape) if x_T is None else np.array(x_T, dtype=np.float64).reshape(shape)
    for t in range(schedule.T, 0, -1):
        eps_hat = net(x, t).data
        x = posterior_mean(schedule, x, t, eps_hat)
        if t > 1:
            x = x + schedule.sigma[t - 1] * rng.normal(shape)
    return x
