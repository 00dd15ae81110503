"""Timestep subsampling and gradient/loss attack features.

Two extractors turn one image into a per-layer vector of squared gradient
norms:

* ``gsa1`` averages the losses over the timestep set, then runs a single
  backward pass;
* ``gsa2`` runs one backward pass per timestep and averages the per-layer
  norm vectors.

``lsa_features`` keeps the per-timestep losses themselves. The noise for
sample ``i`` at timestep ``t`` (repeat ``r``) always comes from the stream
seeded with ``(root_seed, i, t, r)``, so all extractors, shadow and target
runs, and reruns see identical noise.

:func:`extract_features` is the batched route used by the pipeline. It
computes the same quantities from one captured backward pass per chunk of
samples and is checked against the per-sample functions in the tests.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, diffusion_loss, forward_noise
from .model import DenoiserNet
from .rng import Rng
from .tensor import Tape

SAMPLERS = ("equidistant", "poisson", "effective")
FEATURE_KINDS = ("gsa1", "gsa2", "lsa")


@dataclass(frozen=True)
class TimestepSet:
    K: tuple
    method: str

    def __len__(self):
        return len(self.K)


@dataclass
class FeatureVector:
    values: np.ndarray
    sample_id: int
    label: int = -1


@dataclass
class FeatureMatrix:
    """Rows of features in sample order; ``labels`` uses -1 for unlabeled."""

    ids: np.ndarray
    labels: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or len(self.ids) != len(self.values) or len(self.labels) != len(self.ids):
            raise ValueError("ids, labels and values must have matching row counts")

    def subset(self, rows) -> "FeatureMatrix":
        return FeatureMatrix(self.ids[rows], self.labels[rows], self.values[rows])


class PairedNoise:
    """Noise source keyed by (root seed, sample id, timestep, repeat)."""

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)

    def eps(self, sample_id: int, t: int, shape, repeat: int = 0) -> np.ndarray:
        return Rng((self.root_seed, int(sample_id), int(t), int(repeat))).normal(shape)


# ------------------------------------------------------------------ samplers

def equidistant_sample(T_steps: int, k: int) -> TimestepSet:
    if not 1 <= k <= T_steps:
        raise ValueError(f"need 1 <= k <= T, got k={k}, T={T_steps}")
    step = T_steps // k
    return TimestepSet(tuple(1 + i * step for i in range(k)), "equidistant")


def _poisson_arrivals(T_steps: int, k: int, rng: Rng):
    rate = k / T_steps
    chosen: set[int] = set()
    gaps = []
    pos = 0.0
    while len(chosen) < k:
        gap = float(rng.exponential(rate))
        gaps.append(gap)
        pos += gap
        t = (math.ceil(pos) - 1) % T_steps + 1
        chosen.add(t)
    return tuple(sorted(chosen)), gaps


def poisson_sample(T_steps: int, k: int, rng: Rng) -> TimestepSet:
    """Exponential gaps with rate k/T, rounded up and wrapped into [1, T]."""
    if not 1 <= k <= T_steps:
        raise ValueError(f"need 1 <= k <= T, got k={k}, T={T_steps}")
    K, _ = _poisson_arrivals(T_steps, k, rng)
    return TimestepSet(K, "poisson")


def window_around(t_star: int, k: int, T_steps: int) -> tuple:
    """``k`` contiguous timesteps centred on ``t_star``, shifted to stay in [1, T]."""
    if not 1 <= k <= T_steps:
        raise ValueError(f"need 1 <= k <= T, got k={k}, T={T_steps}")
    start = t_star - k // 2
    start = max(1, min(start, T_steps - k + 1))
    return tuple(range(start, start + k))


def effective_sample(auc_at: Callable[[int], float], T_steps: int, k: int, stride: int = 20):
    """Sweep ``t = 1, 1+stride, ...``; window of ``k`` steps around the best AUC.

    ``auc_at(t)`` scores a single-timestep attack on shadow data. Returns the
    timestep set and the sweep as ``[(t, auc), ...]``. Ties go to the
    earliest timestep.
    """
    sweep = [(t, float(auc_at(t))) for t in range(1, T_steps + 1, stride)]
    best_t, best = sweep[0]
    for t, a in sweep[1:]:
        if a > best:
            best_t, best = t, a
    return TimestepSet(window_around(best_t, k, T_steps), "effective"), sweep


def make_timesteps(method: str, T_steps: int, k: int, rng: Rng | None = None) -> TimestepSet:
    if method == "equidistant":
        return equidistant_sample(T_steps, k)
    if method == "poisson":
        return poisson_sample(T_steps, k, rng if rng is not None else Rng(0))
    raise ValueError(f"sampler {method!r} needs shadow data; use effective_sample")


# ------------------------------------------------- reference (per-sample) path

def _check_K(K) -> tuple:
    K = tuple(getattr(K, "K", K))
    if not K:
        raise ValueError("timestep set K is empty")
    return K


def _layer_norms(net: DenoiserNet, squared: bool) -> np.ndarray:
    v = np.array([float(np.sum(p.grad * p.grad)) for p in net.params])
    return v if squared else np.sqrt(v)


def gsa1(net: DenoiserNet, schedule: NoiseSchedule, x0, K, noise: PairedNoise, sample_id: int = 0,
         repeats: int = 1, squared: bool = True) -> FeatureVector:
    K = _check_K(K)
    schedule.check_t(K)
    x0 = np.asarray(x0, dtype=np.float64)
    net.zero_grad()
    with Tape() as tape:
        losses = [diffusion_loss(net, schedule, x0, t, noise.eps(sample_id, t, x0.shape, r))
                  for t in K for r in range(repeats)]
        total = losses[0]
        for loss in losses[1:]:
            total = total + loss
        mean_loss = total * (1.0 / len(losses))
    tape.backward(mean_loss)
    return FeatureVector(_layer_norms(net, squared), sample_id)


def gsa2(net: DenoiserNet, schedule: NoiseSchedule, x0, K, noise: PairedNoise, sample_id: int = 0,
         repeats: int = 1, squared: bool = True) -> FeatureVector:
    K = _check_K(K)
    schedule.check_t(K)
    x0 = np.asarray(x0, dtype=np.float64)
    acc = np.zeros(len(net.params))
    for t in K:
        for r in range(repeats):
            net.zero_grad()
            with Tape() as tape:
                loss = diffusion_loss(net, schedule, x0, t, noise.eps(sample_id, t, x0.shape, r))
            tape.backward(loss)
            acc += _layer_norms(net, squared)
    return FeatureVector(acc / (len(K) * repeats), sample_id)


def lsa_features(net: DenoiserNet, schedule: NoiseSchedule, x0, K, noise: PairedNoise, sample_id: int = 0,
                 repeats: int = 1) -> FeatureVector:
    K = _check_K(K)
    schedule.check_t(K)
    x0 = np.asarray(x0, dtype=np.float64)
    vals = []
    for t in K:
        ls = [diffusion_loss(net, schedule, x0, t, noise.eps(sample_id, t, x0.shape, r)).item()
              for r in range(repeats)]
        vals.append(sum(ls) / repeats)
    return FeatureVector(np.array(vals), sample_id)


# ------------------------------------------------------------- batched path

def _chunk_features(net, schedule, images, ids, K, noise, kind, repeats, squared):
    n = len(ids)
    reps = len(K) * repeats
    shape = images.shape[1:]
    x0 = np.repeat(images, reps, axis=0)
    t_rows = np.tile(np.repeat(np.asarray(K, dtype=np.int64), repeats), n)
    eps = np.stack([noise.eps(i, t, shape, r) for i in ids for t in K for r in range(repeats)])
    if kind == "lsa":
        with T.no_grad():
            x_t = forward_noise(schedule, x0, t_rows, eps)
            pred = net(x_t, t_rows).data
        losses = ((pred - eps) ** 2).reshape(n * reps, -1).sum(axis=1)
        return losses.reshape(n, len(K), repeats).mean(axis=2)
    names = [p.name for p in net.params]
    with Tape(capture_linear=True) as tape:
        losses = diffusion_loss(net, schedule, x0, t_rows, eps)
        total = T.sum(losses)
    tape.backward(total)
    if kind == "gsa1":
        norms = T.grouped_sq_norms(tape, names, reps)
        out = np.stack([norms[k] for k in names], axis=1) / (reps * reps)
        return out if squared else np.sqrt(out)
    norms = T.grouped_sq_norms(tape, names, 1)
    per_row = np.stack([norms[k] for k in names], axis=1)
    if not squared:
        per_row = np.sqrt(per_row)
    return per_row.reshape(n, reps, -1).mean(axis=1)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("GSA_MIA_WORKERS", "1")))
    except ValueError:
        return 1


def extract_features(net: DenoiserNet, schedule: NoiseSchedule, images, ids, K, noise: PairedNoise,
                     kind: str, labels=None, repeats: int = 1, squared: bool = True,
                     chunk: int = 32, workers: int | None = None) -> FeatureMatrix:
    """Feature rows for every image, in input order.

    Chunks are fixed by position, so the output does not depend on the
    number of workers.
    """
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}")
    K = _check_K(K)
    schedule.check_t(K)
    images = np.asarray(images, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.full(len(ids), -1) if labels is None else np.asarray(labels)
    starts = list(range(0, len(ids), chunk))
    job = lambda s: _chunk_features(net, schedule, images[s:s + chunk], ids[s:s + chunk],  # noqa: E731
                                    K, noise, kind, repeats, squared)
    workers = default_workers() if workers is None else workers
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(s) for s in starts]
    width = len(K) if kind == "lsa" else len(net.params)
    values = np.concatenate(parts, axis=0) if parts else np.zeros((0, width))
    return FeatureMatrix(ids, labels, values)


# ------------------------------------------------------------- layer subsets

def n_selected_layers(n: int, top_fraction: float) -> int:
    if not 0 < top_fraction <= 1:
        raise ValueError(f"top_fraction must lie in (0, 1], got {top_fraction}")
    # round first so that e.g. 0.7 * 10 does not become 8
    kept = math.ceil(round(top_fraction * n, 9))
    if kept < 1:
        raise ValueError("layer selection is empty")
    return kept


def select_layers(features, top_fraction: float):
    """Keep the first ceil(top_fraction * N) coordinates (input side first)."""
    if isinstance(features, FeatureMatrix):
        kept = n_selected_layers(features.values.shape[1], top_fraction)
        return FeatureMatrix(features.ids, features.labels, features.values[:, :kept])
    arr = np.asarray(features, dtype=np.float64)
    kept = n_selected_layers(arr.shape[-1], top_fraction)
    return arr[..., :kept]


# --------------------------------------------------------------------- CSV io

def write_feature_csv(path, fm: FeatureMatrix) -> None:
    n = fm.values.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"] + [f"f_{i + 1}" for i in range(n)])
        for i, lab, row in zip(fm.ids, fm.labels, fm.values):
            w.writerow([int(i), int(lab)] + [repr(float(v)) for v in row])


def read_feature_csv(path) -> FeatureMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["sample_id", "label"]:
        raise ValueError(f"{path}: not a feature CSV")
    ids = [int(r[0]) for r in body]
    labels = [int(r[1]) for r in body]
    values = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), len(header) - 2)
    return FeatureMatrix(ids, labels, values)


def concat_features(parts: Sequence[FeatureMatrix]) -> FeatureMatrix:
    return FeatureMatrix(np.concatenate([p.ids for p in parts]),
                         np.concatenate([p.labels for p in parts]),
                         np.concatenate([p.values for p in parts], axis=0))
