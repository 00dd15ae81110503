"""Shadow planning, attack classifiers, the loss-threshold baseline and loss-matched pairs."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .diffusion import Adam
from .rng import Rng
from .tensor import Parameter, Tape

MAGIC = b"GSAATK01"
KIND_CODES = {"logistic": 0, "mlp": 1, "threshold": 2}


class AttackError(ValueError):
    pass


# ---------------------------------------------------------------- shadows

@dataclass
class ShadowPlan:
    members: list  # per shadow: indices into the auxiliary pool
    nonmembers: list
    seeds: list

    @property
    def S(self) -> int:
        return len(self.members)


def build_shadow_plan(pool_size: int, S: int, per_shadow_train_size: int, rng: Rng) -> ShadowPlan:
    """Balanced, disjoint member/non-member draws from the auxiliary pool for each shadow."""
    if S < 1 or per_shadow_train_size < 1:
        raise AttackError("need at least one shadow with a nonempty training set")
    if pool_size < 2 * per_shadow_train_size:
        raise AttackError(f"pool of {pool_size} cannot supply {per_shadow_train_size} members "
                          f"and as many non-members")
    members, nonmembers, seeds = [], [], []
    for _ in range(S):
        pick = rng.choice(pool_size, 2 * per_shadow_train_size)
        members.append(np.sort(pick[:per_shadow_train_size]))
        nonmembers.append(np.sort(pick[per_shadow_train_size:]))
        seeds.append(int(rng.integers(0, 2**62)))
    return ShadowPlan(members, nonmembers, seeds)


# ---------------------------------------------------------- normalisation

@dataclass
class Normalizer:
    """Optional log1p, then per-coordinate z-score with shadow-set statistics."""

    mean: np.ndarray
    std: np.ndarray
    log: bool = True

    @classmethod
    def fit(cls, X, log: bool = True) -> "Normalizer":
        X = np.asarray(X, dtype=np.float64)
        Z = np.log1p(X) if log else X
        std = Z.std(axis=0)
        std[std == 0] = 1.0
        return cls(Z.mean(axis=0), std, log)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != len(self.mean):
            raise AttackError(f"feature width {X.shape[-1]} != fitted width {len(self.mean)}")
        Z = np.log1p(X) if self.log else X
        return (Z - self.mean) / self.std


# ------------------------------------------------------------ classifiers

@dataclass
class AttackConfig:
    l2: float = 1e-3
    tol: float = 1e-8
    max_iter: int = 20000
    hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 400
    patience: int = 25
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class AttackModel:
    kind: str
    weights: dict
    normalizer: Normalizer
    seed: int = 0

    @property
    def n_features(self) -> int:
        return len(self.normalizer.mean)

    def logits(self, features) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        Z = self.normalizer(X)
        w = self.weights
        if self.kind == "logistic":
            return Z @ w["w"] + w["b"][0]
        with T.no_grad():
            h = T.silu(T.linear(Z, w["w1"], w["b1"]))
            return T.linear(h, w["w2"], w["b2"]).data[:, 0]


def predict(model: AttackModel, features) -> np.ndarray:
    """Member scores in [0, 1]; higher means more member-like."""
    return T._sigmoid(model.logits(features))


def logistic_loss_grad(w: np.ndarray, b: float, Z: np.ndarray, y: np.ndarray, l2: float):
    """Mean cross-entropy plus ``l2/2 * ||w||^2`` and its gradient."""
    z = Z @ w + b
    loss = float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))) + 0.5 * l2 * float(w @ w)
    r = (T._sigmoid(z) - y) / len(y)
    return loss, Z.T @ r + l2 * w, float(r.sum())


def _fit_logistic(Z, y, cfg: AttackConfig):
    n, d = Z.shape
    Za = np.hstack([Z, np.ones((n, 1))])
    lip = 0.25 * np.linalg.norm(Za, 2) ** 2 / n + cfg.l2
    step = 1.0 / lip
    w, b = np.zeros(d), 0.0
    for _ in range(cfg.max_iter):
        _, gw, gb = logistic_loss_grad(w, b, Z, y, cfg.l2)
        if max(np.abs(gw).max(initial=0.0), abs(gb)) < cfg.tol:
            break
        w -= step * gw
        b -= step * gb
    return {"w": w, "b": np.array([b])}


def _fit_mlp(Z, y, cfg: AttackConfig):
    rng = Rng((cfg.seed, 0xA77))
    n, d = Z.shape
    # stratified validation split
    val = np.zeros(n, dtype=bool)
    for cls in (0, 1):
        idx = np.nonzero(y == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        val[idx[:max(1, int(round(cfg.val_fraction * len(idx))))]] = True
    Ztr, ytr, Zva, yva = Z[~val], y[~val], Z[val], y[val]
    params = [
        Parameter("w1", rng.normal((d, cfg.hidden)) * np.sqrt(2.0 / d)),
        Parameter("b1", np.zeros(cfg.hidden)),
        Parameter("w2", rng.normal((cfg.hidden, 1)) * np.sqrt(1.0 / cfg.hidden)),
        Parameter("b2", np.zeros(1)),
    ]
    opt = Adam(params, cfg.lr)

    def bce(Zb, yb):
        z = T.reshape(T.linear(T.silu(T.linear(Zb, params[0], params[1])), params[2], params[3]), (len(yb),))
        return T.mean(T.sub(T.softplus(z), T.mul(z, yb)))

    best, best_state, bad = np.inf, [p.data.copy() for p in params], 0
    for _ in range(cfg.max_epochs):
        order = rng.permutation(len(ytr))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                loss = bce(Ztr[idx], ytr[idx])
            tape.backward(loss)
            opt.step()
        v = bce(Zva, yva).item()
        if v < best - 1e-6:
            best, best_state, bad = v, [p.data.copy() for p in params], 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return {p.name: s for p, s in zip(params, best_state)}


def train_attack_model(features, labels, kind: str = "logistic", config: AttackConfig | None = None,
                       log_features: bool = True) -> AttackModel:
    cfg = config or AttackConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise AttackError("features must be (rows, dim) with one label per row")
    counts = [int((y == c).sum()) for c in (0, 1)]
    if min(counts) < 2:
        raise AttackError(f"need at least two rows per class, got {counts}")
    norm = Normalizer.fit(X, log=log_features)
    Z = norm(X)
    if kind == "logistic":
        weights = _fit_logistic(Z, y, cfg)
    elif kind == "mlp":
        weights = _fit_mlp(Z, y, cfg)
    else:
        raise AttackError(f"unknown attack model kind {kind!r}")
    return AttackModel(kind, weights, norm, cfg.seed)


# -------------------------------------------------------- threshold baseline

@dataclass
class ThresholdAttack:
    tau: float
    balanced_accuracy: float

    def decide(self, stat) -> np.ndarray:
        return (np.asarray(stat) < self.tau).astype(np.int64)


def fit_threshold(stat, labels) -> ThresholdAttack:
    """Pick tau maximising balanced accuracy of ``member iff stat < tau``.

    Candidates are the midpoints between consecutive distinct values plus one
    point beyond each end; ties go to the smaller tau.
    """
    stat = np.asarray(stat, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AttackError("threshold fitting needs both classes")
    u = np.unique(stat)
    cands = np.r_[u[0] - 1.0, (u[:-1] + u[1:]) / 2.0, u[-1] + 1.0]
    order = np.argsort(stat, kind="stable")
    s, yy = stat[order], labels[order]
    # rows strictly below each candidate
    below = np.searchsorted(s, cands, side="left")
    tp = np.r_[0, np.cumsum(yy)][below]
    fp = below - tp
    bal = 0.5 * (tp / n_pos + (n_neg - fp) / n_neg)
    i = int(np.argmax(bal))
    return ThresholdAttack(float(cands[i]), float(bal[i]))


# ---------------------------------------------------------- loss-matched pairs

@dataclass
class PairResult:
    pairs: list = field(default_factory=list)  # (member index, non-member index)
    accuracy: float | None = None

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def match_loss_pairs(member_loss, nonmember_loss, round_to: float = 1e-7) -> list:
    """Greedy one-to-one pairing of members and non-members with equal rounded loss."""
    buckets = defaultdict(list)
    for j, v in enumerate(np.asarray(nonmember_loss, dtype=np.float64)):
        buckets[int(np.rint(v / round_to))].append(j)
    for b in buckets.values():
        b.reverse()
    pairs = []
    for i, v in enumerate(np.asarray(member_loss, dtype=np.float64)):
        b = buckets.get(int(np.rint(v / round_to)))
        if b:
            pairs.append((i, b.pop()))
    return pairs


def loss_matched_pairs(member_loss, nonmember_loss, member_scores, nonmember_scores,
                       round_to: float = 1e-7, threshold: float = 0.5) -> PairResult:
    """Attack accuracy restricted to member/non-member pairs of equal rounded mean loss."""
    if len(member_loss) == 0 or len(nonmember_loss) == 0:
        raise AttackError("both member and non-member sets must be nonempty")
    pairs = match_loss_pairs(member_loss, nonmember_loss, round_to)
    if not pairs:
        return PairResult([], None)
    ms = np.asarray(member_scores)[[i for i, _ in pairs]]
    ns = np.asarray(nonmember_scores)[[j for _, j in pairs]]
    correct = int((ms >= threshold).sum() + (ns < threshold).sum())
    return PairResult(pairs, correct / (2 * len(pairs)))


# ---------------------------------------------------------------- persistence

def save_attack(path, model: AttackModel | None = None, threshold: ThresholdAttack | None = None) -> None:
    if threshold is not None:
        write_container(path, MAGIC, [KIND_CODES["threshold"], 1, 0], [np.array([threshold.tau, threshold.balanced_accuracy])])
        return
    names = ["w", "b"] if model.kind == "logistic" else ["w1", "b1", "w2", "b2"]
    arrays = [model.normalizer.mean, model.normalizer.std] + [model.weights[k] for k in names]
    header = [KIND_CODES[model.kind], model.n_features, int(model.normalizer.log), model.seed]
    write_container(path, MAGIC, header, arrays)


def load_attack(path):
    header, arrays = read_container(path, MAGIC)
    kind = {v: k for k, v in KIND_CODES.items()}[header[0]]
    if kind == "threshold":
        return ThresholdAttack(float(arrays[0][0]), float(arrays[0][1]))
    norm = Normalizer(arrays[0], arrays[1], bool(header[2]))
    names = ["w", "b"] if kind == "logistic" else ["w1", "b1", "w2", "b2"]
    return AttackModel(kind, dict(zip(names, arrays[2:])), norm, header[3])
