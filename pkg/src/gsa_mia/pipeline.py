"""End-to-end experiment: data, target, shadows, features, attack, evaluation.

Each stage reads and writes files under the run's output directory, so the
CLI can run stages one at a time. Trained models are cached by a digest of
everything that determines their weights; a rerun (or a sweep that only
changes attack-side settings) reloads them instead of retraining.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attack as A
from .config import ExperimentConfig
from .data import ImageDataset, generate_synthetic_dataset, import_cifar10
from .defenses import Defense, make_defense
from .diffusion import TrainConfig, make_linear_schedule, make_cosine_schedule, train, write_loss_trace
from .features import (FeatureMatrix, PairedNoise, TimestepSet, concat_features, effective_sample,
                       extract_features, make_timesteps, read_feature_csv, select_layers, write_feature_csv)
from .metrics import EvalReport, asr, auc_score, evaluate, write_roc_csv
from .model import DenoiserNet, init_denoiser, load_denoiser, save_denoiser
from .plots import emit_roc_plot, emit_sweep_plot
from .rng import Rng, derive_seed

log = logging.getLogger(__name__)

STAGES = ("data", "train-target", "train-shadows", "extract-features", "train-attack", "evaluate")

# purpose codes for derived seeds
_SEED_DATA, _SEED_SPLIT, _SEED_TARGET_INIT, _SEED_TARGET_TRAIN = 1, 2, 3, 4
_SEED_NOISE, _SEED_ATTACK, _SEED_POISSON, _SEED_SHADOW = 5, 6, 7, 8


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Split:
    target_members: np.ndarray  # row indices into the dataset
    target_nonmembers: np.ndarray
    shadow_members: list
    shadow_nonmembers: list

    def check_disjoint(self):
        tm, tn = set(self.target_members.tolist()), set(self.target_nonmembers.tolist())
        pool = set()
        for m, n in zip(self.shadow_members, self.shadow_nonmembers):
            ms, ns = set(m.tolist()), set(n.tolist())
            assert not ms & ns, "shadow member/non-member overlap"
            pool |= ms | ns
        assert not tm & tn, "target member/non-member overlap"
        assert not (tm | tn) & pool, "target samples leaked into shadow pool"

    def to_json(self, ids) -> str:
        d = {
            "target_members": ids[self.target_members].tolist(),
            "target_nonmembers": ids[self.target_nonmembers].tolist(),
            "shadow_members": [ids[m].tolist() for m in self.shadow_members],
            "shadow_nonmembers": [ids[n].tolist() for n in self.shadow_nonmembers],
        }
        return json.dumps(d, sort_keys=True) + "\n"


class Run:
    """Paths and lazily loaded state for one experiment."""

    def __init__(self, cfg: ExperimentConfig, cache_dir=None):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache = Path(cache_dir) if cache_dir else self.out / "cache"
        (self.cache / "models").mkdir(parents=True, exist_ok=True)
        self._dataset = None
        self._split = None

    def seed(self, purpose: int, *extra: int) -> int:
        return derive_seed(self.cfg.seed, purpose, *extra)

    def path(self, name: str) -> Path:
        return self.out / name

    # ---- data
    @property
    def dataset(self) -> ImageDataset:
        if self._dataset is None:
            p = self.path("dataset.npz")
            self._dataset = ImageDataset.load(p) if p.exists() else load_dataset(self.cfg)
        return self._dataset

    @property
    def split(self) -> Split:
        if self._split is None:
            self._split = make_split(self.cfg, len(self.dataset))
        return self._split

    @property
    def schedule(self):
        s = self.cfg.schedule
        if s.kind == "cosine":
            return make_cosine_schedule(s.T)
        return make_linear_schedule(s.T, s.beta_start, s.beta_end)

    @property
    def noise(self) -> PairedNoise:
        return PairedNoise(self.seed(_SEED_NOISE))

    def defense(self) -> Defense | None:
        d = self.cfg.defense
        if d.kind == "none":
            return None
        return make_defense(d.kind, self.dataset.images.shape[-1], d.clip_bound, d.noise_multiplier, d.delta)

    # ---- models
    def _model_key(self, role: str, spec, rows, init_seed: int, train_seed: int, defense) -> str:
        ds = self.cfg.dataset
        ds_ident = (json.dumps(self.cfg.to_dict()["dataset"], sort_keys=True), self.seed(_SEED_DATA)
                    if ds.source == "synthetic" else _file_digest(ds.path))
        payload = json.dumps({
            "role": role, "dataset": ds_ident, "ids": self.dataset.ids[np.sort(rows)].tolist(),
            "spec": {k: getattr(spec, k) for k in ("epochs", "batch_size", "learning_rate", "lr_schedule",
                                                    "widths", "embed_dim")},
            "schedule": self.cfg.to_dict()["schedule"], "init": init_seed, "train": train_seed,
            "defense": None if defense is None else repr(defense),
        }, sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:24]

    def train_or_load(self, role: str, spec, rows, init_seed: int, train_seed: int, defense) -> DenoiserNet:
        key = self._model_key(role, spec, rows, init_seed, train_seed, defense)
        ckpt = self.cache / "models" / f"{role}-{key}.ckpt"
        if ckpt.exists():
            log.info("reusing %s", ckpt.name)
            return load_denoiser(ckpt)
        images = self.dataset.images[np.sort(rows)]
        net = init_denoiser(images.shape[1:], spec.widths, spec.embed_dim, Rng(init_seed), self.cfg.schedule.T)
        tc = TrainConfig(epochs=spec.epochs, batch_size=spec.batch_size, learning_rate=spec.learning_rate,
                         seed=train_seed, lr_schedule=spec.lr_schedule)
        t0 = time.time()
        net, trace = train(net, images, self.schedule, tc, defense)
        log.info("trained %s in %.1fs (final loss %.4f)", role, time.time() - t0, trace[-1])
        write_loss_trace(ckpt.with_suffix(".loss.csv"), trace)
        save_denoiser(net, ckpt)
        return net

    def target_net(self) -> DenoiserNet:
        return self.train_or_load("target", self.cfg.target, self.split.target_members,
                                  self.seed(_SEED_TARGET_INIT), self.seed(_SEED_TARGET_TRAIN), self.defense())

    def shadow_net(self, s: int) -> DenoiserNet:
        defense = self.defense() if self.cfg.shadow.mirror_defense else None
        return self.train_or_load(f"shadow{s}", self.cfg.shadow, self.split.shadow_members[s],
                                  self.seed(_SEED_SHADOW, s, 0), self.seed(_SEED_SHADOW, s, 1), defense)


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_dataset(cfg: ExperimentConfig) -> ImageDataset:
    d = cfg.dataset
    if d.source == "synthetic":
        return generate_synthetic_dataset(d.count, d.side, d.classes, derive_seed(cfg.seed, _SEED_DATA), d.channels)
    if d.source == "cifar10":
        return import_cifar10(d.path)
    return ImageDataset.load(d.path)


def make_split(cfg: ExperimentConfig, n: int) -> Split:
    m, nm = cfg.members, cfg.nonmembers
    if n < m + nm + 2 * cfg.shadow.train_size:
        raise ValueError(f"dataset of {n} images too small for {m}+{nm} target rows and the shadow pool")
    rng = Rng(derive_seed(cfg.seed, _SEED_SPLIT))
    perm = rng.permutation(n)
    pool = perm[m + nm:]
    plan = A.build_shadow_plan(len(pool), cfg.shadow.count, cfg.shadow.train_size, rng)
    split = Split(np.sort(perm[:m]), np.sort(perm[m:m + nm]),
                  [np.sort(pool[i]) for i in plan.members], [np.sort(pool[i]) for i in plan.nonmembers])
    split.check_disjoint()
    return split


# ------------------------------------------------------------------ stages

def _stamp_ok(run: Run, stage: str, outputs) -> bool:
    stamp = run.path(f".stage-{stage}")
    return stamp.exists() and stamp.read_text() == run.cfg.digest() and all(run.path(o).exists() for o in outputs)


def _stamp(run: Run, stage: str):
    run.path(f".stage-{stage}").write_text(run.cfg.digest())


def stage_data(run: Run):
    if _stamp_ok(run, "data", ["dataset.npz", "split.json"]):
        return
    ds = load_dataset(run.cfg)
    ds.save(run.path("dataset.npz"))
    run._dataset = ImageDataset.load(run.path("dataset.npz"))
    run.path("split.json").write_text(run.split.to_json(run.dataset.ids))
    _stamp(run, "data")


def stage_train_target(run: Run):
    net = run.target_net()
    save_denoiser(net, run.path("target.ckpt"))


def stage_train_shadows(run: Run):
    for s in range(run.cfg.shadow.count):
        save_denoiser(run.shadow_net(s), run.path(f"shadow_{s}.ckpt"))


def feature_kind(cfg: ExperimentConfig) -> str:
    return "lsa" if cfg.attack in ("lsa", "threshold") else cfg.attack


def _shadow_features(run: Run, s: int, net: DenoiserNet, K, kind: str) -> FeatureMatrix:
    sp, ds = run.split, run.dataset
    rows = np.r_[sp.shadow_members[s], sp.shadow_nonmembers[s]]
    labels = np.r_[np.ones(len(sp.shadow_members[s])), np.zeros(len(sp.shadow_nonmembers[s]))]
    return extract_features(net, run.schedule, ds.images[rows], ds.ids[rows], K, run.noise, kind,
                            labels=labels, repeats=run.cfg.repeats, squared=run.cfg.squared_norm)


def single_timestep_auc(run: Run, shadows: list, t: int) -> float:
    """Leave-one-shadow-out AUC of a GSA2 attack using timestep ``t`` only."""
    fms = [_shadow_features(run, s, net, (t,), "gsa2") for s, net in enumerate(shadows)]
    seed = run.seed(_SEED_ATTACK)
    if len(fms) == 1:
        fm = fms[0]
        half = np.arange(len(fm.ids)) % 2 == 0
        pairs = [(fm.subset(half), fm.subset(~half)), (fm.subset(~half), fm.subset(half))]
    else:
        pairs = [(concat_features([f for j, f in enumerate(fms) if j != i]), fms[i]) for i in range(len(fms))]
    aucs = []
    for tr, te in pairs:
        model = A.train_attack_model(tr.values, tr.labels, "logistic", A.AttackConfig(seed=seed))
        aucs.append(auc_score(A.predict(model, te.values), te.labels))
    return float(np.mean(aucs))


def choose_timesteps(run: Run, shadows=None) -> tuple[TimestepSet, list]:
    sm = run.cfg.sampler
    if sm.method != "effective":
        return make_timesteps(sm.method, run.cfg.schedule.T, sm.k, Rng(run.seed(_SEED_POISSON))), []
    shadows = shadows or [run.shadow_net(s) for s in range(run.cfg.shadow.count)]
    return effective_sample(lambda t: single_timestep_auc(run, shadows, t), run.cfg.schedule.T, sm.k, sm.stride)


def stage_extract_features(run: Run):
    S = run.cfg.shadow.count
    outputs = ["timesteps.json", "target_features.csv"] + [f"shadow_{s}_features.csv" for s in range(S)]
    if _stamp_ok(run, "extract-features", outputs):
        return
    shadows = [run.shadow_net(s) for s in range(S)]
    K, sweep = choose_timesteps(run, shadows)
    kind = feature_kind(run.cfg)
    for s, net in enumerate(shadows):
        write_feature_csv(run.path(f"shadow_{s}_features.csv"), _shadow_features(run, s, net, K.K, kind))
    sp, ds = run.split, run.dataset
    rows = np.sort(np.r_[sp.target_members, sp.target_nonmembers])
    fm = extract_features(run.target_net(), run.schedule, ds.images[rows], ds.ids[rows], K.K, run.noise, kind,
                          repeats=run.cfg.repeats, squared=run.cfg.squared_norm)
    write_feature_csv(run.path("target_features.csv"), fm)
    info = {"K": list(K.K), "method": K.method, "kind": kind, "sweep": [[t, a] for t, a in sweep]}
    run.path("timesteps.json").write_text(json.dumps(info, sort_keys=True) + "\n")
    _stamp(run, "extract-features")


def _attack_inputs(run: Run, fm: FeatureMatrix) -> np.ndarray:
    if run.cfg.attack == "threshold":
        return fm.values.mean(axis=1)
    if run.cfg.attack in ("gsa1", "gsa2"):
        return select_layers(fm.values, run.cfg.layer_fraction)
    return fm.values


def stage_train_attack(run: Run):
    if _stamp_ok(run, "train-attack", ["attack.ckpt"]):
        return
    shadow = concat_features([read_feature_csv(run.path(f"shadow_{s}_features.csv"))
                              for s in range(run.cfg.shadow.count)])
    X = _attack_inputs(run, shadow)
    if run.cfg.attack == "threshold":
        A.save_attack(run.path("attack.ckpt"), threshold=A.fit_threshold(X, shadow.labels))
    else:
        model = A.train_attack_model(X, shadow.labels, run.cfg.classifier,
                                     A.AttackConfig(seed=run.seed(_SEED_ATTACK)))
        A.save_attack(run.path("attack.ckpt"), model)
    _stamp(run, "train-attack")


def target_truth(run: Run, ids) -> np.ndarray:
    members = set(json.loads(run.path("split.json").read_text())["target_members"])
    return np.array([1 if int(i) in members else 0 for i in ids])


def score_target(run: Run, fm: FeatureMatrix):
    """Member scores (higher = more member-like) and hard member decisions for target rows."""
    att = A.load_attack(run.path("attack.ckpt"))
    X = _attack_inputs(run, fm)
    if isinstance(att, A.ThresholdAttack):
        return -X, att.decide(X)
    scores = A.predict(att, X)
    return scores, (scores >= 0.5).astype(np.int64)


def stage_evaluate(run: Run) -> EvalReport:
    fm = read_feature_csv(run.path("target_features.csv"))
    labels = target_truth(run, fm.ids)
    scores, decisions = score_target(run, fm)
    report, curve = evaluate(scores, labels, digest=run.cfg.digest())
    report.asr = asr(decisions, labels, 0.5)
    write_roc_csv(run.path("roc.csv"), curve)
    with open(run.path("scores.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "score"])
        for i, y, sc in zip(fm.ids, labels, scores):
            w.writerow([int(i), int(y), repr(float(sc))])
    run.path("report.json").write_text(report.to_json())
    emit_roc_plot(run.path("roc.csv"), run.path("roc.svg"))
    emit_roc_plot(run.path("roc.csv"), run.path("roc_logfpr.svg"), log_fpr=True)
    return report


STAGE_FUNCS = {
    "data": stage_data,
    "train-target": stage_train_target,
    "train-shadows": stage_train_shadows,
    "extract-features": stage_extract_features,
    "train-attack": stage_train_attack,
    "evaluate": stage_evaluate,
}


def run_stage(run: Run, stage: str):
    try:
        if stage != "data":
            stage_data(run)
        return STAGE_FUNCS[stage](run)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced with the stage name
        raise StageError(stage, exc) from exc


def run_experiment(cfg: ExperimentConfig, cache_dir=None) -> EvalReport:
    cfg.validate()
    run = Run(cfg, cache_dir)
    report = None
    for stage in STAGES:
        t0 = time.time()
        report = run_stage(run, stage)
        log.info("%s done in %.1fs", stage, time.time() - t0)
    return report


# ------------------------------------------------------------------- sweeps

SWEEP_AXES = {
    "epochs": ("target.epochs", "shadow.epochs"),
    "sample_times": ("sampler.k",),
    "diffusion_steps": ("schedule.T",),
    "resolution": ("dataset.side",),
    "layer_fraction": ("layer_fraction",),
    "sampler_method": ("sampler.method",),
}


def sweep(cfg: ExperimentConfig, axis: str, values, cache_dir=None) -> list[dict]:
    """One run per value with only ``axis`` changed; writes ``sweep_<axis>.csv`` and an SVG."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    if not values:
        raise ValueError("sweep needs at least one value")
    root = Path(cfg.out_dir)
    cache = Path(cache_dir) if cache_dir else root / "cache"
    table = []
    for v in values:
        changes = {key: v for key in SWEEP_AXES[axis]}
        changes["out_dir"] = str(root / f"{axis}={v}")
        sub = cfg.replace(**changes).validate()
        r = run_experiment(sub, cache)
        table.append({"axis_value": v, "asr": r.asr, "auc": r.auc,
                      "tpr1": r.tpr_at_1pct_fpr, "tpr01": r.tpr_at_01pct_fpr})
    out = root / f"sweep_{axis}.csv"
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["axis_value", "asr", "auc", "tpr1", "tpr01"], lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    emit_sweep_plot(out, root / f"sweep_{axis}.svg")
    return table


# --------------------------------------------------------- loss-matched pairs

def loss_matched_experiment(run: Run, round_to: float = 1e-7) -> A.PairResult:
    """Pair target members/non-members whose mean loss over K rounds equal; score them with the attack."""
    info = json.loads(run.path("timesteps.json").read_text())
    fm = read_feature_csv(run.path("target_features.csv"))
    labels = target_truth(run, fm.ids)
    rows = np.searchsorted(run.dataset.ids, fm.ids)
    losses = extract_features(run.target_net(), run.schedule, run.dataset.images[rows], fm.ids, info["K"],
                              run.noise, "lsa", repeats=run.cfg.repeats).values.mean(axis=1)
    scores, decisions = score_target(run, fm)
    m, n = labels == 1, labels == 0
    # decisions are 0/1, so a 0.5 cut reproduces them for both attack kinds
    return A.loss_matched_pairs(losses[m], losses[n], decisions[m], decisions[n], round_to, 0.5)
