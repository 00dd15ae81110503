"""Acceptance suite: the twelve release criteria at their stated tolerances.

Each test records one PASS/FAIL line that is printed in the pytest terminal
summary. The desk-scale experiments share one model cache, so a model is
trained once per (role, seed, training settings) however many criteria use
it. Set ``GSA_MIA_ACCEPTANCE_CACHE`` to a directory to keep that cache
between sessions; by default it lives in a temporary directory.

Run directly with ``python3 tests/test_acceptance.py`` or via pytest.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from gsa_mia import tensor as T
from gsa_mia.cli import main as cli_main
from gsa_mia.config import ExperimentConfig, dump_config
from gsa_mia.diffusion import diffusion_loss, forward_noise, make_linear_schedule
from gsa_mia.features import (PairedNoise, effective_sample, equidistant_sample, gsa1, gsa2, poisson_sample)
from gsa_mia.metrics import auc_score
from gsa_mia.model import init_denoiser
from gsa_mia.pipeline import Run, loss_matched_experiment, run_experiment
from gsa_mia.rng import Rng

from oracles import op_cases, pairwise_auc, residual_vjp

pytestmark = pytest.mark.acceptance

RESULTS: dict = {}
SEEDS = (0, 1, 2)


def record(n: int, ok: bool, detail: str):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


@pytest.fixture(scope="session")
def lab(tmp_path_factory):
    """Shared output root and model cache for the desk-scale experiments."""
    root = tmp_path_factory.mktemp("acceptance")
    cache = Path(os.environ.get("GSA_MIA_ACCEPTANCE_CACHE", root / "cache"))
    return Lab(root, cache)


class Lab:
    def __init__(self, root: Path, cache: Path):
        self.root, self.cache = root, cache
        self.reports = {}
        self.seconds = {}

    def config(self, seed: int, **changes) -> ExperimentConfig:
        tag = "-".join(f"{k}={v}" for k, v in sorted(changes.items())) or "base"
        cfg = ExperimentConfig(seed=seed, out_dir=str(self.root / f"seed{seed}" / tag))
        return cfg.replace(**changes).validate()

    def run(self, seed: int, **changes):
        key = (seed, tuple(sorted(changes.items())))
        if key not in self.reports:
            t0 = time.time()
            self.reports[key] = run_experiment(self.config(seed, **changes), self.cache)
            self.seconds[key] = time.time() - t0
        return self.reports[key]


# ------------------------------------------------------------ exact criteria

def test_c01_gradient_correctness():
    t0 = time.time()
    worst = {}
    for name, build in op_cases(Rng(2024)):
        f, params = build()
        worst[name] = T.grad_check(f, params, 1e-5)
    sched = make_linear_schedule(10)
    net = init_denoiser((1, 2, 2), (6, 5), 4, Rng(5), 10)
    rng = Rng(6)
    x0, eps = rng.normal((1, 2, 2)) * 0.5, rng.normal((1, 2, 2))
    worst["diffusion_loss"] = T.grad_check(lambda: diffusion_loss(net, sched, x0, 7, eps), net.params, 1e-5)
    elapsed = time.time() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) <= 1e-4 and elapsed < 60
    record(1, ok, f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} checks, {elapsed:.1f}s")
    assert ok


def test_c02_loss_gradient_equals_residual_vjp():
    sched = make_linear_schedule(20)
    worst = 0.0
    for i in range(25):
        rng = Rng((77, i))
        widths = tuple(int(w) for w in rng.integers(2, 9, int(rng.integers(1, 4))))
        net = init_denoiser((1, 2, 3), widths, 6, rng, 20)
        x0, eps = rng.uniform((1, 2, 3)) * 2 - 1, rng.normal((1, 2, 3))
        t = int(rng.integers(1, 21))
        net.zero_grad()
        with T.Tape() as tape:
            loss = diffusion_loss(net, sched, x0, t, eps)
        tape.backward(loss)
        ref = residual_vjp(net, forward_noise(sched, x0, t, eps), t, eps)
        worst = max(worst, max(float(np.abs(p.grad - g.reshape(p.grad.shape)).max())
                               for p, g in zip(net.params, ref)))
    ok = worst <= 1e-8
    record(2, ok, f"max |autodiff - 2 r^T J| = {worst:.2e} over 25 instances")
    assert ok


def test_c03_zero_residual_features():
    class FixedNoise:
        def __init__(self, v):
            self.v = v

        def eps(self, sample_id, t, shape, repeat=0):
            return self.v.reshape(shape).copy()

    sched = make_linear_schedule(50)
    net = init_denoiser((1, 4, 4), (8, 8), 6, Rng(1), 50)
    for p in net.params:
        p.data[...] = 0.0
    target = Rng(2).normal(16)
    net.params[-1].data[...] = target
    noise = FixedNoise(target)
    x0 = Rng(3).uniform((1, 4, 4)) * 2 - 1
    K = equidistant_sample(50, 10).K
    v1, v2 = gsa1(net, sched, x0, K, noise).values, gsa2(net, sched, x0, K, noise).values
    ok = not v1.any() and not v2.any()
    record(3, ok, f"GSA1 nonzeros {np.count_nonzero(v1)}, GSA2 nonzeros {np.count_nonzero(v2)}")
    assert ok


def test_c04_sampler_contracts():
    equi = equidistant_sample(1000, 10).K == (1, 101, 201, 301, 401, 501, 601, 701, 801, 901)
    poisson_ok = True
    for s in range(300):
        T_steps = 1 + s % 97
        k = 1 + (s * 7) % T_steps
        K = poisson_sample(T_steps, k, Rng((5, s))).K
        poisson_ok &= len(set(K)) == k == len(K) and min(K) >= 1 and max(K) <= T_steps
    windows = [
        effective_sample(lambda t: -abs(t - 401), 1000, 10)[0].K == tuple(range(396, 406)),
        effective_sample(lambda t: -t, 1000, 10)[0].K == tuple(range(1, 11)),
        effective_sample(lambda t: t, 100, 10, stride=1)[0].K == tuple(range(91, 101)),
        effective_sample(lambda t: -abs(t - 41), 100, 1)[0].K == (41,),
    ]
    ok = equi and poisson_ok and all(windows)
    record(4, ok, f"equidistant {equi}, poisson 300 draws {poisson_ok}, effective windows {sum(windows)}/4")
    assert ok


def test_c05_auc_oracle_equivalence():
    rng = Rng(555)
    worst = 0.0
    for i in range(200):
        n_pos, n_neg = int(rng.integers(1, 101)), int(rng.integers(1, 101))
        s = rng.normal(n_pos + n_neg)
        if i % 3 == 0:
            s = np.round(s * 2) / 2  # plenty of ties
        y = np.r_[np.ones(n_pos), np.zeros(n_neg)]
        worst = max(worst, abs(auc_score(s, y) - pairwise_auc(s, y)))
    ok = worst <= 1e-12
    record(5, ok, f"max |trapezoid - pairwise| = {worst:.1e} over 200 sets")
    assert ok


# ------------------------------------------------------ desk-scale experiments

def test_c06_end_to_end_ordering(lab):
    t0 = time.time()
    gsa = lab.run(0)
    lsa = lab.run(0, attack="lsa")
    base = lab.run(0, attack="threshold")
    elapsed = time.time() - t0
    ok = gsa.auc >= 0.90 and gsa.auc >= lsa.auc >= base.auc and elapsed <= 15 * 60
    record(6, ok, f"AUC gsa2 {gsa.auc:.4f} >= lsa {lsa.auc:.4f} >= threshold {base.auc:.4f}; {elapsed / 60:.1f} min")
    assert ok


def test_c07_sampler_trend(lab):
    asr = {m: np.mean([lab.run(s, **{"sampler.method": m}).asr for s in SEEDS])
           for m in ("effective", "equidistant", "poisson")}
    ok = asr["effective"] >= asr["equidistant"] - 0.03 and asr["equidistant"] >= asr["poisson"] - 0.03
    record(7, ok, "mean ASR effective {effective:.4f}, equidistant {equidistant:.4f}, "
                  "poisson {poisson:.4f} (slack 0.03)".format(**asr))
    assert ok


def test_c08_more_timesteps_help(lab):
    k10 = np.mean([lab.run(s).auc for s in SEEDS])
    k1 = np.mean([lab.run(s, **{"sampler.k": 1}).auc for s in SEEDS])
    ok = k10 >= k1
    record(8, ok, f"mean AUC |K|=10 {k10:.4f} vs |K|=1 {k1:.4f}")
    assert ok


def test_c09_layer_ablation(lab):
    full = lab.run(0).auc
    part = lab.run(0, layer_fraction=0.8).auc
    ok = abs(full - part) <= 0.02
    record(9, ok, f"AUC first 80% layers {part:.4f} vs all {full:.4f} (|diff| {abs(full - part):.4f})")
    assert ok


def test_c10_dp_sgd_defense(lab):
    plain = lab.run(0).auc
    dp = lab.run(0, **{"defense.kind": "dpsgd"}).auc
    ok = dp <= 0.65 and plain >= 0.90
    record(10, ok, f"GSA2 AUC with DP-SGD (C=1, sigma=1) {dp:.4f}, without {plain:.4f}")
    assert ok


def test_c11_loss_matched_pairs(lab):
    lab.run(0)
    run = Run(lab.config(0), lab.cache)
    res = loss_matched_experiment(run, round_to=1e-7)
    if res.n_pairs >= 20:
        ok = res.accuracy > 0.6
        detail = f"{res.n_pairs} pairs at 1e-7, accuracy {res.accuracy:.4f}"
    else:
        # the criterion only binds when at least 20 pairs exist
        ok = True
        coarse = loss_matched_experiment(run, round_to=1e-1)
        extra = (f"; at rounding 1e-1: {coarse.n_pairs} pairs, accuracy {coarse.accuracy:.4f}"
                 if coarse.n_pairs else "")
        detail = f"not applicable: only {res.n_pairs} pairs at 1e-7 (need 20){extra}"
    record(11, ok, detail)
    assert ok


def test_c12_cli_runs_are_byte_identical(tmp_path):
    cfg = ExperimentConfig(seed=4).replace(**{
        "members": 100, "nonmembers": 100, "dataset.count": 600,
        "target.epochs": 60, "target.widths": (32, 32),
        "shadow.epochs": 60, "shadow.widths": (32, 32), "shadow.train_size": 100,
    })
    (tmp_path / "c.ini").write_text(dump_config(cfg))
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli_main(["run", "--config", str(tmp_path / "c.ini"), "--out", str(o)]) for o in outs]
    names = ["report.json", "target_features.csv", "shadow_0_features.csv", "shadow_1_features.csv"]
    same = [(outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names]
    ok = codes == [0, 0] and all(same)
    record(12, ok, f"exit codes {codes}; identical files {sum(same)}/{len(names)}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
