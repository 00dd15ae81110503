import math

import numpy as np
import pytest

from gsa_mia import tensor as T
from gsa_mia.defenses import DpSgdConfig, dp_sgd_step, make_defense
from gsa_mia.diffusion import (Adam, TrainConfig, TrainingDivergedError, ancestral_sample, cosine_alpha_bar,
                               diffusion_loss, forward_noise, make_cosine_schedule, make_linear_schedule,
                               NoiseSchedule, train, write_loss_trace)
from gsa_mia.model import init_denoiser
from gsa_mia.rng import Rng

from oracles import residual_vjp


class ConstNet:
    """Stand-in denoiser predicting a fixed array (zero by default)."""

    def __init__(self, shape, value=0.0):
        self.input_shape = tuple(shape)
        self.value = value

    def __call__(self, x, t):
        x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
        return T.Tensor(np.broadcast_to(self.value, x.shape).copy())


def test_linear_schedule_two_steps():
    s = make_linear_schedule(2, 1e-4, 0.02)
    np.testing.assert_allclose(s.alpha_bar, [0.9999, 0.9999 * 0.98], rtol=0, atol=1e-15)
    assert s.alpha_bar[1] == pytest.approx(0.979902, abs=1e-12)


def test_linear_schedule_single_step():
    s = make_linear_schedule(1, 0.01, 0.01)
    assert s.alpha_bar[0] == 1 - 0.01


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_linear_schedule_invalid(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


@pytest.mark.parametrize("make", [lambda: make_linear_schedule(1000), lambda: make_cosine_schedule(1000)])
def test_schedule_invariants(make):
    s = make()
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0 < s.alpha_bar[-1] and s.alpha_bar[0] <= 1
    np.testing.assert_allclose(s.sigma ** 2, s.beta, rtol=1e-15)


def test_cosine_schedule_matches_formula():
    f = lambda t: math.cos(((t / 100 + 0.008) / 1.008) * math.pi / 2) ** 2  # noqa: E731
    s = make_cosine_schedule(100)
    assert cosine_alpha_bar(0.0, 100) == 1.0
    assert s.alpha_bar[49] == pytest.approx(f(50) / f(0), rel=1e-12)
    assert s.alpha_bar[-1] < s.alpha_bar[0]
    assert s.beta.max() <= 0.999


def test_forward_noise_limits():
    x0, eps = np.full((1, 2, 2), 0.3), np.full((1, 2, 2), -0.8)
    def with_alpha_bar(ab):
        one = np.array([0.5])
        return NoiseSchedule("test", one, one, np.array([ab]), one)
    np.testing.assert_array_equal(forward_noise(with_alpha_bar(1.0), x0, 1, eps), x0)
    np.testing.assert_array_equal(forward_noise(with_alpha_bar(0.0), x0, 1, eps), eps)


def test_forward_noise_linear_t10():
    s = make_linear_schedule(100)
    ab10 = np.prod(1 - np.linspace(1e-4, 0.02, 100)[:10])
    out = forward_noise(s, np.ones((1, 2, 2)), 10, np.zeros((1, 2, 2)))
    np.testing.assert_allclose(out, math.sqrt(ab10), rtol=1e-14)


def test_forward_noise_errors(schedule10):
    with pytest.raises(T.ShapeError):
        forward_noise(schedule10, np.zeros((1, 2, 2)), 1, np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        forward_noise(schedule10, np.zeros((1, 2, 2)), 11, np.zeros((1, 2, 2)))


def test_loss_zero_for_exact_prediction(schedule10):
    eps = Rng(0).normal((1, 2, 2))
    assert diffusion_loss(ConstNet((1, 2, 2), eps), schedule10, np.zeros((1, 2, 2)), 3, eps).item() == 0.0


def test_loss_unit_basis_eps(schedule10):
    eps = np.zeros((1, 2, 2))
    eps[0, 1, 0] = 1.0
    assert diffusion_loss(ConstNet((1, 2, 2)), schedule10, np.zeros((1, 2, 2)), 5, eps).item() == 1.0


def test_loss_matches_squared_difference(tiny_net, schedule10):
    rng = Rng(3)
    x0, eps = rng.uniform((1, 2, 2)) * 2 - 1, rng.normal((1, 2, 2))
    ab = schedule10.alpha_bar[6]
    pred = tiny_net(np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, 7).data
    got = diffusion_loss(tiny_net, schedule10, x0, 7, eps).item()
    assert got == pytest.approx(float(((eps - pred) ** 2).sum()), rel=1e-14)


def test_batched_loss_is_per_row(tiny_net, schedule10):
    rng = Rng(4)
    x0, eps = rng.normal((3, 1, 2, 2)) * 0.3, rng.normal((3, 1, 2, 2))
    t = np.array([1, 4, 10])
    rows = diffusion_loss(tiny_net, schedule10, x0, t, eps).data
    for i in range(3):
        assert rows[i] == pytest.approx(diffusion_loss(tiny_net, schedule10, x0[i], t[i], eps[i]).item(), rel=1e-13)


def test_full_loss_gradient_matches_finite_differences(tiny_net, schedule10):
    rng = Rng(7)
    x0, eps = rng.normal((1, 2, 2)) * 0.5, rng.normal((1, 2, 2))
    f = lambda: diffusion_loss(tiny_net, schedule10, x0, 6, eps)  # noqa: E731
    assert T.grad_check(f, tiny_net.params) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_equals_residual_vjp(seed, schedule10):
    rng = Rng(seed)
    net = init_denoiser((1, 2, 2), (6, 5), 4, rng, 10)
    x0, eps = rng.normal((1, 2, 2)) * 0.5, rng.normal((1, 2, 2))
    t = int(rng.integers(1, 11))
    net.zero_grad()
    with T.Tape() as tape:
        loss = diffusion_loss(net, schedule10, x0, t, eps)
    tape.backward(loss)
    x_t = forward_noise(schedule10, x0, t, eps)
    for p, g in zip(net.params, residual_vjp(net, x_t, t, eps)):
        assert np.abs(p.grad - g.reshape(p.grad.shape)).max() <= 1e-8


def _toy_images(n=8, seed=0):
    return np.clip(Rng(seed).normal((n, 1, 2, 2)) * 0.4, -1, 1)


def test_zero_learning_rate_leaves_parameters(tiny_net, schedule10):
    before = tiny_net.state()
    train(tiny_net, _toy_images(), schedule10, TrainConfig(epochs=3, batch_size=4, learning_rate=0.0))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, tiny_net.params))


def test_single_sample_overfits(schedule10):
    net = init_denoiser((1, 2, 2), (16,), 4, Rng(1), 10)
    _, trace = train(net, _toy_images(1), schedule10, TrainConfig(epochs=400, batch_size=1, learning_rate=1e-2))
    assert np.mean(trace[-50:]) < np.mean(trace[:50])


def test_training_deterministic(schedule10):
    def once():
        net = init_denoiser((1, 2, 2), (8,), 4, Rng(2), 10)
        return train(net, _toy_images(), schedule10, TrainConfig(epochs=5, batch_size=3, seed=9))
    (a, ta), (b, tb) = once(), once()
    assert ta == tb
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.params, b.params))


def test_training_rejects_out_of_range_pixels(tiny_net, schedule10):
    with pytest.raises(ValueError):
        train(tiny_net, np.full((2, 1, 2, 2), 1.5), schedule10, TrainConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported(schedule10):
    net = init_denoiser((1, 2, 2), (8,), 4, Rng(2), 10)
    with pytest.raises(TrainingDivergedError):
        train(net, _toy_images(), schedule10, TrainConfig(epochs=50, batch_size=8, learning_rate=1e150))


def test_train_config_validation():
    for bad in ({"epochs": 0}, {"batch_size": 0}, {"learning_rate": -1}, {"lr_schedule": "step"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_dp_training_equals_reference_step(schedule10):
    """The fused clipping path must reproduce dp_sgd_step on materialised per-sample rows."""
    images = _toy_images(6, 5)
    defense = make_defense("dpsgd", 2, clip_bound=0.5, noise_multiplier=0.7)
    cfg = TrainConfig(epochs=2, batch_size=3, seed=4)
    fused, _ = train(init_denoiser((1, 2, 2), (8,), 4, Rng(3), 10), images, schedule10, cfg, defense)

    # reference: replay the loop with per-sample gradients from independent single-row passes
    net = init_denoiser((1, 2, 2), (8,), 4, Rng(3), 10)
    rng = Rng(cfg.seed)
    opt = Adam(net.params, cfg.learning_rate)
    for _ in range(cfg.epochs):
        order = rng.permutation(6)
        for s in range(0, 6, 3):
            idx = order[s:s + 3]
            x0 = images[idx]
            t = rng.integers(1, 11, 3)
            eps = rng.normal(x0.shape)
            rows = []
            for i in range(3):
                net.zero_grad()
                with T.Tape() as tape:
                    loss = diffusion_loss(net, schedule10, x0[i], t[i], eps[i])
                tape.backward(loss)
                rows.append(np.concatenate([p.grad.ravel() for p in net.params]))
            update = dp_sgd_step(np.array(rows), defense.dp, rng)
            sizes = np.cumsum([p.data.size for p in net.params])[:-1]
            opt.step([u.reshape(p.data.shape) for u, p in zip(np.split(update, sizes), net.params)])
    for p, q in zip(fused.params, net.params):
        np.testing.assert_allclose(p.data, q.data, rtol=1e-10, atol=1e-12)


def test_cosine_lr_schedule_runs(tiny_net, schedule10):
    _, trace = train(tiny_net, _toy_images(), schedule10,
                     TrainConfig(epochs=3, batch_size=4, lr_schedule="cosine"))
    assert len(trace) == 3 and all(np.isfinite(trace))


def test_loss_trace_csv(tmp_path):
    write_loss_trace(tmp_path / "loss.csv", [1.5, 0.25])
    assert (tmp_path / "loss.csv").read_text() == "epoch,mean_loss\n0,1.5\n1,0.25\n"


def test_ancestral_one_step_zero_net():
    s = make_linear_schedule(1, 0.02, 0.02)
    x1 = Rng(0).normal((1, 1, 2, 2))
    out = ancestral_sample(ConstNet((1, 2, 2)), s, Rng(5), 1, x_T=x1)
    np.testing.assert_allclose(out, x1 / math.sqrt(0.98), rtol=1e-15)


def test_ancestral_two_step_zero_net():
    s = make_linear_schedule(2, 0.01, 0.02)
    x2 = Rng(0).normal((1, 1, 2, 2))
    rng = Rng(5)
    out = ancestral_sample(ConstNet((1, 2, 2)), s, rng, 1, x_T=x2)
    z = Rng(5).normal((1, 1, 2, 2))
    x1 = x2 / math.sqrt(0.98) + math.sqrt(0.02) * z
    np.testing.assert_allclose(out, x1 / math.sqrt(0.99), rtol=1e-14)


def test_ancestral_sampling_deterministic(tiny_net, schedule10):
    a = ancestral_sample(tiny_net, schedule10, Rng(3), 4)
    assert a.shape == (4, 1, 2, 2) and np.all(np.isfinite(a))
    assert np.array_equal(a, ancestral_sample(tiny_net, schedule10, Rng(3), 4))


def test_dp_step_reference_identity():
    g = Rng(0).normal((5, 7))
    out = dp_sgd_step(g, DpSgdConfig(clip_bound=np.inf, noise_multiplier=0.0), Rng(0))
    assert np.array_equal(out, g.sum(axis=0) / 5)
