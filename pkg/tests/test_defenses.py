import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gsa_mia.defenses import (AugmentationPolicy, DpSgdConfig, LITE_OPS, Defense, adjust_brightness,
                              clip_factors, clip_per_sample_gradient, cutout, dp_sgd_step, make_defense,
                              random_horizontal_flip, randaug_lite, translate)
from gsa_mia.rng import Rng


def test_clip_halves_norm_two():
    g = np.array([2.0, 0.0])
    np.testing.assert_array_equal(clip_per_sample_gradient(g, 1.0), [1.0, 0.0])


def test_clip_leaves_small_gradient():
    g = np.array([0.3, 0.4])
    np.testing.assert_array_equal(clip_per_sample_gradient(g, 1.0), g)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)), st.floats(1e-3, 10))
def test_clipped_norm_is_min_of_norm_and_bound(g, c):
    out = clip_per_sample_gradient(g, c)
    assert abs(np.linalg.norm(out) - min(np.linalg.norm(g), c)) <= 1e-12 * max(1.0, c)


def test_dp_step_without_noise_is_plain_mean_when_unclipped():
    g = Rng(0).normal((4, 3)) * 0.1
    np.testing.assert_allclose(dp_sgd_step(g, DpSgdConfig(1.0, 0.0), Rng(1)), g.mean(axis=0), rtol=1e-15)


def test_dp_step_single_sample_norm_2c():
    g = np.array([[1.2, 1.6]])  # norm 2
    np.testing.assert_allclose(dp_sgd_step(g, DpSgdConfig(1.0, 0.0), Rng(1)), g[0] / 2, rtol=1e-15)


def test_dp_step_disabled_is_bit_exact_mean():
    g = Rng(3).normal((6, 5)) * 100
    out = dp_sgd_step(g, DpSgdConfig(np.inf, 0.0), Rng(0))
    assert np.array_equal(out, g.sum(axis=0) / 6)


def test_dp_noise_variance():
    cfg = DpSgdConfig(1.0, 1.0)
    rng = Rng(7)
    zeros = np.zeros((4, 200))
    draws = np.concatenate([dp_sgd_step(zeros, cfg, rng) for _ in range(100)])
    assert draws.var() == pytest.approx(1.0 / 16, rel=0.05)


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)), elements=st.floats(-50, 50)),
       st.floats(0.01, 5))
def test_every_contribution_within_bound(g, c):
    scale = clip_factors(np.linalg.norm(g, axis=1), c)
    assert np.all(np.linalg.norm(g * scale[:, None], axis=1) <= c * (1 + 1e-12))


def test_dp_step_rejects_empty_batch():
    with pytest.raises(ValueError):
        dp_sgd_step(np.zeros((0, 3)), DpSgdConfig(), Rng(0))


@pytest.mark.parametrize("kw", [{"clip_bound": 0}, {"noise_multiplier": -1}, {"delta": 1.0}])
def test_dp_config_validation(kw):
    with pytest.raises(ValueError):
        DpSgdConfig(**kw)


def test_flip_prob_one_swaps_columns():
    img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(random_horizontal_flip(img, 1.0, Rng(0)), [[[2.0, 1.0], [4.0, 3.0]]])


def test_flip_is_involution_and_prob_zero_identity():
    img = Rng(0).uniform((1, 3, 4))
    twice = random_horizontal_flip(random_horizontal_flip(img, 1.0, Rng(0)), 1.0, Rng(1))
    np.testing.assert_array_equal(twice, img)
    np.testing.assert_array_equal(random_horizontal_flip(img, 0.0, Rng(0)), img)


def test_cutout_full_and_empty():
    img = np.ones((1, 4, 4))
    assert not cutout(img, 4, Rng(0)).any()
    np.testing.assert_array_equal(cutout(img, 0, Rng(0)), img)


def test_cutout_changes_exactly_square():
    img = Rng(2).uniform((1, 8, 8)) + 0.1
    out = cutout(img, 2, Rng(5))
    changed = np.argwhere(out != img)
    assert len(changed) == 4
    assert np.ptp(changed[:, 1]) == 1 and np.ptp(changed[:, 2]) == 1


def test_cutout_too_large():
    with pytest.raises(ValueError):
        cutout(np.ones((1, 4, 4)), 5, Rng(0))


def test_translate_and_brightness():
    img = np.arange(9.0).reshape(1, 3, 3) / 10
    np.testing.assert_array_equal(translate(img, 1, 0)[0, 1:], img[0, :2])
    assert not translate(img, 1, 0)[0, 0].any()
    np.testing.assert_array_equal(translate(img, -1, -1)[0, :2, :2], img[0, 1:, 1:])
    assert adjust_brightness(np.full((1, 2, 2), 0.95), 0.2).max() == 1.0


@pytest.mark.parametrize("kind", ["flip", "cutout", "randaug-lite"])
def test_augmentations_preserve_shape_and_range(kind):
    batch = np.clip(Rng(1).normal((16, 1, 8, 8)), -1, 1)
    out = make_defense(kind, 8).augment(batch, Rng(2))
    assert out.shape == batch.shape
    assert out.min() >= -1 and out.max() <= 1


def test_randaug_lite_applies_two_distinct_ops():
    policy = AugmentationPolicy(cutout_size=2, lite_ops=LITE_OPS)
    img = np.clip(Rng(3).normal((1, 8, 8)), -1, 1)
    outs = [randaug_lite(img, policy, Rng(s)) for s in range(20)]
    assert all(o.shape == img.shape for o in outs)
    assert any(not np.array_equal(o, img) for o in outs)


def test_none_and_dp_do_not_augment():
    batch = Rng(0).uniform((3, 1, 2, 2))
    for d in (Defense("none"), make_defense("dpsgd", 2)):
        assert np.array_equal(d.augment(batch, Rng(0)), batch)


def test_policy_validation_and_unknown_kind():
    with pytest.raises(ValueError):
        AugmentationPolicy(flip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentationPolicy(lite_ops=("rotate",))
    with pytest.raises(ValueError):
        make_defense("mixup", 8)
