import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phototune.image import rgb_to_yuv
from phototune.pipeline import apply_pipeline
from phototune.rewards import (
    StyleFeatureExtractor,
    StyleWeights,
    content_distance,
    finishing_reward,
    gram_matrix,
    style_score,
    stylization_reward,
)
from phototune.stats import psnr


@pytest.fixture(scope="module")
def fx():
    return StyleFeatureExtractor(seed=3)


def test_finishing_reward_zero_for_no_change(rng):
    a, g = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    assert finishing_reward(a, a, g) == 0.0


def test_finishing_reward_five_db():
    g = np.full((8, 8, 3), 0.5)
    # uniform offsets give exact mse values: 20 dB -> 0.1, 25 dB -> 10**-1.25
    i_t = g + 0.1
    i_next = g + 10 ** -1.25
    assert finishing_reward(i_t, i_next, g) == pytest.approx(5.0, abs=1e-9)


def test_finishing_reward_cap_case():
    g = np.full((8, 8, 3), 0.5)
    i_t = g + 10 ** -1.5  # 30 dB
    assert finishing_reward(i_t, g.copy(), g) == pytest.approx(70.0, abs=1e-9)


def test_finishing_reward_shape_mismatch():
    with pytest.raises(ValueError):
        finishing_reward(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_finishing_reward_telescopes(seed, steps):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 0.9, size=(12, 12, 3))
    goal = apply_pipeline(x, rng.uniform(-0.5, 0.5, 9))
    frames = [apply_pipeline(x, np.zeros(9))] + [apply_pipeline(x, rng.uniform(-0.5, 0.5, 9)) for _ in range(steps)]
    total = sum(finishing_reward(a, b, goal) for a, b in zip(frames, frames[1:]))
    assert total == pytest.approx(psnr(frames[-1], goal) - psnr(frames[0], goal), abs=1e-9)


def test_gram_constant_single_channel():
    g = gram_matrix(np.full((1, 3, 4), 0.7))
    assert g.shape == (1, 1)
    assert g[0, 0] == pytest.approx(0.49, abs=1e-15)


def test_gram_orthogonal_rows():
    f = np.zeros((2, 2, 2))
    f[0, 0, :] = 1.0
    f[1, 1, :] = 2.0
    g = gram_matrix(f)
    assert g[0, 1] == 0.0 and g[1, 0] == 0.0


def test_gram_double_loop(rng):
    f = rng.normal(size=(5, 4, 6))
    c, h, w = f.shape
    expect = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            s = 0.0
            for y in range(h):
                for x in range(w):
                    s += f[i, y, x] * f[j, y, x]
            expect[i, j] = s / (c * h * w)
    np.testing.assert_allclose(gram_matrix(f), expect, atol=1e-9, rtol=0)


def test_gram_rejects_empty():
    with pytest.raises(ValueError):
        gram_matrix(np.zeros((0, 2, 2)))


def test_extractor_shape_and_determinism(rng):
    img = rng.uniform(size=(16, 16, 3))
    a = StyleFeatureExtractor(seed=5).features(img)
    b = StyleFeatureExtractor(seed=5).features(img)
    assert len(a) == 4
    assert [f.shape[0] for f in a] == [16, 32, 64, 128]
    assert [f.shape[1] for f in a] == [16, 8, 4, 2]
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert np.abs(a[-1]).sum() > 0


def test_style_score_self_is_zero(fx, scenes):
    assert style_score(scenes[0], scenes[0], fx) == 0.0


def test_style_score_symmetric_and_nonnegative(fx, scenes):
    a, b = scenes[1], scenes[2]
    s_ab, s_ba = style_score(a, b, fx), style_score(b, a, fx)
    assert s_ab > 0
    assert s_ab == pytest.approx(s_ba, rel=1e-12)


def test_brightness_shift_dominated_by_luma_term(fx, scenes):
    a = scenes[3] * 0.5
    b = np.clip(a + 0.4, 0, 1)
    total = style_score(a, b, fx)
    luma_only = style_score(a, b, fx, StyleWeights(100.0, 0.0, 0.5)) - style_score(a, b, fx, StyleWeights(0.0, 0.0, 0.5))
    assert total > 0
    assert luma_only > 0.5 * total


def _rms(x):
    return float(np.sqrt(np.mean(np.asarray(x) ** 2)))


def _hist(values, lo):
    idx = np.clip(np.floor((values - lo) * 32).astype(int), 0, 31)
    return np.bincount(idx.ravel(), minlength=32) / values.size


def _oracle_score(cur, goal, fx, w):
    fc, fg = fx.features(cur), fx.features(goal)
    gram = 0.0
    for a, b in zip(fg, fc):
        c = a.shape[0]
        ga = a.reshape(c, -1) @ a.reshape(c, -1).T / a.size
        gb = b.reshape(c, -1) @ b.reshape(c, -1).T / b.size
        gram += _rms(ga - gb)
    yc, yg = rgb_to_yuv(cur), rgb_to_yuv(goal)
    lum = _rms(_hist(yc[..., 0], 0.0) - _hist(yg[..., 0], 0.0))
    uv = np.stack([_hist(yc[..., k], -0.5) - _hist(yg[..., k], -0.5) for k in (1, 2)])
    return gram + w.lambda0 * lum + w.lambda1 * _rms(uv)


def test_style_score_termwise_oracle(fx, scenes):
    w = StyleWeights()
    got = style_score(scenes[4], scenes[5], fx, w)
    assert got == pytest.approx(_oracle_score(scenes[4], scenes[5], fx, w), abs=1e-9)


def test_stylization_reward_no_change_is_content_penalty(fx, scenes):
    a, g = scenes[0], scenes[1]
    r = stylization_reward(a, a, g, fx)
    assert r == pytest.approx(-0.5 * content_distance(a, g, fx), abs=1e-12)
    assert r <= 0


def test_stylization_reward_goal_reached(fx, scenes):
    a, g = scenes[2], scenes[3]
    assert stylization_reward(a, g, g, fx) == pytest.approx(style_score(a, g, fx), rel=1e-12)


def test_stylization_reward_termwise_oracle(fx, scenes, rng):
    w = StyleWeights(80.0, 30.0, 0.7)
    i_t = scenes[5]
    i_next = apply_pipeline(i_t, rng.uniform(-0.4, 0.4, 9))
    goal = scenes[6]
    content = sum(_rms(a - b) for a, b in zip(fx.features(goal), fx.features(i_next)))
    expect = _oracle_score(i_t, goal, fx, w) - _oracle_score(i_next, goal, fx, w) - w.lambda2 * content
    assert stylization_reward(i_t, i_next, goal, fx, w) == pytest.approx(expect, abs=1e-9)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        StyleWeights(lambda1=-1.0)


def test_external_weights_roundtrip(tmp_path, scenes):
    fx = StyleFeatureExtractor(seed=9)
    path = tmp_path / "style.npz"
    fx.save(path)
    loaded = StyleFeatureExtractor.from_checkpoint(path)
    assert loaded.provenance == "external_weights"
    for a, b in zip(fx.features(scenes[0]), loaded.features(scenes[0])):
        assert np.array_equal(a, b)
