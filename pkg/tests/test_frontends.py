import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from avsd.frontends import (
    AudioFrontend,
    Fusion,
    VisualFrontend,
    add_noise,
    augment_frames,
    center_crop,
    corrupt,
    draw_modality,
    frontend_forward,
    fuse,
    make_span_mask,
    modality_dropout,
    stack_audio_frames,
)


def test_stack_eight_frames():
    x = np.arange(8 * 26, dtype=np.float32).reshape(8, 26)
    out = stack_audio_frames(x, 4)
    assert out.shape == (2, 104)
    np.testing.assert_array_equal(out[1, :26], x[4])


def test_stack_factor_one_is_identity():
    x = np.random.default_rng(0).normal(size=(5, 26))
    np.testing.assert_array_equal(stack_audio_frames(x, 1), x)


def test_stack_drops_remainder():
    x = np.random.default_rng(0).normal(size=(10, 26))
    out = stack_audio_frames(x, 4)
    assert out.shape == (2, 104)
    np.testing.assert_array_equal(out.reshape(8, 26), x[:8])


def test_stack_too_short_or_bad_factor():
    with pytest.raises(ValueError):
        stack_audio_frames(np.zeros((3, 26)), 4)
    with pytest.raises(ValueError):
        stack_audio_frames(np.zeros((3, 26)), 0)


def test_span_mask_extremes():
    rng = np.random.default_rng(0)
    assert make_span_mask(50, 0.0, 5, rng).size == 0
    np.testing.assert_array_equal(make_span_mask(50, 1.0, 5, rng), np.arange(50))


def test_span_mask_bad_arguments():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        make_span_mask(10, 1.2, 5, rng)
    with pytest.raises(ValueError):
        make_span_mask(10, 0.5, 0, rng)


def test_span_mask_monte_carlo_audio_coverage():
    fracs = [make_span_mask(1000, 0.8, 5, np.random.default_rng(s)).size / 1000 for s in range(100)]
    assert 0.78 <= np.mean(fracs) <= 0.86


@pytest.mark.parametrize("coverage,span", [(0.8, 10), (0.3, 5)])
def test_span_mask_coverage_within_tolerance(coverage, span):
    fracs = [make_span_mask(400, coverage, span, np.random.default_rng(s)).size / 400 for s in range(100)]
    assert abs(np.mean(fracs) - coverage) <= 0.06


@given(t=st.integers(1, 80), coverage=st.floats(0, 1), span=st.integers(1, 12), seed=st.integers(0, 999))
def test_span_mask_is_valid_index_set(t, coverage, span, seed):
    idx = make_span_mask(t, coverage, span, np.random.default_rng(seed))
    assert np.all(np.diff(idx) > 0)
    assert idx.size == 0 or (idx.min() >= 0 and idx.max() < t)
    assert idx.size >= coverage * t - 1e-9


def test_corrupt_examples():
    x = torch.randn(6, 4)
    e = torch.arange(4.0)
    assert torch.equal(corrupt(x, [], e), x)
    one = corrupt(x, [2], e)
    assert torch.equal(one[2], e)
    assert torch.equal(one[[0, 1, 3, 4, 5]], x[[0, 1, 3, 4, 5]])
    assert torch.equal(corrupt(x, range(6), e), e.expand(6, 4))


def test_corrupt_rejects_bad_index_and_dim():
    with pytest.raises(IndexError):
        corrupt(torch.zeros(3, 2), [3], torch.zeros(2))
    with pytest.raises(ValueError):
        corrupt(torch.zeros(3, 2), [0], torch.zeros(5))


@given(seed=st.integers(0, 10_000), t=st.integers(1, 30))
def test_corrupt_leaves_unmasked_rows_alone(seed, t):
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.normal(size=(t, 3)))
    idx = np.flatnonzero(rng.random(t) < 0.4)
    out = corrupt(x, idx, torch.full((3,), 7.0, dtype=torch.float64))
    keep = np.setdiff1d(np.arange(t), idx)
    assert torch.equal(out[keep], x[keep])


def test_batched_boolean_mask():
    x = torch.zeros(2, 3, 2)
    m = torch.tensor([[True, False, False], [False, False, True]])
    out = corrupt(x, m, torch.ones(2))
    assert out.sum() == 4


def test_modality_dropout_extremes():
    a, v = torch.ones(3, 2), torch.ones(3, 2)
    rng = np.random.default_rng(0)
    for _ in range(50):
        fa, fv = modality_dropout(a, v, 1.0, 0.3, rng)
        assert torch.equal(fa, a) and torch.equal(fv, v)
        fa, fv = modality_dropout(a, v, 0.0, 1.0, rng)
        assert torch.equal(fa, a) and not fv.any()
    fa, fv = modality_dropout(a, v, 0.0, 0.0, rng)
    assert not fa.any() and fv.shape == v.shape


def test_modality_dropout_bad_probability():
    with pytest.raises(ValueError):
        draw_modality(1.2, 0.5, np.random.default_rng(0))


@pytest.mark.parametrize("p_m,p_a", [(0.5, 0.5), (0.2, 0.7), (0.9, 0.1)])
def test_modality_dropout_frequencies(p_m, p_a):
    rng = np.random.default_rng(1234)
    draws = [draw_modality(p_m, p_a, rng) for _ in range(10_000)]
    freq = [draws.count(k) / len(draws) for k in ("both", "audio", "video")]
    expect = [p_m, (1 - p_m) * p_a, (1 - p_m) * (1 - p_a)]
    assert np.max(np.abs(np.array(freq) - expect)) <= 0.02


def test_noise_identity_cases():
    x = np.random.default_rng(0).normal(size=(40, 26)).astype(np.float32)
    assert add_noise(x, 0.0, 0.0, np.random.default_rng(1)) is x
    np.testing.assert_allclose(add_noise(x, 1.0, math.inf, np.random.default_rng(1)), x)


def test_noise_at_zero_db():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4000, 26))
    noisy = add_noise(x, 1.0, 0.0, rng)
    snr = 10 * np.log10(np.mean(x**2) / np.mean((noisy - x) ** 2))
    assert abs(snr) <= 0.5


def test_noise_bad_probability():
    with pytest.raises(ValueError):
        add_noise(np.zeros(3), -0.1, 0.0, np.random.default_rng(0))


def test_augment_and_center_crop_shapes():
    frames = np.random.default_rng(0).normal(size=(5, 16, 16))
    assert augment_frames(frames, 14, np.random.default_rng(0)).shape == (5, 14, 14)
    np.testing.assert_array_equal(center_crop(frames, 14), frames[:, 1:15, 1:15])
    flipped = augment_frames(frames, 16, np.random.default_rng(0), flip_prob=1.0)
    np.testing.assert_array_equal(flipped, frames[:, :, ::-1])


def test_frontend_shapes_minimal_utterance():
    torch.manual_seed(0)
    afe, vfe, fus = AudioFrontend(104, 8), VisualFrontend(8, (4, 6)), Fusion(8, 12)
    f_a, f_v = frontend_forward(afe, vfe, torch.randn(1, 1, 104), torch.randn(1, 1, 16, 16))
    assert f_a.shape == (1, 1, 8) and f_v.shape == (1, 1, 8)
    assert fuse(f_a, f_v).shape == (1, 1, 16)
    assert fus(f_a, f_v).shape == (1, 1, 12)


def test_visual_frontend_accepts_face_size():
    vfe = VisualFrontend(8, (4, 6))
    assert vfe(torch.randn(2, 3, 24, 24)).shape == (2, 3, 8)


def test_frontend_length_mismatch():
    with pytest.raises(ValueError):
        frontend_forward(AudioFrontend(104, 8), VisualFrontend(8, (4, 6)), torch.randn(1, 3, 104), torch.randn(1, 2, 16, 16))
    with pytest.raises(ValueError):
        fuse(torch.zeros(1, 3, 4), torch.zeros(1, 2, 4))


def test_frontend_deterministic_including_zero_video():
    torch.manual_seed(1)
    afe, vfe, fus = AudioFrontend(104, 8), VisualFrontend(8, (4, 6)), Fusion(8, 8)
    audio, video = torch.randn(1, 4, 104), torch.zeros(1, 4, 16, 16)
    a = fus(*frontend_forward(afe, vfe, audio, video))
    b = fus(*frontend_forward(afe, vfe, audio, video))
    assert torch.equal(a, b)
