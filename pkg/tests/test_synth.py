import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffatlas.synth import (PSNR_CAP, SyntheticScene, denoiser_corpus, generate_synthetic_video, psnr,
                             render_scene, temporal_consistency, uv_error)


def scalar_psnr(a, b):
    out = []
    for fa, fb in zip(a, b):
        se, n = 0.0, 0
        for x, y in zip(fa.ravel().tolist(), fb.ravel().tolist()):
            se += (x - y) ** 2
            n += 1
        out.append(10 * math.log10(1.0 / (se / n)))
    return out


def test_zero_motion_frames_identical():
    frames, _ = generate_synthetic_video(SyntheticScene(velocity=(0.0, 0.0)))
    for f in frames[1:]:
        assert np.array_equal(f, frames[0])


def test_translation_shifts_sprite():
    frames, gt = generate_synthetic_video(SyntheticScene(velocity=(1.0, 0.0)))
    for k in range(1, len(frames)):
        ys, xs = np.nonzero(gt.alpha[k] > 0)
        np.testing.assert_array_equal(gt.alpha[k][ys, xs], gt.alpha[0][ys, xs - k])
        np.testing.assert_allclose(frames[k][ys, xs][gt.alpha[k][ys, xs] == 1],
                                   frames[0][ys, xs - k][gt.alpha[k][ys, xs] == 1], atol=1e-12)


def test_static_background_outside_sprite():
    frames, gt = generate_synthetic_video(SyntheticScene())
    bg = gt.alpha == 0
    np.testing.assert_array_equal(frames[bg], np.broadcast_to(gt.background, frames.shape)[bg])


def test_rotation_rerender_is_bit_exact():
    scene = SyntheticScene(rotation=0.15, scale_rate=0.02, velocity=(2.0, 0.5))
    frames, gt = generate_synthetic_video(scene)
    again, alpha, uv = render_scene(scene, gt.background, gt.sprite_rgb, gt.sprite_alpha, gt.transforms)
    assert np.array_equal(again, frames)
    assert np.array_equal(alpha, gt.alpha)
    assert np.array_equal(uv, gt.uv)


def test_generation_deterministic_and_seeded():
    a, _ = generate_synthetic_video(SyntheticScene(seed=3))
    b, _ = generate_synthetic_video(SyntheticScene(seed=3))
    c, _ = generate_synthetic_video(SyntheticScene(seed=4))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sprite_out_of_bounds_rejected():
    with pytest.raises(ValueError, match="leaves the frame"):
        generate_synthetic_video(SyntheticScene(velocity=(8.0, 0.0)))


@pytest.mark.parametrize("kind", ["checker", "stripes", "gradient"])
def test_background_kinds(kind):
    frames, gt = generate_synthetic_video(SyntheticScene(background=kind, n_frames=3))
    assert frames.shape == (3, 54, 96, 3)
    assert frames.min() >= 0 and frames.max() <= 1
    assert gt.flow.shape == (2, 54, 96, 2)


def test_unknown_background():
    with pytest.raises(ValueError):
        generate_synthetic_video(SyntheticScene(background="plaid"))


def test_psnr_cases():
    z = np.zeros((2, 4, 4, 3))
    per, mean = psnr(z, z)
    assert mean == PSNR_CAP and np.all(per == PSNR_CAP)
    assert psnr(z, np.ones_like(z))[1] == 0.0
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 5, 6, 3)), rng.random((3, 5, 6, 3))
    np.testing.assert_allclose(psnr(a, b)[0], scalar_psnr(a, b), rtol=1e-12)
    with pytest.raises(ValueError):
        psnr(a, b[:2])


def test_uv_error_trivial_cases():
    rng = np.random.default_rng(1)
    gt = rng.uniform(-12, 12, (500, 2))
    assert uv_error(gt, gt) < 1e-10
    A = np.array([[0.3, -0.1], [0.2, 0.05]])
    assert uv_error(gt @ A + [0.4, -0.2], gt) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_uv_error_affine_invariant(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(-10, 10, (300, 2))
    pred = np.tanh(gt / 12) + 0.01 * rng.standard_normal(gt.shape)
    A = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    e0 = uv_error(pred, gt)
    e1 = uv_error(pred @ A + rng.standard_normal(2), gt)
    assert e1 == pytest.approx(e0, rel=1e-6, abs=1e-9)


def test_temporal_consistency_gt_floor():
    frames, gt = generate_synthetic_video(SyntheticScene())
    assert temporal_consistency(frames, gt) <= 0.01


def test_temporal_consistency_static():
    frames, gt = generate_synthetic_video(SyntheticScene(velocity=(0.0, 0.0)))
    assert temporal_consistency(frames, gt) == pytest.approx(0.0, abs=1e-12)


def test_temporal_consistency_noise():
    _, gt = generate_synthetic_video(SyntheticScene())
    noise = np.random.default_rng(2).random((12, 54, 96, 3))
    # the warped frame is a bilinear blend, not a fresh uniform; use zero flow
    gt0 = replace(gt, flow=np.zeros_like(gt.flow), alpha=np.ones_like(gt.alpha))
    assert temporal_consistency(noise, gt0) == pytest.approx(1 / 3, rel=0.05)


def test_denoiser_corpus():
    imgs, caps = denoiser_corpus(seed=0, n_sprites=6, n_textures=4)
    assert len(imgs) == 10 and all(im.shape == (32, 32, 3) for im in imgs)
    assert caps[:6] == ["a red ball", "a orange ball", "a yellow ball", "a green ball", "a blue ball",
                        "a purple ball"]
    assert caps[6:] == ["checker texture", "stripes texture"] * 2
    # balls sit on black
    for im in imgs[:6]:
        assert np.all(im[0] == 0) and np.all(im[:, 0] == 0)
    a, _ = denoiser_corpus(seed=0, n_sprites=6, n_textures=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, imgs))
