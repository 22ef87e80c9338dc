"""Shared, session-scoped fits. The expensive ones (decomposition, denoiser
training, uv optimisation) run once and are reused by every test that asks."""
import time

import numpy as np
import pytest

from diffatlas import kernels
from diffatlas.atlas import BG, FG, AtlasTexture, DecompositionConfig, discretize_atlas, texel_centers, \
    train_decomposition
from diffatlas.diffusion import Denoiser, DenoiserConfig, Embedders, TrainConfig, finetune_denoiser, make_schedule, \
    train_denoiser
from diffatlas.editing import center_crop_object, edited_foreground, texture_crop, window_mask
from diffatlas.synth import SyntheticScene, denoiser_corpus, generate_synthetic_video
from diffatlas.uvopt import LossWeights, OptimizationConfig, optimize_uv_mappings

G = 128


@pytest.fixture(scope="session")
def scene():
    return generate_synthetic_video(SyntheticScene())


@pytest.fixture(scope="session")
def decomposition(scene):
    frames, gt = scene
    t0 = time.perf_counter()
    model = train_decomposition(frames, gt.alpha, DecompositionConfig(iters=3000))
    return model, time.perf_counter() - t0


@pytest.fixture(scope="session")
def source_atlases(decomposition):
    """(fg texture, bg texture, fg mask grid) of the trained model."""
    model, _ = decomposition
    fg = discretize_atlas(model, FG, G)
    bg = discretize_atlas(model, BG, G)
    _, spec = texture_crop(fg, out_size=32)
    mask = window_mask(fg.rgb * fg.alpha[..., None], spec)
    return fg, bg, mask


@pytest.fixture(scope="session")
def base_denoiser():
    emb = Embedders(16)
    images, captions = denoiser_corpus(seed=4)
    net = Denoiser.create(DenoiserConfig())
    train_denoiser(net, images, [emb(c) for c in captions], make_schedule(), TrainConfig(steps=2000))
    return net, emb


@pytest.fixture(scope="session")
def fine_tuned(base_denoiser, scene, source_atlases):
    """(fine-tuned net, source crop, its conditioning)."""
    net, emb = base_denoiser
    frames, gt = scene
    fg, _, _ = source_atlases
    crop, _ = texture_crop(fg, out_size=32)
    refs = [center_crop_object(frames[k], gt.alpha[k], 32)[0] for k in (0, 4, 7, 11)]
    ft = finetune_denoiser(net, crop, "a red ball", refs, make_schedule(), emb, steps=150, lr=1e-5, seed=5)
    return ft, crop, emb("a red ball", refs[0])


def identity_edit(source_atlases):
    """The source object on black pasted back as an edit: (fg texture, bg texture, mask grid)."""
    fg, bg, _ = source_atlases
    _, spec = texture_crop(fg, out_size=32)
    edited, mask = edited_foreground(fg.rgb * fg.alpha[..., None], fg, spec)
    return edited, bg, mask


@pytest.fixture(scope="session")
def uv_runs(decomposition, source_atlases):
    """Identity-edit optimisations: the full loss and the two ablations."""
    model, _ = decomposition
    fg, bg, mask = identity_edit(source_atlases)
    out = {}
    for name, w in [("full", LossWeights()), ("no_rgb_alpha", LossWeights(rgb=0.0, alpha=0.0)),
                    ("no_off", LossWeights(off=0.0, off_global=0.0))]:
        t0 = time.perf_counter()
        nets, hist = optimize_uv_mappings(model, fg, bg, mask, OptimizationConfig(weights=w))
        out[name] = (nets, hist, time.perf_counter() - t0)
    return out


def swirl(theta0=1.0, radius=0.7):
    """Inverse of a radial swirl of the foreground atlas about its origin."""
    def winv(uv):
        r = np.linalg.norm(uv, axis=-1)
        th = -theta0 * np.clip(1 - r / radius, 0, None) ** 2
        c, s = np.cos(th), np.sin(th)
        return np.stack([c * uv[..., 0] - s * uv[..., 1], s * uv[..., 0] + c * uv[..., 1]], -1)
    return winv


@pytest.fixture(scope="session")
def swirl_edit(source_atlases):
    """A geometrically perturbed foreground atlas and the map that undoes the perturbation."""
    fg, _, _ = source_atlases
    winv = swirl()
    uv = winv(texel_centers(G))
    rgb = kernels.bilinear_sample(fg.rgb, uv).reshape(G, G, 3)
    alpha = kernels.bilinear_sample(fg.alpha, uv).reshape(G, G)
    return AtlasTexture(rgb, alpha, fg.rect), winv
