"""Synthetic layered videos with exact ground truth, and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

PSNR_CAP = 99.0


@dataclass
class SyntheticScene:
    n_frames: int = 12
    height: int = 54
    width: int = 96
    seed: int = 0
    background: str = "checker"  # checker | stripes | gradient
    bg_colors: tuple = ((0.85, 0.75, 0.55), (0.30, 0.45, 0.65))
    bg_period: float = 24.0  # pixels per full pattern cycle
    bg_softness: float = 1.5  # transition width in pixels
    sprite_size: int = 24  # texels, including a transparent margin
    sprite_radius: float = 10.0
    sprite_colors: tuple = ((0.95, 0.25, 0.20), (1.0, 0.85, 0.30))
    start: tuple = (30.0, 27.0)  # sprite centre in frame 0 (pixels)
    velocity: tuple = (3.0, 0.0)  # pixels per frame
    rotation: float = 0.0  # radians per frame
    scale_rate: float = 0.0  # relative scale change per frame
    caption: str = "a red ball"


@dataclass
class GroundTruth:
    frames: np.ndarray  # (N, H, W, 3)
    alpha: np.ndarray  # (N, H, W)
    uv: np.ndarray  # (N, H, W, 2) sprite-local coordinates in texels
    flow: np.ndarray  # (N-1, H, W, 2) backward flow: pixel in k+1 -> position in k
    background: np.ndarray  # (H, W, 3)
    sprite_rgb: np.ndarray  # (S, S, 3)
    sprite_alpha: np.ndarray  # (S, S)
    transforms: list = field(default_factory=list)  # (centre, angle, scale) per frame


def background_pattern(kind, height, width, colors, period, softness, phase=(0.0, 0.0)):
    y, x = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    x = x + phase[0]
    y = y + phase[1]
    c0 = np.asarray(colors[0], dtype=np.float64)
    c1 = np.asarray(colors[1], dtype=np.float64)
    # sin-based square waves; ``sharp`` sets the edge width in pixels
    sharp = period / (np.pi * max(softness, 1e-3))
    if kind == "checker":
        s = np.sin(2 * np.pi * x / period) * np.sin(2 * np.pi * y / period)
        t = 0.5 + 0.5 * np.tanh(sharp * s)
    elif kind == "stripes":
        t = 0.5 + 0.5 * np.tanh(sharp * np.sin(2 * np.pi * x / period))
    elif kind == "gradient":
        t = 0.5 * (x / width) + 0.5 * (y / height)
    else:
        raise ValueError(f"unknown background kind {kind!r}")
    return (1 - t)[..., None] * c0 + t[..., None] * c1


def make_sprite(size, radius, colors, seed, n_waves=3, wavelength=7.0):
    """Soft disk textured with a seeded sum of plane waves blending two colours.

    The waves give texture gradients everywhere inside the disk and break its
    rotational symmetry.
    """
    rng = np.random.default_rng(seed)
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot(x - c, y - c)
    alpha = np.clip(radius + 0.5 - r, 0.0, 1.0)
    field_ = np.zeros_like(x)
    for _ in range(n_waves):
        ang = rng.uniform(0, np.pi)
        lam = wavelength * rng.uniform(0.8, 1.25)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * ((x - c) * np.cos(ang) + (y - c) * np.sin(ang)) / lam + phase)
    t = 0.5 + 0.5 * np.tanh(field_)
    c0 = np.asarray(colors[0], dtype=np.float64)
    c1 = np.asarray(colors[1], dtype=np.float64)
    rgb = (1 - t)[..., None] * c0 + t[..., None] * c1
    rgb = np.clip(rgb, 0.0, 1.0) * (alpha > 0)[..., None]
    return rgb, alpha


def frame_transform(scene, k):
    cx = scene.start[0] + scene.velocity[0] * k
    cy = scene.start[1] + scene.velocity[1] * k
    return (cx, cy), scene.rotation * k, 1.0 + scene.scale_rate * k


def _to_sprite(px, py, tr):
    (cx, cy), ang, s = tr
    dx, dy = px - cx, py - cy
    ca, sa = np.cos(ang), np.sin(ang)
    return (ca * dx + sa * dy) / s, (-sa * dx + ca * dy) / s


def _to_frame(sx, sy, tr):
    (cx, cy), ang, s = tr
    ca, sa = np.cos(ang), np.sin(ang)
    return cx + s * (ca * sx - sa * sy), cy + s * (sa * sx + ca * sy)


def _sample_texture(tex, sx, sy):
    """Bilinear lookup with sprite-local texel coordinates (origin at centre)."""
    S = tex.shape[0]
    # sprite-local coordinate s maps to uv over a rect of half-width S/2
    uv = np.stack([sx.ravel(), sy.ravel()], axis=1)
    half = S / 2.0
    out = kernels.bilinear_sample(tex, uv, (-half, half, -half, half))
    return out.reshape(sx.shape + tex.shape[2:])


def render_scene(scene, background, sprite_rgb, sprite_alpha, transforms):
    H, W = scene.height, scene.width
    py, px = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    frames, alphas, uvs = [], [], []
    for tr in transforms:
        sx, sy = _to_sprite(px, py, tr)
        a = _sample_texture(sprite_alpha, sx, sy)
        premult = _sample_texture(sprite_rgb * sprite_alpha[..., None], sx, sy)
        fg = np.where(a[..., None] > 1e-12, premult / np.maximum(a, 1e-12)[..., None], 0.0)
        frames.append((1 - a)[..., None] * background + a[..., None] * fg)
        alphas.append(a)
        uvs.append(np.stack([sx, sy], axis=-1))
    return np.stack(frames), np.stack(alphas), np.stack(uvs)


def generate_synthetic_video(scene):
    """Render a scene; returns (frames (N,H,W,3), GroundTruth)."""
    if scene.n_frames < 2:
        raise ValueError("need at least two frames")
    bg = background_pattern(scene.background, scene.height, scene.width, scene.bg_colors,
                            scene.bg_period, scene.bg_softness)
    rgb, alpha = make_sprite(scene.sprite_size, scene.sprite_radius, scene.sprite_colors, scene.seed)
    transforms = [frame_transform(scene, k) for k in range(scene.n_frames)]
    S = scene.sprite_size
    corners = np.array([[-S / 2, -S / 2], [S / 2, -S / 2], [-S / 2, S / 2], [S / 2, S / 2]])
    for k, tr in enumerate(transforms):
        if tr[2] <= 0:
            raise ValueError(f"frame {k}: non-invertible sprite transform")
        fx, fy = _to_frame(corners[:, 0], corners[:, 1], tr)
        if fx.min() < 0 or fy.min() < 0 or fx.max() > scene.width or fy.max() > scene.height:
            raise ValueError(f"sprite leaves the frame at frame {k}")
    frames, alphas, uvs = render_scene(scene, bg, rgb, alpha, transforms)
    H, W = scene.height, scene.width
    py, px = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    flow = []
    for k in range(scene.n_frames - 1):
        sx, sy = _to_sprite(px, py, transforms[k + 1])
        qx, qy = _to_frame(sx, sy, transforms[k])
        flow.append(np.stack([qx - px, qy - py], axis=-1))
    gt = GroundTruth(frames=frames, alpha=alphas, uv=uvs, flow=np.stack(flow), background=bg,
                     sprite_rgb=rgb, sprite_alpha=alpha, transforms=transforms)
    return frames, gt


# --- metrics ----------------------------------------------------------------

def psnr(a, b):
    """Per-frame PSNR (dB, capped at 99) and their mean for (N,H,W,C) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        per = np.where(mse > 0, -10.0 * np.log10(np.where(mse > 0, mse, 1.0)), PSNR_CAP)
    per = np.minimum(per, PSNR_CAP)
    return per, float(per.mean())


def fit_affine_gauge(pred, target):
    """Least-squares affine map from predicted uv (n,2) to target coords (n,2)."""
    X = np.concatenate([pred, np.ones((len(pred), 1))], axis=1)
    M, *_ = np.linalg.lstsq(X, target, rcond=None)
    return M


def uv_error(pred_uv, gt_uv):
    """Mean post-gauge distance (in ground-truth texel units) between uv sets."""
    pred_uv = np.asarray(pred_uv, dtype=np.float64).reshape(-1, 2)
    gt_uv = np.asarray(gt_uv, dtype=np.float64).reshape(-1, 2)
    M = fit_affine_gauge(pred_uv, gt_uv)
    X = np.concatenate([pred_uv, np.ones((len(pred_uv), 1))], axis=1)
    return float(np.linalg.norm(X @ M - gt_uv, axis=1).mean())


def warp_frame(frame, flow):
    """Sample ``frame`` at pixel + flow (pixel units) with clamped bilinear lookup."""
    H, W = frame.shape[:2]
    py, px = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    qx = px + flow[..., 0]
    qy = py + flow[..., 1]
    # pixel-centre coordinates map onto the texture rect [0,W]x[0,H]
    uv = np.stack([qx.ravel(), qy.ravel()], axis=1)
    return kernels.bilinear_sample(frame, uv, (0.0, W, 0.0, H)).reshape(frame.shape)


def temporal_consistency(frames, gt, threshold=0.5):
    """Mean abs error between frame k+1 and frame k warped by ground-truth flow.

    Only foreground pixels of frame k+1 (gt alpha > threshold) are counted.
    """
    frames = np.asarray(frames, dtype=np.float64)
    errs, counts = 0.0, 0
    for k in range(len(frames) - 1):
        warped = warp_frame(frames[k], gt.flow[k])
        m = gt.alpha[k + 1] > threshold
        errs += float(np.abs(frames[k + 1][m] - warped[m]).sum())
        counts += int(m.sum()) * frames.shape[-1]
    return errs / max(counts, 1)


# --- toy corpus for the denoiser ---------------------------------------------

PALETTE = {
    "red": (0.90, 0.20, 0.15),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.95, 0.85, 0.20),
    "green": (0.20, 0.70, 0.25),
    "blue": (0.15, 0.35, 0.90),
    "purple": (0.55, 0.25, 0.75),
}


def _lighter(c, amount=0.45):
    c = np.asarray(c, dtype=np.float64)
    return tuple(c + (1.0 - c) * amount)


def denoiser_corpus(seed=0, n_sprites=24, n_textures=24, size=32):
    """Captioned 32x32 examples: textured balls on black and checker/stripe textures.

    Returns (images list, captions list). Ball crops fill most of the frame,
    like an object crop. Textures share one phase so the pattern is a
    function of position; only the colours (and checker aspect) vary.
    """
    rng = np.random.default_rng(seed)
    names = list(PALETTE)
    images, captions = [], []
    for i in range(n_sprites):
        name = names[i % len(names)]
        rgb, a = make_sprite(size, size * 0.44, (PALETTE[name], _lighter(PALETTE[name])),
                             seed=int(rng.integers(1 << 31)), wavelength=size * 0.3)
        images.append(rgb * a[..., None])
        captions.append(f"a {name} ball")
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for i in range(n_textures):
        kind = ("checker", "stripes")[i % 2]
        c0, c1 = (np.asarray(PALETTE[names[j]]) for j in rng.choice(len(names), size=2, replace=False))
        # fixed phase, period 8; checkers get a random vertical stretch so that
        # anisotropic atlas checkers are in range
        if kind == "checker":
            s_ = np.sin(2 * np.pi * x / 8.0) * np.sin(2 * np.pi * y / (8.0 * rng.uniform(1.0, 2.0)))
        else:
            s_ = np.sin(2 * np.pi * x / 8.0)
        t = 0.5 + 0.5 * np.tanh(8.0 / np.pi * s_)
        images.append((1 - t)[..., None] * c0 + t[..., None] * c1)
        captions.append(f"{kind} texture")
    return images, captions
