"""8-bit image and mask I/O (binary PPM/PGM and PNG via Pillow), textures with sidecars."""
from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .atlas import AtlasTexture

_FORMATS = {".ppm": "PPM", ".pgm": "PPM", ".pnm": "PPM", ".png": "PNG"}


def _format(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in _FORMATS:
        raise ValueError(f"unsupported image extension {ext!r} (use .png, .ppm or .pgm)")
    return _FORMATS[ext]


def to_uint8(img):
    """[0,1] floats -> 8-bit, rounding to the nearest level."""
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(arr):
    return np.asarray(arr, dtype=np.float64) / 255.0


def save_image(path, img):
    """Write an (H,W,3) RGB image or an (H,W) mask in [0,1]."""
    a = to_uint8(img)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 3 and a.shape[2] != 3:
        raise ValueError(f"expected 3 channels, got {a.shape[2]}")
    if a.ndim not in (2, 3):
        raise ValueError(f"expected (H,W) or (H,W,3), got shape {a.shape}")
    if a.ndim == 3 and str(path).lower().endswith(".pgm"):
        raise ValueError("PGM holds single-channel masks only")
    if a.ndim == 2 and str(path).lower().endswith(".ppm"):
        raise ValueError("PPM holds RGB images only; use .pgm for masks")
    Image.fromarray(a, mode="L" if a.ndim == 2 else "RGB").save(path, format=_format(path))


def load_image(path):
    """Read RGB as (H,W,3) or grayscale as (H,W), values in [0,1]."""
    _format(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return from_uint8(np.array(im))


def save_mask(path, mask):
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    save_image(path, m)


def load_mask(path):
    m = load_image(path)
    if m.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel mask")
    return m


def save_frames(directory, frames, prefix="frame", ext=".png"):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for k, f in enumerate(frames):
        p = os.path.join(directory, f"{prefix}_{k:03d}{ext}")
        save_image(p, f)
        paths.append(p)
    return paths


def load_frames(directory, prefix="frame", ext=".png"):
    names = sorted(n for n in os.listdir(directory) if n.startswith(prefix + "_") and n.endswith(ext))
    if not names:
        raise FileNotFoundError(f"no {prefix}_*{ext} files in {directory}")
    return np.stack([load_image(os.path.join(directory, n)) for n in names])


def save_texture(path, tex: AtlasTexture):
    """PNG of the rgb grid, ``<stem>_alpha.png`` for the alpha, ``<stem>.json`` sidecar."""
    stem = os.path.splitext(str(path))[0]
    save_image(stem + ".png", tex.rgb)
    meta = {"size": int(tex.rgb.shape[0]), "rect": [float(x) for x in tex.rect], "alpha": tex.alpha is not None}
    if tex.alpha is not None:
        save_mask(stem + "_alpha.png", tex.alpha)
    with open(stem + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return [stem + ".png", stem + ".json"] + ([stem + "_alpha.png"] if tex.alpha is not None else [])


def load_texture(path):
    stem = os.path.splitext(str(path))[0]
    with open(stem + ".json") as f:
        meta = json.load(f)
    rgb = load_image(stem + ".png")
    alpha = load_mask(stem + "_alpha.png") if meta.get("alpha") else None
    return AtlasTexture(rgb=rgb, alpha=alpha, rect=tuple(meta["rect"]))
