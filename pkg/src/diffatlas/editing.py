"""Atlas-space editing helpers: object crops, masks, the first edited render, paste and fill."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .atlas import AtlasTexture, evaluate_video_mappings

MASK_LO, MASK_HI = 0.02, 0.08


@dataclass
class CropSpec:
    x0: float  # left edge of the square window (pixel units)
    y0: float  # top edge
    side: float
    height: int  # source dimensions
    width: int
    out_size: int

    @property
    def center(self):
        return (self.x0 + self.side / 2.0, self.y0 + self.side / 2.0)

    def to_dict(self):
        return asdict(self)


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    return (img[..., None], True) if img.ndim == 2 else (img, False)


def crop_window(alpha, tau=0.5, margin=0.0):
    """Square window centred on the bounding box of ``alpha >= tau``, kept inside the image."""
    alpha = np.asarray(alpha, dtype=np.float64)
    ys, xs = np.nonzero(alpha >= tau)
    if len(xs) == 0:
        raise ValueError(f"empty mask: no value >= {tau}")
    H, W = alpha.shape
    x_lo, x_hi = xs.min(), xs.max() + 1.0
    y_lo, y_hi = ys.min(), ys.max() + 1.0
    side = max(x_hi - x_lo, y_hi - y_lo) * (1.0 + margin)
    side = min(side, float(min(H, W)))
    cx, cy = (x_lo + x_hi) / 2.0, (y_lo + y_hi) / 2.0
    x0 = float(np.clip(cx - side / 2.0, 0.0, W - side))
    y0 = float(np.clip(cy - side / 2.0, 0.0, H - side))
    return x0, y0, side


def center_crop_object(image, alpha, out_size=32, tau=0.5, margin=0.0):
    """Crop the object, zero the background (premultiply by alpha), resize to out_size.

    Returns (crop (out_size, out_size, C), CropSpec).
    """
    img, flat = _as_hwc(image)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != img.shape[:2]:
        raise ValueError(f"alpha shape {alpha.shape} does not match image {img.shape[:2]}")
    x0, y0, side = crop_window(alpha, tau, margin)
    H, W = alpha.shape
    spec = CropSpec(x0, y0, side, H, W, out_size)
    obj = np.ascontiguousarray(img * alpha[..., None])
    g = (np.arange(out_size) + 0.5) * side / out_size
    vv, uu = np.meshgrid(y0 + g, x0 + g, indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    crop = kernels.bilinear_sample(obj, uv, (0.0, W, 0.0, H)).reshape(out_size, out_size, -1)
    return (crop[..., 0] if flat else crop), spec


def uncrop(crop, spec):
    """Paste a crop back at source resolution. Returns (image, coverage mask)."""
    c, flat = _as_hwc(crop)
    H, W = spec.height, spec.width
    py, px = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    inside = (px >= spec.x0) & (px < spec.x0 + spec.side) & (py >= spec.y0) & (py < spec.y0 + spec.side)
    uv = np.stack([px[inside], py[inside]], axis=1)
    rect = (spec.x0, spec.x0 + spec.side, spec.y0, spec.y0 + spec.side)
    out = np.zeros((H, W, c.shape[2]))
    out[inside] = kernels.bilinear_sample(np.ascontiguousarray(c), uv, rect)
    return (out[..., 0] if flat else out), inside


def texture_crop(tex: AtlasTexture, out_size=32, tau=0.5, margin=0.1):
    """Object crop of an atlas texture using its alpha channel."""
    if tex.alpha is None:
        raise ValueError("texture has no alpha channel")
    return center_crop_object(tex.rgb, tex.alpha, out_size, tau, margin)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _morph(img, op):
    # 3x3 flat structuring element; out-of-image samples never win
    H, W = img.shape
    fill = 0.0 if op is np.maximum else 1.0
    pad = np.pad(img, 1, constant_values=fill)
    out = img.copy()
    for dy in range(3):
        for dx in range(3):
            out = op(out, pad[dy:dy + H, dx:dx + W])
    return out


def closing(mask):
    return _morph(_morph(mask, np.maximum), np.minimum)


def extract_mask(crop, lo=MASK_LO, hi=MASK_HI):
    """Soft object mask of a crop on black: smoothstep of max-channel luminance, then closing."""
    img, _ = _as_hwc(crop)
    lum = img.max(axis=-1)
    return closing(_smoothstep((lum - lo) / (hi - lo)))


def window_mask(img, spec):
    """Object mask of an object-on-black image at source resolution, zero outside the crop window."""
    py, px = np.mgrid[0:spec.height, 0:spec.width] + 0.5
    inside = (px >= spec.x0) & (px < spec.x0 + spec.side) & (py >= spec.y0) & (py < spec.y0 + spec.side)
    return extract_mask(img) * inside


def mask_to_atlas(mask_crop, spec, tex_like: AtlasTexture):
    """Mask from a texture crop back onto the full texture grid (zero outside the crop)."""
    m, _ = uncrop(mask_crop, spec)
    return AtlasTexture(rgb=np.repeat(m[..., None], 3, axis=-1), alpha=m, rect=tuple(tex_like.rect))


def initial_edit_render(model, edited_fg, edited_bg, mask=None):
    """First edited video: textures sampled through the source mappings.

    ``mask`` is a G x G opacity grid in foreground uv space (sampled at
    M_f(p)); ``None`` keeps the source opacity M_alpha(p). Returns
    (frames (N,H,W,3), alpha (N,H,W)).
    """
    uv_b, uv_f, a_src = evaluate_video_mappings(model)
    N, H, W = a_src.shape
    ub, uf = uv_b.reshape(-1, 2), uv_f.reshape(-1, 2)
    c_b = kernels.bilinear_sample(edited_bg.rgb, ub, edited_bg.rect)
    c_f = kernels.bilinear_sample(edited_fg.rgb, uf, edited_fg.rect)
    if mask is None:
        a = a_src.reshape(-1)
    else:
        m = mask.alpha if isinstance(mask, AtlasTexture) else np.asarray(mask, dtype=np.float64)
        rect = mask.rect if isinstance(mask, AtlasTexture) else edited_fg.rect
        a = np.clip(kernels.bilinear_sample(m, uf, rect), 0.0, 1.0)
    frames = (1.0 - a)[:, None] * c_b + a[:, None] * c_f
    return frames.reshape(N, H, W, 3), a.reshape(N, H, W)


def pull_push_fill(img, known, tol=1e-6, max_iters=5000):
    """Fill unknown texels from known ones: coarse-to-fine initial guess, then
    Jacobi averaging of unknown texels until the largest update is below tol.

    Every filled value is a convex combination of known values.
    """
    img, flat = _as_hwc(img)
    known = np.asarray(known, dtype=bool)
    if known.all():
        return img[..., 0] if flat else img.copy()
    if not known.any():
        raise ValueError("nothing to fill from")
    guess = _pull_push_guess(img, known)
    out = np.where(known[..., None], img, guess)
    for _ in range(max_iters):
        nxt = kernels.pull_push_pass(out, known)
        delta = float(np.abs(nxt - out).max())
        out = nxt
        if delta < tol:
            break
    return out[..., 0] if flat else out


def _pull_push_guess(img, known):
    H, W, C = img.shape
    if known.all() or min(H, W) == 1:
        if known.any():
            mean = img[known].mean(axis=0)
            return np.where(known[..., None], img, mean)
        return img
    H2, W2 = (H + 1) // 2, (W + 1) // 2
    w = np.zeros((2 * H2, 2 * W2))
    acc = np.zeros((2 * H2, 2 * W2, C))
    w[:H, :W] = known
    acc[:H, :W] = img * known[..., None]
    w_c = w.reshape(H2, 2, W2, 2).sum(axis=(1, 3))
    acc_c = acc.reshape(H2, 2, W2, 2, C).sum(axis=(1, 3))
    known_c = w_c > 0
    coarse = np.where(known_c[..., None], acc_c / np.maximum(w_c, 1e-12)[..., None], 0.0)
    coarse = _pull_push_guess(coarse, known_c) if known_c.any() else coarse
    up = np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)[:H, :W]
    return np.where(known[..., None], img, up)


def exposed_texels(source_fg: AtlasTexture, fg_mask, radius=4, visible_tau=0.05):
    """Texels near the edited region (within ``radius``) that no source frame saw."""
    m = np.asarray(fg_mask.alpha if isinstance(fg_mask, AtlasTexture) else fg_mask, dtype=np.float64) >= 0.5
    near = m.astype(np.float64)
    for _ in range(radius):
        near = _morph(near, np.maximum)
    unseen = np.ones(m.shape, dtype=bool) if source_fg.alpha is None else source_fg.alpha < visible_tau
    return (near > 0) & ~m & unseen


def paste_and_inpaint(edited_fg: AtlasTexture, source_fg: AtlasTexture, fg_mask, undefined=None):
    """Edited texels inside the mask, source texels outside, ``undefined`` texels filled."""
    if edited_fg.rgb.shape != source_fg.rgb.shape:
        raise ValueError("edited and source textures differ in resolution")
    m = np.clip(np.asarray(fg_mask.alpha if isinstance(fg_mask, AtlasTexture) else fg_mask,
                           dtype=np.float64), 0.0, 1.0)
    if m.shape != edited_fg.rgb.shape[:2]:
        raise ValueError("mask resolution does not match textures")
    rgb = m[..., None] * edited_fg.rgb + (1.0 - m[..., None]) * source_fg.rgb
    undefined = np.zeros(m.shape, dtype=bool) if undefined is None else np.asarray(undefined, dtype=bool)
    if undefined.any() and not undefined.all():
        rgb = pull_push_fill(rgb, ~undefined)
    rgb = np.clip(rgb, 0.0, 1.0)
    alpha = None
    if source_fg.alpha is not None:
        alpha = np.maximum(source_fg.alpha, m)
    return AtlasTexture(rgb=rgb, alpha=alpha, rect=tuple(source_fg.rect))


def unpremultiply(edited_rgb, source_alpha, floor=0.05):
    """Undo the source-opacity darkening an object-on-black crop carries at the rim.

    Texels with source opacity below ``floor`` are left as they are.
    """
    a = np.asarray(source_alpha, dtype=np.float64)[..., None]
    return np.where(a >= floor, np.clip(edited_rgb / np.maximum(a, floor), 0.0, 1.0), edited_rgb)


def edited_foreground(edited_rgb, source_fg: AtlasTexture, spec):
    """Full-grid object-on-black edit to (pasted foreground texture, opacity mask grid)."""
    mask = window_mask(edited_rgb, spec)
    rgb = edited_rgb if source_fg.alpha is None else unpremultiply(edited_rgb, source_fg.alpha)
    fg = paste_and_inpaint(AtlasTexture(rgb, None, source_fg.rect), source_fg, mask,
                           exposed_texels(source_fg, mask))
    return fg, mask
