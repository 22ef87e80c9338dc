"""Layered neural atlas: mapping, opacity and atlas networks over a video.

A pixel ``p = (x, y, k)`` is normalised to [-1, 1]^3 and positionally encoded.
Two mapping networks send it to background / foreground uv in [-1, 1]^2, an
opacity network gives alpha in [0, 1], and one atlas network colours uv.
The atlas network sees the two layers on disjoint half-planes: a layer's uv
is embedded as ``((u + s) / 2, v)`` with ``s = +1`` for the foreground and
``s = -1`` for the background.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .autodiff import Adam, Mlp, Tape, load_checkpoint, param_grads, save_checkpoint

log = logging.getLogger(__name__)

FG, BG = "fg", "bg"
LAYER_SIGN = {FG: 1.0, BG: -1.0}
FULL_RECT = (-1.0, 1.0, -1.0, 1.0)


class DivergenceError(RuntimeError):
    pass


@dataclass
class DecompositionConfig:
    map_freqs: int = 6  # B for the opacity network
    uv_freqs: int = 0  # B for the two uv mapping networks (a prefix of the opacity encoding)
    atlas_freqs: int = 8
    hidden: int = 64
    depth: int = 4  # hidden layers per network
    iters: int = 3000
    batch: int = 2048
    lr: float = 2e-3
    alpha_weight: float = 1.0
    moment_weight: float = 1.0  # per-frame mask-moment anchoring of the fg mapping
    fg_fraction: float = 0.5  # share of each batch drawn from masked pixels
    map_lr_scale: float = 0.05  # learning-rate multiplier for the two uv mapping networks
    warmup_iters: int = 500  # uv mappings frozen while the atlas and alpha settle
    identity_iters: int = 300
    identity_lr: float = 3e-3
    identity_scale: float = 0.9  # background uv = scale * (x, y) at init
    fg_radius: float = 0.6  # foreground init maps the mask radius to this uv radius
    seed: int = 0


@dataclass
class AtlasTexture:
    rgb: np.ndarray  # (G, G, 3); rows along v, columns along u
    alpha: np.ndarray | None = None  # (G, G)
    rect: tuple = FULL_RECT

    @property
    def size(self):
        return self.rgb.shape[0]

    def copy(self):
        return AtlasTexture(self.rgb.copy(), None if self.alpha is None else self.alpha.copy(), tuple(self.rect))


@dataclass
class AtlasModel:
    m_b: Mlp
    m_f: Mlp
    m_alpha: Mlp
    atlas: Mlp
    map_freqs: int
    atlas_freqs: int
    uv_freqs: int = 0
    frame_shape: tuple = (54, 96)  # (H, W)
    n_frames: int = 12
    config: dict = field(default_factory=dict)

    def nets(self):
        return {"m_b": self.m_b, "m_f": self.m_f, "m_alpha": self.m_alpha, "atlas": self.atlas}

    def save(self, path, seed=0, step=0):
        meta = {"map_freqs": self.map_freqs, "atlas_freqs": self.atlas_freqs, "uv_freqs": self.uv_freqs,
                "frame_shape": list(self.frame_shape), "n_frames": self.n_frames, "config": self.config}
        save_checkpoint(path, self.nets(), seed=seed, step=step, meta=meta)

    @classmethod
    def load(cls, path):
        nets, _, _, meta = load_checkpoint(path)
        return cls(nets["m_b"], nets["m_f"], nets["m_alpha"], nets["atlas"], meta["map_freqs"],
                   meta["atlas_freqs"], meta.get("uv_freqs", 0), tuple(meta["frame_shape"]), meta["n_frames"],
                   meta.get("config", {}))


# --- coordinates and encodings ----------------------------------------------

def normalize_pixels(xs, ys, ks, frame_shape, n_frames):
    """Pixel indices -> [-1, 1]^3 (pixel centres for x, y; endpoints for k)."""
    H, W = frame_shape
    x = (2.0 * np.asarray(xs, dtype=np.float64) + 1.0) / W - 1.0
    y = (2.0 * np.asarray(ys, dtype=np.float64) + 1.0) / H - 1.0
    k = 2.0 * np.asarray(ks, dtype=np.float64) / max(n_frames - 1, 1) - 1.0
    return np.stack([x, y, k], axis=-1)


def all_pixel_locations(frame_shape, n_frames):
    H, W = frame_shape
    k, y, x = np.meshgrid(np.arange(n_frames), np.arange(H), np.arange(W), indexing="ij")
    return normalize_pixels(x.ravel(), y.ravel(), k.ravel(), frame_shape, n_frames)


def positional_encode(points, B):
    """Raw coordinates followed by sin/cos at 2^l * pi, l < B.

    For 3-D points the width is 3 + 6B; per frequency the layout is the sines
    of all components then the cosines of all components.
    """
    if B < 0:
        raise ValueError("frequency count must be non-negative")
    points = np.asarray(points, dtype=np.float64)
    feats = [points]
    for l in range(B):
        s = points * (2.0 ** l * np.pi)
        feats += [np.sin(s), np.cos(s)]
    return np.concatenate(feats, axis=-1)


def positional_encode_var(tape, pts, B):
    feats = [pts]
    for l in range(B):
        s = tape.scale(pts, 2.0 ** l * np.pi)
        feats += [tape.sin(s), tape.cos(s)]
    return tape.concat(feats) if B else pts


def layer_embed(uv, layer):
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([(uv[:, 0] + LAYER_SIGN[layer]) * 0.5, uv[:, 1]], axis=1)


def _layer_embed_var(tape, uv, layer):
    # ((u + s)/2, v) == uv * (0.5, 1) + (s/2, 0)
    return tape.add(tape.mul(uv, np.array([[0.5, 1.0]])), np.array([[LAYER_SIGN[layer] * 0.5, 0.0]]))


# --- model construction -----------------------------------------------------

def make_model(config: DecompositionConfig, frame_shape, n_frames, rng=None):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if config.uv_freqs > config.map_freqs:
        raise ValueError("uv_freqs may not exceed map_freqs")
    n_uv = 3 + 6 * config.uv_freqs
    hid = [config.hidden] * config.depth
    return AtlasModel(
        m_b=Mlp([n_uv, *hid, 2], "tanh", rng=rng),
        m_f=Mlp([n_uv, *hid, 2], "tanh", rng=rng),
        m_alpha=Mlp([3 + 6 * config.map_freqs, *hid, 1], "tanh", rng=rng),
        atlas=Mlp([2 + 4 * config.atlas_freqs, *hid, 3], "tanh", rng=rng),
        map_freqs=config.map_freqs, atlas_freqs=config.atlas_freqs, uv_freqs=config.uv_freqs,
        frame_shape=tuple(frame_shape), n_frames=n_frames, config=asdict(config),
    )


def evaluate_mappings(model, points):
    """(uv_b, uv_f, alpha) for normalised pixel locations (n, 3)."""
    enc = positional_encode(points, model.map_freqs)
    alpha = 0.5 * (model.m_alpha(enc)[:, 0] + 1.0)
    enc_uv = enc[:, :3 + 6 * model.uv_freqs]
    return model.m_b(enc_uv), model.m_f(enc_uv), alpha


def atlas_color(model, uv, layer):
    enc = positional_encode(layer_embed(uv, layer), model.atlas_freqs)
    return 0.5 * (model.atlas(enc) + 1.0)


def reconstruct_pixel(model, points):
    uv_b, uv_f, alpha = evaluate_mappings(model, points)
    c_b = atlas_color(model, uv_b, BG)
    c_f = atlas_color(model, uv_f, FG)
    a = alpha[:, None]
    return (1.0 - a) * c_b + a * c_f


def reconstruct_video(model, chunk=20000):
    H, W = model.frame_shape
    pts = all_pixel_locations(model.frame_shape, model.n_frames)
    out = np.concatenate([reconstruct_pixel(model, pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
    return out.reshape(model.n_frames, H, W, 3)


def evaluate_video_mappings(model, chunk=20000):
    """uv_b, uv_f (N,H,W,2) and alpha (N,H,W) for every pixel of the video."""
    H, W = model.frame_shape
    pts = all_pixel_locations(model.frame_shape, model.n_frames)
    parts = [evaluate_mappings(model, pts[i:i + chunk]) for i in range(0, len(pts), chunk)]
    uv_b = np.concatenate([p[0] for p in parts]).reshape(model.n_frames, H, W, 2)
    uv_f = np.concatenate([p[1] for p in parts]).reshape(model.n_frames, H, W, 2)
    alpha = np.concatenate([p[2] for p in parts]).reshape(model.n_frames, H, W)
    return uv_b, uv_f, alpha


# --- training ---------------------------------------------------------------

def mask_moments(masks, frame_shape):
    """Per-frame mask centroid (N, 2) and per-axis variance (N, 2) in normalised units."""
    masks = np.asarray(masks, dtype=np.float64)
    N = masks.shape[0]
    pts = all_pixel_locations(frame_shape, N).reshape(N, -1, 3)[..., :2]
    w = masks.reshape(N, -1)
    tot = np.maximum(w.sum(axis=1), 1e-12)
    cen = (w[..., None] * pts).sum(axis=1) / tot[:, None]
    var = (w[..., None] * (pts - cen[:, None]) ** 2).sum(axis=1) / tot[:, None]
    return cen, var


def fit_identity(net, freqs, frame_shape, n_frames, iters, scale=1.0, lr=3e-3, lr_end=1e-4, batch=2048,
                 rng=None, centers=None, limit=0.95):
    """Train a mapping network towards (x, y, k) -> scale * ((x, y) - centers[k]).

    ``scale`` is a scalar or a per-axis pair.
    ``centers`` defaults to zero, i.e. the plain identity. Only pixels whose
    target lies inside ``(-limit, limit)^2`` are fitted, since a tanh output
    cannot reach beyond that anyway. The learning rate decays geometrically
    from ``lr`` to ``lr_end``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    opt = Adam(net.params, lr=lr)
    pts_all = all_pixel_locations(frame_shape, n_frames)
    target_all = pts_all[:, :2].copy()
    if centers is not None:
        target_all -= np.repeat(np.asarray(centers), frame_shape[0] * frame_shape[1], axis=0)
    target_all *= np.asarray(scale, dtype=np.float64)
    ok = np.flatnonzero(np.abs(target_all).max(axis=1) < limit)
    if len(ok) == 0:
        raise ValueError("no pixel has an identity target inside the uv range")
    for i in range(iters):
        opt.lr = lr * (lr_end / lr) ** (i / max(iters, 1))
        sel = ok[rng.integers(len(ok), size=batch)]
        tape = Tape()
        out, pv = net.record(tape, positional_encode(pts_all[sel], freqs))
        diff = tape.add(out, -target_all[sel])
        loss = tape.mean(tape.mul(diff, diff))
        opt.step(param_grads(tape.backward(loss), pv))
    return net


def decomposition_loss(tape, model, enc, target, mask=None, alpha_weight=1.0, pvars=None,
                       moments=None, moment_weight=0.0):
    """Records the reconstruction (+ optional alpha supervision) loss.

    ``moments`` is ``(S, spread_target)``: S (N, batch) averages masked batch
    points per frame; the term keeps each frame's foreground uv centred on
    the origin with the mask's (scaled) spread. Returns (loss Var, dict of
    parameter Vars per network).
    """
    pv = pvars or {}
    enc_uv = enc[:, :3 + 6 * model.uv_freqs]
    uv_b, pv["m_b"] = model.m_b.record(tape, enc_uv, pv.get("m_b"))
    uv_f, pv["m_f"] = model.m_f.record(tape, enc_uv, pv.get("m_f"))
    a_raw, pv["m_alpha"] = model.m_alpha.record(tape, enc, pv.get("m_alpha"))
    alpha = tape.scale(tape.add(a_raw, 1.0), 0.5)
    emb_b = positional_encode_var(tape, _layer_embed_var(tape, uv_b, BG), model.atlas_freqs)
    emb_f = positional_encode_var(tape, _layer_embed_var(tape, uv_f, FG), model.atlas_freqs)
    cb_raw, pv["atlas"] = model.atlas.record(tape, emb_b, pv.get("atlas"))
    cf_raw, _ = model.atlas.record(tape, emb_f, pv["atlas"])
    c_b = tape.scale(tape.add(cb_raw, 1.0), 0.5)
    c_f = tape.scale(tape.add(cf_raw, 1.0), 0.5)
    recon = tape.add(c_b, tape.mul(alpha, tape.add(c_f, tape.scale(c_b, -1.0))))
    diff = tape.add(recon, -np.asarray(target))
    loss = tape.mean(tape.mul(diff, diff))
    if mask is not None and alpha_weight > 0:
        da = tape.add(alpha, -np.asarray(mask).reshape(-1, 1))
        loss = tape.add(loss, tape.scale(tape.mean(tape.mul(da, da)), alpha_weight))
    if moments is not None and moment_weight > 0:
        S, spread_target = moments
        cen = tape.matmul(S, uv_f)  # (N, 2)
        sq = tape.sum(tape.matmul(S, tape.mul(uv_f, uv_f)), axis=1)  # (N,) second moment about 0
        spread = tape.add(sq, tape.scale(tape.sum(tape.mul(cen, cen), axis=1), -1.0))
        ds = tape.add(spread, -spread_target)
        mom = tape.add(tape.mean(tape.mul(cen, cen)), tape.mean(tape.mul(ds, ds)))
        loss = tape.add(loss, tape.scale(mom, moment_weight))
    return loss, pv


def _frame_average_matrix(kidx, weights, n_frames):
    S = np.zeros((n_frames, len(kidx)))
    S[kidx, np.arange(len(kidx))] = weights
    tot = S.sum(axis=1, keepdims=True)
    return np.divide(S, tot, out=np.zeros_like(S), where=tot > 1e-12)


def train_decomposition(frames, masks=None, config=None, callback=None):
    """Fit an AtlasModel to frames (N, H, W, 3); masks (N, H, W) optional."""
    config = config or DecompositionConfig()
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise ValueError("frames must be (N>=2, H, W, 3)")
    N, H, W, _ = frames.shape
    if masks is not None:
        masks = np.asarray(masks, dtype=np.float64)
        if masks.shape != (N, H, W):
            raise ValueError(f"mask shape {masks.shape} does not match frames {(N, H, W)}")
    rng = np.random.default_rng(config.seed)
    model = make_model(config, (H, W), N, rng=rng)
    fit_identity(model.m_b, config.uv_freqs, (H, W), N, config.identity_iters,
                 config.identity_scale, lr=config.identity_lr, rng=rng)
    centers = spread_target = None
    fg_scale = config.identity_scale
    if masks is not None and masks.max() <= 0.5:
        moment_masks = None  # nothing marked as foreground: plain identity init, no moments
    else:
        moment_masks = masks
    if moment_masks is not None:
        centers, var = mask_moments(masks, (H, W))
        # isotropic in pixels; a disk of radius R has E|p - c|^2 = R^2 / 2
        px = np.array([W / 2.0, H / 2.0])
        radius = np.sqrt(2.0 * max(float((var * px ** 2).sum(axis=1).max()), 1e-12))
        fg_scale = config.fg_radius / radius * px
        spread_target = (var * fg_scale ** 2).sum(axis=1)
    fit_identity(model.m_f, config.uv_freqs, (H, W), N, config.identity_iters,
                 fg_scale, lr=config.identity_lr, rng=rng, centers=centers)
    pts_all = all_pixel_locations((H, W), N)
    kidx_all = np.repeat(np.arange(N), H * W)
    colors = frames.reshape(-1, 3)
    mask_flat = None if masks is None else masks.reshape(-1)
    fg_idx = None if masks is None else np.flatnonzero(mask_flat > 0.5)
    n_fg = 0 if fg_idx is None or len(fg_idx) == 0 else int(config.batch * config.fg_fraction)
    nets = model.nets()
    opts = {name: Adam(net.params, lr=config.lr * (config.map_lr_scale if name in ("m_b", "m_f") else 1.0))
            for name, net in nets.items()}
    history = []
    for it in range(config.iters):
        idx = rng.integers(len(pts_all), size=config.batch - n_fg)
        if n_fg:
            idx = np.concatenate([idx, fg_idx[rng.integers(len(fg_idx), size=n_fg)]])
        enc = positional_encode(pts_all[idx], config.map_freqs)
        moments = None
        if moment_masks is not None and config.moment_weight > 0:
            moments = (_frame_average_matrix(kidx_all[idx], mask_flat[idx], N), spread_target)
        tape = Tape()
        loss, pv = decomposition_loss(tape, model, enc, colors[idx],
                                      None if mask_flat is None else mask_flat[idx], config.alpha_weight,
                                      moments=moments, moment_weight=config.moment_weight)
        lv = float(loss.value)
        if not np.isfinite(lv):
            raise DivergenceError(f"decomposition diverged at iteration {it} (seed {config.seed})")
        grads = tape.backward(loss)
        for name in nets:
            if it < config.warmup_iters and name in ("m_b", "m_f"):
                continue
            opts[name].step(param_grads(grads, pv[name]))
        history.append(lv)
        if callback is not None:
            callback(it, lv)
    model.config["history_tail"] = history[-10:]
    return model


# --- textures ---------------------------------------------------------------

def texel_centers(G, rect=FULL_RECT):
    u0, u1, v0, v1 = rect
    u = u0 + (np.arange(G) + 0.5) * (u1 - u0) / G
    v = v0 + (np.arange(G) + 0.5) * (v1 - v0) / G
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def _dilate_max(img, radius=1):
    out = img.copy()
    H, W = img.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            sh = np.zeros_like(img)
            ys = slice(max(dy, 0), H + min(dy, 0))
            yd = slice(max(-dy, 0), H + min(-dy, 0))
            xs = slice(max(dx, 0), W + min(dx, 0))
            xd = slice(max(-dx, 0), W + min(-dx, 0))
            sh[yd, xd] = img[ys, xs]
            out = np.maximum(out, sh)
    return out


def _close(img, radius):
    out = img
    for _ in range(radius):
        out = _dilate_max(out, 1)
    for _ in range(radius):
        out = -_dilate_max(-out, 1)
    return out


def discretize_atlas(model, layer, G, with_alpha=True, closing_radius=2):
    """Rasterise the atlas network for one layer onto a G x G texel grid.

    The alpha channel records visibility: for the foreground the largest
    opacity of any video pixel landing within one texel, for the background
    the largest ``1 - alpha``. A morphological closing fills the texels that
    fall between the landing points of neighbouring pixels.
    """
    if G < 2:
        raise ValueError("atlas resolution must be at least 2")
    rgb = atlas_color(model, texel_centers(G), layer).reshape(G, G, 3)
    alpha = None
    if with_alpha:
        uv_b, uv_f, a = evaluate_video_mappings(model)
        if layer == FG:
            vis = kernels.splat_max(a.ravel(), uv_f.reshape(-1, 2), G)
        else:
            vis = kernels.splat_max(1.0 - a.ravel(), uv_b.reshape(-1, 2), G)
        alpha = _close(vis, closing_radius)
    return AtlasTexture(rgb=rgb, alpha=alpha, rect=FULL_RECT)


def bilinear_sample(tex, uv):
    """Sample an AtlasTexture (or raw array) at uv with border clamping."""
    if isinstance(tex, AtlasTexture):
        return kernels.bilinear_sample(tex.rgb, uv, tex.rect)
    return kernels.bilinear_sample(tex, uv, FULL_RECT)


def static_uv_variance(model):
    """Mean over pixels of the across-frame variance of uv_b (u and v summed)."""
    uv_b, _, _ = evaluate_video_mappings(model)
    return float(uv_b.var(axis=0).sum(axis=-1).mean())
