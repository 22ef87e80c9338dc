"""Re-fitting the foreground mapping and opacity to an edited atlas.

New networks (uv mapping + opacity, same encodings as the source model)
are first fitted to a starting mapping, then trained on reconstruction of
the first edited render, opacity supervision and local / global offset
consistency with the frozen source mapping. A second phase adds score
distillation from the denoiser on object crops of rendered frames.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .atlas import AtlasModel, all_pixel_locations, evaluate_video_mappings, positional_encode
from .autodiff import Adam, Mlp, Tape, load_checkpoint, param_grads, save_checkpoint
from .diffusion import add_noise, eps_from_v, to_model
from .editing import crop_window, initial_edit_render

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iteration", "phase", "rgb", "alpha", "off", "off_global", "sds", "total")


@dataclass
class LossWeights:
    rgb: float = 1.0
    alpha: float = 0.5
    off: float = 0.1
    off_global: float = 0.02

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass
class OptimizationConfig:
    batch: int = 2000
    iters: int = 1200
    identity_iters: int = 100
    sds_iters: int = 400
    delta_local: int = 1
    delta_global: int = 5
    lr: float = 1e-4
    pretrain_lr: float = 3e-3
    # "copy": start from the source mapping / opacity weights; "source": fit them;
    # "identity": fit (x, y)
    init: str = "copy"
    weighting: str = "one_minus_alpha_bar"  # w(i): one_minus_alpha_bar | constant
    sds_scale: float = 1.0
    sds_t_range: tuple = (0.2, 0.8)  # fraction of T
    sds_guidance: float = 1.0
    crop_only: bool = True
    outside_fraction: float = 0.2
    crop_size: int = 32
    crop_margin: float = 0.15
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("batch", "iters", "identity_iters", "sds_iters"):
            v = getattr(self, name)
            if v < 0 or (name == "batch" and v == 0):
                raise ValueError(f"{name} must be positive")
        if self.delta_local < 1 or self.delta_global < 1:
            raise ValueError("offsets must be at least one pixel")
        if self.init not in ("copy", "source", "identity"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.weighting not in ("one_minus_alpha_bar", "constant"):
            raise ValueError(f"unknown SDS weighting {self.weighting!r}")
        self.sds_t_range = tuple(self.sds_t_range)


@dataclass
class EditMappingNetworks:
    m_uv: Mlp
    m_alpha: Mlp
    uv_freqs: int
    map_freqs: int

    @classmethod
    def create(cls, model: AtlasModel, rng=None, seed=0):
        rng = np.random.default_rng(seed) if rng is None else rng
        return cls(Mlp(model.m_f.sizes, "tanh", rng=rng), Mlp(model.m_alpha.sizes, "tanh", rng=rng),
                   model.uv_freqs, model.map_freqs)

    def nets(self):
        return {"m_uv": self.m_uv, "m_alpha": self.m_alpha}

    def copy(self):
        return EditMappingNetworks(self.m_uv.copy(), self.m_alpha.copy(), self.uv_freqs, self.map_freqs)

    def encode(self, points):
        enc = positional_encode(points, self.map_freqs)
        return enc[:, :3 + 6 * self.uv_freqs], enc

    def __call__(self, points):
        """(uv, alpha) for normalised pixel locations."""
        enc_uv, enc = self.encode(points)
        return self.m_uv(enc_uv), 0.5 * (self.m_alpha(enc)[:, 0] + 1.0)

    def save(self, path, seed=0, step=0, meta=None):
        m = {"uv_freqs": self.uv_freqs, "map_freqs": self.map_freqs}
        m.update(meta or {})
        save_checkpoint(path, self.nets(), seed=seed, step=step, meta=m)

    @classmethod
    def load(cls, path):
        nets, _, _, meta = load_checkpoint(path)
        return cls(nets["m_uv"], nets["m_alpha"], meta["uv_freqs"], meta["map_freqs"])


def evaluate_edit(nets, frame_shape, n_frames, chunk=20000):
    """uv (N,H,W,2) and alpha (N,H,W) of the edit networks over the whole video."""
    H, W = frame_shape
    pts = all_pixel_locations(frame_shape, n_frames)
    parts = [nets(pts[i:i + chunk]) for i in range(0, len(pts), chunk)]
    uv = np.concatenate([p[0] for p in parts]).reshape(n_frames, H, W, 2)
    a = np.concatenate([p[1] for p in parts]).reshape(n_frames, H, W)
    return uv, a


def render_video(nets, model, edited_fg, edited_bg):
    """Final edited frames: background through M_b, foreground through the new networks."""
    uv_b, _, _ = evaluate_video_mappings(model)
    uv, a = evaluate_edit(nets, model.frame_shape, model.n_frames)
    c_b = kernels.bilinear_sample(edited_bg.rgb, uv_b.reshape(-1, 2), edited_bg.rect)
    c_f = kernels.bilinear_sample(edited_fg.rgb, uv.reshape(-1, 2), edited_fg.rect)
    af = a.reshape(-1, 1)
    return ((1.0 - af) * c_b + af * c_f).reshape(uv.shape[:-1] + (3,))


# --- pretraining -------------------------------------------------------------

def identity_pretrain(nets, iters=100, frame_shape=(54, 96), n_frames=12, uv_target=None, alpha_target=None,
                      lr=3e-3, lr_end=1e-4, batch=2000, rng=None):
    """Fit the uv network to (x, y) (or ``uv_target``) and optionally the opacity.

    ``uv_target`` / ``alpha_target`` are arrays over all pixel locations of
    the video (in ``all_pixel_locations`` order). The learning rate decays
    geometrically from ``lr`` to ``lr_end``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    pts = all_pixel_locations(frame_shape, n_frames)
    tgt = pts[:, :2] if uv_target is None else np.asarray(uv_target, dtype=np.float64).reshape(-1, 2)
    a_tgt = None if alpha_target is None else np.asarray(alpha_target, dtype=np.float64).reshape(-1)
    opt_uv = Adam(nets.m_uv.params, lr=lr)
    opt_a = Adam(nets.m_alpha.params, lr=lr)
    for i in range(iters):
        cur = lr * (lr_end / lr) ** (i / max(iters, 1))
        opt_uv.lr = opt_a.lr = cur
        sel = rng.integers(len(pts), size=batch)
        enc_uv, enc = nets.encode(pts[sel])
        tape = Tape()
        out, pv = nets.m_uv.record(tape, enc_uv)
        d = tape.add(out, -tgt[sel])
        loss = tape.mean(tape.mul(d, d))
        opt_uv.step(param_grads(tape.backward(loss), pv))
        if a_tgt is not None:
            tape = Tape()
            raw, pa = nets.m_alpha.record(tape, enc)
            da = tape.add(tape.scale(tape.add(raw, 1.0), 0.5), -a_tgt[sel].reshape(-1, 1))
            la = tape.mean(tape.mul(da, da))
            opt_a.step(param_grads(tape.backward(la), pa))
    return nets


def probe_identity_mse(nets, frame_shape=(54, 96), n_frames=12, stride=3):
    pts = all_pixel_locations(frame_shape, n_frames)[::stride]
    uv, _ = nets(pts)
    return float(((uv - pts[:, :2]) ** 2).mean())


# --- rendering and losses ----------------------------------------------------

def render_edited_pixel(tape, nets, edited_fg, enc_uv, enc, c_b, pvars=None):
    """Differentiable (1 - a) * c_b + a * fg(uv) for a batch. Returns (colour, uv, alpha, pvars)."""
    pv = pvars or {}
    uv, pv["m_uv"] = nets.m_uv.record(tape, enc_uv, pv.get("m_uv"))
    raw, pv["m_alpha"] = nets.m_alpha.record(tape, enc, pv.get("m_alpha"))
    alpha = tape.scale(tape.add(raw, 1.0), 0.5)
    c_f = tape.bilinear(edited_fg.rgb, uv, edited_fg.rect)
    c_b = np.asarray(c_b, dtype=np.float64)
    colour = tape.add(tape.mul(alpha, tape.add(c_f, -c_b)), c_b)
    return colour, uv, alpha, pv


def _mean_sq_norm(tape, d):
    """Mean over rows of the squared norm of each row."""
    return tape.scale(tape.sum(tape.mul(d, d)), 1.0 / d.value.shape[0])


def loss_rgb(tape, pred, target):
    return _mean_sq_norm(tape, tape.add(pred, -np.asarray(target, dtype=np.float64)))


def loss_alpha(tape, pred, target):
    return _mean_sq_norm(tape, tape.add(pred, -np.asarray(target, dtype=np.float64).reshape(-1, 1)))


def offset_partner(xs, ys, delta, frame_shape):
    """Pixel indices of (x + delta, y + delta), clamped inside the frame."""
    H, W = frame_shape
    return np.minimum(xs + delta, W - 1), np.minimum(ys + delta, H - 1)


def loss_offset(tape, uv_p, uv_q, ref_p, ref_q):
    """Mean ||(uv_p - uv_q) - (ref_p - ref_q)||^2; ``ref`` is the frozen source mapping."""
    ref = np.asarray(ref_p, dtype=np.float64) - np.asarray(ref_q, dtype=np.float64)
    return _mean_sq_norm(tape, tape.add(tape.add(uv_p, tape.scale(uv_q, -1.0)), -ref))


def total_loss(tape, terms, weights: LossWeights):
    """Weighted sum of recorded loss terms (keys rgb, alpha, off, off_global)."""
    if not isinstance(weights, LossWeights):
        weights = LossWeights(**weights)
    w = asdict(weights)
    acc = None
    for name, var in terms.items():
        if var is None or w[name] == 0.0:
            continue
        term = tape.scale(var, w[name])
        acc = term if acc is None else tape.add(acc, term)
    return tape.scale(tape.leaf(0.0, "const"), 0.0) if acc is None else acc


def sds_weight(t, sched, weighting="one_minus_alpha_bar"):
    return 1.0 - sched[t] if weighting == "one_minus_alpha_bar" else 1.0


def sds_gradient(image, denoiser, cond, sched, rng, t_range=(0.2, 0.8), weighting="one_minus_alpha_bar",
                 guidance=1.0, t=None, eps=None):
    """Score-distillation gradient with respect to an image in [0, 1].

    Draws t and eps (unless given), noises the image and returns
    ``(grad, t)`` with grad = w(t) * (eps_hat - eps) * d(model space)/d(image).
    The denoiser is not differentiated.
    """
    from .diffusion import guided_v
    z0 = to_model(image)
    if t is None:
        lo = max(1, int(round(t_range[0] * sched.T)))
        hi = max(lo, int(round(t_range[1] * sched.T)))
        t = int(rng.integers(lo, hi + 1))
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    z_t = add_noise(z0, eps, t, sched)
    v = guided_v(denoiser, z_t, t, sched.T, cond, guidance)
    eps_hat = eps_from_v(v, z_t, t, sched)
    return 2.0 * sds_weight(t, sched, weighting) * (eps_hat - eps), t


# --- optimisation --------------------------------------------------------------

class _Problem:
    """Precomputed per-pixel quantities shared by every iteration."""

    def __init__(self, model, edited_fg, edited_bg, mask, config):
        self.model = model
        H, W = model.frame_shape
        N = model.n_frames
        self.shape = (N, H, W)
        self.pts = all_pixel_locations((H, W), N)
        uv_b, uv_f, a_src = evaluate_video_mappings(model)
        self.uv_f = uv_f.reshape(-1, 2)
        self.a_src = a_src.reshape(-1)
        self.c_b = kernels.bilinear_sample(edited_bg.rgb, uv_b.reshape(-1, 2), edited_bg.rect)
        target, a_t = initial_edit_render(model, edited_fg, edited_bg, mask)
        self.target = target.reshape(-1, 3)
        self.a_target = a_t.reshape(-1)
        k, y, x = np.meshgrid(np.arange(N), np.arange(H), np.arange(W), indexing="ij")
        self.k, self.y, self.x = k.ravel(), y.ravel(), x.ravel()
        # object windows per frame (union of source and edited opacity)
        both = np.maximum(a_src, a_t)
        self.windows = []
        inside = np.zeros((N, H, W), dtype=bool)
        for kk in range(N):
            if both[kk].max() < 0.5:
                self.windows.append(None)
                continue
            x0, y0, side = crop_window(both[kk], 0.5, config.crop_margin)
            self.windows.append((x0, y0, side))
            inside[kk, int(y0):int(np.ceil(y0 + side)), int(x0):int(np.ceil(x0 + side))] = True
        self.inside = np.flatnonzero(inside.reshape(-1))
        self.outside = np.flatnonzero(~inside.reshape(-1))

    def flat_index(self, k, y, x):
        N, H, W = self.shape
        return (k * H + y) * W + x

    def sample(self, rng, batch, crop_only, outside_fraction):
        if not crop_only or len(self.inside) == 0 or len(self.outside) == 0:
            return rng.integers(len(self.pts), size=batch)
        n_out = int(round(batch * outside_fraction))
        return np.concatenate([self.inside[rng.integers(len(self.inside), size=batch - n_out)],
                               self.outside[rng.integers(len(self.outside), size=n_out)]])


def _record_losses(tape, nets, prob, edited_fg, idx, config):
    pts = prob.pts[idx]
    enc_uv, enc = nets.encode(pts)
    colour, uv, alpha, pv = render_edited_pixel(tape, nets, edited_fg, enc_uv, enc, prob.c_b[idx])
    terms = {"rgb": loss_rgb(tape, colour, prob.target[idx]),
             "alpha": loss_alpha(tape, alpha, prob.a_target[idx])}
    H, W = prob.shape[1:]
    for name, delta in (("off", config.delta_local), ("off_global", config.delta_global)):
        qx, qy = offset_partner(prob.x[idx], prob.y[idx], delta, (H, W))
        q = prob.flat_index(prob.k[idx], qy, qx)
        enc_q_uv, _ = nets.encode(prob.pts[q])
        uv_q, _ = nets.m_uv.record(tape, enc_q_uv, pv["m_uv"])
        terms[name] = loss_offset(tape, uv, uv_q, prob.uv_f[idx], prob.uv_f[q])
    return terms, pv


def crop_points(window, size, frame_shape, k, n_frames):
    """Normalised pixel locations of a size x size resampling of a frame window."""
    x0, y0, side = window
    H, W = frame_shape
    g = (np.arange(size) + 0.5) * side / size
    yy, xx = np.meshgrid(y0 + g, x0 + g, indexing="ij")
    kn = 2.0 * k / max(n_frames - 1, 1) - 1.0
    return np.stack([2.0 * xx.ravel() / W - 1.0, 2.0 * yy.ravel() / H - 1.0, np.full(size * size, kn)], axis=1)


def _sds_param_grads(nets, prob, edited_fg, denoiser, cond, sched, rng, config):
    """Parameter gradients of the SDS term on one random frame's object crop."""
    frames = [k for k, w in enumerate(prob.windows) if w is not None]
    if not frames:
        return None, 0.0
    k = frames[int(rng.integers(len(frames)))]
    s = config.crop_size
    pts = crop_points(prob.windows[k], s, prob.shape[1:], k, prob.shape[0])
    enc_uv, enc = nets.encode(pts)
    tape = Tape()
    uv, pv_uv = nets.m_uv.record(tape, enc_uv)
    raw, pv_a = nets.m_alpha.record(tape, enc)
    alpha = tape.scale(tape.add(raw, 1.0), 0.5)
    obj = tape.mul(alpha, tape.bilinear(edited_fg.rgb, uv, edited_fg.rect))  # object on black
    img = obj.value.reshape(s, s, 3)
    g, _ = sds_gradient(img, denoiser, cond, sched, rng, config.sds_t_range, config.weighting,
                        config.sds_guidance)
    seed = config.sds_scale * g.reshape(-1, 3) / (s * s)
    grads = tape.backward(obj, seed=seed)
    return {"m_uv": param_grads(grads, pv_uv), "m_alpha": param_grads(grads, pv_a)}, float(np.abs(g).mean())


def optimize_uv_mappings(model, edited_fg, edited_bg, mask=None, config=None, denoiser=None, cond=None,
                         sched=None, history_path=None, callback=None):
    """Train edit networks; returns (EditMappingNetworks, history rows).

    ``mask`` is the edited opacity in foreground atlas space (None keeps the
    source opacity). SDS runs in phase 2 only when a denoiser, conditioning
    and schedule are given.
    """
    config = config or OptimizationConfig()
    rng = np.random.default_rng(config.seed)
    prob = _Problem(model, edited_fg, edited_bg, mask, config)
    nets = EditMappingNetworks.create(model, rng=rng)
    if config.init == "copy":
        nets = EditMappingNetworks(model.m_f.copy(), model.m_alpha.copy(), model.uv_freqs, model.map_freqs)
    elif config.init == "source":
        identity_pretrain(nets, config.identity_iters, model.frame_shape, model.n_frames,
                          uv_target=prob.uv_f, alpha_target=prob.a_src, lr=config.pretrain_lr,
                          batch=config.batch, rng=rng)
    else:
        identity_pretrain(nets, config.identity_iters, model.frame_shape, model.n_frames,
                          lr=config.pretrain_lr, batch=config.batch, rng=rng)
    opts = {"m_uv": Adam(nets.m_uv.params, lr=config.lr), "m_alpha": Adam(nets.m_alpha.params, lr=config.lr)}
    use_sds = denoiser is not None and cond is not None and sched is not None and config.sds_iters > 0
    n_total = config.iters + (config.sds_iters if use_sds else 0)
    history = []
    for it in range(n_total):
        phase = 1 if it < config.iters else 2
        idx = prob.sample(rng, config.batch, config.crop_only, config.outside_fraction)
        tape = Tape()
        terms, pv = _record_losses(tape, nets, prob, edited_fg, idx, config)
        loss = total_loss(tape, terms, config.weights)
        lv = float(loss.value)
        if not np.isfinite(lv):
            raise FloatingPointError(
                f"uv optimisation diverged at iteration {it} (phase {phase}, seed {config.seed}): "
                + ", ".join(f"{k}={float(v.value):.3g}" for k, v in terms.items()))
        grads = tape.backward(loss)
        g = {name: param_grads(grads, pv[name]) for name in ("m_uv", "m_alpha")}
        sds_mag = 0.0
        if phase == 2:
            extra, sds_mag = _sds_param_grads(nets, prob, edited_fg, denoiser, cond, sched, rng, config)
            if extra is not None:
                g = {n: [a + b for a, b in zip(g[n], extra[n])] for n in g}
        for name in opts:
            opts[name].step(g[name])
        row = {"iteration": it, "phase": phase, **{k: float(v.value) for k, v in terms.items()},
               "sds": sds_mag, "total": lv}
        history.append(row)
        if callback is not None:
            callback(it, row)
    if history_path is not None:
        write_history_csv(history_path, history)
    return nets, history


def write_history_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in rows:
            w.writerow([r["iteration"], r["phase"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[2:]])


def read_history_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k in ("iteration", "phase") else float(v)) for k, v in r.items()} for r in rows]
