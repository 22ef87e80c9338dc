"""Small pixel-space conditional diffusion model for atlas crops.

The denoiser is a per-pixel MLP over a local patch of the noisy image, a
patch of a pooled (coarser) copy for context, an encoding of the pixel
position, a timestep embedding and the conditioning vectors. It predicts
v; eps and z0 are recovered from v before any DDIM update. Images live in
[-1, 1] inside this module (``to_model`` / ``from_model`` convert).
"""
from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .autodiff import Adam, Mlp, Tape, load_checkpoint, param_grads, save_checkpoint

log = logging.getLogger(__name__)


# --- schedule and parameterisation -------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray  # index 0 is t=0 (=1), index t for t=1..T

    @property
    def T(self):
        return len(self.alpha_bar) - 1

    def __getitem__(self, t):
        return float(self.alpha_bar[t])


DESK_BETAS = (1e-4, 0.4)  # top end raised so 50 steps reach (nearly) pure noise


def make_schedule(T=50, beta_min=DESK_BETAS[0], beta_max=DESK_BETAS[1]):
    """Linear betas; alpha_bar_t = prod_{i<=t} (1 - beta_i), alpha_bar_0 = 1."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"invalid beta range ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar=ab)


def _check_t(t, sched, lo=1):
    if not (lo <= t <= sched.T):
        raise ValueError(f"timestep {t} outside [{lo}, {sched.T}]")


def add_noise(z0, eps, t, sched):
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {eps.shape}")
    _check_t(t, sched)
    a = sched[t]
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def v_target(z0, eps, t, sched):
    a = sched[t]
    return math.sqrt(a) * eps - math.sqrt(1.0 - a) * z0


def eps_from_v(v, z_t, t, sched):
    a = sched[t]
    return math.sqrt(a) * v + math.sqrt(1.0 - a) * z_t


def z0_from_v(v, z_t, t, sched):
    a = sched[t]
    return math.sqrt(a) * z_t - math.sqrt(1.0 - a) * v


def v_parameterization(z0, eps, z_t, t, sched):
    """(v target, eps recovered from it, z0 recovered from it)."""
    v = v_target(z0, eps, t, sched)
    return v, eps_from_v(v, z_t, t, sched), z0_from_v(v, z_t, t, sched)


def ddim_step(z_t, v_hat, t, sched, t_prev=None):
    """Deterministic update t -> t_prev (default t - 1) from a v prediction."""
    _check_t(t, sched)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ValueError(f"target timestep {t_prev} must lie in [0, {t})")
    eps = eps_from_v(v_hat, z_t, t, sched)
    return ddim_step_eps(z_t, eps, t, t_prev, sched)


def ddim_step_eps(z_t, eps, t, t_prev, sched):
    a_t, a_p = sched[t], sched[t_prev]
    coef = math.sqrt(1.0 / a_p - 1.0) - math.sqrt(1.0 / a_t - 1.0)
    return math.sqrt(a_p / a_t) * z_t + math.sqrt(a_p) * coef * eps


def ddim_invert_step(z_t, v_hat, t, sched, t_next=None):
    """Inversion update t -> t_next (default t + 1); v_hat is predicted at t."""
    _check_t(t, sched, lo=0)
    t_next = t + 1 if t_next is None else t_next
    if not t < t_next <= sched.T:
        raise ValueError(f"target timestep {t_next} must lie in ({t}, {sched.T}]")
    eps = eps_from_v(v_hat, z_t, t, sched)
    return ddim_invert_step_eps(z_t, eps, t, t_next, sched)


def ddim_invert_step_eps(z_t, eps, t, t_next, sched):
    a_t, a_n = sched[t], sched[t_next]
    coef = math.sqrt(1.0 / a_n - 1.0) - math.sqrt(1.0 / a_t - 1.0)
    return math.sqrt(a_n / a_t) * z_t + math.sqrt(a_n) * coef * eps


def cfg_combine(v_uncond, v_cond, scale):
    if scale < 0:
        raise ValueError("guidance scale must be non-negative")
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    v_cond = np.asarray(v_cond, dtype=np.float64)
    if v_uncond.shape != v_cond.shape:
        raise ValueError("shape mismatch")
    return v_uncond + scale * (v_cond - v_uncond)


def to_model(img):
    return 2.0 * np.asarray(img, dtype=np.float64) - 1.0


def from_model(z):
    return 0.5 * (np.asarray(z, dtype=np.float64) + 1.0)


# --- conditioning ------------------------------------------------------------

def _seeded_normal(key, seed, dim):
    h = hashlib.blake2b(f"{seed}:{key}".encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(h, "little")).standard_normal(dim)


def tokenize(text):
    return re.findall(r"[a-z0-9]+", text.lower())


class TextEmbedder:
    """Bag of seeded random token vectors, normalised to unit length."""

    def __init__(self, dim=16, seed=0):
        self.dim = dim
        self.seed = seed

    def __call__(self, text):
        toks = tokenize(text)
        if not toks:
            return np.zeros(self.dim)
        v = sum(_seeded_normal(tok, self.seed, self.dim) for tok in toks)
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


class ImageEmbedder:
    """Mean over patches of tanh(random projection of the patch).

    Images are resampled to ``size`` x ``size`` first so the embedding does
    not depend on input resolution.
    """

    def __init__(self, dim=16, seed=0, patch=4, size=32):
        self.dim = dim
        self.seed = seed
        self.patch = patch
        self.size = size
        rng = np.random.default_rng(seed + 7919)
        self.proj = rng.standard_normal((patch * patch * 3, dim)) / patch

    def __call__(self, img):
        img = resize(np.asarray(img, dtype=np.float64), self.size, self.size)
        p, s = self.patch, self.size
        patches = img.reshape(s // p, p, s // p, p, 3).transpose(0, 2, 1, 3, 4).reshape(-1, p * p * 3)
        return np.tanh((patches - 0.5) @ self.proj).mean(axis=0)


@dataclass
class Conditioning:
    c_txt: np.ndarray
    c_img: np.ndarray
    null_txt: bool = False
    null_img: bool = False

    def vector(self):
        t = np.zeros_like(self.c_txt) if self.null_txt else self.c_txt
        i = np.zeros_like(self.c_img) if self.null_img else self.c_img
        return np.concatenate([t, i])

    def null(self):
        return Conditioning(self.c_txt, self.c_img, True, True)


class Embedders:
    def __init__(self, dim=16, seed=0):
        self.text = TextEmbedder(dim, seed)
        self.image = ImageEmbedder(dim, seed)

    def __call__(self, caption=None, image=None):
        d = self.text.dim
        c_txt = self.text(caption) if caption else np.zeros(d)
        c_img = self.image(image) if image is not None else np.zeros(d)
        return Conditioning(c_txt, c_img, caption is None, image is None)


def noise_image_embedding(c_img, level, rng, cap=50, T_emb=1000):
    """Corrupt an image embedding to ``level`` of a T_emb-step schedule.

    Levels above ``cap`` are rejected.
    """
    if not 0 <= level <= cap:
        raise ValueError(f"image-embedding noise level {level} exceeds cap {cap}")
    if level == 0:
        return np.array(c_img, dtype=np.float64)
    sched = _embedding_schedule(T_emb)
    a = sched[level]
    return math.sqrt(a) * c_img + math.sqrt(1.0 - a) * rng.standard_normal(np.shape(c_img))


_EMB_SCHED = {}


def _embedding_schedule(T):
    if T not in _EMB_SCHED:
        _EMB_SCHED[T] = make_schedule(T, 1e-4, 0.02)
    return _EMB_SCHED[T]


# --- image helpers -----------------------------------------------------------

def resize(img, out_h, out_w):
    """Bilinear resample of an (H, W, C) or (H, W) image to (out_h, out_w)."""
    img = np.asarray(img, dtype=np.float64)
    flat = img.ndim == 2
    tex = img[..., None] if flat else img
    H, W = tex.shape[:2]
    if (H, W) == (out_h, out_w):
        return img.copy()
    v = (np.arange(out_h) + 0.5) * H / out_h
    u = (np.arange(out_w) + 0.5) * W / out_w
    vv, uu = np.meshgrid(v, u, indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    out = kernels.bilinear_sample(np.ascontiguousarray(tex), uv, (0.0, W, 0.0, H)).reshape(out_h, out_w, -1)
    return out[..., 0] if flat else out


def _patches(img, r):
    """(H, W, C) -> (H*W, (2r+1)^2 * C) edge-replicated neighbourhoods."""
    H, W, C = img.shape
    pad = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    cols = [pad[dy:dy + H, dx:dx + W] for dy in range(2 * r + 1) for dx in range(2 * r + 1)]
    return np.concatenate(cols, axis=-1).reshape(H * W, -1)


def _pool_up(img, f):
    """Average-pool by ``f`` then nearest-upsample back (H, W divisible by f)."""
    H, W, C = img.shape
    p = img.reshape(H // f, f, W // f, f, C).mean(axis=(1, 3))
    return np.repeat(np.repeat(p, f, axis=0), f, axis=1)


# --- denoiser ----------------------------------------------------------------

@dataclass
class DenoiserConfig:
    size: int = 32
    radius: int = 1  # patch half-width at full resolution
    pool: int = 4  # pooling factor of the context patch
    grid: int = 4  # the whole image average-pooled to grid x grid, shared by all pixels
    pos_freqs: int = 3
    time_freqs: int = 4
    cond_dim: int = 32  # text + image embedding width
    hidden: int = 128
    depth: int = 3
    seed: int = 0

    def n_features(self):
        patch = (2 * self.radius + 1) ** 2 * 3
        return 2 * patch + 3 * self.grid ** 2 + (2 + 4 * self.pos_freqs) + (1 + 2 * self.time_freqs) + self.cond_dim


@dataclass
class Denoiser:
    net: Mlp
    config: DenoiserConfig = field(default_factory=DenoiserConfig)

    @classmethod
    def create(cls, config=None, rng=None):
        config = config or DenoiserConfig()
        rng = np.random.default_rng(config.seed) if rng is None else rng
        sizes = [config.n_features()] + [config.hidden] * config.depth + [3]
        net = Mlp(sizes, "identity", rng=rng)
        # conditioning enters through zero weights, so a net that never sees
        # a condition in training ignores it at sampling time too
        net.params[0][-config.cond_dim:] = 0.0
        return cls(net, config)

    def copy(self):
        return Denoiser(self.net.copy(), DenoiserConfig(**asdict(self.config)))

    def features(self, z, t, T, cond_vec):
        """Per-pixel input rows for one image z (H, W, 3) at timestep t."""
        c = self.config
        H, W, _ = z.shape
        if H % c.pool or W % c.pool or H % c.grid or W % c.grid:
            raise ValueError(f"image size {(H, W)} not divisible by pool factors {c.pool}, {c.grid}")
        local = _patches(z, c.radius)
        ctx = _patches(_pool_up(z, c.pool), c.radius)
        glob = z.reshape(c.grid, H // c.grid, c.grid, W // c.grid, 3).mean(axis=(1, 3)).ravel()
        y, x = np.mgrid[0:H, 0:W].astype(np.float64)
        pos = np.stack([(2 * x.ravel() + 1) / W - 1, (2 * y.ravel() + 1) / H - 1], axis=1)
        pf = [pos]
        for l in range(c.pos_freqs):
            s = pos * (2.0 ** l * np.pi)
            pf += [np.sin(s), np.cos(s)]
        tau = t / T
        tf = [tau] + [f(2.0 ** l * np.pi * tau) for l in range(c.time_freqs) for f in (np.sin, np.cos)]
        n = H * W
        cond_vec = np.asarray(cond_vec, dtype=np.float64)
        if cond_vec.shape != (c.cond_dim,):
            raise ValueError(f"conditioning width {cond_vec.shape} != {c.cond_dim}")
        return np.concatenate([local, ctx, np.tile(glob, (n, 1)), *pf, np.tile(np.concatenate([tf, cond_vec]), (n, 1))],
                              axis=1)

    def predict(self, z, t, T, cond):
        """v prediction for a single image; ``cond`` is a Conditioning or vector."""
        vec = cond.vector() if isinstance(cond, Conditioning) else cond
        return self.net(self.features(z, t, T, vec)).reshape(z.shape)

    def save(self, path, step=0, meta=None):
        m = {"denoiser": asdict(self.config)}
        m.update(meta or {})
        save_checkpoint(path, {"denoiser": self.net}, seed=self.config.seed, step=step, meta=m)

    @classmethod
    def load(cls, path):
        nets, _, _, meta = load_checkpoint(path)
        return cls(nets["denoiser"], DenoiserConfig(**meta["denoiser"]))


def guided_v(net, z, t, T, cond, scale):
    """Classifier-free guided v; scale 1 evaluates the conditional branch only."""
    v_c = net.predict(z, t, T, cond)
    if scale == 1.0:
        return v_c
    v_u = net.predict(z, t, T, cond.null())
    return cfg_combine(v_u, v_c, scale)


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    lr_end: float = 1e-4
    batch: int = 4  # images per step
    cfg_dropout: float = 0.1
    img_noise_max: int = 0  # largest image-embedding corruption level drawn per example
    seed: int = 0


def train_denoiser(denoiser, images, conds, sched, config=None, callback=None):
    """Fit v-prediction on (image in [0,1], Conditioning) pairs. Returns loss history.

    ``conds`` is a list matching ``images``, or a callable ``rng -> (i, cond)``
    returning the condition for example i per draw (used for per-draw
    reference frames).
    """
    config = config or TrainConfig()
    if len(images) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    opt = Adam(denoiser.net.params, lr=config.lr)
    data = [to_model(im) for im in images]
    T = sched.T
    hist = []
    for step in range(config.steps):
        if config.steps > 1:
            opt.lr = config.lr * (config.lr_end / config.lr) ** (step / (config.steps - 1))
        rows, targets = [], []
        for _ in range(config.batch):
            i = int(rng.integers(len(data)))
            cond = conds(rng, i) if callable(conds) else conds[i]
            if config.img_noise_max > 0 and not cond.null_img:
                lvl = int(rng.integers(config.img_noise_max + 1))
                cond = Conditioning(cond.c_txt, noise_image_embedding(cond.c_img, lvl, rng,
                                                                      cap=config.img_noise_max),
                                    cond.null_txt, cond.null_img)
            if rng.random() < config.cfg_dropout:
                cond = cond.null()
            t = int(rng.integers(1, T + 1))
            eps = rng.standard_normal(data[i].shape)
            z_t = add_noise(data[i], eps, t, sched)
            rows.append(denoiser.features(z_t, t, T, cond.vector()))
            targets.append(v_target(data[i], eps, t, sched).reshape(-1, 3))
        x = np.concatenate(rows)
        y = np.concatenate(targets)
        tape = Tape()
        out, pv = denoiser.net.record(tape, x)
        d = tape.add(out, -y)
        loss = tape.mean(tape.mul(d, d))
        lv = float(loss.value)
        if not np.isfinite(lv):
            raise FloatingPointError(f"denoiser training diverged at step {step} (seed {config.seed})")
        opt.step(param_grads(tape.backward(loss), pv))
        hist.append(lv)
        if callback is not None:
            callback(step, lv)
    return hist


def finetune_denoiser(base, source_crop, caption, reference_crops, sched, embedders, steps=150, lr=1e-5,
                      img_noise_cap=50, seed=0, batch=4):
    """One-shot fine-tune of a copy of ``base`` on a single source crop.

    Every draw picks a random reference crop (object on black) as the image
    condition, corrupted to a random level up to ``img_noise_cap``.
    """
    if len(reference_crops) == 0:
        raise ValueError("no reference frames for the image condition")
    if not 0 <= img_noise_cap <= 50:
        raise ValueError(f"image-embedding noise cap {img_noise_cap} exceeds 50")
    net = base.copy()
    if steps == 0:
        return net
    c_txt = embedders.text(caption)
    refs = [embedders.image(r) for r in reference_crops]

    def draw(rng, _i):
        return Conditioning(c_txt, refs[int(rng.integers(len(refs)))])

    cfg = TrainConfig(steps=steps, lr=lr, lr_end=lr, batch=batch, cfg_dropout=0.1,
                      img_noise_max=img_noise_cap, seed=seed)
    train_denoiser(net, [source_crop], draw, sched, cfg)
    return net


# --- sampling and inversion --------------------------------------------------

def timesteps(sched, steps):
    """Descending integer timesteps from T to 0 using ``steps`` DDIM updates."""
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must lie in [1, {sched.T}]")
    return [int(round(x)) for x in np.linspace(sched.T, 0, steps + 1)]


def sample(net, cond, sched, steps=None, scale=1.0, init=None, t_start=None, rng=None):
    """DDIM from ``init`` (model space, at t_start, default T) down to t=0.

    Returns the final latent in model space ([-1, 1] nominal, unclamped).
    """
    steps = sched.T if steps is None else steps
    t_start = sched.T if t_start is None else t_start
    if init is None:
        rng = np.random.default_rng(0) if rng is None else rng
        init = rng.standard_normal((net.config.size, net.config.size, 3))
    z = np.array(init, dtype=np.float64)
    if t_start == 0:
        return z
    ts = [int(round(x)) for x in np.linspace(t_start, 0, max(1, round(steps * t_start / sched.T)) + 1)]
    for t, tp in zip(ts[:-1], ts[1:]):
        v = guided_v(net, z, t, sched.T, cond, scale)
        z = ddim_step(z, v, t, sched, tp)
    return z


def invert(net, z0, cond, sched, steps=None, scale=1.0, t_end=None):
    """DDIM inversion of a clean model-space image up to t_end (default T).

    The prediction used for step t -> t' is evaluated at the current latent
    with the timestep label t' (the usual approximation, since the latent at
    t' is unknown).
    """
    steps = sched.T if steps is None else steps
    t_end = sched.T if t_end is None else t_end
    ts = [int(round(x)) for x in np.linspace(0, t_end, max(1, round(steps * t_end / sched.T)) + 1)]
    z = np.array(z0, dtype=np.float64)
    for t, tn in zip(ts[:-1], ts[1:]):
        v = guided_v(net, z, tn, sched.T, cond, scale)
        eps = eps_from_v(v, z, tn, sched)
        z = ddim_invert_step_eps(z, eps, t, tn, sched)
    return z


def edit_crop(net, image, src_cond, tgt_cond, sched, scale=3.0, steps=None):
    """Invert ``image`` ([0,1]) under the source condition, resample under the target."""
    zT = invert(net, to_model(image), src_cond, sched, steps)
    return from_model(sample(net, tgt_cond, sched, steps, scale, init=zT))


def edit_background_atlas(tex, net, cond, sched, strength=0.5, scale=3.0, seed=0):
    """SDEdit on a background texture: noise to ceil(strength*T), sample down.

    The texture is edited at the denoiser's resolution and the change is
    upsampled and added back, so a vanishing strength leaves the input
    (nearly) untouched at full resolution.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError("strength must lie in (0, 1]")
    from .atlas import AtlasTexture
    rgb = tex.rgb if isinstance(tex, AtlasTexture) else np.asarray(tex, dtype=np.float64)
    G0, G1 = rgb.shape[:2]
    s = net.config.size
    small = resize(rgb, s, s)
    t0 = int(math.ceil(strength * sched.T))
    rng = np.random.default_rng(seed)
    z = add_noise(to_model(small), rng.standard_normal(small.shape), t0, sched)
    out_small = from_model(sample(net, cond, sched, sched.T, scale, init=z, t_start=t0))
    delta = resize(out_small - small, G0, G1)
    out = np.clip(rgb + delta, 0.0, 1.0)
    if isinstance(tex, AtlasTexture):
        return AtlasTexture(out, None if tex.alpha is None else tex.alpha.copy(), tuple(tex.rect))
    return out


def stripe_score(img):
    """Fraction of variance explained by the column means.

    Vertical stripes score ~1; checkers, noise and flat images score low.
    """
    g = np.asarray(img, dtype=np.float64)
    if g.ndim == 3:
        g = g.mean(axis=-1)
    total = float(((g - g.mean()) ** 2).sum())
    resid = float(((g - g.mean(axis=0, keepdims=True)) ** 2).sum())
    return 1.0 - resid / total if total > 1e-12 else 0.0
