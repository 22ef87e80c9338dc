"""Run directories, the run manifest and the seven pipeline stages.

Layout of ``runs/<name>/``::

    config.yaml  manifest.json
    frames_src/  atlases/  frames_edit/  checkpoints/  metrics/

A stage writes into a private staging directory and its files are moved
into place only when it finishes, so a failed stage leaves nothing behind.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import subprocess
import time

import numpy as np

from . import __version__
from .atlas import (BG, FG, AtlasModel, DivergenceError, discretize_atlas, evaluate_video_mappings,
                    reconstruct_video, static_uv_variance, train_decomposition)
from .config import PipelineConfig, load_config, save_config
from .diffusion import (Denoiser, Embedders, edit_background_atlas, edit_crop, finetune_denoiser, make_schedule,
                        train_denoiser)
from .editing import (CropSpec, center_crop_object, edited_foreground, initial_edit_render, texture_crop,
                      uncrop)
from .imageio import (load_frames, load_image, load_mask, load_texture, save_frames, save_image, save_mask,
                      save_texture)
from .synth import denoiser_corpus, generate_synthetic_video, psnr, temporal_consistency, uv_error
from .uvopt import EditMappingNetworks, evaluate_edit, optimize_uv_mappings, read_history_csv, render_video

STAGES = ("synth", "decompose", "edit-atlas", "edit-bg", "optimize-uv", "render", "eval")

# stages whose completed outputs each stage reads
REQUIRES = {
    "synth": (),
    "decompose": ("synth",),
    "edit-atlas": ("synth", "decompose"),
    "edit-bg": ("decompose", "edit-atlas"),
    "optimize-uv": ("decompose", "edit-atlas", "edit-bg"),
    "render": ("decompose", "edit-atlas", "edit-bg", "optimize-uv"),
    "eval": ("synth", "decompose", "edit-atlas", "edit-bg", "optimize-uv", "render"),
}

MANIFEST = "manifest.json"
CONFIG = "config.yaml"


class MissingInputError(RuntimeError):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def version_id():
    """Package version, plus the git commit when run from a checkout."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Run:
    """A run directory and its manifest."""

    def __init__(self, root, config: PipelineConfig | None = None):
        self.root = os.path.abspath(root)
        cfg_path = os.path.join(self.root, CONFIG)
        self.manifest = self._read_manifest()
        if config is None:
            config = load_config(cfg_path) if os.path.exists(cfg_path) else PipelineConfig()
        if self.manifest.get("config_digest") not in (None, config.digest()):
            # a different configuration invalidates everything computed so far
            self.manifest["stages"] = {}
        self.config = config
        self.manifest.setdefault("stages", {})

    def _persist(self):
        # nothing touches the disk until a stage is about to run
        os.makedirs(self.root, exist_ok=True)
        save_config(self.path(CONFIG), self.config)
        self.manifest.update({"version": version_id(), "config": self.config.to_dict(),
                              "config_digest": self.config.digest()})
        self._write_manifest()

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def _read_manifest(self):
        p = os.path.join(self.root, MANIFEST)
        if not os.path.exists(p):
            return {}
        with open(p) as f:
            return json.load(f)

    def _write_manifest(self):
        _atomic_write(self.path(MANIFEST), json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def completed(self, stage):
        rec = self.manifest["stages"].get(stage)
        if not rec or rec.get("status") != "completed":
            return False
        return all(os.path.exists(self.path(p)) for p in rec.get("outputs", {}))

    def check_inputs(self, stage):
        missing = [s for s in REQUIRES[stage] if not self.completed(s)]
        if missing:
            raise MissingInputError(f"stage {stage!r} needs completed stage(s) {', '.join(missing)} "
                                    f"in {self.root}")

    def _dependents(self, stage):
        out, frontier = set(), {stage}
        while frontier:
            nxt = {s for s in STAGES if REQUIRES[s] and set(REQUIRES[s]) & frontier} - out
            out |= nxt
            frontier = nxt
        return out

    def run_stage(self, stage):
        self.check_inputs(stage)
        self._persist()
        inputs = {}
        for s in REQUIRES[stage]:
            for p in self.manifest["stages"][s]["outputs"]:
                inputs[p] = sha256_file(self.path(p))
        staging = self.path(f".staging-{stage}")
        shutil.rmtree(staging, ignore_errors=True)
        os.makedirs(staging)
        t0 = time.perf_counter()
        try:
            info = STAGE_FUNCS[stage](self, StageOutput(staging)) or {}
            outputs = []
            for dirpath, _, files in os.walk(staging):
                for name in files:
                    rel = os.path.relpath(os.path.join(dirpath, name), staging)
                    outputs.append(rel)
            outputs.sort()
            for rel in outputs:
                dst = self.path(rel)
                os.makedirs(os.path.dirname(dst), exist_ok=True)
                os.replace(os.path.join(staging, rel), dst)
        finally:
            shutil.rmtree(staging, ignore_errors=True)
        for s in self._dependents(stage):
            self.manifest["stages"].pop(s, None)
        self.manifest["stages"][stage] = {
            "status": "completed",
            "inputs": inputs,
            "outputs": {rel: sha256_file(self.path(rel)) for rel in outputs},
            "wall_time": round(time.perf_counter() - t0, 3),
            "config_digest": self.config.digest(),
            **info,
        }
        self._write_manifest()
        return self.manifest["stages"][stage]

    def run_all(self, resume=False, log=None):
        for stage in STAGES:
            if resume and self.completed(stage):
                if log:
                    log(f"{stage}: up to date")
                continue
            rec = self.run_stage(stage)
            if log:
                log(f"{stage}: done in {rec['wall_time']:.1f} s")


class StageOutput:
    """Paths inside a stage's staging directory."""

    def __init__(self, root):
        self.root = root

    def __call__(self, *parts):
        p = os.path.join(self.root, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p


# --- loaders shared by stages ------------------------------------------------

def _load_source(run):
    frames = load_frames(run.path("frames_src"), "frame")
    masks = load_frames(run.path("frames_src"), "mask")
    return frames, masks


def _load_gt(run):
    with np.load(run.path("checkpoints", "ground_truth.npz")) as z:
        return {k: z[k] for k in z.files}


def _schedule(cfg):
    s = cfg.schedule
    return make_schedule(s.T, s.beta_min, s.beta_max)


def _embedders(cfg):
    return Embedders(cfg.denoiser.cond_dim // 2, seed=0)


def _load_mask_grid(run):
    return load_mask(run.path("atlases", "fg_mask.png"))


# --- stages ------------------------------------------------------------------

def stage_synth(run, out):
    frames, gt = generate_synthetic_video(run.config.section("scene"))
    save_frames(out("frames_src"), frames, "frame")
    save_frames(out("frames_src"), gt.alpha, "mask")
    np.savez(out("checkpoints", "ground_truth.npz"), frames=gt.frames, alpha=gt.alpha, uv=gt.uv, flow=gt.flow)
    return {}


def stage_decompose(run, out):
    frames, masks = _load_source(run)
    model = train_decomposition(frames, masks, run.config.section("decomposition"))
    model.save(out("checkpoints", "atlas_model.ckpt"))
    G, r = run.config.atlas.size, run.config.atlas.closing_radius
    save_texture(out("atlases", "source_fg.png"), discretize_atlas(model, FG, G, closing_radius=r))
    save_texture(out("atlases", "source_bg.png"), discretize_atlas(model, BG, G, closing_radius=r))
    return {}


def stage_edit_atlas(run, out):
    cfg = run.config
    e = cfg.edit
    src = load_texture(run.path("atlases", "source_fg.png"))
    crop, spec = texture_crop(src, out_size=cfg.denoiser.size, margin=e.crop_margin)
    premult = src.rgb * src.alpha[..., None]
    info = {"crop_spec": spec.to_dict(), "mode": e.mode}
    save_image(out("atlases", "source_crop.png"), crop)
    if e.mode == "identity":
        edited_rgb = premult
    else:
        sched = _schedule(cfg)
        emb = _embedders(cfg)
        base = Denoiser.create(cfg.section("denoiser"))
        images, captions = denoiser_corpus(cfg.seeds()["corpus"], cfg.corpus.n_sprites, cfg.corpus.n_textures,
                                           cfg.denoiser.size)
        conds = [emb(c) for c in captions]
        hist = train_denoiser(base, images, conds, sched, cfg.section("denoiser_train"))
        base.save(out("checkpoints", "denoiser_base.ckpt"), step=len(hist))
        frames, masks = _load_source(run)
        ks = np.unique(np.linspace(0, len(frames) - 1, max(e.n_references, 1)).round().astype(int))
        refs = [center_crop_object(frames[k], masks[k], cfg.denoiser.size)[0] for k in ks]
        ft = finetune_denoiser(base, crop, e.source_caption, refs, sched, emb, steps=e.finetune_steps,
                               lr=e.finetune_lr, img_noise_cap=e.img_noise_cap, seed=cfg.seeds()["finetune"])
        ft.save(out("checkpoints", "denoiser_ft.ckpt"), step=e.finetune_steps)
        edited = edit_crop(ft, crop, emb(e.source_caption, refs[0]), emb(e.target_caption, refs[0]), sched,
                           scale=e.guidance)
        save_image(out("atlases", "edited_crop.png"), edited)
        up, inside = uncrop(edited, spec)
        edited_rgb = np.where(inside[..., None], np.clip(up, 0.0, 1.0), 0.0)
        info["denoiser_final_loss"] = float(np.mean(hist[-20:]))
    fg, mask = edited_foreground(edited_rgb, src, spec)
    save_texture(out("atlases", "edited_fg.png"), fg)
    save_mask(out("atlases", "fg_mask.png"), mask)
    return info


def stage_edit_bg(run, out):
    cfg = run.config
    e = cfg.edit
    bg = load_texture(run.path("atlases", "source_bg.png"))
    if e.mode == "diffusion" and e.edit_bg:
        base = Denoiser.load(run.path("checkpoints", "denoiser_base.ckpt"))
        bg = edit_background_atlas(bg, base, _embedders(cfg)(e.bg_caption), _schedule(cfg),
                                   strength=e.bg_strength, scale=e.bg_guidance, seed=cfg.seeds()["edit_bg"])
    save_texture(out("atlases", "edited_bg.png"), bg)
    return {}


def stage_optimize_uv(run, out):
    cfg = run.config
    model = AtlasModel.load(run.path("checkpoints", "atlas_model.ckpt"))
    fg = load_texture(run.path("atlases", "edited_fg.png"))
    bg = load_texture(run.path("atlases", "edited_bg.png"))
    mask = _load_mask_grid(run)
    den = cond = sched = None
    ft_path = run.path("checkpoints", "denoiser_ft.ckpt")
    if cfg.edit.mode == "diffusion" and os.path.exists(ft_path):
        den = Denoiser.load(ft_path)
        sched = _schedule(cfg)
        cond = _embedders(cfg)(cfg.edit.target_caption, load_image(run.path("atlases", "edited_crop.png")))
    nets, hist = optimize_uv_mappings(model, fg, bg, mask, cfg.section("uvopt"), denoiser=den, cond=cond,
                                      sched=sched, history_path=out("metrics", "uv_history.csv"))
    nets.save(out("checkpoints", "edit_nets.ckpt"), seed=cfg.seeds()["uvopt"], step=len(hist))
    return {"iterations": len(hist)}


def stage_render(run, out):
    model = AtlasModel.load(run.path("checkpoints", "atlas_model.ckpt"))
    nets = EditMappingNetworks.load(run.path("checkpoints", "edit_nets.ckpt"))
    fg = load_texture(run.path("atlases", "edited_fg.png"))
    bg = load_texture(run.path("atlases", "edited_bg.png"))
    save_frames(out("frames_edit"), render_video(nets, model, fg, bg), "frame")
    return {}


METRIC_FIELDS = ("metric", "value")


def compute_metrics(run):
    """Metric name -> value for a run whose render stage is complete."""
    gt = _load_gt(run)
    src, _ = _load_source(run)
    model = AtlasModel.load(run.path("checkpoints", "atlas_model.ckpt"))
    nets = EditMappingNetworks.load(run.path("checkpoints", "edit_nets.ckpt"))
    edit = load_frames(run.path("frames_edit"), "frame")
    fg = load_texture(run.path("atlases", "edited_fg.png"))
    bg = load_texture(run.path("atlases", "edited_bg.png"))
    fgm = gt["alpha"] > 0.5
    _, uv_f, _ = evaluate_video_mappings(model)
    uv_t, _ = evaluate_edit(nets, model.frame_shape, model.n_frames)
    eq7, _ = initial_edit_render(model, fg, bg, _load_mask_grid(run))
    hist = [r for r in read_history_csv(run.path("metrics", "uv_history.csv")) if r["phase"] == 1]

    class _G:  # temporal_consistency only reads flow and alpha
        flow, alpha = gt["flow"], gt["alpha"]

    m = {
        "recon_psnr": psnr(reconstruct_video(model), gt["frames"])[1],
        "static_bg_uv_var": static_uv_variance(model),
        "source_uv_error": uv_error(uv_f[fgm], gt["uv"][fgm]),
        "edit_uv_error": uv_error(uv_t[fgm], gt["uv"][fgm]),
        "initial_edit_psnr_vs_source": psnr(eq7, src)[1],
        "edit_psnr_vs_source": psnr(edit, src)[1],
        "temporal_error_source": temporal_consistency(src, _G),
        "temporal_error_edit": temporal_consistency(edit, _G),
    }
    if hist:
        m["uv_loss_initial"] = hist[0]["total"]
        m["uv_loss_final"] = hist[-1]["total"]
        m["uv_loss_ratio"] = hist[-1]["total"] / max(hist[0]["total"], 1e-300)
    return m


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for k, v in metrics.items():
            w.writerow([k, f"{v:.6g}"])


def read_metrics_csv(path):
    with open(path, newline="") as f:
        return {r["metric"]: float(r["value"]) for r in csv.DictReader(f)}


def stage_eval(run, out):
    m = compute_metrics(run)
    write_metrics_csv(out("metrics", "metrics.csv"), m)
    with open(out("metrics", "summary.txt"), "w") as f:
        width = max(len(k) for k in m)
        for k, v in m.items():
            f.write(f"{k:<{width}}  {v:.4f}\n")
    return {}


STAGE_FUNCS = {
    "synth": stage_synth,
    "decompose": stage_decompose,
    "edit-atlas": stage_edit_atlas,
    "edit-bg": stage_edit_bg,
    "optimize-uv": stage_optimize_uv,
    "render": stage_render,
    "eval": stage_eval,
}

__all__ = ["STAGES", "REQUIRES", "Run", "MissingInputError", "DivergenceError", "compute_metrics",
           "read_metrics_csv", "write_metrics_csv", "CropSpec"]
