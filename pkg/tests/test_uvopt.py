import numpy as np
import pytest

from diffatlas.atlas import AtlasTexture, DecompositionConfig, all_pixel_locations, make_model
from diffatlas.autodiff import Tape, finite_diff_check
from diffatlas.diffusion import NoiseSchedule, make_schedule
from diffatlas.editing import initial_edit_render
from diffatlas.uvopt import (EditMappingNetworks, LossWeights, OptimizationConfig, _Problem, _record_losses,
                             identity_pretrain, loss_alpha, loss_offset, loss_rgb, optimize_uv_mappings,
                             probe_identity_mse, read_history_csv, render_edited_pixel, sds_gradient, total_loss,
                             write_history_csv)

from oracles import OracleDenoiser

SHAPE, N = (6, 8), 3


@pytest.fixture(scope="module")
def tiny():
    rng = np.random.default_rng(0)
    model = make_model(DecompositionConfig(hidden=16, depth=2), SHAPE, N)
    fg = AtlasTexture(rng.random((8, 8, 3)), rng.random((8, 8)))
    bg = AtlasTexture(rng.random((8, 8, 3)))
    return model, fg, bg


def copy_nets(model):
    return EditMappingNetworks(model.m_f.copy(), model.m_alpha.copy(), model.uv_freqs, model.map_freqs)


# --- identity pretraining -------------------------------------------------------

def test_pretrain_zero_iters_is_noop(tiny):
    model, _, _ = tiny
    nets = EditMappingNetworks.create(model, seed=1)
    before = [p.copy() for p in nets.m_uv.params]
    identity_pretrain(nets, 0, SHAPE, N)
    assert all(np.array_equal(a, b) for a, b in zip(before, nets.m_uv.params))


def _pretrained(seed, iters):
    model = make_model(DecompositionConfig(), (54, 96), 12)
    nets = EditMappingNetworks.create(model, seed=seed)
    identity_pretrain(nets, iters, rng=np.random.default_rng(seed))
    return probe_identity_mse(nets)


@pytest.mark.slow
def test_pretrain_default_budget():
    # 100 iterations is the published budget; at desk scale it lands near 2e-3
    assert _pretrained(0, 100) <= 5e-3


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1])
def test_pretrain_reaches_probe_bound(seed):
    assert _pretrained(seed, 3000) <= 1e-4


# --- rendering ----------------------------------------------------------------------

def test_render_zero_alpha_is_background(tiny):
    model, fg, _ = tiny
    nets = copy_nets(model)
    nets.m_alpha.zero_()
    nets.m_alpha.params[-1][...] = -50.0
    pts = all_pixel_locations(SHAPE, N)
    c_b = np.random.default_rng(2).random((len(pts), 3))
    enc_uv, enc = nets.encode(pts)
    colour, _, alpha, _ = render_edited_pixel(Tape(), nets, fg, enc_uv, enc, c_b)
    assert np.all(alpha.value == 0)
    np.testing.assert_array_equal(colour.value, c_b)


def test_copied_nets_reproduce_initial_render(tiny):
    model, fg, bg = tiny
    nets = copy_nets(model)
    prob = _Problem(model, fg, bg, None, OptimizationConfig())
    enc_uv, enc = nets.encode(prob.pts)
    colour, _, _, _ = render_edited_pixel(Tape(), nets, fg, enc_uv, enc, prob.c_b)
    eq7, _ = initial_edit_render(model, fg, bg, None)
    np.testing.assert_allclose(colour.value, eq7.reshape(-1, 3), rtol=0, atol=1e-14)


def test_render_gradient_fd(tiny):
    model, fg, bg = tiny
    nets = copy_nets(model)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.9, 0.9, (40, 3))
    c_b = rng.random((40, 3))
    w = rng.standard_normal((40, 3))

    def fn(tape):
        enc_uv, enc = nets.encode(pts)
        colour, _, _, pv = render_edited_pixel(tape, nets, fg, enc_uv, enc, c_b)
        return tape.sum(tape.mul(colour, w)), pv["m_uv"] + pv["m_alpha"]

    res = finite_diff_check([nets.m_uv, nets.m_alpha], fn, probes=40, eps=1e-6)
    assert res["checked"] > 20
    assert res["max_rel_err"] <= 1e-4


# --- losses ---------------------------------------------------------------------------

def scalar_mean_sq(a, b):
    tot = 0.0
    for ra, rb in zip(np.atleast_2d(a).tolist(), np.atleast_2d(b).tolist()):
        tot += sum((x - y) ** 2 for x, y in zip(ra, rb))
    return tot / len(np.atleast_2d(a))


def test_rgb_loss_cases():
    rng = np.random.default_rng(4)
    c = rng.random((50, 3))
    t = Tape()
    assert float(loss_rgb(t, t.leaf(c), c).value) == 0.0
    assert float(loss_rgb(t, t.leaf(c + 0.1), c).value) == pytest.approx(3 * 0.01, rel=1e-12)
    d = rng.random((50, 3))
    assert float(loss_rgb(t, t.leaf(d), c).value) == pytest.approx(scalar_mean_sq(d, c), rel=1e-12)


def test_alpha_loss_cases():
    rng = np.random.default_rng(5)
    a = (rng.random(40) < 0.5).astype(float)
    t = Tape()
    assert float(loss_alpha(t, t.leaf(a[:, None]), a).value) == 0.0
    assert float(loss_alpha(t, t.leaf(1 - a[:, None]), a).value) == 1.0
    b = rng.random(40)
    assert float(loss_alpha(t, t.leaf(b[:, None]), a).value) == pytest.approx(
        scalar_mean_sq(b[:, None], a[:, None]), rel=1e-12)


def test_offset_loss_cases():
    rng = np.random.default_rng(6)
    p, q = rng.uniform(-1, 1, (60, 2)), rng.uniform(-1, 1, (60, 2))
    t = Tape()
    assert float(loss_offset(t, t.leaf(p), t.leaf(q), p, q).value) == 0.0
    shift = rng.uniform(-0.5, 0.5, 2)
    assert float(loss_offset(t, t.leaf(p + shift), t.leaf(q + shift), p, q).value) == pytest.approx(0.0, abs=1e-28)
    doubled = float(loss_offset(t, t.leaf(2 * p), t.leaf(2 * q), p, q).value)
    assert doubled == pytest.approx(scalar_mean_sq(p, q), rel=1e-12)


def test_total_loss_cases():
    rng = np.random.default_rng(7)
    t = Tape()
    terms = {k: t.leaf(float(v)) for k, v in zip(("rgb", "alpha", "off", "off_global"), rng.random(4))}
    assert float(total_loss(t, terms, LossWeights(0, 0, 0, 0)).value) == 0.0
    assert float(total_loss(t, terms, LossWeights(1, 0, 0, 0)).value) == float(terms["rgb"].value)
    w = LossWeights(*rng.random(4))
    want = sum(getattr(w, k) * float(v.value) for k, v in terms.items())
    assert float(total_loss(t, terms, w).value) == pytest.approx(want, rel=1e-14)
    with pytest.raises(ValueError):
        LossWeights(rgb=-0.1)


def test_optimization_config_validation():
    for bad in ({"batch": 0}, {"iters": -1}, {"delta_local": 0}, {"init": "zeros"}, {"weighting": "snr"}):
        with pytest.raises(ValueError):
            OptimizationConfig(**bad)


def test_loss_fixed_point_in_problem(tiny):
    # source nets against the source-opacity render: every reconstruction term vanishes
    model, fg, bg = tiny
    prob = _Problem(model, fg, bg, None, OptimizationConfig())
    terms, _ = _record_losses(Tape(), copy_nets(model), prob, fg, np.arange(len(prob.pts)), OptimizationConfig())
    assert float(terms["off"].value) == 0.0 and float(terms["off_global"].value) == 0.0
    assert float(terms["rgb"].value) <= 1e-28 and float(terms["alpha"].value) == 0.0


# --- score distillation -----------------------------------------------------------------

def test_sds_perfect_denoiser_is_zero():
    sched = make_schedule()
    rng = np.random.default_rng(8)
    img, eps = rng.random((8, 8, 3)), rng.standard_normal((8, 8, 3))
    g, _ = sds_gradient(img, OracleDenoiser(eps, sched), None, sched, rng, t=20, eps=eps)
    assert np.max(np.abs(g)) <= 1e-12


def test_sds_zero_weight_is_zero():
    flat = NoiseSchedule(np.ones(11))  # 1 - alpha_bar == 0 at every step
    rng = np.random.default_rng(9)

    class Anything:
        def predict(self, z, t, T, cond):
            return np.full_like(z, 3.0)

    g, _ = sds_gradient(rng.random((4, 4, 3)), Anything(), None, flat, rng, t=5)
    assert np.all(g == 0)


def test_sds_chain_matches_surrogate_fd(tiny):
    # with (t, eps) frozen, the injected gradient equals the gradient of
    # <stopgrad(g), image(theta)>; check that chain by finite differences
    model, fg, _ = tiny
    nets = copy_nets(model)
    rng = np.random.default_rng(10)
    pts = rng.uniform(-0.9, 0.9, (16, 3))
    g = rng.standard_normal((16, 3))

    def image(tape):
        enc_uv, enc = nets.encode(pts)
        uv, pu = nets.m_uv.record(tape, enc_uv)
        raw, pa = nets.m_alpha.record(tape, enc)
        alpha = tape.scale(tape.add(raw, 1.0), 0.5)
        return tape.mul(alpha, tape.bilinear(fg.rgb, uv, fg.rect)), {"m_uv": pu, "m_alpha": pa}

    tape = Tape()
    obj, pv = image(tape)
    seeded = tape.backward(obj, seed=g)

    def surrogate(tape):
        o, p = image(tape)
        return tape.sum(tape.mul(o, g)), p

    res = finite_diff_check([nets.m_uv, nets.m_alpha], lambda t: (lambda s, p: (s, p["m_uv"] + p["m_alpha"]))(
        *surrogate(t)), probes=30, eps=1e-6)
    assert res["max_rel_err"] <= 1e-4
    t2 = Tape()
    s, pv2 = surrogate(t2)
    scalar = t2.backward(s)
    for name in ("m_uv", "m_alpha"):
        for a, b in zip(pv[name], pv2[name]):
            np.testing.assert_allclose(seeded[a.idx], scalar[b.idx], rtol=1e-12, atol=1e-15)


# --- the optimisation loop ---------------------------------------------------------------

def test_initialization_consistency(tiny):
    model, fg, bg = tiny
    mask = np.random.default_rng(11).random((8, 8))
    cfg = OptimizationConfig(iters=0, batch=200)
    nets, hist = optimize_uv_mappings(model, fg, bg, mask, cfg)
    assert hist == []
    prob = _Problem(model, fg, bg, mask, cfg)
    idx = np.arange(len(prob.pts))

    def loss(n):
        t = Tape()
        return float(total_loss(t, _record_losses(t, n, prob, fg, idx, cfg)[0], cfg.weights).value)

    assert abs(loss(nets) - loss(copy_nets(model))) <= 0.1 * loss(copy_nets(model))


def test_optimization_deterministic_and_history(tiny, tmp_path):
    model, fg, bg = tiny
    cfg = OptimizationConfig(iters=5, batch=64, init="identity", identity_iters=3)
    a, ha = optimize_uv_mappings(model, fg, bg, None, cfg, history_path=tmp_path / "h.csv")
    b, hb = optimize_uv_mappings(model, fg, bg, None, cfg)
    assert ha == hb
    for p, q in zip(a.m_uv.params, b.m_uv.params):
        assert np.array_equal(p, q)
    back = read_history_csv(tmp_path / "h.csv")
    assert back == ha
    write_history_csv(tmp_path / "h2.csv", back)
    assert (tmp_path / "h.csv").read_bytes() == (tmp_path / "h2.csv").read_bytes()


def test_nonfinite_loss_aborts(tiny):
    model, fg, bg = tiny
    bad = AtlasTexture(np.full((8, 8, 3), np.nan))
    with pytest.raises(FloatingPointError, match="diverged"):
        optimize_uv_mappings(model, fg, bad, None, OptimizationConfig(iters=2, batch=16))


@pytest.mark.slow
def test_phase_one_windows_non_increasing(uv_runs):
    _, hist, _ = uv_runs["full"]
    tot = np.array([r["total"] for r in hist if r["phase"] == 1])
    means = tot[:len(tot) // 200 * 200].reshape(-1, 200).mean(axis=1)
    assert np.all(means[1:] <= 1.05 * means[:-1])


@pytest.mark.slow
def test_identity_edit_tracks_source_mapping(uv_runs, decomposition):
    from diffatlas.atlas import evaluate_video_mappings
    from diffatlas.uvopt import evaluate_edit
    model, _ = decomposition
    nets, _, _ = uv_runs["full"]
    uv, _ = evaluate_edit(nets, model.frame_shape, model.n_frames)
    _, uv_f, a = evaluate_video_mappings(model)
    vis = a > 0.5
    texel = 2.0 / 128
    assert np.linalg.norm(uv[vis] - uv_f[vis], axis=-1).mean() <= texel
