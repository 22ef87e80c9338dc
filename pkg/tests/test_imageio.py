import numpy as np
import pytest

from diffatlas.atlas import AtlasTexture
from diffatlas.imageio import (from_uint8, load_frames, load_image, load_mask, load_texture, save_frames,
                               save_image, save_mask, save_texture, to_uint8)


def levels(shape, seed=0):
    return np.random.default_rng(seed).integers(0, 256, shape) / 255.0


@pytest.mark.parametrize("ext", [".png", ".ppm"])
def test_rgb_round_trip_exact(tmp_path, ext):
    img = levels((7, 11, 3))
    p = tmp_path / f"a{ext}"
    save_image(p, img)
    assert np.array_equal(load_image(p), img)


@pytest.mark.parametrize("ext", [".png", ".pgm"])
def test_mask_round_trip_exact(tmp_path, ext):
    m = levels((9, 5), seed=1)
    p = tmp_path / f"m{ext}"
    save_mask(p, m)
    assert np.array_equal(load_mask(p), m)


def test_level_mapping():
    assert list(to_uint8([0.0, 1.0, 0.5, -3.0, 7.0])) == [0, 255, 128, 0, 255]
    assert from_uint8(np.array([0, 255], np.uint8)).tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        to_uint8([np.nan])


def test_binary_headers(tmp_path):
    save_image(tmp_path / "a.ppm", levels((4, 6, 3)))
    save_mask(tmp_path / "m.pgm", levels((4, 6)))
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6")
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5")


def test_cross_format(tmp_path):
    img = levels((5, 5, 3), seed=2)
    save_image(tmp_path / "a.ppm", img)
    save_image(tmp_path / "b.png", load_image(tmp_path / "a.ppm"))
    assert np.array_equal(load_image(tmp_path / "b.png"), img)


def test_format_errors(tmp_path):
    with pytest.raises(ValueError):
        save_image(tmp_path / "a.jpg", levels((2, 2, 3)))
    with pytest.raises(ValueError):
        save_image(tmp_path / "a.pgm", levels((2, 2, 3)))
    with pytest.raises(ValueError):
        save_image(tmp_path / "a.ppm", levels((2, 2)))
    with pytest.raises(ValueError):
        save_mask(tmp_path / "m.png", levels((2, 2, 3)))
    save_image(tmp_path / "rgb.png", levels((2, 2, 3)))
    with pytest.raises(ValueError):
        load_mask(tmp_path / "rgb.png")


def test_frames_round_trip(tmp_path):
    frames = levels((4, 6, 8, 3), seed=3)
    save_frames(tmp_path / "f", frames)
    assert np.array_equal(load_frames(tmp_path / "f"), frames)
    with pytest.raises(FileNotFoundError):
        load_frames(tmp_path / "f", prefix="mask")


def test_texture_round_trip(tmp_path):
    tex = AtlasTexture(levels((8, 8, 3), 4), levels((8, 8), 5), (-1.0, 1.0, -0.5, 0.5))
    save_texture(tmp_path / "t.png", tex)
    back = load_texture(tmp_path / "t.png")
    assert np.array_equal(back.rgb, tex.rgb) and np.array_equal(back.alpha, tex.alpha)
    assert back.rect == tex.rect
    save_texture(tmp_path / "u.png", AtlasTexture(tex.rgb))
    assert load_texture(tmp_path / "u.png").alpha is None
