import pytest

from diffatlas.config import (CONFIG_VERSION, ConfigError, PipelineConfig, config_from_dict, fixture_config,
                              load_config, save_config)


def test_defaults_round_trip(tmp_path):
    cfg = PipelineConfig()
    save_config(tmp_path / "c.yaml", cfg)
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()


def test_fixture_round_trip(tmp_path):
    cfg = fixture_config(seed=3)
    save_config(tmp_path / "c.yaml", cfg)
    assert load_config(tmp_path / "c.yaml") == cfg


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("")
    assert load_config(tmp_path / "c.yaml") == PipelineConfig()


def test_partial_override():
    cfg = config_from_dict({"decomposition": {"iters": 10}, "uvopt": {"weights": {"off": 0.0}}})
    assert cfg.decomposition.iters == 10 and cfg.decomposition.batch == 2048
    assert cfg.uvopt.weights.off == 0.0 and cfg.uvopt.weights.rgb == 1.0


def test_seeds_spread_over_sections():
    cfg = config_from_dict({"seed": 10})
    s = cfg.seeds()
    assert len(set(s.values())) == len(s)
    assert cfg.section("decomposition").seed == s["decomposition"]
    assert cfg.decomposition.seed == 0  # the stored section is untouched
    assert cfg.digest() != PipelineConfig().digest()


@pytest.mark.parametrize("data", [
    {"decompositon": {}},
    {"decomposition": {"iterz": 5}},
    {"decomposition": {"iters": "many"}},
    {"decomposition": {"iters": 2.5}},
    {"decomposition": {"iters": True}},
    {"edit": {"edit_bg": 1}},
    {"edit": {"mode": "magic"}},
    {"uvopt": {"weights": {"rgb": -1.0}}},
    {"uvopt": {"sds_t_range": [0.1]}},
    {"schedule": "fifty"},
    {"seed": -1},
    {"seed": "zero"},
    {"version": "99"},
    [1, 2],
])
def test_rejects_bad_input(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_bad_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("decomposition: {iters: [1,\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")


def test_version_written():
    assert f"version: '{CONFIG_VERSION}'" in PipelineConfig().to_yaml()
