import json
import math

import pytest

from SCV2 import utils
from SCV2.config import RunConfig, coerce, load_config, parse_flat, preset
from SCV2.density import GradientSource


def test_defaults_are_valid():
    config = RunConfig().validate()
    assert config.densify.gradient_source is GradientSource.SSIM_ONLY
    assert config.trim.tune_ratio == 0.1
    assert config.compress.ratio == 0.4


def test_flat_text_round_trip():
    config = RunConfig().with_values({"seed": "3", "densify.gradient_source": "total", "eval.tau": "0.02"})
    assert config.seed == 3
    assert config.densify.gradient_source is GradientSource.TOTAL
    assert config.eval.tau == 0.02
    assert RunConfig().with_values(parse_flat(config.dumps())) == config


def test_json_round_trip():
    config = RunConfig().with_values({"eval.tau_max": "inf", "mesh.depth_truncation": "none"})
    data = json.loads(config.to_json())
    assert data["eval"]["tau_max"] == "inf"
    assert data["mesh"]["depth_truncation"] is None
    values = {
        f"{section}.{key}": value
        for section, inner in data.items()
        if isinstance(inner, dict)
        for key, value in inner.items()
    }
    assert math.isinf(RunConfig().with_values(values).eval.tau_max)


def test_parse_flat_comments_and_errors():
    text = "# header\nseed = 4  # inline\n\ntrain.iterations=10\n"
    assert parse_flat(text) == {"seed": "4", "train.iterations": "10"}
    with pytest.raises(utils.ConfigError, match="run.cfg:1"):
        parse_flat("seed 4\n", "run.cfg")
    with pytest.raises(utils.ConfigError, match="repeated"):
        parse_flat("seed = 1\nseed = 2\n")


def test_unknown_keys_name_the_field():
    with pytest.raises(utils.ConfigError) as info:
        RunConfig().with_values({"train.nope": 1})
    assert info.value.field == "train.nope"
    with pytest.raises(utils.ConfigError, match="unknown section"):
        RunConfig().with_values({"bogus.key": 1})
    with pytest.raises(utils.ConfigError):
        RunConfig().with_values({"colour": 1})


@pytest.mark.parametrize(
    "kind, raw, expected",
    [
        (bool, "Yes", True),
        (bool, "off", False),
        (int, "12", 12),
        (int, 3.0, 3),
        (float, "1e-3", 1e-3),
    ],
)
def test_coerce(kind, raw, expected):
    assert coerce("k", raw, kind) == expected


@pytest.mark.parametrize("kind, raw", [(bool, "maybe"), (int, "1.5"), (int, 2.5), (float, True), (GradientSource, "X")])
def test_coerce_rejects(kind, raw):
    with pytest.raises(utils.ConfigError):
        coerce("k", raw, kind)


def test_presets():
    assert preset("town") == RunConfig()
    street = preset("street")
    assert street.train.position_lr == 8e-5
    assert street.densify.densify_interval == 200
    with pytest.raises(utils.ConfigError, match="unknown preset"):
        preset("city")


def test_load_config_layers(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("preset = street\nseed = 5\ntrain.iterations = 300\n")
    config = load_config(path, environ={})
    assert (config.seed, config.train.iterations, config.densify.densify_interval) == (5, 300, 200)

    from_env = load_config(path, environ={"SCV2_SEED": "9", "SCV2_THREADS": "2"})
    assert (from_env.seed, from_env.threads) == (9, 2)

    explicit = load_config(path, {"seed": 11, "threads": None}, environ={"SCV2_SEED": "9"})
    assert explicit.seed == 11 and explicit.threads == 1

    assert load_config("street", environ={}).train.position_lr == 8e-5


def test_load_config_json_and_errors(tmp_path):
    (tmp_path / "run.json").write_text(json.dumps({"seed": 2, "blocks": {"grid_x": 3}}))
    config = load_config(tmp_path / "run.json", environ={})
    assert config.blocks.grid_x == 3 and config.seed == 2

    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(utils.ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json", environ={})
    with pytest.raises(utils.MissingArtifactError):
        load_config(tmp_path / "missing.cfg", environ={})
    with pytest.raises(utils.ConfigError) as info:
        load_config(overrides={"densify.omega": "0"}, environ={})
    assert info.value.field == "densify.omega"
    assert info.value.exit_code == 2
