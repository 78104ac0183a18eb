import pytest

from liverseg.config import ConfigError, RunConfig, load_run_config, parse_run_config


def test_defaults_roundtrip():
    text = RunConfig().to_text()
    back = parse_run_config(text)
    assert back == RunConfig()
    assert back.to_text() == text


def test_every_key_roundtrips_individually():
    for line in RunConfig().to_text().splitlines():
        assert parse_run_config(line).to_text() == RunConfig().to_text()


def test_overrides_and_comments():
    cfg = parse_run_config(
        "# small run\n"
        "model.input_dims = 8 16 16   # D H W\n"
        "model.kind = unet\n"
        "train.lr0 = 0.003\n"
        "augment.exclusion = templates\n"
        "phantom.dims = 8 16 16\n"
    )
    assert cfg.model.input_dims == (8, 16, 16)
    assert cfg.model_kind == "unet" and cfg.exclusion == "templates"
    assert cfg.train.lr0 == 0.003 and cfg.phantom.dims == (8, 16, 16)
    assert parse_run_config(cfg.to_text()) == cfg


def test_planes_flattened():
    cfg = RunConfig()
    line = next(l for l in cfg.to_text().splitlines() if l.startswith("phantom.planes"))
    assert len(line.split("=")[1].split()) == 16
    with pytest.raises(ConfigError):
        parse_run_config("phantom.planes = 1 2 3")


@pytest.mark.parametrize("text", [
    "train.lr = 0.1",
    "nosuch.key = 1",
    "train.epochs = ten",
    "model.kind = resnet",
    "train.epochs = 3\ntrain.epochs = 4",
    "just words",
    "train.epochs = 0",
    "model.hidden_dim = 30",
])
def test_errors(text):
    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_load(tmp_path):
    assert load_run_config(None) == RunConfig()
    p = tmp_path / "c.txt"
    RunConfig().save(p)
    assert load_run_config(p) == RunConfig()
