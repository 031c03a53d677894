import pytest

from gaussianize.config import ConfigError, RunConfig, apply_overrides, build_config, check_schedule, load_config


def write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return str(p)


def test_defaults():
    cfg = RunConfig(input="x.ply")
    cfg.validate()
    assert cfg.views == 16 and cfg.resolution == 256 and cfg.provider == "procedural"
    assert cfg.optim.steps_per_view == 150 and cfg.optim.alpha == 1.0 and cfg.optim.beta == 10.0
    assert cfg.inpaint.L == 8 and cfg.inpaint.P0 == 8


def test_file_then_flags(tmp_path):
    path = write(tmp_path, """
[run]
input = a.ply
seed = 4
prompt = red marble   ; trailing comment
[views]
count = 8
[optim]
steps_per_view = 20
densify = yes
tau = auto
[inpaint]
L = 5
""")
    cfg = build_config(path, seed=9, views=None)
    assert cfg.input == "a.ply" and cfg.prompt == "red marble"
    assert cfg.seed == 9
    assert cfg.views == 8
    assert cfg.optim.steps_per_view == 20 and cfg.optim.densify is True and cfg.optim.tau is None
    assert cfg.inpaint.L == 5


def test_densify_flag_overrides_file(tmp_path):
    path = write(tmp_path, "[run]\ninput = a.ply\n[optim]\ndensify = false\n")
    assert build_config(path, densify=True).optim.densify is True
    assert build_config(path, densify=None).optim.densify is False


@pytest.mark.parametrize("text, match", [
    ("[run]\ninput = a.ply\nbogus = 1\n", "unknown key"),
    ("[run]\ninput = a.ply\nseed = many\n", "bad value"),
    ("[optim]\ndensify = perhaps\n", "bad value"),
    ("not an ini file", "no section headers"),
])
def test_file_errors(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(str(tmp_path / "nope.ini"))


@pytest.mark.parametrize("kw, match", [
    ({}, "no input"),
    ({"input": "a", "views": 0}, "≥ 2 cameras"),
    ({"input": "a", "provider": "magic"}, "unknown provider"),
    ({"input": "a", "provider": "remote"}, "remote.url"),
    ({"input": "a", "radius": 0.5}, "radius"),
    ({"input": "a", "resolution": 4}, "resolution"),
])
def test_validation(kw, match):
    with pytest.raises(ConfigError, match=match):
        apply_overrides(RunConfig(), **kw).validate()


def test_sub_config_errors_are_config_errors():
    cfg = RunConfig(input="a")
    cfg.optim.steps_per_view = 0
    with pytest.raises(ConfigError, match="steps_per_view"):
        cfg.validate()


def test_schedule_follows_config():
    cfg = RunConfig(input="a", views=6, resolution=32)
    s = check_schedule(cfg)
    assert len(s) == 6 and s.cameras[0].width == 32
