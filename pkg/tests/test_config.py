import pytest

from fused.config import (TABLE4_GRID, TABLE6_GRID, ConfigError, echo_config, parse_config,
                          parse_config_text)


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "empty.conf").write_text("")
    spec = parse_config(tmp_path / "empty.conf")
    c = spec.config
    assert (c.epochs, c.lr0, c.momentum, c.margin_threshold, c.temperature) == (50, 1e-4, 0.9, 0.6, 10.0)
    assert (c.lambda_kd, c.lambda_div, c.decay_power) == (1.0, 1.0, 0.75)
    assert spec.resolved_grid() == [("full", {})]


def test_range_error_names_key():
    with pytest.raises(ConfigError, match=r"adapt\.margin_threshold"):
        parse_config_text("adapt.margin_threshold = 1.5")


@pytest.mark.parametrize("text,key", [
    ("adapt.bogus = 1", "adapt.bogus"),
    ("nothing = 1", "nothing"),
    ("arch.sm.width = 3", "arch.sm.width"),
    ("data.shift.noise = 2", "data.shift.noise"),
])
def test_unknown_keys_rejected(text, key):
    with pytest.raises(ConfigError, match=rf"{key}: unknown key"):
        parse_config_text(text)


@pytest.mark.parametrize("text,key", [
    ("adapt.epochs = 2.5", "adapt.epochs"),
    ("adapt.use_kd = maybe", "adapt.use_kd"),
    ("data.shift.noise_sigma = -1", "data.shift.noise_sigma"),
    ("split.scheme = kfold", "split.scheme"),
    ("grid.x = use_kd=perhaps", "grid.x.use_kd"),
])
def test_type_and_value_errors_name_key(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config_text(text)


def test_duplicate_key_and_malformed_line():
    with pytest.raises(ConfigError, match="already set"):
        parse_config_text("adapt.lr0 = 1e-3\nadapt.lr0 = 1e-4")
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("# ok\nno equals sign here")


def test_missing_file():
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config("/nonexistent/x.conf")


def test_roundtrip_is_idempotent():
    text = """
    data.shift.noise_sigma = 10   # comment
    adapt.lr0 = 1e-3
    adapt.lr0_sm = 5e-4
    adapt.use_div = off
    arch.sm.f1 = 2
    experiment.seeds = 0, 1, 2
    experiment.grid = table4
    grid.no_kd_no_div = use_kd=false use_div=false
    """
    spec = parse_config_text(text)
    echoed = echo_config(spec)
    again = parse_config_text(echoed)
    assert again == spec
    assert echo_config(again) == echoed


def test_presets_mirror_ablation_tables():
    spec = parse_config_text("experiment.grid = table4, table6")
    names = [n for n, _ in spec.resolved_grid()]
    assert names == ["full"] + [n for n, _ in TABLE4_GRID] + [n for n, _ in TABLE6_GRID]
    assert len(TABLE4_GRID) == 5 and len(TABLE6_GRID) == 4
    assert dict(TABLE4_GRID)["no_mask_no_ce"] == {"use_consensus_mask": False, "use_ce": False}
