import pytest

from poumor import config


def test_defaults_documented():
    ref = config.reference()
    for section, keys in config.SCHEMA.items():
        for key in keys:
            assert f"| {section} | {key} |" in ref
    cfg = config.load()
    assert cfg["train"]["lr"] == 1.25e-4
    assert cfg["model"]["hidden"] == (32, 32)


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[data]\nkind = quarter-disk-poisson\ncount = 12\n[model]\nhidden = 16,8\n")
    cfg = config.load(path, ["data.count=5", "train.epochs=3"])
    assert cfg["data"]["kind"] == "quarter-disk-poisson"
    assert cfg["data"]["count"] == 5
    assert cfg["model"]["hidden"] == (16, 8)
    assert cfg["train"]["epochs"] == 3
    assert cfg["rollout"]["steps"] == 100


def test_round_trip_dump(tmp_path):
    cfg = config.load(None, ["model.keep=4", "model.zero_expert=false"])
    config.write(tmp_path / "c.ini", cfg)
    assert config.load(tmp_path / "c.ini") == cfg


@pytest.mark.parametrize("override", [
    "data.colour=red", "nosuch.key=1", "train.lr=-1", "train.lr=abc", "model.head=bayes",
    "train.objective=elbo", "no-equals-sign", "model.g_init_scale=-1",
    "data.substeps=0",
])
def test_rejects_bad_values(override):
    with pytest.raises(config.ConfigError):
        config.load(None, [override])


def test_rejects_unknown_section_in_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[optimizer]\nlr = 1\n")
    with pytest.raises(config.ConfigError):
        config.load(path)
