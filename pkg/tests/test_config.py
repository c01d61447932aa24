import json

import pytest

from xsit import config as cfgmod


class TestLoadConfig:
    def test_defaults(self):
        cfg = cfgmod.load_config()
        assert cfg["encoder"]["dim"] == 48
        assert cfg["train"]["epochs"] == 30
        assert cfg == cfgmod.DEFAULTS
        assert cfg is not cfgmod.DEFAULTS

    def test_file_merge(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"encoder": {"dim": 32},
                                 "train": {"lr": 3e-4}}))
        cfg = cfgmod.load_config(str(p))
        assert cfg["encoder"]["dim"] == 32
        assert cfg["train"]["lr"] == 3e-4
        assert cfg["encoder"]["depth"] == 4  # untouched default

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"nope": {}}))
        with pytest.raises(cfgmod.ConfigError, match="section"):
            cfgmod.load_config(str(p))

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"nope": 1}}))
        with pytest.raises(cfgmod.ConfigError, match="train.nope"):
            cfgmod.load_config(str(p))

    def test_overrides_win_over_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"epochs": 5}}))
        cfg = cfgmod.load_config(str(p), {"train.epochs": 7})
        assert cfg["train"]["epochs"] == 7

    def test_override_coerces_type(self):
        cfg = cfgmod.load_config(overrides={"train.lr": "0.001"})
        assert cfg["train"]["lr"] == 0.001
        assert isinstance(cfg["train"]["lr"], float)

    def test_bad_override_key(self):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load_config(overrides={"train.nope": 1})


class TestTrainConfig:
    def test_from_dict(self):
        t = cfgmod.train_config(cfgmod.load_config())
        assert t.epochs == 30 and t.projection_period == 5

    def test_rejects_bad_values(self):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.TrainConfig(projection_period=0)
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.TrainConfig(epochs=-1)
