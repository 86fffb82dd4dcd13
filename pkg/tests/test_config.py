import pytest

from coreecho import config as cfgmod
from coreecho.config import ConfigKeyError, SCHEMA, read_config, resolve, write_config


def test_defaults_cover_schema():
    d = cfgmod.defaults()
    assert set(d) == set(SCHEMA)
    assert d["tau"] == 1.0 and d["batch_size"] == 16 and d["clip_frames"] == 36


def test_round_trip(tmp_path):
    values = resolve(overrides={"seed": 7, "widths": (4, 8), "lr": 3e-4, "stage2_lr": None})
    write_config(tmp_path / "c.cfg", values)
    back = read_config(tmp_path / "c.cfg")
    assert back == values


def test_comments_dashes_and_lists(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# run\nembed-dim = 32  # small\n\nbetas = 0.8, 0.99\nstage2_lr = none\n")
    assert read_config(path) == {"embed_dim": 32, "betas": (0.8, 0.99), "stage2_lr": None}


def test_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("COREECHO_SEED", "99")
    file_values = {"seed": 5, "lr": 1e-3, "tau": 2.0}
    out = resolve(file_values, {"lr": 1e-2, "tau": None})
    assert out["seed"] == 5 and out["lr"] == 1e-2 and out["tau"] == 2.0
    assert out["dropout"] == SCHEMA["dropout"][1]


def test_seed_env_fallback(monkeypatch):
    monkeypatch.setenv("COREECHO_SEED", "12")
    assert resolve()["seed"] == 12
    monkeypatch.delenv("COREECHO_SEED")
    assert resolve()["seed"] == 0


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigKeyError):
        resolve({"learning_rate": 1.0})
    (tmp_path / "c.cfg").write_text("frobnicate = 3\n")
    with pytest.raises(ConfigKeyError):
        read_config(tmp_path / "c.cfg")


def test_malformed_lines(tmp_path):
    (tmp_path / "c.cfg").write_text("lr 0.1\n")
    with pytest.raises(ConfigKeyError):
        read_config(tmp_path / "c.cfg")
    with pytest.raises(ConfigKeyError):
        cfgmod.parse_value("batch_size", "many")


def test_builders():
    values = resolve(overrides={"clip_frames": 8, "stride": 2, "widths": (4, 8), "temporal_strides": (2, 2),
                                "embed_dim": 6, "augment": "none"})
    assert cfgmod.sampler_config(values).span == 15
    assert cfgmod.augment_policy(values).mode == "none"
    enc = cfgmod.encoder_config(values, 16, 16, 3)
    assert enc.clip_shape == (8, 16, 16, 3) and enc.embed_dim == 6
    assert cfgmod.train_config(values).tau == 1.0
