import pytest

from mar.config import ConfigError, load_config, parse_kv, resolve, to_text
from mar.data import SyntheticSpec
from mar.trainer import TrainConfig


def test_parse_kv_comments_and_blanks():
    text = "# header\nlambda1 = 0.1  # trailing\n\n  seed=3\n"
    assert parse_kv(text) == {"lambda1": "0.1", "seed": "3"}


def test_parse_kv_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_kv("just words\n")
    with pytest.raises(ConfigError):
        parse_kv("= 3\n")


def test_resolve_types_and_shared_keys():
    cfg, spec = resolve({"seed": "11", "d_in": "8", "lambda2": "3", "noise_sigma": "0.2", "mining": "feature"})
    assert cfg.seed == spec.seed == 11
    assert cfg.d_in == spec.d_in == 8
    assert cfg.lambda2 == 3.0 and isinstance(cfg.lambda2, float)
    assert spec.noise_sigma == 0.2 and cfg.mining == "feature"


def test_resolve_errors():
    with pytest.raises(ConfigError):
        resolve({"lamda1": "1"})
    with pytest.raises(ConfigError):
        resolve({"batch_size": "many"})


def test_overrides_win(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("lambda1 = 0.5\ntrain_epochs = 3\n")
    cfg, _ = load_config(str(path), ["lambda1=0.25"])
    assert cfg.lambda1 == 0.25 and cfg.train_epochs == 3
    with pytest.raises(ConfigError):
        load_config(None, ["lambda1"])


def test_text_round_trip():
    cfg = TrainConfig(lambda1=0.123, seed=9, d_in=12)
    spec = SyntheticSpec(seed=9, d_in=12, noise_sigma=0.01)
    assert resolve(parse_kv(to_text(cfg, spec))) == (cfg, spec)
