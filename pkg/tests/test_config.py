import pytest

from trd.config import RunConfig, from_dict, load_config
from trd.exceptions import ConfigError


def test_defaults():
    c = RunConfig()
    assert (c.trainer.epochs, c.trainer.batch_size, c.trainer.learning_rate) == (200, 16, 0.005)
    assert c.resolution == 64 and c.bottleneck_size == 4 and c.pixel_sigma == 1.0
    full = from_dict(overrides={"backbone.profile": "full"})
    assert full.resolution == 256 and full.bottleneck_size == 8 and full.pixel_sigma == 4.0


def test_string_overrides_are_coerced():
    c = from_dict(overrides={"cf.bottleneck_size": "2", "ca.enabled": "false", "trainer.learning_rate": "1e-3",
                             "data.blob_radius": "[2, 3]", "backbone.weights_path": "w.pth"})
    assert c.cf.bottleneck_size == 2 and c.ca.enabled is False
    assert c.trainer.learning_rate == 1e-3 and c.data.blob_radius == [2, 3]
    assert c.backbone.weights_path == "w.pth"


@pytest.mark.parametrize("overrides", [
    {"trainer.epoch": 3}, {"nosection.x": 1}, {"score.fusion": "max"}, {"ca.expansion": 3},
    {"backbone.profile": "tiny"}, {"ca.enabled": "maybe"}, {"data.anomaly_mix": [1, 1, 1]},
    {"metrics.pro_fpr_limit": 0}, {"trainer.epochs": 0},
])
def test_invalid_configs(overrides):
    with pytest.raises(ConfigError):
        from_dict(overrides=overrides)


def test_layering(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("trainer:\n  epochs: 7\n  seed: 3\nscore:\n  fusion: product\n")
    c = load_config(f, {"trainer.seed": 5}, base={"trainer": {"epochs": 1, "batch_size": 2}})
    assert (c.trainer.epochs, c.trainer.seed, c.trainer.batch_size) == (7, 5, 2)
    assert c.score.fusion == "product"
    assert from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_fingerprints():
    a, b = RunConfig(), from_dict(overrides={"score.fusion": "product"})
    assert a.fingerprint() != b.fingerprint()
    assert a.model_fingerprint() == b.model_fingerprint()
    assert a.model_fingerprint() != from_dict(overrides={"ca.enabled": False}).model_fingerprint()


@pytest.mark.parametrize("key,value", [("trainer.epochs", "ten"), ("trainer.epochs", "2.5"),
                                       ("score.sigma", "[1]"), ("cf.bottleneck_size", "big")])
def test_wrongly_typed_values(key, value):
    with pytest.raises(ConfigError):
        from_dict(overrides={key: value})
