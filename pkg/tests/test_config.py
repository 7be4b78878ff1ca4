import pytest

from fusionscope.harness.config import ConfigError, load_config, parse_config

MINIMAL = {"dataset": {"manifest": "m.csv"}}


def test_defaults_build_reference_model():
    cfg = parse_config(MINIMAL)
    mc = cfg.model_config_obj()
    assert mc.strategy == "gate" and mc.input_size == 224
    tc = cfg.train_config()
    assert (tc.weights.w_g, tc.weights.w_l, tc.weights.w_f) == (0.3, 0.3, 0.4)
    assert cfg.metrics.blur_kernel == 21 and cfg.metrics.steps == 10


def test_unknown_keys_rejected_with_path():
    with pytest.raises(ConfigError, match=r"fusion\.colour"):
        parse_config({**MINIMAL, "fusion": {"colour": "red"}})
    with pytest.raises(ConfigError, match="bogus: Extra inputs"):
        parse_config({**MINIMAL, "bogus": 1})


def test_schema_violations_report_key_paths():
    with pytest.raises(ConfigError, match=r"train\.weights\.w_g"):
        parse_config({**MINIMAL, "train": {"weights": {"w_g": "heavy"}}})
    with pytest.raises(ConfigError, match=r"metrics\.blur_kernel"):
        parse_config({**MINIMAL, "metrics": {"blur_kernel": 20}})
    with pytest.raises(ConfigError, match=r"dataset\.class_names"):
        parse_config({"dataset": {"manifest": "m.csv", "class_names": ["a"]}})
    with pytest.raises(ConfigError, match="dataset"):
        parse_config({})


def test_inconsistent_backbones_rejected():
    bad = {**MINIMAL, "backbones": {"local": {"kind": "LOCAL_BAGNET_STYLE", "preset": "tiny",
                                              "local_receptive_field": 5}}}
    with pytest.raises(ConfigError, match="backbones/fusion"):
        parse_config(bad)


def test_load_config_paths_and_env(tmp_path, monkeypatch):
    path = tmp_path / "exp.toml"
    path.write_text('output_dir = "out"\n[dataset]\nmanifest = "data/m.csv"\nimage_size = 64\n'
                    '[backbones.global]\nkind = "GLOBAL_RESNET_STYLE"\npreset = "tiny"\n'
                    '[backbones.local]\nkind = "LOCAL_BAGNET_STYLE"\npreset = "tiny"\n')
    monkeypatch.delenv("FUSIONSCOPE_OUT", raising=False)
    cfg = load_config(path)
    assert cfg.manifest_path == tmp_path / "data" / "m.csv"
    assert cfg.output_path == tmp_path / "out"
    monkeypatch.setenv("FUSIONSCOPE_OUT", str(tmp_path / "elsewhere"))
    assert cfg.output_path == tmp_path / "elsewhere"


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[dataset\nmanifest=")
    with pytest.raises(ConfigError, match="malformed TOML"):
        load_config(bad)
