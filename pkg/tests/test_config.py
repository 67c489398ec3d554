import pytest

from gapolab.config import ConfigError, ExperimentConfig, from_dict, load, schema


def test_defaults_valid():
    cfg = from_dict({})
    assert cfg.train.G == 32 and cfg.train.kl_beta == 0.0 and cfg.train.batch_size == 8
    assert cfg.eval.list_samples == 100 and cfg.eval.open_samples == 500
    assert cfg.dataset.min_len == cfg.dataset.max_len == 8


def test_seed_propagates():
    assert from_dict({"seed": 9}).train.seed == 9


@pytest.mark.parametrize("data,needle", [
    ({"train": {"clip_epsilon": 0}}, "train.clip_epsilon"),
    ({"trian": {}}, "trian"),
    ({"train": {"G": 1}}, "train.G"),
    ({"dataset": {"heldout_ratio": 1.5}}, "dataset.heldout_ratio"),
    ({"reward": "VIBES"}, "reward"),
    ({"eval": {"list_samples": 0}}, "eval"),
    ({"policy": {"backend": "transformer"}}, "policy.backend"),
    ({"train": {"nope": 1}}, "train.nope"),
    ({"train": 3}, "train"),
])
def test_errors_name_the_field(data, needle):
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        from_dict(data)


def test_yaml_round_trip(tmp_path):
    import yaml
    cfg = ExperimentConfig(seed=3)
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert load(path).to_dict() == from_dict(cfg.to_dict()).to_dict()


def test_bad_yaml_and_missing(tmp_path):
    (tmp_path / "bad.yaml").write_text("a: [")
    with pytest.raises(ConfigError):
        load(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.yaml")


def test_schema_lists_sections():
    s = schema()
    assert {"train", "dataset", "eval", "policy", "base"} <= set(s)
    assert "clip_epsilon" in s["train"]


def test_output_root_override(monkeypatch, tmp_path):
    monkeypatch.setenv("GAPOLAB_OUTPUT_ROOT", str(tmp_path))
    assert from_dict({"output_dir": "x"}).resolved_output_dir() == tmp_path / "x"
