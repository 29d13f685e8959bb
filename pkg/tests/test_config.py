import json

import pytest

from ctbody.config import PipelineConfig, build_manifest, from_dict, load_config, sha256_file
from ctbody.errors import ConfigError, IoError


def test_round_trip(tmp_path):
    cfg = PipelineConfig()
    cfg.gmm.outlier_weight = 0.1
    cfg.pose.target_size = (64, 27)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = load_config(path)
    assert back == cfg and back.pose.target_size == (64, 27)


def test_strict_keys_and_types(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict(PipelineConfig, {"gmm": {"outlier_wieght": 0.1}})
    with pytest.raises(ConfigError, match="number"):
        from_dict(PipelineConfig, {"seed": "7"})
    with pytest.raises(ConfigError, match="integer"):
        from_dict(PipelineConfig, {"seed": 1.5})
    with pytest.raises(ConfigError, match="true or false"):
        from_dict(PipelineConfig, {"use_landmarks": 1})
    with pytest.raises(ConfigError, match="null"):
        from_dict(PipelineConfig, {"seed": None})
    assert from_dict(PipelineConfig, {"height_m": None}).height_m is None
    with pytest.raises(ConfigError):
        from_dict(PipelineConfig, {"mix": {"mode": "median"}})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(IoError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "neg.json").write_text(json.dumps({"shape_refits": -1}))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "neg.json")


def test_semantic_hash_ignores_paths():
    a, b = PipelineConfig(), PipelineConfig()
    b.paths.output = "/elsewhere"
    assert a.semantic_hash() == b.semantic_hash()
    b.seed = 3
    assert a.semantic_hash() != b.semantic_hash()


def test_manifest(tmp_path):
    (tmp_path / "in.txt").write_text("x")
    out = tmp_path / "out"
    out.mkdir()
    (out / "r.json").write_text("{}")
    m = build_manifest("cmd", PipelineConfig(), {"a": tmp_path / "in.txt"}, [out / "r.json"], out)
    assert m["inputs"]["a"]["sha256"] == sha256_file(tmp_path / "in.txt")
    assert list(m["outputs"]) == ["r.json"]
    assert set(m["versions"]) >= {"ctbody", "numpy", "scipy", "scikit-image", "python"}
    assert "time" not in json.dumps(m)
