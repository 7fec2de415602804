import pytest
import tomli

from qiml import config


def test_defaults_resolve_and_round_trip(tmp_path):
    cfg = config.resolve({})
    assert cfg["run"]["timestamp"].endswith("Z")
    path = tmp_path / "c.toml"
    config.save(cfg, path)
    assert config.load(path) == cfg


def test_overrides():
    cfg = config.resolve({"qcbm": {"layers": 6}}, seed=5, output_dir="o")
    assert cfg["qcbm"]["layers"] == 6 and cfg["qcbm"]["n_qubits"] == 10
    assert cfg["run"]["seed"] == 5 and cfg["run"]["output_dir"] == "o"


def test_every_default_is_materialised():
    text = config.dumps(config.resolve({}))
    flat = tomli.loads(text)
    for section, values in config.DEFAULTS.items():
        assert set(values) <= set(flat[section])


@pytest.mark.parametrize(
    "raw, match",
    [
        ({"qcbm": {"n_qbits": 3}}, "unknown config key 'qcbm.n_qbits'"),
        ({"bogus": {}}, "unknown"),
        ({"qcbm": 3}, "table"),
        ({"dynamics": {"source": "x"}}, "source"),
        ({"dynamics": {"source": "ingest"}}, "ingest_path"),
        ({"qcbm": {"mode": "noisy"}}, "mode"),
        ({"rollout": {"horizon": 0}}, "horizon"),
    ],
)
def test_invalid(raw, match):
    with pytest.raises(config.ConfigError, match=match):
        config.resolve(raw)
