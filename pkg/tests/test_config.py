import json

import pytest

from antibunch import config
from antibunch.config import ConfigError


BASE = {
    "schema": 1,
    "emitter": {"t1_ps": 670, "t2_ps": 460},
    "drive": {"saturation_parameter": 0.1},
    "simulation": {"duration_ps": 1e8, "seed": 3},
}


def with_(**patch):
    cfg = json.loads(json.dumps(BASE))
    for path, value in patch.items():
        node = cfg
        keys = path.split("__")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return cfg


def test_defaults_filled():
    r = config.resolve(BASE)
    assert r["emitter"]["transition_energy_uev"] == 0.0
    assert r["drive"]["beta_per_ps2_nw"] == 1e-6
    sim = config.build_sim_config(r)
    assert sim.rng_seed == 3 and sim.channels.mode_fraction == 1.0


@pytest.mark.parametrize("patch,key", [
    ({"emitter__t3_ps": 1}, "emitter.t3_ps"),
    ({"frobnicate": {}}, "frobnicate"),
    ({"detectors": {"0": {"jitter_ps": 1}}}, "detectors.0.jitter_ps"),
    ({"channels": {"background_rate_per_ps": {"cavity": 1e-6}}},
     "channels.background_rate_per_ps.cavity"),
    ({"channels": {"mode_fraction": {"table": "x.csv", "detune": 1}}},
     "channels.mode_fraction.detune"),
])
def test_unknown_keys_named(patch, key):
    with pytest.raises(ConfigError, match=f"unknown config key '{key}'"):
        config.resolve(with_(**patch))


def test_schema_and_required_keys():
    with pytest.raises(ConfigError, match="schema"):
        config.resolve({k: v for k, v in BASE.items() if k != "schema"})
    with pytest.raises(ConfigError, match="schema"):
        config.resolve(with_(schema=2))
    cfg = with_()
    del cfg["emitter"]["t1_ps"]
    with pytest.raises(ConfigError, match="'emitter.t1_ps'"):
        config.resolve(cfg)


def test_type_errors_name_key():
    with pytest.raises(ConfigError, match="'emitter.t1_ps'"):
        config.resolve(with_(emitter__t1_ps="670"))
    with pytest.raises(ConfigError, match="'simulation.seed'"):
        config.resolve(with_(simulation__seed=1.5))


def test_physics_violations_become_config_errors():
    with pytest.raises(ConfigError, match="emitter"):
        config.build_emitter(config.resolve(with_(emitter__t2_ps=2000)))
    with pytest.raises(ConfigError, match="mutually exclusive"):
        config.resolve(with_(drive__power_nw=1.0))
    with pytest.raises(ConfigError, match="dt"):
        config.build_sim_config(config.resolve(with_(simulation__dt_ps=100.0)))


def test_malformed_json_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{oops")
    with pytest.raises(ConfigError, match="malformed JSON"):
        config.load(p)
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.json")


def test_mode_fraction_from_table(tmp_path):
    t = tmp_path / "eta.csv"
    t.write_text("detuning_uev,mode_fraction\n0,0.2\n100,0.72\n")
    r = config.resolve(with_(channels={"mode_fraction": {"table": str(t), "detuning_uev": 100}}))
    assert config.build_channels(r).mode_fraction == 0.72


def test_detectors_built():
    r = config.resolve(with_(detectors={"0": {"jitter_fwhm_ps": 282.8},
                                        "7": {"source": "emitter", "efficiency": 0.5}}))
    d = config.build_detectors(r)
    assert d[0].source == "mode" and d[7].efficiency == 0.5
    with pytest.raises(ConfigError):
        config.build_detectors(config.resolve(with_(detectors={"1": {"source": "laser"}})))
