import json

import pytest

from ionsource.config import (PRESETS, ConfigError, ProjectConfig, apply_overrides, config_hash,
                              dump_config, from_document, load_config, to_document)


def test_defaults_round_trip():
    cfg = ProjectConfig()
    assert from_document(to_document(cfg)) == cfg
    assert from_document({}) == cfg


@pytest.mark.parametrize("name", PRESETS)
def test_presets_round_trip(name):
    cfg = load_config(name)
    assert from_document(json.loads(dump_config(cfg))) == cfg


def test_lengths_are_millimetres_in_documents():
    doc = to_document(ProjectConfig())
    assert doc["scene"]["trap"]["face_separation"] == 2.0
    cfg = load_config(None, ["scene.trap.face_separation=2.5"])
    assert cfg.scene.trap.face_separation == 2.5e-3
    # awkward values survive mm -> m -> mm unchanged
    cfg = load_config(None, ["scene.tof_plane_distance=247.3"])
    again = from_document(to_document(cfg))
    assert again.scene.tof_plane_distance == cfg.scene.tof_plane_distance


def test_unknown_key_reports_dotted_path():
    with pytest.raises(ConfigError, match=r"scene\.trap\.blade_thicknes\b"):
        from_document({"scene": {"trap": {"blade_thicknes": 1}}})


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError, match="run"):
        load_config(None, ["run.sampling=mcmc"])
    with pytest.raises(ConfigError, match="focus"):
        load_config(None, ["focus.mode=sideways"])
    with pytest.raises(ConfigError):
        load_config(None, ["run.species=Xe+"])
    with pytest.raises(ConfigError):
        load_config(None, ["scene.trap.blade_thickness=-1"])


def test_overrides():
    doc = apply_overrides({}, ["run.shots=12", "drive.dc_voltages={\"dc3\": 7}",
                               "run.species=CaO+"])
    cfg = from_document(doc)
    assert cfg.run.shots == 12
    # value maps replace the default wholesale
    assert cfg.drive.dc_voltages == {"dc3": 7}
    assert cfg.run.species == "CaO+"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["run.shots"])
    with pytest.raises(ConfigError):
        apply_overrides({"run": {"shots": 3}}, ["run.shots.x=1"])


def test_file_and_preset_sources(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"run": {"temperature": 1e-4}, "seed": 9}))
    cfg = load_config(str(p))
    assert cfg.run.temperature == 1e-4 and cfg.seed == 9
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(str(bad))
    with pytest.raises(ConfigError, match="neither a file nor a preset"):
        load_config("no_such_preset")
    assert load_config("table1.json") == load_config("table1")


def test_hash_ignores_output_only():
    a = load_config(None, output="x")
    b = load_config(None, output="y")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(load_config(None, seed=1))
    assert config_hash(a, b"extract") != config_hash(a, b"focus")


def test_run_config_from_project():
    cfg = load_config(None, ["run.species=CaO+", "run.temperature=1e-4"], seed=4)
    rc = cfg.run_config(threads=2)
    assert rc.species.label == "CaO+" and rc.seed == 4 and rc.threads == 2
    assert cfg.run_config(temperature=3e-3).temperature == 3e-3
    sweep = load_config("table1").run.temperatures()
    assert len(sweep) > 1
