import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spinphonon.config import ConfigError, RunConfig, apply_override
from spinphonon.coupling import Geometry
from spinphonon.files import (RESULT_COLUMNS, atomic_write, read_results, read_table, read_xyz,
                              results_table, write_manifest, write_results, write_table, write_xyz)
from spinphonon.relaxation import RelaxationResult

values = st.floats(allow_nan=True, allow_infinity=True)


def _same(a, b):
    if a is None or b is None:
        return a is b
    return (math.isnan(a) and math.isnan(b)) or a == b


@given(st.lists(st.tuples(values, values, values, st.one_of(st.none(), values)), min_size=1, max_size=8))
def test_table_round_trip(rows):
    import tempfile
    from pathlib import Path

    table = {c: [r[k] for r in rows] for k, c in enumerate(("a", "b", "c", "d"))}
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "t.csv"
        write_table(p, table)
        back = read_table(p)
    assert list(back) == ["a", "b", "c", "d"]
    for c in table:
        assert all(_same(x, y) for x, y in zip(table[c], back[c]))


def test_results_columns_and_disabled_mechanisms(tmp_path):
    res = [RelaxationResult(100.0, 1e-3, 1.5e-3, 4e-3, mechanism_rates={"R2_2ph": 1000.0}, eta=1.0),
           RelaxationResult(200.0, 1e-4, math.inf, math.inf, mechanism_rates={"R2_2ph": 1e4}, eta=1.0,
                            cutoff=300.0)]
    write_results(tmp_path / "r.csv", res)
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header.split(",") == list(RESULT_COLUMNS)
    back = read_results(tmp_path / "r.csv")
    assert math.isnan(back["rate_1ph"][0]) and math.isnan(back["rate_R4_2ph"][1])
    assert back["T2_s"][1] == math.inf
    assert back["cutoff_cm1"] == [None, 300.0]
    table = results_table(res)
    for c in RESULT_COLUMNS:
        assert all(_same(x, y) for x, y in zip(table[c], back[c]))


def test_read_results_requires_columns(tmp_path):
    (tmp_path / "r.csv").write_text("T_K,foo\n1,2\n")
    with pytest.raises(ValueError, match="T1_s"):
        read_results(tmp_path / "r.csv")


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    target.write_text("old")
    with pytest.raises(RuntimeError):
        with atomic_write(target) as fh:
            fh.write("partial")
            raise RuntimeError("boom")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


def test_xyz_round_trip(tmp_path, rng):
    g = Geometry(rng.normal(size=(4, 3)), ("N", "C", "C", "C"))
    write_xyz(tmp_path / "g.xyz", g, "comment")
    back = read_xyz(tmp_path / "g.xyz")
    np.testing.assert_array_equal(back.coordinates, g.coordinates)
    assert back.labels == g.labels


def test_manifest_contents(tmp_path, monkeypatch):
    monkeypatch.setenv("SPINPHONON_NUM_THREADS", "3")
    out = tmp_path / "x.csv"
    out.write_text("a\n")
    cfg = RunConfig.from_dict({"seed": 11}).data
    write_manifest(tmp_path / "m.json", "relax", cfg, [out], {"note": 1})
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["seed"] == 11 and m["threads"] == 3 and m["note"] == 1
    assert len(m["config_sha256"]) == 64
    assert set(m["versions"]) >= {"spinphonon", "numpy", "scipy", "scikit-learn", "python"}
    assert m["outputs"] == {str(out): hashlib.sha256(b"a\n").hexdigest()}


# ---------------------------------------------------------------- config

def test_defaults_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("numerics:\n  eta_cm1: 2.0\nsweep:\n  temperatures_K: {start: 10, stop: 30, num: 3}\n")
    cfg = RunConfig.load(p, ["numerics.cutoff_cm1=500", "spin.B_field_mT=[0, 0, 2]"])
    assert cfg["numerics"]["eta_cm1"] == 2.0
    assert cfg["numerics"]["cutoff_cm1"] == 500
    np.testing.assert_array_equal(cfg.temperatures(), [10, 20, 30])
    np.testing.assert_allclose(cfg.spin_system().B_field, [0, 0, 2e-3])
    assert cfg["spin"]["D_cm1"] == 0.092


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="numerics.etaa_cm1"):
        RunConfig.from_dict({"numerics": {"etaa_cm1": 1.0}})


@pytest.mark.parametrize("temps", [[], [300, 100], [-1, 10]])
def test_bad_temperature_lists(temps):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"sweep": {"temperatures_K": temps}}).temperatures()


def test_paths_resolve_against_config_directory(tmp_path):
    (tmp_path / "ph.txt").write_text("")
    cfg = RunConfig.from_dict({"paths": {"phonons": "ph.txt"}}, tmp_path)
    assert cfg.require_path("phonons") == tmp_path / "ph.txt"
    with pytest.raises(ConfigError):
        cfg.require_path("couplings")
    missing = RunConfig.from_dict({"paths": {"couplings": "nope.txt"}}, tmp_path)
    with pytest.raises(FileNotFoundError, match="nope.txt"):
        missing.validate(needed=("couplings",))


def test_validate_numerics():
    with pytest.raises(ConfigError, match="eta"):
        RunConfig.from_dict({"numerics": {"eta_cm1": 0}}).validate()
    with pytest.raises(ConfigError, match="smearing"):
        RunConfig.from_dict({"numerics": {"smearing": "box"}}).validate()
    with pytest.raises(ConfigError, match="spin"):
        RunConfig.from_dict({"spin": {"spin_S": 0.7}}).validate()


def test_override_syntax():
    with pytest.raises(ConfigError):
        apply_override({}, "no_equals_sign")
    assert apply_override({}, "a.b=[1, 2]") == {"a": {"b": [1, 2]}}


def test_full_d_tensor_config():
    cfg = RunConfig.from_dict({"spin": {"D_tensor_cm1": [[0.1, 0.01, 0], [0.01, -0.05, 0], [0, 0, 0.2]],
                                        "g_tensor": 2.0}})
    sys_ = cfg.spin_system()
    assert sys_.D_tensor[0, 1] == 0.01
    np.testing.assert_array_equal(sys_.g_tensor, 2.0 * np.eye(3))
