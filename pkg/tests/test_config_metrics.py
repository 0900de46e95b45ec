import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoelab.config import DataConfig, RunConfig, load_preset, preset_names
from smoelab.metrics import MetricsSink, read_metrics, write_routing_records
from smoelab.routing import ConfigError


# -- run config ---------------------------------------------------------------

def test_presets_load_and_validate():
    assert {"nano", "tiny-paper-like", "toy-repeated"} <= set(preset_names())
    nano = load_preset("nano")
    assert (nano.model.n_layers, nano.model.d_model, nano.model.n_experts, nano.model.k) == (2, 64, 4, 2)
    tiny = load_preset("tiny-paper-like")
    assert (tiny.model.n_layers, tiny.model.n_experts, tiny.model.k) == (3, 16, 2)


@pytest.mark.parametrize("name", ["nano", "tiny-paper-like", "toy-repeated"])
def test_config_roundtrip(name):
    cfg = load_preset(name)
    text = cfg.to_json()
    again = RunConfig.from_json(text)
    assert again == cfg
    assert again.to_json() == text


@settings(max_examples=25)
@given(st.sampled_from(["competesmoe", "smoe", "xmoe", "stablemoe", "smoe_fixed"]),
       st.floats(0.01, 1.0), st.integers(1, 5000), st.integers(0, 2**31))
def test_config_roundtrip_random(algorithm, lam, steps, seed):
    cfg = load_preset("nano")
    d = cfg.to_dict()
    d["trainer"].update(algorithm=algorithm, lam=lam, steps=steps, seed=seed)
    a = RunConfig.from_dict(d)
    assert RunConfig.from_json(a.to_json()) == a


@pytest.mark.parametrize("patch, where", [
    ({"trainer": {"lam": "high"}}, "trainer.lam"),
    ({"trainer": {"steps": 2.5}}, "trainer.steps"),
    ({"model": {"n_heads": 3}}, "model.n_heads"),
    ({"model": {"depth": 3}}, "model.depth"),
    ({"data": {"fractions": [0.5, 0.5]}}, "data.fractions"),
    ({"trainer": {"algorithm": "moe++"}}, "trainer.algorithm"),
    ({"trainer": {"lam": 0.0}}, "trainer.lam"),
    ({"trainer": {"context": 4096}}, "trainer.context"),
    ({"extra": 1}, "config"),
])
def test_config_errors_are_path_qualified(patch, where):
    d = load_preset("nano").to_dict()
    for section, values in patch.items():
        if isinstance(values, dict):
            d[section].update(values)
        else:
            d[section] = values
    with pytest.raises(ConfigError) as exc:
        RunConfig.from_dict(d)
    assert where in str(exc.value)


def test_bool_is_not_an_int():
    d = load_preset("nano").to_dict()
    d["trainer"]["steps"] = True
    with pytest.raises(ConfigError, match="trainer.steps"):
        RunConfig.from_dict(d)


def test_invalid_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.from_json("{not json")
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.from_file(tmp_path / "none.json")


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        load_preset("huge")


def test_data_config_loads_synthetic():
    c = DataConfig(synthetic="repeated", synthetic_bytes=2000).load()
    assert len(c.raw) == 2000


# -- metrics sink -------------------------------------------------------------

def test_header_written_once(tmp_path):
    p = tmp_path / "m.csv"
    with MetricsSink(p, ["a", "b"]) as s:
        s.write({"a": 1, "b": 2})
    with MetricsSink(p, ["a", "b"]) as s:
        s.write({"a": 3, "b": 4})
    assert p.read_text().splitlines() == ["a,b", "1,2", "3,4"]


def test_schema_enforced(tmp_path):
    p = tmp_path / "m.csv"
    with MetricsSink(p, ["a", "b"]) as s:
        with pytest.raises(ValueError):
            s.write({"a": 1})
        with pytest.raises(ValueError):
            s.write({"a": 1, "b": 2, "c": 3})
    with pytest.raises(ValueError, match="schema"):
        MetricsSink(p, ["a", "c"])


@pytest.mark.parametrize("flush_every", [1, 3, 7])
def test_abrupt_stop_loses_no_flushed_rows(tmp_path, flush_every):
    p = tmp_path / "m.csv"
    sink = MetricsSink(p, ["step", "value"], flush_every=flush_every)
    snapshots = []
    for i in range(20):
        sink.write({"step": i, "value": i * 0.5})
        if sink._pending == 0:
            snapshots.append((i + 1, p.read_bytes()))
    sink.close()
    for n_rows, data in snapshots:
        # a crash right after the flush, then one with a torn trailing line
        for tail in (b"", b"99,4"):
            q = tmp_path / "crash.csv"
            q.write_bytes(data + tail)
            rows = read_metrics(q)
            assert [int(r["step"]) for r in rows] == list(range(n_rows))


def test_routing_records_roundtrip(tmp_path):
    p = tmp_path / "r.csv"
    recs = [(0, [1, 0], [0.0, 0.25, 0.75]), (0, [2], [0.0, 0.0, 1.0]), (1, [0, 1], [0.5, 0.5, 0.0])]
    write_routing_records(p, "demo", recs)
    rows = read_metrics(p)
    assert [r["token"] for r in rows] == ["0", "1", "0"]
    assert rows[1]["entropy"] == "0.000000"
    assert float(rows[2]["entropy"]) == pytest.approx(0.693147, abs=1e-6)
    assert json.dumps(rows[0]["selected"]) == '"1 0"'
