import json
import random

import pytest
import torch
import torch.nn as nn

from conftest import wrap
from profiling_agent.errors import CorruptReport, ShapeMismatch
from profiling_agent.evaluation import evaluate
from profiling_agent.profiler import (count_macs, deserialize_report, profile_dynamic, profile_layers,
                                      profile_model, profile_static, serialize_report)
from profiling_agent.zoo import InputSpec, acquire_model, count_parameters, default_input_spec, describe

SPEC32 = InputSpec(3, 32, 32)


def naive_conv_macs(cin, cout, kh, kw, h, w, stride, pad, groups=1):
    """Count multiplications of a direct nested-loop convolution (zero padding contributes none)."""
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (w + 2 * pad - kw) // stride + 1
    cin_g = cin // groups
    n = 0
    for _co in range(cout):
        for oy in range(hout):
            for ox in range(wout):
                for _ci in range(cin_g):
                    for ky in range(kh):
                        for kx in range(kw):
                            n += 1
    return n


def naive_linear_macs(fin, fout, tokens):
    n = 0
    for _t in range(tokens):
        for _o in range(fout):
            for _i in range(fin):
                n += 1
    return n


def test_linear_4_8():
    assert count_macs(describe("l", nn.Linear(4, 8)), (1, 4)) == 32


def test_conv_1_2_3x3_8x8():
    d = describe("c", nn.Conv2d(1, 2, 3, padding=1))
    assert count_macs(d, (1, 1, 8, 8)) == 1152 == naive_conv_macs(1, 2, 3, 3, 8, 8, 1, 1)


def test_conv_zero_out_channels():
    d = describe("c", nn.Conv2d(1, 2, 3, padding=1))
    d = type(d)(**{**d.__dict__, "out_channels": 0})
    assert count_macs(d, (1, 1, 8, 8)) == 0


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        count_macs(describe("l", nn.Linear(4, 8)), (1, 5))
    with pytest.raises(ShapeMismatch):
        count_macs(describe("c", nn.Conv2d(3, 2, 3)), (1, 4, 8, 8))


@pytest.mark.parametrize("seed", range(8))
def test_random_configs_match_naive_oracle(seed):
    rng = random.Random(seed)
    groups = rng.choice([1, 1, 2])
    cin, cout = groups * rng.randint(1, 4), groups * rng.randint(1, 4)
    k, stride, pad = rng.choice([1, 3, 5]), rng.randint(1, 2), rng.randint(0, 2)
    h, w = rng.randint(k, 12), rng.randint(k, 12)
    d = describe("c", nn.Conv2d(cin, cout, k, stride=stride, padding=pad, groups=groups))
    assert count_macs(d, (1, cin, h, w)) == naive_conv_macs(cin, cout, k, k, h, w, stride, pad, groups)
    fin, fout, tokens = rng.randint(1, 16), rng.randint(1, 16), rng.randint(1, 5)
    assert count_macs(describe("l", nn.Linear(fin, fout)), (1, tokens, fin)) == naive_linear_macs(fin, fout, tokens)


def test_linear_fixture_param_count():
    h = wrap(nn.Sequential(nn.Flatten(), nn.Linear(4, 8)), size=2, channels=1)
    table, totals = profile_static(h, InputSpec(1, 2, 2))
    assert [(s.qualified_name, s.param_count, s.mac_count) for s in table] == [("1", 40, 32)]
    assert totals == {"total_macs": 32, "total_params": 40}


def test_cnn_per_layer_macs_match_oracle(cnn):
    table, totals = profile_static(cnn, SPEC32)
    expected = {"conv1": naive_conv_macs(3, 8, 3, 3, 32, 32, 1, 1),
                "conv2": naive_conv_macs(8, 4, 3, 3, 32, 32, 1, 1),
                "fc": naive_linear_macs(4, 2, 1)}
    assert {s.qualified_name: s.mac_count for s in table} == expected
    assert totals["total_macs"] == sum(expected.values())


def test_static_deterministic_and_consistent_with_evaluation(any_fixture):
    spec = default_input_spec(any_fixture)
    a = profile_static(any_fixture, spec)
    assert a == profile_static(any_fixture, spec)
    assert a[1]["total_params"] == count_parameters(any_fixture.module_tree)


def test_vit_attention_macs(vit):
    table, _ = profile_static(vit, SPEC32)
    att = {s.qualified_name: s for s in table if s.kind == "attention"}
    # 16 patches + cls token, hidden 32: scores and context each seq*seq*hidden
    assert att["encoder.layer.0.attention"].mac_count == 2 * 17 * 17 * 32


def test_dynamic_calls_cover_repeats(cnn):
    ops = profile_dynamic(cnn, SPEC32, "cpu", warmup=2, repeats=5)
    assert ops and all(op.calls >= 5 for op in ops)
    assert all(op.self_time_us >= 0 for op in ops)


def test_dynamic_op_set_stable(cnn):
    a = {op.op_name for op in profile_dynamic(cnn, SPEC32, "cpu", warmup=1, repeats=1)}
    b = {op.op_name for op in profile_dynamic(cnn, SPEC32, "cpu", warmup=1, repeats=30)}
    assert a == b


def test_sleepy_layer_timing():
    h = acquire_model("tiny-sleepy-cnn")
    ops = {op.op_name: op for op in profile_dynamic(h, SPEC32, "cpu", warmup=1, repeats=3)}
    assert 9000 <= ops["sleepy_conv"].self_time_us <= 15000
    lat = profile_layers(h, SPEC32, warmup=1, repeats=3)
    assert max(lat, key=lat.get) == "slow"


def test_layer_latency_keys_and_overhead(cnn):
    stats = {}
    lat = profile_layers(cnn, SPEC32, warmup=3, repeats=20, stats=stats)
    assert set(lat) == {"conv1", "conv2", "fc"}
    assert sum(lat.values()) <= 1.5 * stats["end_to_end_mean_us"]


def test_layer_latency_outermost_only(vit):
    lat = profile_layers(vit, SPEC32, warmup=1, repeats=2)
    assert "encoder.layer.0.attention" in lat
    assert "encoder.layer.0.attention.q_proj" not in lat


def test_unavailable_accelerator_is_skipped(cnn):
    if torch.cuda.is_available():
        pytest.skip("accelerator present")
    rep = profile_model(cnn, SPEC32, devices=("cpu", "accelerator"), warmup=1, repeats=2)
    assert rep.dynamic_cpu and not rep.dynamic_accel
    assert rep.environment["devices"]["accelerator"] == "unavailable"


def test_report_roundtrip(cnn):
    rep = profile_model(cnn, SPEC32, warmup=1, repeats=2)
    data = serialize_report(rep)
    assert deserialize_report(data) == rep
    assert serialize_report(deserialize_report(data)) == data
    assert set(rep.layer_latency) <= {"conv1", "conv2", "fc"}


def test_static_only_report(cnn):
    rep = profile_model(cnn, SPEC32, dynamic=False)
    assert rep.dynamic_cpu == [] and rep.layer_latency == {}


def test_missing_static_is_corrupt(data_dir):
    d = json.loads((data_dir / "golden_profile.json").read_text())
    del d["static"]
    with pytest.raises(CorruptReport):
        deserialize_report(json.dumps(d))
    with pytest.raises(CorruptReport):
        deserialize_report(b"not json")


def test_inconsistent_totals_are_corrupt(data_dir):
    d = json.loads((data_dir / "golden_profile.json").read_text())
    d["static"]["total_macs"] += 1
    with pytest.raises(CorruptReport):
        deserialize_report(json.dumps(d))


def test_golden_file(data_dir, cnn):
    rep = deserialize_report((data_dir / "golden_profile.json").read_bytes())
    assert (rep.total_macs, rep.total_params) == (516104, 526)
    assert rep.dynamic_cpu[0].calls == 60
    table, totals = profile_static(cnn, SPEC32)
    assert table == rep.static


def test_profile_params_match_evaluation(cnn):
    rep = profile_model(cnn, SPEC32, dynamic=False)
    ev = evaluate(cnn, "synthetic-2class", n_samples=4, seed=0, clock="ticks")
    assert rep.total_params == ev.param_count
