import hypothesis.strategies as st
import numpy as np
import pytest
import torch.nn as nn
from hypothesis import given

from conftest import wrap
from profiling_agent.errors import DatasetUnavailable, IncompatibleInput, MismatchedRuns
from profiling_agent.evaluation import (MB, ComparisonReport, EvaluationReport, FolderDataset, TickClock, compare,
                                        evaluate, exact_match, load_dataset, match_label, measure_memory,
                                        subset_indices)
from profiling_agent.fixtures import SyntheticDataset
from profiling_agent.zoo import acquire_model, count_parameters


def report(**kw):
    base = dict(model_ref="m", dataset_id="d", n_samples=10, accuracy=0.8, mean_latency_s=0.2,
                latency_samples_s=[0.2], memory_bytes=100, param_count=1000, seed=42, timestamp="t")
    return EvaluationReport(**(base | kw))


@pytest.mark.parametrize("pred,truth,ok", [("Egyptian cat", "cat", True), ("cat", "cat", True),
                                           ("catamaran", "cat", True), ("dog", "cat", False),
                                           ("tabby, tabby cat", "Tabby Cat", True), ("", "cat", False)])
def test_match_label(pred, truth, ok):
    assert match_label(pred, truth) is ok


def test_exact_match_is_strict():
    assert not exact_match("catamaran", "cat")
    assert exact_match("Tabby,  cat", "tabby cat")


@given(st.text(max_size=20), st.text(max_size=20))
def test_match_symmetric_and_implied_by_exact(a, b):
    assert match_label(a, b) == match_label(b, a)
    if exact_match(a, b) and a.strip(", \t\n"):
        assert match_label(a, b)


def test_subset_indices():
    a = subset_indices(100, 10, 42)
    assert a == subset_indices(100, 10, 42) and len(set(a)) == 10
    assert a == [int(i) for i in np.random.default_rng(42).choice(100, 10, replace=False)]
    with pytest.raises(ValueError):
        subset_indices(5, 6, 0)


def test_trained_fixture_is_perfect(cnn):
    ev = evaluate(cnn, "synthetic-2class", n_samples=256, seed=42, clock="ticks")
    assert ev.accuracy == 1.0 and ev.correct == 256 and ev.exact_accuracy == 1.0


def test_evaluate_deterministic(cnn):
    a = evaluate(cnn, "synthetic-2class", 32, 7, clock="ticks")
    b = evaluate(cnn, "synthetic-2class", 32, 7, clock="ticks")
    assert (a.accuracy, a.subset_digest, a.latency_samples_s) == (b.accuracy, b.subset_digest, b.latency_samples_s)
    assert a.param_count == count_parameters(cnn.module_tree)
    assert len(a.latency_samples_s) == 32


def test_tick_clock():
    c = TickClock(0.5)
    assert (c(), c(), c()) == (0.5, 1.0, 1.5)


def test_incompatible_input():
    h = wrap(nn.Sequential(nn.Flatten(), nn.Linear(7, 2)), size=32)
    with pytest.raises(IncompatibleInput):
        evaluate(h, "synthetic-2class", 4, 0)


def test_unknown_dataset():
    with pytest.raises(DatasetUnavailable):
        load_dataset("no-such-dataset")


def test_folder_dataset(tmp_path, cnn):
    from PIL import Image
    for label, color in (("red", (255, 0, 0)), ("blue", (0, 0, 255))):
        d = tmp_path / label
        d.mkdir()
        for i in range(3):
            Image.new("RGB", (40, 40), color).save(d / f"{i}.png")
    ds = load_dataset(str(tmp_path))
    assert isinstance(ds, FolderDataset) and len(ds) == 6
    ev = evaluate(cnn, ds, 6, 0, clock="ticks")
    assert ev.n_samples == 6 and 0.0 <= ev.accuracy <= 1.0


def test_synthetic_datasets():
    ds = SyntheticDataset("synthetic-10class")
    assert len(ds) == 256 and ds[3][1] == "class_3"


def test_compare_identical():
    c = compare(report(), report())
    assert (c.delta_acc_points, c.mem_reduction_pct, c.param_reduction_pct, c.speedup) == (0.0, 0.0, 0.0, 1.0)


def test_compare_table3_values():
    c = compare(report(memory_bytes=100, mean_latency_s=0.2320), report(memory_bytes=25.8, mean_latency_s=0.1316))
    assert c.mem_reduction_pct == pytest.approx(74.2)
    assert c.speedup == pytest.approx(1.763, abs=1e-3)


def test_compare_mismatched():
    with pytest.raises(MismatchedRuns):
        compare(report(), report(seed=1))
    with pytest.raises(MismatchedRuns):
        compare(report(subset_digest="a"), report(subset_digest="b"))


def test_speedup_positive():
    with pytest.raises(ValueError):
        ComparisonReport(0, 0, 0, 0.0)
    with pytest.raises(ValueError):
        report(n_samples=0)


def test_report_roundtrip():
    r = report()
    assert EvaluationReport.from_dict(r.to_dict()) == r
    c = compare(r, r, "x")
    assert ComparisonReport.from_dict(c.to_dict()) == c


def test_memory_includes_buffers(resnet):
    assert measure_memory(resnet) > 4 * count_parameters(resnet.module_tree)
    assert MB == 1 << 20


@pytest.mark.gated
def test_vit_imagenet_top1():
    h = acquire_model("google/vit-base-patch16-224")
    ev = evaluate(h, "imagenet-1k-val-subset", 1000, 42)
    assert ev.accuracy == pytest.approx(0.80, abs=0.03)
