import json
import os
from pathlib import Path

import pytest
import torch.nn as nn

from profiling_agent.fixtures import FixtureConfig, TensorPreprocessor
from profiling_agent.zoo import ModelHandle, acquire_model

DATA = Path(__file__).parent / "data"


def load_fixture_json(name: str):
    return json.loads((DATA / name).read_text())


def wrap(model: nn.Module, size: int = 8, channels: int = 3, labels=("a", "b"), family="convolutional",
         model_id="adhoc") -> ModelHandle:
    """Handle around an ad hoc module, for layer-level tests."""
    model.eval()
    cfg = FixtureConfig(list(labels), size, channels)
    return ModelHandle(model_id, family, "cpu", model, TensorPreprocessor(size, size, channels), cfg, "fixture")


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def reference_text():
    return (DATA / "reference_plan.json").read_text()


@pytest.fixture(params=["tiny-test-cnn", "tiny-resnet", "tiny-two-branch", "tiny-vit", "tiny-vit-split-output",
                        "tiny-mlp"])
def any_fixture(request):
    return acquire_model(request.param)


@pytest.fixture
def cnn():
    return acquire_model("tiny-test-cnn")


@pytest.fixture
def resnet():
    return acquire_model("tiny-resnet")


@pytest.fixture
def vit():
    return acquire_model("tiny-vit")


@pytest.fixture
def mlp():
    return acquire_model("tiny-mlp")


GATED = os.environ.get("PROFILING_AGENT_GATED") == "1"


def pytest_collection_modifyitems(config, items):
    if GATED:
        return
    skip = pytest.mark.skip(reason="gated: set PROFILING_AGENT_GATED=1 (needs network and pretrained weights)")
    for item in items:
        if "gated" in item.keywords:
            item.add_marker(skip)


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the body must call the returned function with the outcome."""
    def record(label: str, ok: bool, detail: str = ""):
        ACCEPTANCE.append((label, ok, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {label}{': ' + detail if detail else ''}")
        assert ok, f"{label}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in ACCEPTANCE:
        terminalreporter.line(f"[{'PASS' if ok else 'FAIL'}] {label}{': ' + detail if detail else ''}")
