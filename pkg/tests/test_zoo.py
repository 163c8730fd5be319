import hypothesis.strategies as st
import pytest
import torch
from hypothesis import given

from profiling_agent.errors import BackendUnavailable, UnknownModel, UnresolvableShape
from profiling_agent.llm import LLMGateway, ScriptedBackend
from profiling_agent.zoo import (InputSpec, acquire_model, count_parameters, enumerate_layers, model_metadata,
                                 parameter_checksum, resolve_input_spec)

FIG3 = '{"channels":3,"height":224,"width":224,"sequence_length":null}'


def gateway(*responses, retries=0):
    return LLMGateway(ScriptedBackend(list(responses)), max_retries=retries)


class AlwaysDown:
    backend_id = "down"

    def complete(self, prompt, timeout=None):
        raise BackendUnavailable("down")


def test_fixture_roundtrip_layers(cnn):
    names = [d.qualified_name for d in enumerate_layers(cnn)]
    assert names == ["conv1", "conv2", "fc"]
    assert cnn.family == "convolutional"
    assert cnn.weights == "fixture"


def test_enumerate_layers_kinds_and_determinism(cnn):
    a, b = enumerate_layers(cnn), enumerate_layers(cnn)
    assert a == b
    assert [d.kind for d in a] == ["conv2d", "conv2d", "linear"]
    assert (a[0].in_channels, a[0].out_channels, a[0].kernel_size) == (3, 8, (3, 3))


def test_attention_descriptors_carry_heads(vit):
    att = [d for d in enumerate_layers(vit) if d.kind == "attention"]
    assert [d.qualified_name for d in att] == ["encoder.layer.0.attention", "encoder.layer.1.attention"]
    assert all(d.num_heads == 4 and d.head_dim == 8 for d in att)


def test_unknown_model_raises():
    with pytest.raises(UnknownModel):
        acquire_model("definitely/not-a-model-xyz", weights="random")


def test_count_parameters_matches_torch(any_fixture):
    model = any_fixture.module_tree
    assert count_parameters(model) == sum(p.numel() for p in model.parameters())


def test_input_spec_from_llm_fig3():
    spec = resolve_input_spec("google/vit-base-patch16-224", {}, gateway(FIG3))
    assert spec == InputSpec(3, 224, 224, None)


def test_input_spec_fallback_when_llm_errors():
    gw = LLMGateway(AlwaysDown(), max_retries=0)
    spec = resolve_input_spec("any", {"image_size": 32, "channels": 3}, gw)
    assert spec == InputSpec(3, 32, 32, None)


def test_input_spec_preprocessor_wins(cnn):
    meta = model_metadata(cnn)
    spec = resolve_input_spec("tiny-test-cnn", meta, gateway(FIG3))
    assert (spec.height, spec.width) == (32, 32)


def test_input_spec_unresolvable():
    with pytest.raises(UnresolvableShape):
        resolve_input_spec("any", {}, LLMGateway(AlwaysDown(), max_retries=0))


def test_input_spec_written(tmp_path):
    out = tmp_path / "input_spec.json"
    resolve_input_spec("x", {}, gateway(FIG3), out_path=out)
    assert InputSpec.from_dict(__import__("json").loads(out.read_text())) == InputSpec(3, 224, 224)


def _brace_oracle(text):
    """First brace-balanced substring that parses as a JSON object."""
    import json
    for i, ch in enumerate(text):
        if ch != "{":
            continue
        depth = 0
        for j in range(i, len(text)):
            depth += {"{": 1, "}": -1}.get(text[j], 0)
            if depth == 0:
                try:
                    obj = json.loads(text[i:j + 1])
                except ValueError:
                    break
                if isinstance(obj, dict):
                    return obj
                break
    return None


PROSE = [
    "The model expects {\"channels\": 3, \"height\": 224, \"width\": 224, \"sequence_length\": null}.",
    "Sure!\n```json\n{\"channels\":1,\"height\":28,\"width\":28,\"sequence_length\":null}\n```\nDone.",
    "Answer: {\"channels\": 3, \"height\": 384, \"width\": 384, \"sequence_length\": 577} thanks",
    "{\"channels\":3,\"height\":32,\"width\":32,\"sequence_length\":null}",
    "Input is RGB. {\"channels\": 3, \"width\": 256, \"height\": 256, \"sequence_length\": null}",
    "Shape:\n{\n  \"channels\": 3,\n  \"height\": 299,\n  \"width\": 299,\n  \"sequence_length\": null\n}\n",
    "I think {\"channels\": 4, \"height\": 64, \"width\": 64, \"sequence_length\": null} is right.",
    "``` \n{\"channels\": 3, \"height\": 160, \"width\": 160, \"sequence_length\": null}\n```",
    "Result => {\"channels\": 3, \"height\": 518, \"width\": 518, \"sequence_length\": 1370} <=",
    "({\"channels\": 2, \"height\": 10, \"width\": 12, \"sequence_length\": null})",
]


@pytest.mark.parametrize("text", PROSE)
def test_input_spec_from_prose_matches_oracle(text):
    spec = resolve_input_spec("x", {}, gateway(text))
    assert spec == InputSpec.from_dict(_brace_oracle(text))


@given(st.integers(1, 8), st.integers(1, 512), st.integers(1, 512), st.one_of(st.none(), st.integers(1, 4096)))
def test_input_spec_invariants_hold_for_any_llm_answer(c, h, w, seq):
    import json
    text = json.dumps({"channels": c, "height": h, "width": w, "sequence_length": seq})
    spec = resolve_input_spec("x", {}, gateway(text))
    assert spec.channels >= 1 and spec.height >= 1 and spec.width >= 1
    assert spec.sequence_length is None or spec.sequence_length >= 1


def test_invalid_llm_shape_falls_back():
    spec = resolve_input_spec("x", {"image_size": 16, "channels": 3},
                              gateway('{"channels": 0, "height": -1, "width": 5, "sequence_length": null}'))
    assert spec == InputSpec(3, 16, 16)


def test_checksum_stable(cnn):
    c = parameter_checksum(cnn.module_tree)
    assert c == parameter_checksum(acquire_model("tiny-test-cnn").module_tree)
    with torch.no_grad():
        cnn.module_tree.fc.bias.add_(1.0)
    assert parameter_checksum(cnn.module_tree) != c


@pytest.mark.gated
@pytest.mark.parametrize("model_id,family,params", [
    ("google/vit-base-patch16-224", "transformer", 86.6e6),
    ("microsoft/resnet-101", "convolutional", 44.5e6),
])
def test_registry_models(model_id, family, params):
    h = acquire_model(model_id)
    assert h.family == family
    assert count_parameters(h.module_tree) == pytest.approx(params, rel=0.01)
