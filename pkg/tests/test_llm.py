import json

import httpx
import hypothesis.strategies as st
import pytest
from hypothesis import given, settings

from profiling_agent.errors import BackendUnavailable, NoJsonFound, SchemaViolation, Timeout
from profiling_agent.llm import (JsonSchemaSpec, LiveBackend, LLMConfig, LLMGateway, ScriptedBackend,
                                 extract_json_block, make_backend)
from profiling_agent.zoo import INPUT_SHAPE_SCHEMA, input_shape_prompt

FIG3 = '{"channels":3,"height":224,"width":224,"sequence_length":null}'
X_SCHEMA = JsonSchemaSpec(required_keys=[("x", "integer")])


def gw(items, retries=2, log_dir=None):
    return LLMGateway(ScriptedBackend(items), max_retries=retries, log_dir=log_dir)


def test_fig3_input_shape():
    payload, ex = gw([FIG3]).complete_json(input_shape_prompt("google/vit-base-patch16-224"), INPUT_SHAPE_SCHEMA, 2)
    assert payload == {"channels": 3, "height": 224, "width": 224, "sequence_length": None}
    assert ex.attempts == 1 and ex.succeeded


def test_first_attempt_success():
    payload, ex = gw(['{"x":1}']).complete_json("p", X_SCHEMA, 1)
    assert payload == {"x": 1} and ex.attempts == 1


def test_retry_after_garbage():
    payload, ex = gw(["no json here", '{"x":2}'], retries=1).complete_json("p", X_SCHEMA)
    assert payload == {"x": 2} and ex.attempts == 2
    assert len(ex.failures) == 1


def test_retries_exhausted():
    with pytest.raises(SchemaViolation):
        gw(["garbage", '{"y":1}', "{bad"], retries=2).complete_json("p", X_SCHEMA)


def test_timeout_then_success():
    payload, ex = gw([Timeout("slow"), '{"x":3}'], retries=1).complete_json("p", X_SCHEMA)
    assert payload == {"x": 3} and ex.attempts == 2


def test_all_timeouts():
    with pytest.raises(Timeout):
        gw([Timeout("a"), Timeout("b")], retries=1).complete_json("p", X_SCHEMA)


def test_backend_unavailable_not_retried():
    g = gw([BackendUnavailable("down"), '{"x":1}'])
    with pytest.raises(BackendUnavailable):
        g.complete_json("p", X_SCHEMA)
    assert g.backend.calls == 1


def test_scripted_replay_then_exhausted():
    b = ScriptedBackend([FIG3])
    assert b.complete("p") == FIG3
    with pytest.raises(BackendUnavailable):
        b.complete("p")


def test_scripted_from_path(tmp_path, reference_text):
    f = tmp_path / "fx.json"
    f.write_text(json.dumps([json.loads(FIG3), "raw text"]))
    b = ScriptedBackend.from_path(f)
    assert json.loads(b.complete("p")) == json.loads(FIG3)
    assert b.complete("p") == "raw text"
    d = tmp_path / "dir"
    d.mkdir()
    (d / "0.json").write_text(reference_text)
    assert ScriptedBackend.from_path(d).complete("p") == reference_text


def test_exchanges_logged(tmp_path):
    g = gw(["bad", '{"x":1}'], retries=1, log_dir=tmp_path / "llm")
    g.complete_json("prompt text", X_SCHEMA)
    logged = json.loads((tmp_path / "llm" / "0.json").read_text())
    assert logged["prompt"] == "prompt text" and logged["attempts"] == 2
    assert logged["parsed_payload"] == {"x": 1}


@pytest.mark.parametrize("text,expected", [
    ('```json\n{"a":1}\n```', {"a": 1}),
    ('Here is the plan: {"a":1} hope it helps', {"a": 1}),
    ('{"a": {"b": [1, 2]}}', {"a": {"b": [1, 2]}}),
])
def test_extract_examples(text, expected):
    assert extract_json_block(text) == expected


def test_extract_no_json():
    with pytest.raises(NoJsonFound):
        extract_json_block("nothing to see")
    with pytest.raises(NoJsonFound):
        extract_json_block("[1, 2, 3]")


def _scan_oracle(text):
    """Scan all brace-balanced substrings left to right, return the first that parses to an object."""
    for i in range(len(text)):
        if text[i] != "{":
            continue
        depth, in_str, esc = 0, False, False
        for j in range(i, len(text)):
            c = text[j]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
                continue
            if c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(text[i:j + 1])
                        if isinstance(obj, dict):
                            return obj
                    except ValueError:
                        pass
                    break
    return None


@pytest.mark.parametrize("text", [
    '{"a": 1,, } and then {"b": 2}',
    'first {oops} second {"ok": true}',
    '{"x": [1, 2} {"y": "z"}',
    'prefix {"k": "v with } brace"} suffix {"k2": 1}',
])
def test_extract_first_malformed_second_valid(text):
    assert extract_json_block(text) == _scan_oracle(text)


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-1000, 1000) | st.text(max_size=8),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=5), inner, max_size=3),
    max_leaves=10,
)
responses = st.one_of(
    st.text(max_size=60),
    json_values.map(json.dumps),
    st.dictionaries(st.sampled_from(["x", "y", "z"]), json_values, max_size=3).map(json.dumps),
    st.builds(lambda v, pre: f"{pre} ```json\n{json.dumps({'x': v})}\n```", json_values, st.text(max_size=10)),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(responses, min_size=1, max_size=4), st.integers(0, 3))
def test_complete_json_never_returns_schema_violation(items, retries):
    g = gw(items, retries=retries)
    try:
        payload, _ = g.complete_json("p", X_SCHEMA)
    except (SchemaViolation, BackendUnavailable):
        return
    assert isinstance(payload, dict) and isinstance(payload["x"], int) and not isinstance(payload["x"], bool)


def test_schema_nested_paths_and_bounds():
    s = JsonSchemaSpec(required_keys=[("recs[].ratio", "number")], bounds={"recs[].ratio": (0, 1)})
    s.validate({"recs": [{"ratio": 0.5}]})
    with pytest.raises(SchemaViolation):
        s.validate({"recs": [{"ratio": 1.5}]})
    with pytest.raises(ValueError):
        JsonSchemaSpec(required_keys=[])


def test_live_backend_without_key(monkeypatch):
    monkeypatch.delenv("PROFILING_AGENT_API_KEY", raising=False)
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    with pytest.raises(BackendUnavailable):
        LiveBackend().complete("p")


def test_live_backend_request(monkeypatch):
    seen = {}

    def fake_post(url, json=None, timeout=None, headers=None):
        seen.update(url=url, body=json, headers=headers)
        return httpx.Response(200, json={"choices": [{"message": {"content": FIG3}}]},
                              request=httpx.Request("POST", url))

    monkeypatch.setattr(httpx, "post", fake_post)
    b = LiveBackend("gpt-4-turbo", api_key="k")
    assert b.complete("hello") == FIG3
    assert seen["body"]["temperature"] == 0.0 and seen["body"]["model"] == "gpt-4-turbo"
    assert seen["headers"]["Authorization"] == "Bearer k"


def test_live_backend_timeout(monkeypatch):
    def fake_post(*a, **k):
        raise httpx.ReadTimeout("slow")

    monkeypatch.setattr(httpx, "post", fake_post)
    with pytest.raises(Timeout):
        LiveBackend(api_key="k").complete("p")


def test_make_backend():
    with pytest.raises(BackendUnavailable):
        make_backend(LLMConfig(backend="scripted"))
    assert isinstance(make_backend(LLMConfig(backend="live")), LiveBackend)
    assert LLMConfig().temperature == 0.0
