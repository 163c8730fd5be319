"""Structured-JSON access to a chat LLM with validation and bounded retries.

The gateway never invents payloads: it either returns JSON that satisfies the
caller's schema or raises, and callers decide how to fall back.  A scripted
backend replays canned responses so whole pipeline runs are reproducible
offline.
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from .errors import BackendUnavailable, NoJsonFound, SchemaViolation, Timeout

logger = logging.getLogger(__name__)

DEFAULT_MAX_RETRIES = 2
DEFAULT_TIMEOUT_S = 60.0
API_KEY_ENV = "PROFILING_AGENT_API_KEY"

_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[^\n]*\n(.*?)```", re.DOTALL)
_decoder = json.JSONDecoder()


def _first_object(text: str):
    for i, ch in enumerate(text):
        if ch != "{":
            continue
        try:
            value, _ = _decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict):
            return value
    return None


def extract_json_block(text: str) -> dict:
    """Return the first valid JSON object in ``text``.

    Fenced code blocks are searched before the surrounding prose.
    """
    if not isinstance(text, str):
        raise NoJsonFound(f"expected text, got {type(text).__name__}")
    for match in _FENCE_RE.finditer(text):
        found = _first_object(match.group(2))
        if found is not None:
            return found
    found = _first_object(text)
    if found is None:
        raise NoJsonFound("no JSON object in response")
    return found


@dataclass
class JsonSchemaSpec:
    """Required key paths with JSON types, plus optional numeric bounds.

    Paths are dotted; a ``[]`` suffix marks an array of objects, e.g.
    ``"pruning_recommendations[].pruning_ratio"``.  A type may be a single
    JSON type name or a tuple of alternatives.
    """

    required_keys: list[tuple[str, Any]]
    bounds: dict[str, tuple[float | None, float | None]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.required_keys:
            raise ValueError("JsonSchemaSpec needs at least one required key")
        self._validator = jsonschema.Draft7Validator(self.to_json_schema())

    def to_json_schema(self) -> dict:
        root: dict = {"type": "object", "properties": {}, "required": []}
        leaves: dict[str, dict] = {}
        for path, types in self.required_keys:
            node = root
            segments = path.split(".")
            for seg in segments[:-1]:
                name, is_array = seg.removesuffix("[]"), seg.endswith("[]")
                if name not in node["properties"]:
                    obj = {"type": "object", "properties": {}, "required": []}
                    node["properties"][name] = {"type": "array", "items": obj} if is_array else obj
                    node["required"].append(name)
                child = node["properties"][name]
                node = child["items"] if is_array else child
            leaf = node["properties"].setdefault(segments[-1], {})
            leaf["type"] = list(types) if isinstance(types, (list, tuple)) else types
            if segments[-1] not in node["required"]:
                node["required"].append(segments[-1])
            leaves[path] = leaf
        for path, (lo, hi) in self.bounds.items():
            leaf = leaves[path]
            if lo is not None:
                leaf["minimum"] = lo
            if hi is not None:
                leaf["maximum"] = hi
        return root

    def errors(self, payload) -> list[str]:
        return [
            f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
            for e in self._validator.iter_errors(payload)
        ]

    def validate(self, payload) -> None:
        errs = self.errors(payload)
        if errs:
            raise SchemaViolation("; ".join(errs))


@dataclass
class LLMExchange:
    prompt: str
    raw_response: str
    parsed_payload: Any
    backend_id: str
    attempts: int
    timestamp: str
    failures: list[str] = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return self.parsed_payload is not None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- backends


class ScriptedBackend:
    """Replays ``fixtures`` in order.

    An entry that is an exception instance is raised instead of returned,
    which lets tests script timeouts and outages.  Single consumer only.
    """

    backend_id = "scripted"

    def __init__(self, fixtures: Sequence[Any]):
        if not fixtures:
            raise ValueError("scripted backend needs at least one fixture")
        self._fixtures = list(fixtures)
        self.calls = 0

    @classmethod
    def from_path(cls, path: str | os.PathLike) -> "ScriptedBackend":
        """Load fixtures from a JSON list file or a directory of response files."""
        p = Path(path)
        if p.is_dir():
            return cls([f.read_text() for f in sorted(p.iterdir()) if f.is_file()])
        data = json.loads(p.read_text())
        if not isinstance(data, list):
            data = [data]
        return cls([d if isinstance(d, str) else json.dumps(d) for d in data])

    @property
    def remaining(self) -> int:
        return len(self._fixtures) - self.calls

    def complete(self, prompt: str, timeout: float | None = None) -> str:
        if self.calls >= len(self._fixtures):
            raise BackendUnavailable("scripted fixtures exhausted")
        item = self._fixtures[self.calls]
        self.calls += 1
        if isinstance(item, BaseException):
            raise item
        return item


class LiveBackend:
    """OpenAI-compatible chat-completions endpoint."""

    def __init__(self, model: str = "gpt-4o", temperature: float = 0.0,
                 base_url: str = "https://api.openai.com/v1", api_key: str | None = None):
        self.model = model
        self.temperature = temperature
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key or os.environ.get(API_KEY_ENV) or os.environ.get("OPENAI_API_KEY")
        self.calls = 0

    @property
    def backend_id(self) -> str:
        return self.model

    def complete(self, prompt: str, timeout: float | None = None) -> str:
        import httpx

        if not self.api_key:
            raise BackendUnavailable(f"no API key; set {API_KEY_ENV}")
        self.calls += 1
        body = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": "Reply with a single JSON object."},
                {"role": "user", "content": prompt},
            ],
        }
        try:
            resp = httpx.post(f"{self.base_url}/chat/completions", json=body, timeout=timeout,
                              headers={"Authorization": f"Bearer {self.api_key}"})
            resp.raise_for_status()
        except httpx.TimeoutException as exc:
            raise Timeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise BackendUnavailable(str(exc)) from exc
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise BackendUnavailable(f"malformed completion response: {exc}") from exc


@dataclass
class LLMConfig:
    backend: str = "scripted"
    model: str = "gpt-4o"
    temperature: float = 0.0
    max_retries: int = DEFAULT_MAX_RETRIES
    timeout: float = DEFAULT_TIMEOUT_S
    fixtures: str | None = None
    base_url: str = "https://api.openai.com/v1"


def make_backend(config: LLMConfig):
    if config.backend == "live":
        return LiveBackend(config.model, config.temperature, config.base_url)
    if config.backend == "scripted":
        if not config.fixtures:
            raise BackendUnavailable("scripted backend requires a fixtures path")
        return ScriptedBackend.from_path(config.fixtures)
    raise ValueError(f"unknown llm backend {config.backend!r}")


# ---------------------------------------------------------------- gateway


class LLMGateway:
    def __init__(self, backend, max_retries: int = DEFAULT_MAX_RETRIES,
                 timeout: float = DEFAULT_TIMEOUT_S, log_dir: str | os.PathLike | None = None):
        self.backend = backend
        self.max_retries = max_retries
        self.timeout = timeout
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self.exchanges: list[LLMExchange] = []

    @classmethod
    def from_config(cls, config: LLMConfig, log_dir=None) -> "LLMGateway":
        return cls(make_backend(config), config.max_retries, config.timeout, log_dir)

    @property
    def calls(self) -> int:
        return len(self.exchanges)

    def _record(self, exchange: LLMExchange) -> None:
        self.exchanges.append(exchange)
        if self.log_dir is None:
            return
        from .store import write_json_atomic

        self.log_dir.mkdir(parents=True, exist_ok=True)
        n = len(list(self.log_dir.glob("*.json")))
        write_json_atomic(self.log_dir / f"{n}.json", exchange.to_dict())

    def complete_json(self, prompt: str, schema: JsonSchemaSpec,
                      max_retries: int | None = None) -> tuple[dict, LLMExchange]:
        retries = self.max_retries if max_retries is None else max_retries
        backend_id = getattr(self.backend, "backend_id", type(self.backend).__name__)
        failures: list[str] = []
        raw = ""
        last_error: Exception | None = None
        attempts = 0
        for _ in range(retries + 1):
            attempts += 1
            try:
                raw = self.backend.complete(prompt, timeout=self.timeout)
            except Timeout as exc:
                failures.append(f"timeout: {exc}")
                last_error = exc
                continue
            except BackendUnavailable as exc:
                failures.append(f"backend unavailable: {exc}")
                exchange = self._exchange(prompt, raw, None, backend_id, attempts, failures)
                self._record(exchange)
                exc.exchange = exchange
                raise
            try:
                payload = extract_json_block(raw)
                schema.validate(payload)
            except (NoJsonFound, SchemaViolation) as exc:
                failures.append(f"{type(exc).__name__}: {exc}")
                last_error = exc
                logger.debug("attempt %d rejected: %s", attempts, exc)
                continue
            exchange = self._exchange(prompt, raw, payload, backend_id, attempts, failures)
            self._record(exchange)
            return payload, exchange

        exchange = self._exchange(prompt, raw, None, backend_id, attempts, failures)
        self._record(exchange)
        err: Exception
        if isinstance(last_error, Timeout):
            err = Timeout(f"all {attempts} attempts timed out")
        else:
            err = SchemaViolation(f"no schema-conforming payload after {attempts} attempts: {failures[-1]}")
        err.exchange = exchange
        raise err

    @staticmethod
    def _exchange(prompt, raw, payload, backend_id, attempts, failures) -> LLMExchange:
        return LLMExchange(
            prompt=prompt,
            raw_response=raw,
            parsed_payload=payload,
            backend_id=backend_id,
            attempts=attempts,
            timestamp=datetime.now(timezone.utc).isoformat(),
            failures=list(failures),
        )
