"""Chat-completion backends with schema validation and repair retries.

Two backends ship: an OpenAI-compatible HTTP client and a scripted backend
that replays fixture responses keyed by a digest of the stage input.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

from pydantic import BaseModel

from .schemas import SCHEMAS

logger = logging.getLogger(__name__)

DEFAULT_MAX_REPAIR_RETRIES = 2
_FENCE = re.compile(r"^\s*```(?:json)?\s*\n(.*?)\n?```\s*$", re.DOTALL)


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    pass


class FixtureMissingError(GatewayError):
    def __init__(self, stage_name: str, key: str):
        self.stage_name = stage_name
        self.key = key
        super().__init__(f"no fixture for stage {stage_name!r} (key {key})")


class SchemaViolationError(GatewayError):
    """Reply still invalid after every repair attempt."""

    def __init__(self, message: str, raw_attempts: list[str], errors: list[str]):
        self.raw_attempts = raw_attempts
        self.errors = errors
        super().__init__(message)


# -- canonical inputs and fixture keys ---------------------------------------

def _normalize(obj: Any) -> Any:
    if isinstance(obj, BaseModel):
        return _normalize(obj.model_dump(mode="json"))
    if isinstance(obj, Mapping):
        return {str(k): _normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if obj is None or isinstance(obj, bool):
        return obj
    if isinstance(obj, str):
        return str(obj)
    if isinstance(obj, int):
        return int(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError("non-finite number in canonical input")
        return int(obj) if obj.is_integer() else obj
    raise TypeError(f"cannot canonicalize {type(obj).__name__}")


def canonical_json(obj: Any) -> str:
    """Sorted keys, no insignificant whitespace, integral floats as integers."""
    return json.dumps(_normalize(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def fixture_key(stage_name: str, canonical_input: str) -> str:
    h = hashlib.sha256()
    h.update(stage_name.encode("utf-8"))
    h.update(b"\x00")
    h.update(canonical_input.encode("utf-8"))
    return h.hexdigest()


# -- requests and replies -----------------------------------------------------

@dataclass(frozen=True)
class ChatRequest:
    stage_name: str
    system_prompt: str
    user_prompt: str
    schema_id: str
    canonical_input: str
    temperature: float = 0.0

    def __post_init__(self):
        if self.schema_id not in SCHEMAS:
            raise GatewayError(f"unregistered schema {self.schema_id!r}")

    @property
    def key(self) -> str:
        return fixture_key(self.stage_name, self.canonical_input)


@dataclass(frozen=True)
class StructuredReply:
    value: BaseModel
    raw_text: str
    attempts: int
    key: str


@dataclass
class BackendConfig:
    kind: str = "scripted"
    endpoint: str | None = None
    model_name: str | None = None
    auth_env_var: str = "HSCLASSIFY_API_KEY"
    timeout: float = 60.0
    max_repair_retries: int = DEFAULT_MAX_REPAIR_RETRIES
    fixture_path: str | None = None
    strict_fixtures: bool = True

    def __post_init__(self):
        if self.kind not in ("http", "scripted"):
            raise ValueError(f"backend kind must be 'http' or 'scripted', got {self.kind!r}")
        if self.max_repair_retries < 0:
            raise ValueError("max_repair_retries must be >= 0")
        if self.kind == "http" and not (self.endpoint and self.model_name):
            raise ValueError("http backend requires endpoint and model_name")
        if self.kind == "scripted" and not self.fixture_path:
            raise ValueError("scripted backend requires fixture_path")


class Backend(Protocol):
    config: BackendConfig

    def complete(self, request: ChatRequest, messages: list[dict[str, str]], attempt: int) -> str: ...


# -- scripted backend ---------------------------------------------------------

def load_fixtures(path: str | Path) -> dict[str, list[str]]:
    """``{key, response_text}`` lines; repeated keys give successive attempts."""
    table: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                table.setdefault(rec["key"], []).append(rec["response_text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise GatewayError(f"{path}:{lineno}: bad fixture record ({exc})") from None
    return table


class ScriptedBackend:
    """Replays fixture responses; the n-th attempt gets the n-th record for a key.

    Lookups are pure, so one instance can serve concurrent runs.
    """

    def __init__(self, config: BackendConfig, fixtures: Mapping[str, list[str]] | None = None):
        self.config = config
        self.fixtures = dict(fixtures) if fixtures is not None else load_fixtures(config.fixture_path)

    def complete(self, request: ChatRequest, messages, attempt: int) -> str:
        responses = self.fixtures.get(request.key)
        if not responses:
            if self.config.strict_fixtures:
                raise FixtureMissingError(request.stage_name, request.key)
            return "{}"
        return responses[min(attempt, len(responses)) - 1]


class FunctionBackend:
    """Backend computing replies with a Python callable ``fn(request, attempt)``."""

    def __init__(self, fn: Callable[[ChatRequest, int], str], max_repair_retries: int = DEFAULT_MAX_REPAIR_RETRIES):
        self.fn = fn
        self.config = BackendConfig(kind="scripted", fixture_path="<function>", max_repair_retries=max_repair_retries)

    def complete(self, request: ChatRequest, messages, attempt: int) -> str:
        return self.fn(request, attempt)


class RecordingBackend:
    """Wraps a backend and keeps every ``(key, response_text)`` it served."""

    def __init__(self, inner):
        self.inner = inner
        self.config = inner.config
        self.records: list[dict[str, str]] = []

    def complete(self, request: ChatRequest, messages, attempt: int) -> str:
        text = self.inner.complete(request, messages, attempt)
        self.records.append({"key": request.key, "response_text": text})
        return text

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# -- HTTP backend -------------------------------------------------------------

class HttpBackend:
    """OpenAI-compatible ``/chat/completions`` client (no reasoning flags sent)."""

    def __init__(self, config: BackendConfig, client=None):
        import httpx

        self.config = config
        token = os.environ.get(config.auth_env_var) if config.auth_env_var else None
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = client or httpx.Client(timeout=config.timeout, headers=headers)
        self._base = config.endpoint.rstrip("/")

    def _post(self, path: str, payload: dict) -> dict:
        import httpx

        try:
            resp = self._client.post(f"{self._base}{path}", json=payload)
            resp.raise_for_status()
            return resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise TransportError(f"{path} request failed: {exc}") from exc

    def complete(self, request: ChatRequest, messages, attempt: int) -> str:
        body = self._post("/chat/completions", {
            "model": self.config.model_name,
            "messages": messages,
            "temperature": request.temperature,
        })
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected chat completion payload: {exc}") from exc

    def embed(self, texts) -> list[list[float]]:
        body = self._post("/embeddings", {"model": self.config.model_name, "input": list(texts)})
        try:
            rows = sorted(body["data"], key=lambda r: r["index"])
            return [list(map(float, r["embedding"])) for r in rows]
        except (KeyError, TypeError) as exc:
            raise TransportError(f"unexpected embeddings payload: {exc}") from exc


def make_backend(config: BackendConfig):
    if config.kind == "http":
        return HttpBackend(config)
    return ScriptedBackend(config)


# -- the structured call -------------------------------------------------------

def _strip_fences(text: str) -> str:
    m = _FENCE.match(text)
    return m.group(1) if m else text


def complete_structured(
    backend,
    request: ChatRequest,
    validator: Callable[[BaseModel], None] | None = None,
) -> StructuredReply:
    """Call the backend until the reply parses, validates and passes ``validator``.

    ``validator`` raises ``ValueError`` for semantic violations (for instance a
    code outside the candidate set); those are repaired like schema errors.
    """
    model = SCHEMAS[request.schema_id]
    max_attempts = 1 + backend.config.max_repair_retries
    messages = [
        {"role": "system", "content": request.system_prompt},
        {"role": "user", "content": request.user_prompt},
    ]
    raws: list[str] = []
    errors: list[str] = []
    for attempt in range(1, max_attempts + 1):
        raw = backend.complete(request, messages, attempt)
        raws.append(raw)
        try:
            value = model.model_validate_json(_strip_fences(raw))
            if validator is not None:
                validator(value)
        except ValueError as exc:
            err = str(exc)
            errors.append(err)
            logger.debug("stage %s attempt %d invalid: %s", request.stage_name, attempt, err)
            messages = messages + [
                {"role": "assistant", "content": raw},
                {"role": "user", "content": (
                    "The previous reply failed validation:\n" + err
                    + "\nReply again with a single corrected JSON object only."
                )},
            ]
            continue
        return StructuredReply(value=value, raw_text=raw, attempts=attempt, key=request.key)
    raise SchemaViolationError(
        f"stage {request.stage_name!r}: reply invalid after {max_attempts} attempt(s): {errors[-1]}",
        raw_attempts=raws,
        errors=errors,
    )
