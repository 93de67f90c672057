"""External predictor backends over HTTP, plus the deterministic mock
backend used by the test suite and by hermetic CLI demos.

Wire protocol (JSON over HTTP, versioned path):

    POST {base_url}/v1/predict
    request:  {"inputs": ["text", ...]}
    response: {"outputs": [<distribution or span list>, ...]}

A distribution is an object mapping label string to float; a span list is
a list of {"start", "end", "etype"} objects in the coordinates of the
corresponding input text. Responses must answer every input in order.
Transport failures (connection errors, timeouts, 5xx) are retried with
exponential backoff up to the descriptor's budget; a malformed response is
a protocol error and is never retried.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import httpx
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .corpus import EntitySpan
from .errors import BackendError, ProtocolError, ValidationError
from .hashing import text_key
from .models import (
    KIND_CLASSIFICATION,
    KIND_ENTITY,
    LabelDistribution,
    Predictor,
)

PREDICT_PATH = "/v1/predict"


@dataclass(frozen=True)
class BackendDescriptor:
    id: str
    url: str
    kind: str
    label_set: tuple[str, ...] | None = None
    timeout: float = 10.0
    max_retries: int = 2

    def __post_init__(self):
        if self.kind not in (KIND_CLASSIFICATION, KIND_ENTITY):
            raise ValidationError(f"unknown backend kind {self.kind!r}")
        if self.timeout <= 0:
            raise ValidationError("timeout must be positive")
        if self.max_retries < 0:
            raise ValidationError("max retries must be nonnegative")
        if self.kind == KIND_CLASSIFICATION and not self.label_set:
            raise ValidationError(f"classification backend {self.id!r} needs a label_set")


# ---------------------------------------------------------------------------
# Codec


def encode_distribution(dist: LabelDistribution) -> dict[str, float]:
    return dict(dist.probs)


def decode_distribution(
    obj: Any, label_set: Sequence[str] | None = None
) -> LabelDistribution:
    """Validate and normalize key order; order follows label_set when given
    so argmax tie-breaking is deterministic regardless of backend key order."""
    if not isinstance(obj, dict) or not obj:
        raise ProtocolError(f"expected a label->probability object, got {_excerpt(obj)}")
    for k, v in obj.items():
        if not isinstance(k, str) or not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ProtocolError(f"bad distribution entry {k!r}: {_excerpt(v)}")
    if label_set is not None:
        if set(obj) != set(label_set):
            raise ProtocolError(
                f"distribution labels {sorted(obj)} do not match the declared label set"
            )
        ordered = {label: float(obj[label]) for label in label_set}
    else:
        ordered = {k: float(v) for k, v in obj.items()}
    try:
        return LabelDistribution(ordered)
    except ValidationError as exc:
        raise ProtocolError(f"invalid distribution: {exc}") from exc


def encode_spans(spans: Sequence[EntitySpan]) -> list[dict]:
    return [s.to_json() for s in spans]


def decode_spans(obj: Any) -> list[EntitySpan]:
    if not isinstance(obj, list):
        raise ProtocolError(f"expected a span list, got {_excerpt(obj)}")
    out = []
    for item in obj:
        if not isinstance(item, dict):
            raise ProtocolError(f"bad span entry: {_excerpt(item)}")
        try:
            out.append(
                EntitySpan(int(item["start"]), int(item["end"]), str(item["etype"]))
            )
        except (KeyError, TypeError, ValueError, ValidationError) as exc:
            raise ProtocolError(f"bad span entry {_excerpt(item)}: {exc}") from exc
    return out


def _excerpt(payload: Any, limit: int = 120) -> str:
    text = repr(payload)
    return text if len(text) <= limit else text[: limit - 3] + "..."


# ---------------------------------------------------------------------------
# HTTP client predictor


class HttpBackend(Predictor):
    """Predictor backed by a remote service speaking the wire protocol.

    Batches inputs (`batch_size`, order preserved by index), retries
    transport failures with exponential backoff, and records per-call
    latencies and retry counts for reporting.
    """

    def __init__(
        self,
        descriptor: BackendDescriptor,
        *,
        batch_size: int = 32,
        backoff_base: float = 0.1,
        transport: httpx.BaseTransport | None = None,
    ):
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        self.descriptor = descriptor
        self.id = descriptor.id
        self.kind = descriptor.kind
        self.label_set = descriptor.label_set
        self.batch_size = batch_size
        self.backoff_base = backoff_base
        self.latencies: list[float] = []
        self.retries_total = 0
        self._client = httpx.Client(
            base_url=descriptor.url, timeout=descriptor.timeout, transport=transport
        )

    def close(self) -> None:
        self._client.close()

    def predict_batch(self, texts: Sequence[str]) -> list:
        out: list = []
        for start in range(0, len(texts), self.batch_size):
            out.extend(self._call(list(texts[start : start + self.batch_size])))
        return out

    def _call(self, texts: list[str]) -> list:
        attempts = self.descriptor.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                self.retries_total += 1
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            started = time.monotonic()
            try:
                response = self._client.post(PREDICT_PATH, json={"inputs": texts})
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            self.latencies.append(time.monotonic() - started)
            if response.status_code >= 500:
                last_error = BackendError(
                    f"backend {self.id!r} answered {response.status_code}"
                )
                continue
            if response.status_code != 200:
                raise ProtocolError(
                    f"backend {self.id!r} answered {response.status_code}: "
                    f"{_excerpt(response.text)}"
                )
            return self._decode(response, len(texts))
        raise BackendError(
            f"backend {self.id!r} unreachable after {attempts} attempts: {last_error}"
        )

    def _decode(self, response: httpx.Response, n_inputs: int) -> list:
        try:
            payload = response.json()
        except json.JSONDecodeError as exc:
            raise ProtocolError(
                f"backend {self.id!r} returned non-JSON: {_excerpt(response.text)}"
            ) from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("outputs"), list):
            raise ProtocolError(f"missing 'outputs' list: {_excerpt(payload)}")
        outputs = payload["outputs"]
        if len(outputs) != n_inputs:
            raise ProtocolError(
                f"backend {self.id!r} answered {len(outputs)} outputs for {n_inputs} inputs"
            )
        if self.kind == KIND_CLASSIFICATION:
            return [decode_distribution(o, self.label_set) for o in outputs]
        return [decode_spans(o) for o in outputs]


# ---------------------------------------------------------------------------
# Mock backend


@dataclass
class MockBackendSpec:
    """Deterministic scripted backend.

    `responses` maps the fnv1a64 hex of an input text to its raw payload
    (distribution object or span list). Unknown texts fall back to
    `entity_pattern` (entity kind only: every regex match becomes a span)
    and then to `default`. `latency_s` injects a fixed delay per call and
    `fail_first` makes the first N calls fail, for retry testing.
    """

    id: str
    kind: str
    label_set: tuple[str, ...] | None = None
    responses: dict[str, Any] = field(default_factory=dict)
    default: Any = None
    latency_s: float = 0.0
    fail_first: int = 0
    entity_pattern: str | None = None
    pattern_etype: str = "entity"

    def __post_init__(self):
        if self.kind not in (KIND_CLASSIFICATION, KIND_ENTITY):
            raise ValidationError(f"unknown mock kind {self.kind!r}")
        if self.kind == KIND_CLASSIFICATION and not self.label_set:
            raise ValidationError("classification mock needs a label_set")
        if self.entity_pattern is not None and self.kind != KIND_ENTITY:
            raise ValidationError("entity_pattern only applies to entity mocks")
        for key, payload in self.responses.items():
            self._validate_payload(payload, f"responses[{key}]")
        if self.default is not None:
            self._validate_payload(self.default, "default")

    def _validate_payload(self, payload: Any, where: str) -> None:
        try:
            if self.kind == KIND_CLASSIFICATION:
                decode_distribution(payload, self.label_set)
            else:
                decode_spans(payload)
        except ProtocolError as exc:
            raise ValidationError(f"mock {self.id!r} {where}: {exc}") from exc

    @classmethod
    def from_pairs(
        cls,
        id: str,
        kind: str,
        pairs: dict[str, Any],
        *,
        label_set: Sequence[str] | None = None,
        default: Any = None,
        **kwargs,
    ) -> "MockBackendSpec":
        """Build a spec from text -> payload pairs, hashing the texts."""
        return cls(
            id=id,
            kind=kind,
            label_set=tuple(label_set) if label_set else None,
            responses={text_key(t): payload for t, payload in pairs.items()},
            default=default,
            **kwargs,
        )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "label_set": list(self.label_set) if self.label_set else None,
            "responses": self.responses,
            "default": self.default,
            "latency_s": self.latency_s,
            "fail_first": self.fail_first,
            "entity_pattern": self.entity_pattern,
            "pattern_etype": self.pattern_etype,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MockBackendSpec":
        return cls(
            id=obj["id"],
            kind=obj["kind"],
            label_set=tuple(obj["label_set"]) if obj.get("label_set") else None,
            responses=dict(obj.get("responses", {})),
            default=obj.get("default"),
            latency_s=float(obj.get("latency_s", 0.0)),
            fail_first=int(obj.get("fail_first", 0)),
            entity_pattern=obj.get("entity_pattern"),
            pattern_etype=obj.get("pattern_etype", "entity"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "MockBackendSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")

    def lookup(self, text: str) -> Any:
        """Raw payload for a text; raises KeyError when nothing matches."""
        key = text_key(text)
        if key in self.responses:
            return self.responses[key]
        if self.entity_pattern is not None:
            return [
                {"start": m.start(), "end": m.end(), "etype": self.pattern_etype}
                for m in re.finditer(self.entity_pattern, text)
            ]
        if self.default is not None:
            return self.default
        raise KeyError(text)


class MockBackend(Predictor):
    """In-process predictor over a MockBackendSpec; honors the failure
    schedule and injected latency, and counts calls."""

    def __init__(self, spec: MockBackendSpec):
        self.spec = spec
        self.id = spec.id
        self.kind = spec.kind
        self.label_set = spec.label_set
        self.calls = 0
        self._fail_remaining = spec.fail_first
        self.latencies: list[float] = []
        self._lock = threading.Lock()

    def predict_batch(self, texts: Sequence[str]) -> list:
        with self._lock:
            self.calls += 1
            must_fail = self._fail_remaining > 0
            if must_fail:
                self._fail_remaining -= 1
        started = time.monotonic()
        if self.spec.latency_s:
            time.sleep(self.spec.latency_s)
        if must_fail:
            raise BackendError(f"mock backend {self.id!r}: scripted failure")
        out = []
        for text in texts:
            try:
                payload = self.spec.lookup(text)
            except KeyError:
                raise BackendError(
                    f"mock backend {self.id!r} has no response for {_excerpt(text)}"
                ) from None
            if self.kind == KIND_CLASSIFICATION:
                out.append(decode_distribution(payload, self.label_set))
            else:
                out.append(decode_spans(payload))
        self.latencies.append(time.monotonic() - started)
        return out


def mock_backend_app(spec: MockBackendSpec) -> FastAPI:
    """ASGI app serving a MockBackendSpec over the wire protocol."""
    app = FastAPI(title=f"mock backend {spec.id}")
    state = {"calls": 0, "fail_remaining": spec.fail_first}
    lock = threading.Lock()

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "id": spec.id, "kind": spec.kind}

    @app.post(PREDICT_PATH)
    async def predict(request: Request):
        with lock:
            state["calls"] += 1
            must_fail = state["fail_remaining"] > 0
            if must_fail:
                state["fail_remaining"] -= 1
        if spec.latency_s:
            time.sleep(spec.latency_s)
        if must_fail:
            return JSONResponse(
                {"error": {"code": "scripted_failure"}}, status_code=500
            )
        try:
            body = await request.json()
        except Exception:
            return JSONResponse(
                {"error": {"code": "invalid_json"}}, status_code=400
            )
        inputs = body.get("inputs") if isinstance(body, dict) else None
        if not isinstance(inputs, list) or not all(isinstance(t, str) for t in inputs):
            return JSONResponse(
                {"error": {"code": "invalid_request", "message": "'inputs' must be a list of strings"}},
                status_code=400,
            )
        outputs = []
        for text in inputs:
            try:
                outputs.append(spec.lookup(text))
            except KeyError:
                return JSONResponse(
                    {"error": {"code": "unknown_input", "message": _excerpt(text)}},
                    status_code=400,
                )
        return {"outputs": outputs}

    return app
