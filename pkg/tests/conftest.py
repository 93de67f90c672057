"""Shared test fixtures: deterministic mock backends and synthetic corpora.

Every predictor used by the suite is the in-repo mock backend (lookup table
or pattern rule); no external services are contacted.
"""

from __future__ import annotations

import contextlib
import threading
import time

from modelcascade.backends import MockBackend, MockBackendSpec
from modelcascade.cascade import CascadeConfig, CascadeStage
from modelcascade.corpus import Document
from modelcascade.models import KIND_CLASSIFICATION, KIND_ENTITY


def classification_mock(
    pairs: dict[str, dict[str, float]],
    label_set: tuple[str, ...],
    *,
    id: str = "mock-cls",
    default: dict[str, float] | None = None,
    fail_first: int = 0,
) -> MockBackend:
    spec = MockBackendSpec.from_pairs(
        id=id,
        kind=KIND_CLASSIFICATION,
        pairs=pairs,
        label_set=label_set,
        default=default,
        fail_first=fail_first,
    )
    return MockBackend(spec)


def pattern_ner_mock(
    pattern: str = r"xqent\d+",
    *,
    id: str = "mock-ner",
    etype: str = "entity",
    fail_first: int = 0,
) -> MockBackend:
    spec = MockBackendSpec(
        id=id,
        kind=KIND_ENTITY,
        entity_pattern=pattern,
        pattern_etype=etype,
        fail_first=fail_first,
    )
    return MockBackend(spec)


class RecordingPredictor:
    """Wraps a predictor, logging every batch it was asked to answer."""

    def __init__(self, inner):
        self.inner = inner
        self.id = inner.id
        self.kind = inner.kind
        self.label_set = inner.label_set
        self.calls: list[tuple[str, ...]] = []

    def predict_batch(self, texts):
        self.calls.append(tuple(texts))
        return self.inner.predict_batch(texts)


def two_stage_cascade(
    cheap: MockBackend,
    final: MockBackend,
    threshold: float,
    *,
    confidence: str = "max_prob",
) -> CascadeConfig:
    return CascadeConfig(
        stages=[
            CascadeStage(
                predictor=cheap, unit_cost=1.0, threshold=threshold,
                confidence=confidence, stage_id="cheap",
            ),
            CascadeStage(predictor=final, unit_cost=100.0, stage_id="final"),
        ]
    )


def make_docs(texts, prefix="d", labels=None):
    labels = labels or [None] * len(texts)
    return [
        Document(id=f"{prefix}{i}", text=t, gold_label=lab)
        for i, (t, lab) in enumerate(zip(texts, labels))
    ]


@contextlib.contextmanager
def serve_app(app):
    """Run an ASGI app on an ephemeral local port for real-socket tests."""
    import uvicorn

    config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("test server failed to start")
        time.sleep(0.01)
    port = server.servers[0].sockets[0].getsockname()[1]
    try:
        yield f"http://127.0.0.1:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout=5)
