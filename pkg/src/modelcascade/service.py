"""HTTP serving endpoint that runs a calibrated cascade.

Routes:
    POST /v1/triage   body {"inputs": [{"id", "text"}, ...]}
                      -> {"outputs": [{"id", "label"|"entities",
                          "answering_stage", "confidence"}, ...]}
    GET  /v1/health   build/version metadata
    GET  /v1/config   the active cascade, thresholds included

Malformed requests answer 4xx with a machine-readable error code; a backend
outage answers 5xx naming the failing stage. Triage of each request is
independent; the only shared mutable state is an atomically updated
request counter.
"""

from __future__ import annotations

import threading
from typing import Sequence

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .cascade import CascadeConfig, TASK_CLASSIFICATION, triage_batch
from .config import cascade_summary
from .corpus import Document
from .entity import NerOutcome, ROUTED_FULL, ROUTED_MID, gated_ner_triage, routed_ner_triage
from .errors import BackendError, TriageError, ValidationError


def _error(status: int, code: str, message: str, **extra) -> JSONResponse:
    return JSONResponse({"error": {"code": code, "message": message, **extra}}, status_code=status)


def _parse_inputs(body) -> list[Document]:
    if not isinstance(body, dict) or not isinstance(body.get("inputs"), list):
        raise ValidationError("body must be an object with an 'inputs' list")
    docs = []
    for i, item in enumerate(body["inputs"]):
        if not isinstance(item, dict):
            raise ValidationError(f"inputs[{i}] must be an object")
        doc_id = item.get("id")
        text = item.get("text")
        if not isinstance(doc_id, str) or not doc_id:
            raise ValidationError(f"inputs[{i}] needs a nonempty string 'id'")
        if not isinstance(text, str) or not text:
            raise ValidationError(f"inputs[{i}] needs a nonempty string 'text'")
        docs.append(Document(id=doc_id, text=text))
    return docs


def _ner_answering_stage(outcome: NerOutcome, n_stages: int) -> int:
    stage = 0
    for v in outcome.verdicts:
        if v.routed_to == ROUTED_MID:
            stage = max(stage, 1)
        elif v.routed_to == ROUTED_FULL:
            stage = max(stage, n_stages - 1)
    return stage


def _run_entity(cascade: CascadeConfig, docs: Sequence[Document]) -> list[dict]:
    stages = cascade.stages
    outputs = []
    for doc in docs:
        if len(stages) == 2:
            outcome = gated_ner_triage(
                stages[0].predictor,
                stages[1].predictor,
                doc,
                stages[0].threshold,
                confidence=stages[0].confidence,
                gate_cost=stages[0].unit_cost,
                backend_cost=stages[1].unit_cost,
            )
        else:
            outcome = routed_ner_triage(
                stages[0].predictor,
                stages[1].router,
                stages[1].predictor,
                stages[2].predictor,
                doc,
                stages[0].threshold,
                stages[1].threshold,
                confidence=stages[0].confidence,
                gate_cost=stages[0].unit_cost,
                mid_cost=stages[1].unit_cost,
                full_cost=stages[2].unit_cost,
            )
        # document-level confidence: the weakest sentence verdict drove routing
        confidence = min((v.confidence for v in outcome.verdicts), default=1.0)
        outputs.append(
            {
                "id": doc.id,
                "entities": [s.to_json() for s in outcome.predicted],
                "answering_stage": _ner_answering_stage(outcome, len(stages)),
                "confidence": confidence,
            }
        )
    return outputs


def create_app(cascade: CascadeConfig) -> FastAPI:
    cascade.validate()
    app = FastAPI(title="modelcascade", version=__version__)
    counter_lock = threading.Lock()
    counters = {"triage_requests": 0, "documents": 0}

    @app.get("/v1/health")
    def health():
        with counter_lock:
            served = dict(counters)
        return {
            "status": "ok",
            "service": "modelcascade",
            "version": __version__,
            "task": cascade.task,
            "counters": served,
        }

    @app.get("/v1/config")
    def config():
        return cascade_summary(cascade)

    @app.post("/v1/triage")
    async def triage(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error(400, "invalid_json", "request body is not valid JSON")
        try:
            docs = _parse_inputs(body)
        except ValidationError as exc:
            return _error(400, "invalid_request", str(exc))
        with counter_lock:
            counters["triage_requests"] += 1
            counters["documents"] += len(docs)
        if not docs:
            return {"outputs": []}
        try:
            if cascade.task == TASK_CLASSIFICATION:
                outcomes = triage_batch(cascade, docs)
                outputs = [
                    {
                        "id": o.doc_id,
                        "label": o.prediction.top_label(),
                        "answering_stage": o.answering_stage,
                        "confidence": o.confidences[o.answering_stage],
                    }
                    for o in outcomes
                ]
            else:
                outputs = _run_entity(cascade, docs)
        except BackendError as exc:
            return _error(502, "backend_failure", str(exc), stage=exc.stage)
        except TriageError as exc:
            return _error(500, "triage_failure", str(exc))
        return {"outputs": outputs}

    return app


def serve(cascade: CascadeConfig, bind: str = "127.0.0.1:8080") -> None:
    """Run the service until interrupted (blocking)."""
    import uvicorn

    host, _, port = bind.partition(":")
    uvicorn.run(create_app(cascade), host=host or "127.0.0.1", port=int(port or 8080))
