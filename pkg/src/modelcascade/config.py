"""Cascade config files: ordered stage entries naming a predictor (trained
model path, backend URL, or inline/loaded mock), a threshold, a confidence
function and a unit cost.

Example:

    {
      "task": "classification",
      "stages": [
        {"id": "cheap", "predictor": {"type": "model", "path": "cheap_model"},
         "threshold": 0.8, "confidence": "max_prob", "unit_cost": 1.0},
        {"id": "full", "predictor": {"type": "http", "url": "http://host:9000",
         "kind": "classification", "label_set": ["a", "b"]}, "unit_cost": 100.0}
      ]
    }

Entity cascades use task "entity-recognition"; a 3-stage entity cascade
carries a "router" predictor entry on its middle stage. Backend URLs can be
overridden per stage with MODELCASCADE_BACKEND_<STAGE_ID>_URL.
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Any

import httpx

from .backends import BackendDescriptor, HttpBackend, MockBackend, MockBackendSpec
from .cascade import CascadeConfig, CascadeStage
from .errors import ValidationError
from .models import LinearTextClassifier, Predictor

ENV_BIND = "MODELCASCADE_BIND"


def _env_url_override(stage_id: str) -> str | None:
    key = "MODELCASCADE_BACKEND_" + re.sub(r"[^A-Za-z0-9]", "_", stage_id).upper() + "_URL"
    return os.environ.get(key)


def load_cascade_file(path: str | Path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"cascade config {path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ValidationError(f"cascade config {path}: expected an object")
    return obj


def build_predictor(
    spec: Any,
    *,
    base_dir: Path | None = None,
    stage_id: str | None = None,
    transport: httpx.BaseTransport | None = None,
) -> Predictor:
    if not isinstance(spec, dict) or "type" not in spec:
        raise ValidationError(f"predictor entry must be an object with 'type', got {spec!r}")
    kind = spec["type"]
    if kind == "model":
        path = Path(spec.get("path", ""))
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return LinearTextClassifier.load(path)
    if kind == "http":
        url = spec.get("url")
        if stage_id:
            url = _env_url_override(stage_id) or url
        descriptor = BackendDescriptor(
            id=spec.get("id", stage_id or "backend"),
            url=url,
            kind=spec.get("kind", "classification"),
            label_set=tuple(spec["label_set"]) if spec.get("label_set") else None,
            timeout=float(spec.get("timeout", 10.0)),
            max_retries=int(spec.get("max_retries", 2)),
        )
        return HttpBackend(
            descriptor,
            batch_size=int(spec.get("batch_size", 32)),
            transport=transport,
        )
    if kind == "mock":
        if "path" in spec:
            path = Path(spec["path"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return MockBackend(MockBackendSpec.load(path))
        if "spec" in spec:
            return MockBackend(MockBackendSpec.from_json(spec["spec"]))
        raise ValidationError("mock predictor entry needs 'path' or 'spec'")
    raise ValidationError(f"unknown predictor type {kind!r}")


def build_cascade(
    config: dict,
    *,
    base_dir: Path | None = None,
    transport: httpx.BaseTransport | None = None,
) -> CascadeConfig:
    """Instantiate predictors and validate the assembled cascade."""
    stages_cfg = config.get("stages")
    if not isinstance(stages_cfg, list) or len(stages_cfg) < 2:
        raise ValidationError("cascade config needs a 'stages' list with >= 2 entries")
    stages = []
    for i, entry in enumerate(stages_cfg):
        if not isinstance(entry, dict):
            raise ValidationError(f"stage {i} must be an object")
        stage_id = entry.get("id") or f"stage{i}"
        predictor = build_predictor(
            entry.get("predictor"),
            base_dir=base_dir,
            stage_id=stage_id,
            transport=transport,
        )
        router = None
        if entry.get("router") is not None:
            router = build_predictor(
                entry["router"], base_dir=base_dir, stage_id=f"{stage_id}-router",
                transport=transport,
            )
        threshold = entry.get("threshold")
        stages.append(
            CascadeStage(
                predictor=predictor,
                unit_cost=float(entry.get("unit_cost", 10.0 ** i * 1.0)),
                threshold=None if threshold is None else float(threshold),
                confidence=entry.get("confidence", "max_prob"),
                stage_id=stage_id,
                router=router,
            )
        )
    cascade = CascadeConfig(stages=stages, task=config.get("task", "classification"))
    cascade.validate()
    return cascade


def cascade_summary(cascade: CascadeConfig) -> dict:
    """Serializable view of the active cascade (thresholds included)."""
    return {
        "task": cascade.task,
        "stages": [
            {
                "id": s.id,
                "threshold": s.threshold,
                "confidence": s.confidence,
                "unit_cost": s.unit_cost,
                "predictor": {
                    "id": s.predictor.id,
                    "kind": s.predictor.kind,
                    "label_set": list(s.predictor.label_set) if s.predictor.label_set else None,
                },
                "router": None if s.router is None else {
                    "id": s.router.id,
                    "kind": s.router.kind,
                    "label_set": list(s.router.label_set) if s.router.label_set else None,
                },
            }
            for s in cascade.stages
        ],
    }
