"""Cascade execution: route a document through ordered stages, answering at
the first stage whose confidence strictly exceeds its threshold.

The final stage always answers; a threshold of 1.0 on a non-final stage
therefore means "never trust this stage" (confidence is capped at 1 and the
comparison is strict). Stage failures abort with stage/document context
rather than silently escalating, so savings accounting stays honest.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .confidence import resolve_confidence
from .corpus import Document
from .errors import BackendError, ValidationError
from .models import (
    KIND_CLASSIFICATION,
    KIND_ENTITY,
    LabelDistribution,
    NO_ENTITY,
    Predictor,
    WITH_ENTITY,
)

TASK_CLASSIFICATION = "classification"
TASK_ENTITY = "entity-recognition"


@dataclass
class CascadeStage:
    """One rung of the cascade.

    `threshold` must be present on every stage except the last. `unit_cost`
    is cost units per input character and must increase strictly along the
    cascade. For entity cascades the middle stage may carry a `router`:
    a binary classifier deciding whether this stage's span backend is
    trustworthy for a sentence.
    """

    predictor: Predictor
    unit_cost: float
    threshold: float | None = None
    confidence: str = "max_prob"
    stage_id: str | None = None
    router: Predictor | None = None

    @property
    def id(self) -> str:
        return self.stage_id if self.stage_id is not None else self.predictor.id


@dataclass
class CascadeConfig:
    stages: list[CascadeStage]
    task: str = TASK_CLASSIFICATION

    def validate(self) -> None:
        if len(self.stages) < 2:
            raise ValidationError("a cascade needs at least 2 stages")
        if self.task not in (TASK_CLASSIFICATION, TASK_ENTITY):
            raise ValidationError(f"unknown task {self.task!r}")
        ids = [s.id for s in self.stages]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"stage ids must be unique, got {ids}")
        prev_cost = -1.0
        for i, stage in enumerate(self.stages):
            final = i == len(self.stages) - 1
            if stage.unit_cost < 0:
                raise ValidationError(f"stage {stage.id}: unit_cost must be nonnegative")
            if stage.unit_cost <= prev_cost:
                raise ValidationError(
                    "unit costs must increase strictly along the cascade"
                )
            prev_cost = stage.unit_cost
            if final:
                if stage.threshold is not None:
                    raise ValidationError(f"final stage {stage.id} must not have a threshold")
            else:
                if stage.threshold is None:
                    raise ValidationError(f"non-final stage {stage.id} needs a threshold")
                if not (0.0 <= stage.threshold <= 1.0):
                    raise ValidationError(
                        f"stage {stage.id}: threshold {stage.threshold} outside [0, 1]"
                    )
                resolve_confidence(stage.confidence)
        if self.task == TASK_CLASSIFICATION:
            label_sets = {s.predictor.label_set for s in self.stages}
            if len(label_sets) != 1:
                raise ValidationError("all classification stages must share one label set")
            for stage in self.stages:
                if stage.predictor.kind != KIND_CLASSIFICATION:
                    raise ValidationError(
                        f"stage {stage.id}: classification cascade needs classification predictors"
                    )
        else:
            self._validate_entity_shape()

    def _validate_entity_shape(self) -> None:
        if len(self.stages) not in (2, 3):
            raise ValidationError("entity cascades support 2 or 3 stages")
        gate = self.stages[0]
        if gate.predictor.kind != KIND_CLASSIFICATION or set(gate.predictor.label_set or ()) != {
            NO_ENTITY,
            WITH_ENTITY,
        }:
            raise ValidationError(
                f"entity cascade stage 0 must be a {NO_ENTITY}/{WITH_ENTITY} classifier"
            )
        for stage in self.stages[1:]:
            if stage.predictor.kind != KIND_ENTITY:
                raise ValidationError(
                    f"stage {stage.id}: entity cascade backends must be entity-recognition"
                )
        if len(self.stages) == 3:
            mid = self.stages[1]
            if mid.router is None or mid.router.kind != KIND_CLASSIFICATION:
                raise ValidationError(
                    "3-stage entity cascade needs a classification router on the middle stage"
                )

    def with_threshold(self, stage_index: int, threshold: float | None) -> "CascadeConfig":
        stages = list(self.stages)
        stages[stage_index] = replace(stages[stage_index], threshold=threshold)
        return CascadeConfig(stages=stages, task=self.task)


@dataclass(frozen=True)
class TriageOutcome:
    """Per-document record of where the cascade answered and at what cost."""

    doc_id: str
    answering_stage: int
    prediction: LabelDistribution
    confidences: tuple[float, ...]
    cost: float
    n_stages: int
    n_chars: int

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "answering_stage": self.answering_stage,
            "prediction": self.prediction.to_json(),
            "confidences": list(self.confidences),
            "cost": self.cost,
            "n_stages": self.n_stages,
            "n_chars": self.n_chars,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TriageOutcome":
        return cls(
            doc_id=obj["doc_id"],
            answering_stage=int(obj["answering_stage"]),
            prediction=LabelDistribution(
                {str(k): float(v) for k, v in obj["prediction"].items()}
            ),
            confidences=tuple(float(c) for c in obj["confidences"]),
            cost=float(obj["cost"]),
            n_stages=int(obj["n_stages"]),
            n_chars=int(obj["n_chars"]),
        )


def triage_one(cascade: CascadeConfig, doc: Document) -> TriageOutcome:
    """Run one document through the cascade (classification task)."""
    return triage_batch(cascade, [doc])[0]


def triage_batch(cascade: CascadeConfig, docs: Sequence[Document]) -> list[TriageOutcome]:
    """Triage documents in order; equivalent to mapping triage_one.

    Pending documents are batched per stage before escalation, which keeps
    backend calls chunky without changing any outcome.
    """
    cascade.validate()
    if cascade.task != TASK_CLASSIFICATION:
        raise ValidationError("triage_batch handles classification cascades; use the entity pipeline")
    if not docs:
        return []

    n_stages = len(cascade.stages)
    pending = list(range(len(docs)))
    confidences: list[list[float]] = [[] for _ in docs]
    costs = [0.0 for _ in docs]
    outcomes: list[TriageOutcome | None] = [None for _ in docs]

    for stage_index, stage in enumerate(cascade.stages):
        if not pending:
            break
        conf_fn = resolve_confidence(stage.confidence)
        texts = [docs[j].text for j in pending]
        try:
            preds = stage.predictor.predict_batch(texts)
        except Exception as exc:
            raise BackendError(
                f"predictor {stage.predictor.id!r} failed: {exc}",
                stage=stage_index,
                doc_id=docs[pending[0]].id,
            ) from exc
        still_pending: list[int] = []
        final = stage_index == n_stages - 1
        for j, pred in zip(pending, preds):
            conf = conf_fn(pred)
            confidences[j].append(conf)
            costs[j] += stage.unit_cost * len(docs[j].text)
            if final or conf > stage.threshold:
                outcomes[j] = TriageOutcome(
                    doc_id=docs[j].id,
                    answering_stage=stage_index,
                    prediction=pred,
                    confidences=tuple(confidences[j]),
                    cost=costs[j],
                    n_stages=n_stages,
                    n_chars=len(docs[j].text),
                )
            else:
                still_pending.append(j)
        pending = still_pending

    assert not pending  # the final stage always answers
    return [o for o in outcomes if o is not None]
