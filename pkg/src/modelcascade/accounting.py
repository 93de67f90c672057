"""Savings, accuracy, cost and runtime summaries for triage runs.

savings_docs counts routing units (documents for classification, sentences
for entity runs) spared the final stage; savings_cost weights each unit by
its character count, mirroring the gap between data-fraction savings and
compute-time savings when document lengths differ.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .cascade import CascadeConfig, TriageOutcome
from .corpus import EntitySpan
from .entity import (
    NerOutcome,
    ROUTED_FULL,
    ROUTED_MID,
    ROUTED_SKIPPED,
    micro_entity_f1,
)
from .errors import ValidationError


@dataclass(frozen=True)
class CostModel:
    """Per-stage unit costs (cost units per character), strictly increasing,
    plus optional measured per-call latencies in seconds."""

    unit_costs: tuple[float, ...]
    latencies: dict[int, tuple[float, ...]] | None = None

    def __post_init__(self):
        prev = -1.0
        for c in self.unit_costs:
            if c < 0:
                raise ValidationError("unit costs must be nonnegative")
            if c <= prev:
                raise ValidationError("unit costs must be strictly increasing")
            prev = c

    @classmethod
    def from_cascade(cls, cascade: CascadeConfig) -> "CostModel":
        return cls(unit_costs=tuple(s.unit_cost for s in cascade.stages))


def _require_outcomes(outcomes: Sequence) -> None:
    if not outcomes:
        raise ValidationError("no outcomes to aggregate")


def savings_docs(outcomes: Sequence[TriageOutcome] | Sequence[NerOutcome]) -> float:
    """Fraction of routing units that never reached the final stage."""
    _require_outcomes(outcomes)
    if isinstance(outcomes[0], NerOutcome):
        total = sum(len(o.verdicts) for o in outcomes)
        spared = sum(
            1 for o in outcomes for v in o.verdicts if v.routed_to != ROUTED_FULL
        )
        return spared / total if total else 0.0
    n = len(outcomes)
    early = sum(1 for o in outcomes if o.answering_stage < o.n_stages - 1)
    return early / n


def savings_cost(
    outcomes: Sequence[TriageOutcome] | Sequence[NerOutcome],
    cost_model: CostModel,
) -> float:
    """1 - (final-stage cost incurred) / (final-stage cost if everything had
    reached it). Character-weighted; the final stage's unit cost cancels."""
    _require_outcomes(outcomes)
    if isinstance(outcomes[0], NerOutcome):
        total = sum(v.n_chars for o in outcomes for v in o.verdicts)
        final = sum(
            v.n_chars for o in outcomes for v in o.verdicts if v.routed_to == ROUTED_FULL
        )
        return 1.0 - final / total if total else 0.0
    for o in outcomes:
        if o.n_stages != len(cost_model.unit_costs):
            raise ValidationError(
                f"cost model covers {len(cost_model.unit_costs)} stages, outcome has {o.n_stages}"
            )
    total = sum(o.n_chars for o in outcomes)
    final = sum(o.n_chars for o in outcomes if o.answering_stage == o.n_stages - 1)
    return 1.0 - final / total


def accuracy(outcomes: Sequence[TriageOutcome], reference: Mapping[str, str]) -> float:
    """Fraction of documents whose returned argmax equals the reference label."""
    _require_outcomes(outcomes)
    correct = 0
    for o in outcomes:
        if o.doc_id not in reference:
            raise ValidationError(f"missing reference label for doc {o.doc_id!r}")
        if o.prediction.top_label() == reference[o.doc_id]:
            correct += 1
    return correct / len(outcomes)


def ner_scores(
    outcomes: Sequence[NerOutcome],
    reference: Mapping[str, Sequence[EntitySpan]],
) -> tuple[float, float, float]:
    _require_outcomes(outcomes)
    pairs = []
    for o in outcomes:
        if o.doc_id not in reference:
            raise ValidationError(f"missing reference spans for doc {o.doc_id!r}")
        pairs.append((o.predicted, reference[o.doc_id]))
    return micro_entity_f1(pairs)


@dataclass(frozen=True)
class RunReport:
    n_docs: int
    task: str
    savings_docs: float
    savings_cost: float
    savings_basis: str  # "documents" | "sentences"
    performance: dict[str, float]  # {"accuracy": x} or {"precision","recall","f1"}
    performance_basis: str  # "gold" | "agreement" | "none"
    thresholds: tuple[float | None, ...]
    stage_counts: tuple[int, ...]
    total_cost: float
    cost_note: str
    wall_clock: dict[str, dict[str, float]] | None = None

    def to_json(self) -> dict:
        return {
            "n_docs": self.n_docs,
            "task": self.task,
            "savings_docs": self.savings_docs,
            "savings_cost": self.savings_cost,
            "savings_basis": self.savings_basis,
            "performance": dict(self.performance),
            "performance_basis": self.performance_basis,
            "thresholds": list(self.thresholds),
            "stage_counts": list(self.stage_counts),
            "total_cost": self.total_cost,
            "cost_note": self.cost_note,
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunReport":
        return cls(
            n_docs=int(obj["n_docs"]),
            task=obj["task"],
            savings_docs=float(obj["savings_docs"]),
            savings_cost=float(obj["savings_cost"]),
            savings_basis=obj["savings_basis"],
            performance={str(k): float(v) for k, v in obj["performance"].items()},
            performance_basis=obj["performance_basis"],
            thresholds=tuple(
                None if t is None else float(t) for t in obj["thresholds"]
            ),
            stage_counts=tuple(int(c) for c in obj["stage_counts"]),
            total_cost=float(obj["total_cost"]),
            cost_note=obj["cost_note"],
            wall_clock=obj.get("wall_clock"),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        perf_fields = sorted(self.performance)
        header = (
            ["n_docs", "task", "savings_docs", "savings_cost", "savings_basis"]
            + perf_fields
            + ["performance_basis", "total_cost"]
            + [f"stage_{i}_count" for i in range(len(self.stage_counts))]
        )
        writer.writerow(header)
        writer.writerow(
            [self.n_docs, self.task, repr(self.savings_docs), repr(self.savings_cost), self.savings_basis]
            + [repr(self.performance[f]) for f in perf_fields]
            + [self.performance_basis, repr(self.total_cost)]
            + [str(c) for c in self.stage_counts]
        )
        return buf.getvalue()


DEFAULT_COST_NOTE = (
    "cost units are abstract; stage unit costs come from the cascade config"
)
ILLUSTRATIVE_COST_NOTE = (
    "cost units are abstract; default 1:100 cheap:final ratio is illustrative only"
)


def _wall_clock_summary(cost_model: CostModel) -> dict[str, dict[str, float]] | None:
    if not cost_model.latencies:
        return None
    out: dict[str, dict[str, float]] = {}
    for stage, samples in sorted(cost_model.latencies.items()):
        if not samples:
            continue
        out[str(stage)] = {
            "mean_s": statistics.fmean(samples),
            "std_s": statistics.pstdev(samples) if len(samples) > 1 else 0.0,
            "calls": float(len(samples)),
        }
    return out or None


def make_report(
    outcomes: Sequence[TriageOutcome] | Sequence[NerOutcome],
    reference: Mapping | None,
    cost_model: CostModel,
    cascade: CascadeConfig,
    *,
    performance_basis: str = "gold",
    cost_note: str = DEFAULT_COST_NOTE,
) -> RunReport:
    """Aggregate outcomes into a single report row.

    `reference` maps doc id to a label (classification) or to gold spans
    (entity task); pass None to omit performance. Outcomes are sorted by
    doc id first so concurrent producers cannot affect the result.
    """
    _require_outcomes(outcomes)
    outcomes = sorted(outcomes, key=lambda o: o.doc_id)
    is_ner = isinstance(outcomes[0], NerOutcome)

    if is_ner:
        n_stages = len(cascade.stages)
        counts = [0] * n_stages
        for o in outcomes:
            for v in o.verdicts:
                if v.routed_to == ROUTED_SKIPPED:
                    counts[0] += 1
                elif v.routed_to == ROUTED_MID:
                    counts[1] += 1
                else:
                    counts[n_stages - 1] += 1
        if reference is not None:
            p, r, f1 = ner_scores(outcomes, reference)
            performance = {"precision": p, "recall": r, "f1": f1}
        else:
            performance, performance_basis = {}, "none"
        savings_basis = "sentences"
    else:
        n_stages = outcomes[0].n_stages
        if any(o.n_stages != n_stages for o in outcomes):
            raise ValidationError("outcomes disagree on the number of stages")
        if n_stages != len(cascade.stages):
            raise ValidationError(
                f"outcomes report {n_stages} stages but the cascade has {len(cascade.stages)}"
            )
        counts = [0] * n_stages
        for o in outcomes:
            counts[o.answering_stage] += 1
        if reference is not None:
            performance = {"accuracy": accuracy(outcomes, reference)}
        else:
            performance, performance_basis = {}, "none"
        savings_basis = "documents"

    return RunReport(
        n_docs=len(outcomes),
        task=cascade.task,
        savings_docs=savings_docs(outcomes),
        savings_cost=savings_cost(outcomes, cost_model),
        savings_basis=savings_basis,
        performance=performance,
        performance_basis=performance_basis,
        thresholds=tuple(s.threshold for s in cascade.stages),
        stage_counts=tuple(counts),
        total_cost=sum(o.cost for o in outcomes),
        cost_note=cost_note,
        wall_clock=_wall_clock_summary(cost_model),
    )


def save_report(report: RunReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")


def load_report(path: str | Path) -> RunReport:
    return RunReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
