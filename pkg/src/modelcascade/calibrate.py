"""Threshold calibration: sweep a candidate grid on a validation set and
pick the smallest threshold whose performance meets the user's floor.

The sweep computes every stage's raw predictions once (they do not depend
on the threshold) and replays the routing rule per grid point, so it is
exactly equivalent to re-running the full cascade at each candidate.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .cascade import CascadeConfig, TASK_CLASSIFICATION
from .confidence import resolve_confidence
from .corpus import Document
from .errors import BackendError, ValidationError

DEFAULT_GRID_POINTS = 201

CURVE_CSV_FIELDS = ("threshold", "accuracy", "savings_docs", "savings_cost")


def default_grid(points: int = DEFAULT_GRID_POINTS) -> tuple[float, ...]:
    """Evenly spaced candidate thresholds covering [0, 1]."""
    if points < 2:
        raise ValidationError("grid needs at least 2 points")
    return tuple(i / (points - 1) for i in range(points))


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    accuracy: float
    savings_docs: float
    savings_cost: float
    stage_counts: tuple[int, ...]


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    floor: float
    achieved: float
    shortfall: bool
    curve: tuple[SweepPoint, ...]
    grid: tuple[float, ...]

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "floor": self.floor,
            "achieved": self.achieved,
            "shortfall": self.shortfall,
            "grid": list(self.grid),
            "curve": [
                {
                    "threshold": p.threshold,
                    "accuracy": p.accuracy,
                    "savings_docs": p.savings_docs,
                    "savings_cost": p.savings_cost,
                    "stage_counts": list(p.stage_counts),
                }
                for p in self.curve
            ],
        }


def _validate_grid(grid: Sequence[float]) -> None:
    if not grid:
        raise ValidationError("grid must be nonempty")
    for c in grid:
        if not (0.0 <= c <= 1.0):
            raise ValidationError(f"grid value {c} outside [0, 1]")
    for a, b in zip(grid, grid[1:]):
        if b <= a:
            raise ValidationError("grid values must be strictly increasing")


def sweep(
    cascade: CascadeConfig,
    docs: Sequence[Document],
    reference: Mapping[str, str],
    grid: Sequence[float] | None = None,
    tunable_stage: int = 0,
) -> list[SweepPoint]:
    """Evaluate the cascade at every candidate threshold for one stage.

    Non-tunable stages keep their configured thresholds. `reference` maps
    every doc id to its reference label (gold, or the final stage's answer
    when calibrating for agreement).
    """
    cascade.validate()
    if cascade.task != TASK_CLASSIFICATION:
        raise ValidationError("sweep handles classification cascades; see entity.sweep_gate")
    grid = tuple(grid) if grid is not None else default_grid()
    _validate_grid(grid)
    n_stages = len(cascade.stages)
    if not (0 <= tunable_stage < n_stages - 1):
        raise ValidationError(f"tunable_stage {tunable_stage} is not a non-final stage")
    if not docs:
        raise ValidationError("sweep needs at least one document")
    for d in docs:
        if d.id not in reference:
            raise ValidationError(f"missing reference label for doc {d.id!r}")

    # One prediction pass per stage; thresholds do not affect predictions.
    texts = [d.text for d in docs]
    stage_confs: list[list[float]] = []
    stage_labels: list[list[str]] = []
    for idx, stage in enumerate(cascade.stages):
        try:
            preds = stage.predictor.predict_batch(texts)
        except Exception as exc:
            raise BackendError(
                f"predictor {stage.predictor.id!r} failed: {exc}",
                stage=idx,
                doc_id=docs[0].id,
            ) from exc
        conf_fn = resolve_confidence(stage.confidence)
        stage_confs.append([conf_fn(p) for p in preds])
        stage_labels.append([p.top_label() for p in preds])

    base_thresholds = [s.threshold for s in cascade.stages]
    n = len(docs)
    lengths = [len(t) for t in texts]
    total_chars = sum(lengths)
    points: list[SweepPoint] = []
    for c in grid:
        thresholds = list(base_thresholds)
        thresholds[tunable_stage] = c
        counts = [0] * n_stages
        correct = 0
        final_chars = 0
        for j in range(n):
            answering = n_stages - 1
            for i in range(n_stages - 1):
                if stage_confs[i][j] > thresholds[i]:
                    answering = i
                    break
            counts[answering] += 1
            if answering == n_stages - 1:
                final_chars += lengths[j]
            if stage_labels[answering][j] == reference[docs[j].id]:
                correct += 1
        points.append(
            SweepPoint(
                threshold=c,
                accuracy=correct / n,
                savings_docs=(n - counts[-1]) / n,
                savings_cost=1.0 - final_chars / total_chars,
                stage_counts=tuple(counts),
            )
        )
    return points


def find_threshold(curve: Sequence[SweepPoint], floor: float) -> CalibrationResult:
    """Pick the smallest grid threshold whose accuracy meets the floor.

    Smaller thresholds save more, so the smallest qualifying candidate
    maximizes savings subject to the floor. If nothing qualifies the result
    is threshold 1.0 with the shortfall flag set.
    """
    if not (0.0 < floor <= 1.0):
        raise ValidationError(f"accuracy floor must be in (0, 1], got {floor}")
    if not curve:
        raise ValidationError("curve must be nonempty")
    thresholds = [p.threshold for p in curve]
    for a, b in zip(thresholds, thresholds[1:]):
        if b <= a:
            raise ValidationError("curve must be sorted by strictly increasing threshold")

    grid = tuple(thresholds)
    for point in curve:
        if point.accuracy >= floor:
            return CalibrationResult(
                threshold=point.threshold,
                floor=floor,
                achieved=point.accuracy,
                shortfall=False,
                curve=tuple(curve),
                grid=grid,
            )
    return CalibrationResult(
        threshold=1.0,
        floor=floor,
        achieved=curve[-1].accuracy,
        shortfall=True,
        curve=tuple(curve),
        grid=grid,
    )


def calibrate_cascade(
    cascade: CascadeConfig,
    docs: Sequence[Document],
    reference: Mapping[str, str],
    floors: Sequence[float],
    grid: Sequence[float] | None = None,
) -> tuple[CascadeConfig, list[CalibrationResult]]:
    """Calibrate every non-final stage front-to-back.

    While stage i is tuned, earlier stages keep their calibrated thresholds
    and later tunable stages are pinned to 1.0 (never trusted). Returns the
    calibrated config plus the per-stage results, in stage order.
    """
    cascade.validate()
    n_tunable = len(cascade.stages) - 1
    if len(floors) != n_tunable:
        raise ValidationError(
            f"need one floor per non-final stage ({n_tunable}), got {len(floors)}"
        )
    work = cascade
    for i in range(n_tunable):
        work = work.with_threshold(i, 1.0)
    results: list[CalibrationResult] = []
    for i in range(n_tunable):
        curve = sweep(work, docs, reference, grid, tunable_stage=i)
        result = find_threshold(curve, floors[i])
        work = work.with_threshold(i, result.threshold)
        results.append(result)
    return work, results


# ---------------------------------------------------------------------------
# Export


def curve_to_csv(points: Sequence[SweepPoint]) -> str:
    """Fixed-header CSV: threshold, accuracy, savings_docs, savings_cost,
    stage_0_count, ..., stage_k_count."""
    if not points:
        raise ValidationError("cannot export an empty curve")
    n_stages = len(points[0].stage_counts)
    header = list(CURVE_CSV_FIELDS) + [f"stage_{i}_count" for i in range(n_stages)]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for p in points:
        writer.writerow(
            [repr(p.threshold), repr(p.accuracy), repr(p.savings_docs), repr(p.savings_cost)]
            + [str(c) for c in p.stage_counts]
        )
    return buf.getvalue()


def curve_from_csv(text: str) -> list[SweepPoint]:
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        raise ValidationError("empty curve CSV")
    header = rows[0]
    if tuple(header[:4]) != CURVE_CSV_FIELDS:
        raise ValidationError(f"unexpected curve CSV header: {header}")
    points = []
    for row in rows[1:]:
        points.append(
            SweepPoint(
                threshold=float(row[0]),
                accuracy=float(row[1]),
                savings_docs=float(row[2]),
                savings_cost=float(row[3]),
                stage_counts=tuple(int(c) for c in row[4:]),
            )
        )
    return points


def save_calibration(result: CalibrationResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result.to_json(), indent=2), encoding="utf-8")
