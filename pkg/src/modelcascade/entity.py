"""Sentence-level triage for entity recognition.

Savings come from sentences a binary presence gate confidently marks
no-entity: those are skipped outright. Surviving sentences are re-joined
with single spaces and sent to a span backend in one call per document,
and the returned spans are mapped back to document coordinates. A 3-stage
variant adds a router that decides, per surviving sentence, whether a
cheaper mid-tier span backend is trustworthy or the full backend is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .calibrate import CalibrationResult, SweepPoint, default_grid, find_threshold, _validate_grid
from .confidence import resolve_confidence
from .corpus import Document, EntitySpan, TaggedSentence, split_sentences, tags_to_spans
from .errors import BackendError, RemapError, ValidationError
from .models import (
    KIND_ENTITY,
    LabelDistribution,
    NO_ENTITY,
    Predictor,
    WITH_ENTITY,
)

ROUTED_SKIPPED = "skipped"
ROUTED_MID = "mid"
ROUTED_FULL = "full"

# Router classes: was the mid-tier backend's span set exactly right?
ROUTER_CORRECT = "correct"
ROUTER_INCORRECT = "incorrect"

DEFAULT_GATE_COST = 1.0
DEFAULT_ROUTER_COST = 1.0
DEFAULT_MID_COST = 10.0
DEFAULT_FULL_COST = 100.0


@dataclass(frozen=True)
class SentenceVerdict:
    index: int
    distribution: LabelDistribution
    confidence: float
    routed_to: str
    n_chars: int
    router_confidence: float | None = None

    def to_json(self) -> dict:
        obj = {
            "index": self.index,
            "distribution": self.distribution.to_json(),
            "confidence": self.confidence,
            "routed_to": self.routed_to,
            "n_chars": self.n_chars,
        }
        if self.router_confidence is not None:
            obj["router_confidence"] = self.router_confidence
        return obj


@dataclass(frozen=True)
class NerOutcome:
    doc_id: str
    predicted: tuple[EntitySpan, ...]
    verdicts: tuple[SentenceVerdict, ...]
    skipped_fraction: float
    cost: float

    def routing_counts(self) -> dict[str, int]:
        counts = {ROUTED_SKIPPED: 0, ROUTED_MID: 0, ROUTED_FULL: 0}
        for v in self.verdicts:
            counts[v.routed_to] += 1
        return counts

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "spans": [s.to_json() for s in self.predicted],
            "verdicts": [v.to_json() for v in self.verdicts],
            "skipped_fraction": self.skipped_fraction,
            "cost": self.cost,
            "routing_counts": self.routing_counts(),
        }


@dataclass(frozen=True)
class EntityHistogram:
    """Distribution of spans-per-sentence over a tagged corpus."""

    counts: dict[int, int]
    no_entity_fraction: float

    def to_csv(self) -> str:
        lines = ["entities_per_sentence,sentence_count"]
        for k in sorted(self.counts):
            lines.append(f"{k},{self.counts[k]}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Training data builders


def presence_examples(sentences: Sequence[TaggedSentence]) -> list[tuple[str, str]]:
    """Binary training pairs for the presence gate: with-entity iff the
    sentence's tags contain at least one entity run."""
    return [
        (s.text, WITH_ENTITY if tags_to_spans(s) else NO_ENTITY) for s in sentences
    ]


def router_examples(
    texts: Sequence[str],
    mid_backend: Predictor,
    reference_spans: Sequence[Sequence[EntitySpan]],
) -> list[tuple[str, str]]:
    """Training pairs for the router: `correct` iff the mid-tier backend's
    span set exactly equals the reference set (boundaries and type)."""
    if len(texts) != len(reference_spans):
        raise ValidationError("texts and reference_spans must align")
    try:
        predicted = mid_backend.predict_batch(list(texts))
    except Exception as exc:
        raise BackendError(f"mid backend {mid_backend.id!r} failed: {exc}") from exc
    out = []
    for text, pred, ref in zip(texts, predicted, reference_spans):
        match = _span_set(pred) == _span_set(ref)
        out.append((text, ROUTER_CORRECT if match else ROUTER_INCORRECT))
    return out


def router_examples_from_tagged(
    sentences: Sequence[TaggedSentence], mid_backend: Predictor
) -> list[tuple[str, str]]:
    """Router pairs with gold tags as the reference."""
    return router_examples(
        [s.text for s in sentences],
        mid_backend,
        [tags_to_spans(s) for s in sentences],
    )


def _span_set(spans: Sequence[EntitySpan]) -> set[tuple[int, int, str]]:
    return {(s.start, s.end, s.etype) for s in spans}


# ---------------------------------------------------------------------------
# Offset remapping


class _JoinMap:
    """Tracks where each joined sentence segment came from in the document."""

    def __init__(self):
        self.parts: list[str] = []
        # (join_start, join_end, doc_offset, sentence_index)
        self.segments: list[tuple[int, int, int, int]] = []
        self._pos = 0

    def add(self, sentence_text: str, doc_offset: int, sentence_index: int) -> None:
        if self.parts:
            self._pos += 1  # single-space joiner
        start = self._pos
        self.parts.append(sentence_text)
        self._pos += len(sentence_text)
        self.segments.append((start, self._pos, doc_offset, sentence_index))

    @property
    def text(self) -> str:
        return " ".join(self.parts)

    def remap(self, span: EntitySpan) -> EntitySpan:
        """Map a span in joined coordinates back to document coordinates.

        The span must fall entirely inside one sentence segment; a span
        that crosses a join boundary cannot correspond to contiguous
        document text.
        """
        for seg_start, seg_end, doc_offset, index in self.segments:
            if seg_start <= span.start < seg_end:
                if span.end > seg_end:
                    raise RemapError(
                        f"span [{span.start}, {span.end}) crosses a sentence boundary",
                        sentence=index,
                    )
                shift = doc_offset - seg_start
                return EntitySpan(span.start + shift, span.end + shift, span.etype)
        raise RemapError(
            f"span [{span.start}, {span.end}) outside the joined text",
            sentence=self.segments[-1][3] if self.segments else None,
        )


def _call_span_backend(backend: Predictor, join: _JoinMap, doc_id: str) -> list[EntitySpan]:
    if not join.parts:
        return []
    try:
        spans = backend.predict_batch([join.text])[0]
    except Exception as exc:
        raise BackendError(
            f"span backend {backend.id!r} failed: {exc}", doc_id=doc_id
        ) from exc
    return [join.remap(s) for s in spans]


# ---------------------------------------------------------------------------
# Triage


def gated_ner_triage(
    gate: Predictor,
    backend: Predictor,
    doc: Document,
    threshold: float,
    *,
    confidence: str = "max_prob",
    gate_cost: float = DEFAULT_GATE_COST,
    backend_cost: float = DEFAULT_FULL_COST,
) -> NerOutcome:
    """Two-stage entity triage: skip confidently no-entity sentences, send
    the re-joined rest to the span backend once, and remap its spans.

    A sentence is skipped only when the gate's argmax is no-entity AND its
    confidence strictly exceeds the threshold; a confident with-entity
    verdict is never a skip.
    """
    _check_threshold(threshold, "threshold")
    if backend.kind != KIND_ENTITY:
        raise ValidationError(f"backend {backend.id!r} is not an entity-recognition predictor")
    conf_fn = resolve_confidence(confidence)

    pieces = split_sentences(doc.text)
    if not pieces:
        return NerOutcome(doc.id, (), (), 0.0, 0.0)
    texts = [t for t, _ in pieces]
    try:
        dists = gate.predict_batch(texts)
    except Exception as exc:
        raise BackendError(f"gate {gate.id!r} failed: {exc}", stage=0, doc_id=doc.id) from exc

    join = _JoinMap()
    verdicts: list[SentenceVerdict] = []
    skipped = 0
    cost = 0.0
    for idx, ((text, offset), dist) in enumerate(zip(pieces, dists)):
        conf = conf_fn(dist)
        cost += gate_cost * len(text)
        skip = dist.top_label() == NO_ENTITY and conf > threshold
        if skip:
            skipped += 1
        else:
            join.add(text, offset, idx)
        verdicts.append(
            SentenceVerdict(
                index=idx,
                distribution=dist,
                confidence=conf,
                routed_to=ROUTED_SKIPPED if skip else ROUTED_FULL,
                n_chars=len(text),
            )
        )
    spans = _call_span_backend(backend, join, doc.id)
    if join.parts:
        cost += backend_cost * len(join.text)
    return NerOutcome(
        doc_id=doc.id,
        predicted=tuple(sorted(spans, key=lambda s: (s.start, s.end))),
        verdicts=tuple(verdicts),
        skipped_fraction=skipped / len(pieces),
        cost=cost,
    )


def routed_ner_triage(
    gate: Predictor,
    router: Predictor,
    mid_backend: Predictor,
    full_backend: Predictor,
    doc: Document,
    gate_threshold: float,
    router_threshold: float,
    *,
    confidence: str = "max_prob",
    gate_cost: float = DEFAULT_GATE_COST,
    router_cost: float = DEFAULT_ROUTER_COST,
    mid_cost: float = DEFAULT_MID_COST,
    full_cost: float = DEFAULT_FULL_COST,
) -> NerOutcome:
    """Three-stage entity triage: presence gate, then a router that sends
    each surviving sentence to the mid-tier backend when it confidently
    predicts the mid tier will be exactly right, else to the full backend.

    With router_threshold = 1.0 the router is never trusted and this
    reduces exactly to gated_ner_triage with the full backend.
    """
    _check_threshold(gate_threshold, "gate_threshold")
    _check_threshold(router_threshold, "router_threshold")
    for backend in (mid_backend, full_backend):
        if backend.kind != KIND_ENTITY:
            raise ValidationError(f"backend {backend.id!r} is not an entity-recognition predictor")
    conf_fn = resolve_confidence(confidence)

    pieces = split_sentences(doc.text)
    if not pieces:
        return NerOutcome(doc.id, (), (), 0.0, 0.0)
    texts = [t for t, _ in pieces]
    try:
        gate_dists = gate.predict_batch(texts)
    except Exception as exc:
        raise BackendError(f"gate {gate.id!r} failed: {exc}", stage=0, doc_id=doc.id) from exc

    survivors: list[int] = []
    gate_confs: list[float] = []
    for idx, dist in enumerate(gate_dists):
        conf = conf_fn(dist)
        gate_confs.append(conf)
        if not (dist.top_label() == NO_ENTITY and conf > gate_threshold):
            survivors.append(idx)

    router_conf: dict[int, float] = {}
    route: dict[int, str] = {}
    if survivors:
        try:
            router_dists = router.predict_batch([texts[i] for i in survivors])
        except Exception as exc:
            raise BackendError(
                f"router {router.id!r} failed: {exc}", stage=1, doc_id=doc.id
            ) from exc
        for idx, dist in zip(survivors, router_dists):
            conf = conf_fn(dist)
            router_conf[idx] = conf
            trust_mid = dist.top_label() == ROUTER_CORRECT and conf > router_threshold
            route[idx] = ROUTED_MID if trust_mid else ROUTED_FULL

    mid_join = _JoinMap()
    full_join = _JoinMap()
    for idx in survivors:
        text, offset = pieces[idx]
        (mid_join if route[idx] == ROUTED_MID else full_join).add(text, offset, idx)

    spans = _call_span_backend(mid_backend, mid_join, doc.id)
    spans += _call_span_backend(full_backend, full_join, doc.id)

    cost = gate_cost * sum(len(t) for t in texts)
    cost += router_cost * sum(len(texts[i]) for i in survivors)
    if mid_join.parts:
        cost += mid_cost * len(mid_join.text)
    if full_join.parts:
        cost += full_cost * len(full_join.text)

    verdicts = []
    for idx, dist in enumerate(gate_dists):
        verdicts.append(
            SentenceVerdict(
                index=idx,
                distribution=dist,
                confidence=gate_confs[idx],
                routed_to=route.get(idx, ROUTED_SKIPPED),
                n_chars=len(texts[idx]),
                router_confidence=router_conf.get(idx),
            )
        )
    skipped = len(pieces) - len(survivors)
    return NerOutcome(
        doc_id=doc.id,
        predicted=tuple(sorted(spans, key=lambda s: (s.start, s.end))),
        verdicts=tuple(verdicts),
        skipped_fraction=skipped / len(pieces),
        cost=cost,
    )


def _check_threshold(value: float, name: str) -> None:
    if not (0.0 <= value <= 1.0):
        raise ValidationError(f"{name} must be in [0, 1], got {value}")


# ---------------------------------------------------------------------------
# Scoring


def entity_f1(
    predicted: Sequence[EntitySpan], gold: Sequence[EntitySpan]
) -> tuple[float, float, float]:
    """Exact-match precision/recall/F1 on (start, end, etype) triples.

    Zero denominators yield 0.0 for that component (so no predictions
    against nonempty gold scores precision 0 by convention).
    """
    tp = len(_span_set(predicted) & _span_set(gold))
    return _prf(tp, len(predicted), len(gold))


def micro_entity_f1(
    pairs: Sequence[tuple[Sequence[EntitySpan], Sequence[EntitySpan]]],
) -> tuple[float, float, float]:
    """Micro-averaged P/R/F1 over (predicted, gold) pairs, one per document."""
    tp = fp = fn = 0
    for predicted, gold in pairs:
        hits = len(_span_set(predicted) & _span_set(gold))
        tp += hits
        fp += len(predicted) - hits
        fn += len(gold) - hits
    return _prf(tp, tp + fp, tp + fn)


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return precision, recall, f1


def entity_histogram(sentences: Sequence[TaggedSentence]) -> EntityHistogram:
    counts: dict[int, int] = {}
    for s in sentences:
        k = len(tags_to_spans(s))
        counts[k] = counts.get(k, 0) + 1
    total = sum(counts.values())
    return EntityHistogram(
        counts=counts,
        no_entity_fraction=(counts.get(0, 0) / total) if total else 0.0,
    )


# ---------------------------------------------------------------------------
# Calibration sweeps (performance = micro F1 against gold spans)


class _MemoPredictor(Predictor):
    """Caches a deterministic predictor's answers by input text, so a sweep
    re-running triage per grid point pays for each distinct join only once."""

    def __init__(self, inner: Predictor):
        self.inner = inner
        self.id = inner.id
        self.kind = inner.kind
        self.label_set = inner.label_set
        self._cache: dict[str, object] = {}

    def predict_batch(self, texts: Sequence[str]) -> list:
        missing = [t for t in texts if t not in self._cache]
        if missing:
            for t, pred in zip(missing, self.inner.predict_batch(missing)):
                self._cache[t] = pred
        return [self._cache[t] for t in texts]


def _reference_spans(
    docs: Sequence[Document],
    reference: Mapping[str, Sequence[EntitySpan]] | None,
) -> Mapping[str, Sequence[EntitySpan]]:
    if reference is not None:
        for d in docs:
            if d.id not in reference:
                raise ValidationError(f"missing reference spans for doc {d.id!r}")
        return reference
    for d in docs:
        if d.gold_entities is None:
            raise ValidationError(f"doc {d.id!r} has no gold entities")
    return {d.id: d.gold_entities for d in docs}


def _sentence_totals(docs: Sequence[Document]) -> tuple[int, int]:
    n_sentences = 0
    n_chars = 0
    for d in docs:
        for text, _ in split_sentences(d.text):
            n_sentences += 1
            n_chars += len(text)
    return n_sentences, n_chars


def sweep_gate(
    gate: Predictor,
    backend: Predictor,
    docs: Sequence[Document],
    grid: Sequence[float] | None = None,
    *,
    reference: Mapping[str, Sequence[EntitySpan]] | None = None,
    confidence: str = "max_prob",
) -> list[SweepPoint]:
    """Sweep the presence gate's threshold; accuracy is micro F1 against
    `reference` spans (the documents' gold entities by default).

    savings_docs counts skipped sentences over all sentences; savings_cost
    weights each sentence by its character count. stage_counts is
    (skipped, sent-to-backend) in sentences.
    """
    grid = tuple(grid) if grid is not None else default_grid()
    _validate_grid(grid)
    if not docs:
        raise ValidationError("sweep needs at least one document")
    reference = _reference_spans(docs, reference)
    gate = _MemoPredictor(gate)
    backend = _MemoPredictor(backend)
    total_sentences, total_chars = _sentence_totals(docs)
    points = []
    for c in grid:
        outcomes = [
            gated_ner_triage(gate, backend, d, c, confidence=confidence) for d in docs
        ]
        points.append(
            _ner_point(c, outcomes, reference, total_sentences, total_chars, stages=2)
        )
    return points


def sweep_router(
    gate: Predictor,
    router: Predictor,
    mid_backend: Predictor,
    full_backend: Predictor,
    docs: Sequence[Document],
    gate_threshold: float,
    grid: Sequence[float] | None = None,
    *,
    reference: Mapping[str, Sequence[EntitySpan]] | None = None,
    confidence: str = "max_prob",
) -> list[SweepPoint]:
    """Sweep the router's threshold with the gate threshold held fixed.

    savings counts sentences spared the full backend (skipped or mid-tier).
    stage_counts is (skipped, mid, full) in sentences.
    """
    grid = tuple(grid) if grid is not None else default_grid()
    _validate_grid(grid)
    if not docs:
        raise ValidationError("sweep needs at least one document")
    reference = _reference_spans(docs, reference)
    gate = _MemoPredictor(gate)
    router = _MemoPredictor(router)
    mid_backend = _MemoPredictor(mid_backend)
    full_backend = _MemoPredictor(full_backend)
    total_sentences, total_chars = _sentence_totals(docs)
    points = []
    for c in grid:
        outcomes = [
            routed_ner_triage(
                gate, router, mid_backend, full_backend, d, gate_threshold, c,
                confidence=confidence,
            )
            for d in docs
        ]
        points.append(
            _ner_point(c, outcomes, reference, total_sentences, total_chars, stages=3)
        )
    return points


def _ner_point(
    threshold: float,
    outcomes: Sequence[NerOutcome],
    gold: Mapping[str, Sequence[EntitySpan]],
    total_sentences: int,
    total_chars: int,
    stages: int,
) -> SweepPoint:
    _, _, f1 = micro_entity_f1([(o.predicted, gold[o.doc_id]) for o in outcomes])
    skipped = mid = full = 0
    full_chars = 0
    for o in outcomes:
        for v in o.verdicts:
            if v.routed_to == ROUTED_SKIPPED:
                skipped += 1
            elif v.routed_to == ROUTED_MID:
                mid += 1
            else:
                full += 1
                full_chars += v.n_chars
    counts = (skipped, full) if stages == 2 else (skipped, mid, full)
    return SweepPoint(
        threshold=threshold,
        accuracy=f1,
        savings_docs=(total_sentences - full) / total_sentences if total_sentences else 0.0,
        savings_cost=1.0 - (full_chars / total_chars) if total_chars else 0.0,
        stage_counts=counts,
    )


def calibrate_gate(
    gate: Predictor,
    backend: Predictor,
    docs: Sequence[Document],
    floor: float,
    grid: Sequence[float] | None = None,
    *,
    reference: Mapping[str, Sequence[EntitySpan]] | None = None,
    confidence: str = "max_prob",
) -> CalibrationResult:
    """Find the smallest gate threshold whose end-to-end F1 meets the floor."""
    curve = sweep_gate(gate, backend, docs, grid, reference=reference, confidence=confidence)
    return find_threshold(curve, floor)
