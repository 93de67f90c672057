"""Inference triage for text pipelines.

Route each document through a cascade of increasingly expensive predictors,
answering at the first stage whose confidence strictly exceeds its
threshold, and calibrate those thresholds against a user-chosen performance
floor on a validation set.
"""

__version__ = "0.1.0"

from .cascade import (
    CascadeConfig,
    CascadeStage,
    TASK_CLASSIFICATION,
    TASK_ENTITY,
    TriageOutcome,
    triage_batch,
    triage_one,
)
from .calibrate import (
    CalibrationResult,
    SweepPoint,
    calibrate_cascade,
    default_grid,
    find_threshold,
    sweep,
)
from .confidence import entropy_conf, margin, max_prob, resolve_confidence
from .corpus import (
    CorpusSplit,
    Document,
    EntitySpan,
    TaggedSentence,
    make_split,
    parse_conll,
    parse_jsonl,
    split_sentences,
    tags_to_spans,
)
from .errors import (
    BackendError,
    ParseError,
    ProtocolError,
    RemapError,
    TrainingError,
    TriageError,
    ValidationError,
)
from .models import (
    LabelDistribution,
    LinearTextClassifier,
    NO_ENTITY,
    Predictor,
    TrainConfig,
    WITH_ENTITY,
    featurize,
    oracle_label,
    train,
)

__all__ = [
    "BackendError",
    "CalibrationResult",
    "CascadeConfig",
    "CascadeStage",
    "CorpusSplit",
    "Document",
    "EntitySpan",
    "LabelDistribution",
    "LinearTextClassifier",
    "NO_ENTITY",
    "ParseError",
    "Predictor",
    "ProtocolError",
    "RemapError",
    "SweepPoint",
    "TASK_CLASSIFICATION",
    "TASK_ENTITY",
    "TaggedSentence",
    "TrainConfig",
    "TrainingError",
    "TriageError",
    "TriageOutcome",
    "ValidationError",
    "WITH_ENTITY",
    "calibrate_cascade",
    "default_grid",
    "entropy_conf",
    "featurize",
    "find_threshold",
    "make_split",
    "margin",
    "max_prob",
    "oracle_label",
    "parse_conll",
    "parse_jsonl",
    "resolve_confidence",
    "split_sentences",
    "sweep",
    "tags_to_spans",
    "train",
    "triage_batch",
    "triage_one",
]
