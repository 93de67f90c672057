"""Command-line interface.

Workflow mirrors the library: label a corpus with an expensive oracle
backend, train the cheap model on those labels, calibrate thresholds
against a performance floor, run the cascade, and report savings.
`calibrate` and `report` render figures next to their CSV/JSON outputs.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .accounting import (
    CostModel,
    DEFAULT_COST_NOTE,
    ILLUSTRATIVE_COST_NOTE,
    RunReport,
    make_report,
    save_report,
)
from .backends import MockBackendSpec, mock_backend_app
from .calibrate import (
    CalibrationResult,
    curve_to_csv,
    curve_from_csv,
    default_grid,
    find_threshold,
    sweep,
)
from .cascade import CascadeConfig, TASK_CLASSIFICATION, TriageOutcome, triage_batch
from .config import ENV_BIND, build_cascade, build_predictor, load_cascade_file
from .corpus import (
    Document,
    dump_jsonl,
    group_sentences_into_documents,
    parse_conll,
    parse_jsonl,
)
from .entity import (
    NerOutcome,
    entity_histogram,
    gated_ner_triage,
    routed_ner_triage,
    sweep_gate,
    sweep_router,
)
from .errors import TriageError, ValidationError
from .models import TrainConfig, oracle_label, train

DEFAULT_FLOOR_CLASSIFICATION = 0.9
DEFAULT_FLOOR_ENTITY = 0.99


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exit code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="modelcascade", description=__doc__)
    parser.add_argument("--version", action="version", version=f"modelcascade {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("oracle-label", help="label documents with an oracle backend")
    p.add_argument("--backend", required=True, help="predictor spec JSON file")
    p.add_argument("--input", required=True, help="documents JSONL")
    p.add_argument("--output", required=True, help="labeled JSONL to write")
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("train", help="train the cheap classifier on labeled JSONL")
    p.add_argument("--input", required=True, help="labeled documents JSONL")
    p.add_argument("--output", required=True, help="model directory to write")
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=2**18)
    p.add_argument("--ngram", type=int, nargs=2, default=(1, 2), metavar=("LOW", "HIGH"))
    p.add_argument("--model-id", default="linear-text")
    p.add_argument("--oracle-id", default=None, help="id of the oracle that labeled the data")

    p = sub.add_parser("calibrate", help="find thresholds meeting a performance floor")
    _add_docs_args(p)
    p.add_argument("--cascade", required=True, help="cascade config JSON")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--floor", type=float, default=None, help="floor for every tunable stage")
    p.add_argument("--floors", default=None, help="comma-separated per-stage floors")
    p.add_argument("--grid-points", type=int, default=201)

    p = sub.add_parser("run", help="triage documents through a cascade")
    _add_docs_args(p)
    p.add_argument("--cascade", required=True)
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=None,
                   help="override every non-final stage threshold")

    p = sub.add_parser("report", help="aggregate outcomes (or a corpus) into report + figures")
    p.add_argument("--outcomes", default=None, help="outcomes JSONL from `run`")
    p.add_argument("--cascade", default=None, help="cascade config JSON (with --outcomes)")
    p.add_argument("--docs", default=None, help="reference documents JSONL")
    p.add_argument("--conll", default=None, help="CoNLL corpus (entity histogram mode)")
    p.add_argument("--curve", default=None, help="sweep curve CSV to render")
    p.add_argument("--output", required=True, help="output directory")

    p = sub.add_parser("serve", help="serve a calibrated cascade over HTTP")
    p.add_argument("--cascade", required=True)
    p.add_argument("--bind", default=None, help=f"host:port (or ${ENV_BIND})")

    p = sub.add_parser("mock-backend", help="serve a deterministic mock backend")
    p.add_argument("--spec", required=True, help="mock backend spec JSON")
    p.add_argument("--bind", default=None, help=f"host:port (or ${ENV_BIND})")

    return parser


def _add_docs_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--docs", default=None, help="documents JSONL")
    p.add_argument("--conll", default=None, help="CoNLL corpus instead of JSONL")
    p.add_argument("--group", type=int, default=1,
                   help="sentences per document when reading CoNLL")


# ---------------------------------------------------------------------------
# Shared helpers


def _read_docs(args) -> list[Document]:
    if getattr(args, "conll", None):
        sentences = parse_conll(Path(args.conll).read_bytes())
        return group_sentences_into_documents(sentences, args.group)
    if getattr(args, "docs", None):
        return parse_jsonl(Path(args.docs).read_bytes())
    raise ValidationError("provide documents via --docs or --conll")


def _load_cascade(args):
    path = Path(args.cascade)
    raw = load_cascade_file(path)
    cascade = build_cascade(raw, base_dir=path.parent)
    return raw, cascade


def _classification_reference(
    cascade: CascadeConfig, docs: Sequence[Document]
) -> tuple[dict[str, str], str]:
    """Gold labels when every doc has one, else final-stage agreement."""
    if all(d.gold_label is not None for d in docs):
        return {d.id: d.gold_label for d in docs}, "gold"
    final = cascade.stages[-1].predictor
    preds = final.predict_batch([d.text for d in docs])
    return {d.id: p.top_label() for d, p in zip(docs, preds)}, "agreement"


def _entity_reference(
    cascade: CascadeConfig, docs: Sequence[Document]
) -> tuple[dict, str]:
    """Gold spans when every doc has them, else the final backend's output."""
    if all(d.gold_entities is not None for d in docs):
        return {d.id: d.gold_entities for d in docs}, "gold"
    gate = cascade.stages[0].predictor
    full = cascade.stages[-1].predictor
    reference = {}
    for d in docs:
        outcome = gated_ner_triage(gate, full, d, 1.0)  # t=1: nothing skipped
        reference[d.id] = outcome.predicted
    return reference, "agreement"


def _floors(args, n_tunable: int, task: str) -> list[float]:
    if args.floors is not None:
        floors = [float(f) for f in args.floors.split(",")]
        if len(floors) != n_tunable:
            raise ValidationError(
                f"--floors gave {len(floors)} values for {n_tunable} tunable stages"
            )
        return floors
    default = DEFAULT_FLOOR_CLASSIFICATION if task == TASK_CLASSIFICATION else DEFAULT_FLOOR_ENTITY
    floor = args.floor if args.floor is not None else default
    return [floor] * n_tunable


def _write_curve_outputs(
    out: Path, stage_index: int, result: CalibrationResult, performance_label: str
) -> None:
    from . import plots

    (out / f"curve_stage{stage_index}.csv").write_text(
        curve_to_csv(result.curve), encoding="utf-8"
    )
    plots.plot_sweep(
        result.curve,
        out / f"curve_stage{stage_index}.png",
        floor=result.floor,
        chosen=result.threshold,
        performance_label=performance_label,
    )


def _bind(args) -> str:
    return args.bind or os.environ.get(ENV_BIND) or "127.0.0.1:8080"


def _rebase_predictor_paths(config: dict, old_base: Path, new_base: Path) -> None:
    for stage in config.get("stages", []):
        for key in ("predictor", "router"):
            entry = stage.get(key)
            if isinstance(entry, dict) and isinstance(entry.get("path"), str):
                p = Path(entry["path"])
                if not p.is_absolute():
                    entry["path"] = os.path.relpath(old_base / p, new_base)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_oracle_label(args) -> int:
    spec = json.loads(Path(args.backend).read_text(encoding="utf-8"))
    backend = build_predictor(spec, base_dir=Path(args.backend).parent)
    docs = parse_jsonl(Path(args.input).read_bytes())
    labels = dict(oracle_label(backend, docs, batch_size=args.batch_size))
    labeled = [Document(id=d.id, text=d.text, gold_label=labels[d.id]) for d in docs]
    Path(args.output).write_text(dump_jsonl(labeled), encoding="utf-8")
    print(f"labeled {len(labeled)} documents with {backend.id!r} -> {args.output}")
    return 0


def _cmd_train(args) -> int:
    docs = parse_jsonl(Path(args.input).read_bytes())
    missing = [d.id for d in docs if d.gold_label is None]
    if missing:
        raise ValidationError(f"{len(missing)} documents lack labels (first: {missing[0]!r})")
    cfg = TrainConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        l2=args.l2,
        seed=args.seed,
        feature_dim=args.feature_dim,
        ngram_range=tuple(args.ngram),
    )
    model = train(
        [(d.text, d.gold_label) for d in docs],
        cfg,
        trained_on=args.oracle_id,
        model_id=args.model_id,
    )
    model.save(args.output)
    final_loss = model.train_losses[-1]
    print(
        f"trained {model.id!r} on {len(docs)} examples, "
        f"{len(model.label_set)} labels, final loss {final_loss:.4f} -> {args.output}"
    )
    return 0


def _cmd_calibrate(args) -> int:
    raw, cascade = _load_cascade(args)
    docs = _read_docs(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    grid = default_grid(args.grid_points)
    n_tunable = len(cascade.stages) - 1
    floors = _floors(args, n_tunable, cascade.task)

    results: list[CalibrationResult] = []
    if cascade.task == TASK_CLASSIFICATION:
        reference, basis = _classification_reference(cascade, docs)
        work = cascade
        for i in range(n_tunable):
            work = work.with_threshold(i, 1.0)
        for i in range(n_tunable):
            curve = sweep(work, docs, reference, grid, tunable_stage=i)
            result = find_threshold(curve, floors[i])
            work = work.with_threshold(i, result.threshold)
            results.append(result)
            _write_curve_outputs(out, i, result, performance_label=f"accuracy ({basis})")
    else:
        reference, basis = _entity_reference(cascade, docs)
        stages = cascade.stages
        gate, full = stages[0].predictor, stages[-1].predictor
        curve = sweep_gate(gate, full, docs, grid, reference=reference,
                           confidence=stages[0].confidence)
        result = find_threshold(curve, floors[0])
        results.append(result)
        _write_curve_outputs(out, 0, result, performance_label=f"F1 ({basis})")
        if len(stages) == 3:
            curve = sweep_router(
                gate, stages[1].router, stages[1].predictor, full, docs,
                result.threshold, grid, reference=reference,
                confidence=stages[0].confidence,
            )
            router_result = find_threshold(curve, floors[1])
            results.append(router_result)
            _write_curve_outputs(out, 1, router_result, performance_label=f"F1 ({basis})")

    # Write the input config back with calibrated thresholds filled in;
    # relative predictor paths are rebased onto the output directory.
    calibrated = json.loads(json.dumps(raw))
    for i, result in enumerate(results):
        calibrated["stages"][i]["threshold"] = result.threshold
    _rebase_predictor_paths(calibrated, Path(args.cascade).parent, out)
    (out / "cascade.calibrated.json").write_text(
        json.dumps(calibrated, indent=2), encoding="utf-8"
    )
    summary = {
        "task": cascade.task,
        "reference_basis": basis,
        "stages": [
            {
                "stage": i,
                "floor": r.floor,
                "threshold": r.threshold,
                "achieved": r.achieved,
                "shortfall": r.shortfall,
            }
            for i, r in enumerate(results)
        ],
    }
    (out / "calibration.json").write_text(json.dumps(
        {**summary, "results": [r.to_json() for r in results]}, indent=2
    ), encoding="utf-8")
    for line in summary["stages"]:
        flag = " (SHORTFALL)" if line["shortfall"] else ""
        print(
            f"stage {line['stage']}: threshold {line['threshold']:.3f} "
            f"achieves {line['achieved']:.4f} vs floor {line['floor']:.4f}{flag}"
        )
    return 0


def _run_outcomes(cascade: CascadeConfig, docs, threshold_override):
    if threshold_override is not None:
        for i in range(len(cascade.stages) - 1):
            cascade = cascade.with_threshold(i, threshold_override)
    if cascade.task == TASK_CLASSIFICATION:
        return cascade, triage_batch(cascade, docs)
    stages = cascade.stages
    outcomes = []
    for d in docs:
        if len(stages) == 2:
            outcomes.append(
                gated_ner_triage(
                    stages[0].predictor, stages[1].predictor, d, stages[0].threshold,
                    confidence=stages[0].confidence,
                    gate_cost=stages[0].unit_cost, backend_cost=stages[1].unit_cost,
                )
            )
        else:
            outcomes.append(
                routed_ner_triage(
                    stages[0].predictor, stages[1].router, stages[1].predictor,
                    stages[2].predictor, d, stages[0].threshold, stages[1].threshold,
                    confidence=stages[0].confidence,
                    gate_cost=stages[0].unit_cost, mid_cost=stages[1].unit_cost,
                    full_cost=stages[2].unit_cost,
                )
            )
    return cascade, outcomes


def _collect_latencies(cascade: CascadeConfig) -> dict[int, tuple[float, ...]]:
    latencies = {}
    for i, stage in enumerate(cascade.stages):
        samples = getattr(stage.predictor, "latencies", None)
        if samples:
            latencies[i] = tuple(samples)
    return latencies


def _reference_for_report(cascade, docs):
    if cascade.task == TASK_CLASSIFICATION:
        if all(d.gold_label is not None for d in docs):
            return {d.id: d.gold_label for d in docs}, "gold"
    else:
        if all(d.gold_entities is not None for d in docs):
            return {d.id: d.gold_entities for d in docs}, "gold"
    return None, "none"


def _cmd_run(args) -> int:
    raw, cascade = _load_cascade(args)
    docs = _read_docs(args)
    cascade, outcomes = _run_outcomes(cascade, docs, args.threshold)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "outcomes.jsonl").open("w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_json(), ensure_ascii=False) + "\n")
    reference, basis = _reference_for_report(cascade, docs)
    cost_model = CostModel(
        unit_costs=tuple(s.unit_cost for s in cascade.stages),
        latencies=_collect_latencies(cascade) or None,
    )
    # Configs that leave unit_cost implicit run on the illustrative default
    # cost ratio; say so in the report.
    defaulted = any("unit_cost" not in s for s in raw.get("stages", []))
    report = make_report(
        outcomes, reference, cost_model, cascade,
        performance_basis=basis,
        cost_note=ILLUSTRATIVE_COST_NOTE if defaulted else DEFAULT_COST_NOTE,
    )
    _write_report_outputs(out, report)
    print(
        f"triaged {report.n_docs} documents: savings_docs={report.savings_docs:.3f} "
        f"savings_cost={report.savings_cost:.3f} "
        + " ".join(f"{k}={v:.4f}" for k, v in sorted(report.performance.items()))
    )
    return 0


def _write_report_outputs(out: Path, report: RunReport) -> None:
    from . import plots

    save_report(report, out / "report.json")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    plots.plot_stage_counts(report, out / "stage_counts.png")


def _load_outcomes(path: Path):
    outcomes = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "verdicts" in obj:
            outcomes.append(_ner_outcome_from_json(obj))
        else:
            outcomes.append(TriageOutcome.from_json(obj))
    return outcomes


def _ner_outcome_from_json(obj) -> NerOutcome:
    from .corpus import EntitySpan
    from .entity import SentenceVerdict
    from .models import LabelDistribution

    return NerOutcome(
        doc_id=obj["doc_id"],
        predicted=tuple(EntitySpan.from_json(s) for s in obj["spans"]),
        verdicts=tuple(
            SentenceVerdict(
                index=int(v["index"]),
                distribution=LabelDistribution(
                    {str(k): float(p) for k, p in v["distribution"].items()}
                ),
                confidence=float(v["confidence"]),
                routed_to=v["routed_to"],
                n_chars=int(v["n_chars"]),
                router_confidence=v.get("router_confidence"),
            )
            for v in obj["verdicts"]
        ),
        skipped_fraction=float(obj["skipped_fraction"]),
        cost=float(obj["cost"]),
    )


def _cmd_report(args) -> int:
    from . import plots

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    did_something = False

    if args.conll:
        sentences = parse_conll(Path(args.conll).read_bytes())
        hist = entity_histogram(sentences)
        (out / "histogram.csv").write_text(hist.to_csv(), encoding="utf-8")
        plots.plot_entity_histogram(hist, out / "histogram.png")
        print(
            f"{sum(hist.counts.values())} sentences, "
            f"no-entity fraction {hist.no_entity_fraction:.3f} -> {out}/histogram.*"
        )
        did_something = True

    if args.curve:
        points = curve_from_csv(Path(args.curve).read_text(encoding="utf-8"))
        plots.plot_sweep(points, out / "curve.png")
        print(f"rendered {len(points)}-point sweep curve -> {out}/curve.png")
        did_something = True

    if args.outcomes:
        if not args.cascade:
            raise ValidationError("--outcomes needs --cascade for stage metadata")
        _, cascade = _load_cascade(args)
        outcomes = _load_outcomes(Path(args.outcomes))
        reference, basis = (None, "none")
        if args.docs:
            docs = parse_jsonl(Path(args.docs).read_bytes())
            reference, basis = _reference_for_report(cascade, docs)
        cost_model = CostModel(unit_costs=tuple(s.unit_cost for s in cascade.stages))
        report = make_report(
            outcomes, reference, cost_model, cascade, performance_basis=basis
        )
        _write_report_outputs(out, report)
        print(
            f"report over {report.n_docs} outcomes: savings_docs={report.savings_docs:.3f} "
            f"-> {out}/report.json"
        )
        did_something = True

    if not did_something:
        raise ValidationError("report needs --outcomes, --curve, or --conll")
    return 0


def _cmd_serve(args) -> int:
    from .service import serve

    _, cascade = _load_cascade(args)
    serve(cascade, _bind(args))
    return 0


def _cmd_mock_backend(args) -> int:
    import uvicorn

    spec = MockBackendSpec.load(args.spec)
    host, _, port = _bind(args).partition(":")
    uvicorn.run(mock_backend_app(spec), host=host or "127.0.0.1", port=int(port or 8080))
    return 0


_HANDLERS = {
    "oracle-label": _cmd_oracle_label,
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "run": _cmd_run,
    "report": _cmd_report,
    "serve": _cmd_serve,
    "mock-backend": _cmd_mock_backend,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TriageError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


if __name__ == "__main__":
    sys.exit(main())
