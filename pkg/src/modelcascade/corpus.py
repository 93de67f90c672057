"""Corpus ingestion: JSONL documents, CoNLL tagged sentences, sentence
splitting with character offsets, and deterministic train/validation/test
splits.

All parsers are pure functions over bytes/str and safe to call concurrently.
Character offsets throughout are Unicode scalar-value indices (Python string
indices), never byte offsets.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ParseError, ValidationError


@dataclass(frozen=True)
class EntitySpan:
    """Half-open character span [start, end) with an entity type."""

    start: int
    end: int
    etype: str

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise ValidationError(f"invalid span [{self.start}, {self.end})")

    def to_json(self) -> dict:
        return {"start": self.start, "end": self.end, "etype": self.etype}

    @classmethod
    def from_json(cls, obj: dict) -> "EntitySpan":
        try:
            return cls(int(obj["start"]), int(obj["end"]), str(obj["etype"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad entity span object: {obj!r}") from exc


@dataclass(frozen=True)
class Document:
    """Unit of triage: text plus at most one kind of gold reference."""

    id: str
    text: str
    gold_label: str | None = None
    gold_entities: tuple[EntitySpan, ...] | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("document id must be nonempty")
        if not self.text:
            raise ValidationError(f"document {self.id!r} has empty text")
        if self.gold_label is not None and self.gold_entities is not None:
            raise ValidationError(
                f"document {self.id!r} carries both gold_label and gold_entities"
            )
        if self.gold_entities is not None:
            _check_spans_in_bounds(self.gold_entities, len(self.text), owner=self.id)

    def to_json(self) -> dict:
        obj: dict = {"id": self.id, "text": self.text}
        if self.gold_label is not None:
            obj["label"] = self.gold_label
        if self.gold_entities is not None:
            obj["entities"] = [s.to_json() for s in self.gold_entities]
        return obj


def _check_spans_in_bounds(spans: Sequence[EntitySpan], length: int, owner: str) -> None:
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    prev_end = 0
    for s in ordered:
        if s.end > length:
            raise ValidationError(f"span {s} exceeds text length {length} in {owner!r}")
        if s.start < prev_end:
            raise ValidationError(f"overlapping spans in {owner!r}")
        prev_end = s.end


@dataclass(frozen=True)
class TaggedSentence:
    """Token sequence with per-token tags and offsets into the joined text.

    `text` is the tokens joined by single spaces; `char_spans[i]` is the
    [start, end) of token i inside `text`.
    """

    tokens: tuple[str, ...]
    tags: tuple[str, ...]
    text: str
    char_spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not (len(self.tokens) == len(self.tags) == len(self.char_spans)):
            raise ValidationError("tokens, tags and char_spans must have equal length")

    @classmethod
    def from_tokens(cls, tokens: Sequence[str], tags: Sequence[str]) -> "TaggedSentence":
        spans = []
        pos = 0
        for i, tok in enumerate(tokens):
            if i > 0:
                pos += 1  # single-space joiner
            spans.append((pos, pos + len(tok)))
            pos += len(tok)
        return cls(
            tokens=tuple(tokens),
            tags=tuple(tags),
            text=" ".join(tokens),
            char_spans=tuple(spans),
        )


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[Document, ...]
    validation: tuple[Document, ...]
    test: tuple[Document, ...]
    seed: int
    ratios: tuple[float, float, float]


# ---------------------------------------------------------------------------
# JSONL documents


def parse_jsonl(data: bytes | str) -> list[Document]:
    """Parse newline-delimited document records.

    Each nonempty line must be an object with `id` and `text`, optionally
    `label` or `entities`. Raises ParseError with the offending line number,
    and on duplicate ids names the id.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    docs: list[Document] = []
    seen: set[str] = set()
    for lineno, line in enumerate(data.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc
        if not isinstance(obj, dict):
            raise ParseError("record is not an object", line=lineno)
        doc_id = obj.get("id")
        text = obj.get("text")
        if not isinstance(doc_id, str) or not isinstance(text, str):
            raise ParseError("record needs string 'id' and 'text'", line=lineno)
        if doc_id in seen:
            raise ParseError(f"duplicate document id {doc_id!r}", line=lineno)
        seen.add(doc_id)
        label = obj.get("label")
        if label is not None and not isinstance(label, str):
            raise ParseError("'label' must be a string", line=lineno)
        entities = None
        if obj.get("entities") is not None:
            raw = obj["entities"]
            if not isinstance(raw, list):
                raise ParseError("'entities' must be a list", line=lineno)
            entities = tuple(EntitySpan.from_json(e) for e in raw)
        try:
            docs.append(Document(doc_id, text, gold_label=label, gold_entities=entities))
        except ValidationError as exc:
            raise ParseError(str(exc), line=lineno) from exc
    return docs


def dump_jsonl(docs: Iterable[Document]) -> str:
    return "".join(json.dumps(d.to_json(), ensure_ascii=False) + "\n" for d in docs)


# ---------------------------------------------------------------------------
# CoNLL column format


def parse_conll(data: bytes | str) -> list[TaggedSentence]:
    """Parse CoNLL-style column text: token first, tag in the last column.

    Blank lines separate sentences; `-DOCSTART-` lines are skipped. A line
    with fewer than two columns is a ParseError carrying its line number.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    sentences: list[TaggedSentence] = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush():
        if tokens:
            sentences.append(TaggedSentence.from_tokens(tokens, tags))
            tokens.clear()
            tags.clear()

    for lineno, line in enumerate(data.splitlines(), start=1):
        if not line.strip():
            flush()
            continue
        cols = line.split()
        if cols[0] == "-DOCSTART-":
            flush()
            continue
        if len(cols) < 2:
            raise ParseError(f"expected at least 2 columns, got {len(cols)}", line=lineno)
        tokens.append(cols[0])
        tags.append(cols[-1])
    flush()
    return sentences


def dump_conll(sentences: Iterable[TaggedSentence]) -> str:
    blocks = []
    for s in sentences:
        blocks.append("\n".join(f"{tok} {tag}" for tok, tag in zip(s.tokens, s.tags)))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


# ---------------------------------------------------------------------------
# Tag schemes

_NUMERIC_OUTSIDE = "0"
_NUMERIC_BEGIN = "1"
_NUMERIC_INSIDE = "2"
NUMERIC_ETYPE = "entity"


def _tag_role(tag: str) -> tuple[str, str]:
    """Classify a tag as (role, etype) with role in {outside, begin, inside}."""
    if tag in ("O", _NUMERIC_OUTSIDE):
        return "outside", ""
    if tag == _NUMERIC_BEGIN:
        return "begin", NUMERIC_ETYPE
    if tag == _NUMERIC_INSIDE:
        return "inside", NUMERIC_ETYPE
    if len(tag) > 2 and tag[1] == "-":
        if tag[0] == "B":
            return "begin", tag[2:]
        if tag[0] == "I":
            return "inside", tag[2:]
    raise ValidationError(f"unknown tag symbol: {tag!r}")


def normalize_iob2(tags: Sequence[str]) -> tuple[str, ...]:
    """Rewrite IOB1 (or numeric) tags so every entity starts with B-/1.

    An inside tag that opens a run (after outside, or after a different
    entity type) becomes a begin tag; everything else is preserved.
    """
    out: list[str] = []
    prev_role, prev_etype = "outside", ""
    for tag in tags:
        role, etype = _tag_role(tag)
        if role == "inside" and (prev_role == "outside" or etype != prev_etype):
            role = "begin"
            tag = _NUMERIC_BEGIN if tag == _NUMERIC_INSIDE else "B-" + etype
        out.append(tag)
        prev_role, prev_etype = role, etype
    return tuple(out)


def tags_to_spans(sentence: TaggedSentence) -> list[EntitySpan]:
    """Extract maximal entity runs as character spans.

    Accepts IOB1, IOB2, and the numeric 0/1/2 scheme. A dangling inside tag
    opens a new run (the IOB1 reading), so arbitrary tag sequences are safe.
    Raises ValidationError naming any unknown tag symbol.
    """
    spans: list[EntitySpan] = []
    run_start: int | None = None
    run_etype = ""

    def close(end_idx: int):
        nonlocal run_start
        if run_start is not None:
            spans.append(
                EntitySpan(
                    start=sentence.char_spans[run_start][0],
                    end=sentence.char_spans[end_idx][1],
                    etype=run_etype,
                )
            )
            run_start = None

    for i, tag in enumerate(sentence.tags):
        role, etype = _tag_role(tag)
        if role == "outside":
            close(i - 1)
        elif role == "begin":
            close(i - 1)
            run_start, run_etype = i, etype
        else:  # inside
            if run_start is None or etype != run_etype:
                close(i - 1)
                run_start, run_etype = i, etype
    close(len(sentence.tags) - 1)
    return spans


# ---------------------------------------------------------------------------
# Sentence splitting

_TERMINALS = ".!?"
# Fixed abbreviation list; a terminal '.' ending one of these never splits.
ABBREVIATIONS = ("Dr.", "U.S.", "e.g.", "i.e.", "etc.")


def split_sentences(text: str) -> list[tuple[str, int]]:
    """Split text into (sentence, offset) pairs.

    Boundary rule: after '.', '!' or '?' when followed by whitespace and an
    uppercase letter, or by end of text. Sentences are trimmed of surrounding
    whitespace but keep their offsets into the original text, so every
    non-whitespace character of `text` lives in exactly one sentence.
    """
    n = len(text)
    cuts: list[int] = []
    for i, ch in enumerate(text):
        if ch not in _TERMINALS:
            continue
        word_start = i
        while word_start > 0 and not text[word_start - 1].isspace():
            word_start -= 1
        if text[word_start : i + 1] in ABBREVIATIONS:
            continue
        k = i + 1
        while k < n and text[k].isspace():
            k += 1
        if k == n or (k > i + 1 and text[k].isupper()):
            cuts.append(i + 1)

    sentences: list[tuple[str, int]] = []
    prev = 0
    for cut in [*cuts, n]:
        if cut <= prev:
            continue
        s, e = prev, cut
        while s < e and text[s].isspace():
            s += 1
        while e > s and text[e - 1].isspace():
            e -= 1
        if e > s:
            sentences.append((text[s:e], s))
        prev = cut
    return sentences


# ---------------------------------------------------------------------------
# Splits


def make_split(
    corpus: Sequence[Document],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> CorpusSplit:
    """Deterministic seeded partition into train/validation/test.

    Sizes are within ±1 of ratio × N (cumulative rounding). Identical
    (corpus, ratios, seed) always yields the identical split.
    """
    if len(corpus) < 3:
        raise ValidationError(f"corpus too small to split: {len(corpus)} < 3")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got sum {sum(ratios)}")
    ids = [d.id for d in corpus]
    if len(set(ids)) != len(ids):
        raise ValidationError("corpus contains duplicate document ids")

    order = list(corpus)
    random.Random(seed).shuffle(order)
    n = len(order)
    c1 = int(ratios[0] * n + 0.5)
    c2 = int((ratios[0] + ratios[1]) * n + 0.5)
    return CorpusSplit(
        train=tuple(order[:c1]),
        validation=tuple(order[c1:c2]),
        test=tuple(order[c2:]),
        seed=seed,
        ratios=tuple(ratios),
    )


def save_split(split: CorpusSplit, out_dir: str | Path) -> None:
    """Persist a split as three JSONL files plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, docs in (
        ("train", split.train),
        ("validation", split.validation),
        ("test", split.test),
    ):
        (out / f"{name}.jsonl").write_text(dump_jsonl(docs), encoding="utf-8")
    manifest = {
        "seed": split.seed,
        "ratios": list(split.ratios),
        "sizes": {
            "train": len(split.train),
            "validation": len(split.validation),
            "test": len(split.test),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_split(in_dir: str | Path) -> CorpusSplit:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    parts = {
        name: tuple(parse_jsonl((src / f"{name}.jsonl").read_text(encoding="utf-8")))
        for name in ("train", "validation", "test")
    }
    return CorpusSplit(
        train=parts["train"],
        validation=parts["validation"],
        test=parts["test"],
        seed=int(manifest["seed"]),
        ratios=tuple(manifest["ratios"]),
    )


# ---------------------------------------------------------------------------
# Tagged sentences -> documents (for end-to-end NER runs)


def sentences_to_document(
    sentences: Sequence[TaggedSentence], doc_id: str
) -> Document:
    """Join tagged sentences into one Document, lifting gold spans to
    document coordinates. Sentences are joined with single spaces."""
    if not sentences:
        raise ValidationError("cannot build a document from zero sentences")
    parts: list[str] = []
    spans: list[EntitySpan] = []
    pos = 0
    for i, sent in enumerate(sentences):
        if i > 0:
            pos += 1
        for span in tags_to_spans(sent):
            spans.append(EntitySpan(span.start + pos, span.end + pos, span.etype))
        parts.append(sent.text)
        pos += len(sent.text)
    return Document(id=doc_id, text=" ".join(parts), gold_entities=tuple(spans))


def group_sentences_into_documents(
    sentences: Sequence[TaggedSentence], group_size: int = 1, id_prefix: str = "doc"
) -> list[Document]:
    if group_size < 1:
        raise ValidationError("group_size must be >= 1")
    docs = []
    for start in range(0, len(sentences), group_size):
        chunk = sentences[start : start + group_size]
        docs.append(sentences_to_document(chunk, f"{id_prefix}-{start // group_size:05d}"))
    return docs
