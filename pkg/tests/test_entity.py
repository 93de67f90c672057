import random

import pytest

from modelcascade.calibrate import default_grid
from modelcascade.corpus import Document, EntitySpan, TaggedSentence, sentences_to_document
from modelcascade.entity import (
    EntityHistogram,
    ROUTED_FULL,
    ROUTED_MID,
    ROUTED_SKIPPED,
    ROUTER_CORRECT,
    ROUTER_INCORRECT,
    calibrate_gate,
    entity_f1,
    entity_histogram,
    gated_ner_triage,
    micro_entity_f1,
    presence_examples,
    routed_ner_triage,
    router_examples,
    sweep_gate,
    sweep_router,
)
from modelcascade.errors import RemapError, ValidationError
from modelcascade.models import NO_ENTITY, WITH_ENTITY

from conftest import RecordingPredictor, classification_mock, pattern_ner_mock

GATE_LABELS = (NO_ENTITY, WITH_ENTITY)
ROUTER_LABELS = (ROUTER_CORRECT, ROUTER_INCORRECT)


def gate_mock(pairs, **kwargs):
    return classification_mock(pairs, GATE_LABELS, id=kwargs.pop("id", "gate"), **kwargs)


def router_mock(pairs, **kwargs):
    return classification_mock(pairs, ROUTER_LABELS, id=kwargs.pop("id", "router"), **kwargs)


def skip_dist(conf):
    return {NO_ENTITY: conf, WITH_ENTITY: round(1 - conf, 12)}


def keep_dist(conf):
    return {WITH_ENTITY: conf, NO_ENTITY: round(1 - conf, 12)}


class TestPresenceExamples:
    def test_no_entity(self):
        s = TaggedSentence.from_tokens(["a", "b"], ["0", "0"])
        assert presence_examples([s]) == [(s.text, NO_ENTITY)]

    def test_with_entity(self):
        s = TaggedSentence.from_tokens(["a", "b"], ["1", "2"])
        assert presence_examples([s]) == [(s.text, WITH_ENTITY)]

    def test_mixed_corpus_counts(self):
        sents = []
        for i in range(10):
            tags = ["0", "0"] if i < 4 else ["1", "0"]
            sents.append(TaggedSentence.from_tokens([f"t{i}", "x"], tags))
        labels = [lab for _, lab in presence_examples(sents)]
        assert labels.count(NO_ENTITY) == 4
        assert labels.count(WITH_ENTITY) == 6


def three_sentence_doc():
    # "Aa xqent1 here. Bb plain words. Cc xqent2 end."
    s0, s1, s2 = "Aa xqent1 here.", "Bb plain words.", "Cc xqent2 end."
    doc = Document(id="doc", text=f"{s0} {s1} {s2}")
    return doc, (s0, s1, s2)


class TestGatedNerTriage:
    def test_all_skipped_backend_never_called(self):
        doc, (s0, s1, s2) = three_sentence_doc()
        gate = gate_mock({s0: skip_dist(0.99), s1: skip_dist(0.99), s2: skip_dist(0.99)})
        backend = RecordingPredictor(pattern_ner_mock())
        outcome = gated_ner_triage(gate, backend, doc, 0.5)
        assert outcome.predicted == ()
        assert backend.calls == []
        assert outcome.skipped_fraction == 1.0

    def test_threshold_one_equals_backend_on_full_document(self):
        doc, (s0, s1, s2) = three_sentence_doc()
        gate = gate_mock({s0: skip_dist(1.0), s1: skip_dist(1.0), s2: skip_dist(1.0)})
        backend = RecordingPredictor(pattern_ner_mock())
        outcome = gated_ner_triage(gate, backend, doc, 1.0)
        assert outcome.skipped_fraction == 0.0
        assert backend.calls == [(doc.text,)]  # single-space joined == original
        direct = pattern_ner_mock().predict_batch([doc.text])[0]
        assert list(outcome.predicted) == sorted(direct, key=lambda s: (s.start, s.end))

    def test_middle_skip_remap_verified_against_per_sentence_oracle(self):
        doc, (s0, s1, s2) = three_sentence_doc()
        gate = gate_mock(
            {s0: keep_dist(0.9), s1: skip_dist(0.95), s2: keep_dist(0.9)}
        )
        backend = pattern_ner_mock()
        outcome = gated_ner_triage(gate, backend, doc, 0.5)
        assert [v.routed_to for v in outcome.verdicts] == [
            ROUTED_FULL, ROUTED_SKIPPED, ROUTED_FULL,
        ]
        # Oracle: run the backend on each surviving sentence separately and
        # lift its spans by the sentence's offset in the document.
        expected = set()
        for sent in (s0, s2):
            offset = doc.text.index(sent)
            for span in pattern_ner_mock().predict_batch([sent])[0]:
                expected.add((span.start + offset, span.end + offset, span.etype))
        assert {(s.start, s.end, s.etype) for s in outcome.predicted} == expected
        # Round-trip: every remapped span's document slice is the entity text.
        for span in outcome.predicted:
            assert doc.text[span.start : span.end].startswith("xqent")

    def test_skip_requires_no_entity_argmax(self):
        # A confident with-entity verdict is never a skip.
        doc, (s0, s1, s2) = three_sentence_doc()
        gate = gate_mock(
            {s0: keep_dist(0.99), s1: keep_dist(0.99), s2: keep_dist(0.99)}
        )
        backend = RecordingPredictor(pattern_ner_mock())
        outcome = gated_ner_triage(gate, backend, doc, 0.1)
        assert outcome.skipped_fraction == 0.0
        assert backend.calls == [(doc.text,)]

    def test_cost_accounts_for_gate_and_backend(self):
        doc, (s0, s1, s2) = three_sentence_doc()
        gate = gate_mock(
            {s0: keep_dist(0.9), s1: skip_dist(0.95), s2: keep_dist(0.9)}
        )
        outcome = gated_ner_triage(
            gate, pattern_ner_mock(), doc, 0.5, gate_cost=1.0, backend_cost=100.0
        )
        join_len = len(f"{s0} {s2}")
        expected = 1.0 * (len(s0) + len(s1) + len(s2)) + 100.0 * join_len
        assert outcome.cost == pytest.approx(expected)

    def test_crossing_span_is_remap_error(self):
        doc, (s0, s1, s2) = three_sentence_doc()
        gate = gate_mock({s0: keep_dist(0.9), s1: skip_dist(0.95), s2: keep_dist(0.9)})
        join = f"{s0} {s2}"
        # Scripted span crossing the join boundary between s0 and s2.
        from modelcascade.backends import MockBackend, MockBackendSpec

        bad = MockBackend(
            MockBackendSpec.from_pairs(
                id="bad", kind="entity-recognition",
                pairs={join: [{"start": len(s0) - 2, "end": len(s0) + 4, "etype": "x"}]},
            )
        )
        with pytest.raises(RemapError, match="sentence"):
            gated_ner_triage(gate, bad, doc, 0.5)

    def test_threshold_validation(self):
        doc, _ = three_sentence_doc()
        with pytest.raises(ValidationError):
            gated_ner_triage(gate_mock({}), pattern_ner_mock(), doc, 1.5)


class TestRouterExamples:
    def test_exact_match_is_correct(self):
        text = "Aa xqenta1 ok."
        mid = pattern_ner_mock(pattern=r"xqenta\d+", id="mid")
        ref = mid.predict_batch([text])[0]
        assert router_examples([text], mid, [ref]) == [(text, ROUTER_CORRECT)]

    def test_missed_span_is_incorrect(self):
        text = "Aa xqenta1 and xqentb2."
        mid = pattern_ner_mock(pattern=r"xqenta\d+", id="mid")
        full_ref = pattern_ner_mock(pattern=r"xqent[ab]\d+").predict_batch([text])[0]
        assert router_examples([text], mid, [full_ref]) == [(text, ROUTER_INCORRECT)]

    def test_both_empty_is_correct(self):
        text = "Aa plain words."
        mid = pattern_ner_mock(pattern=r"xqenta\d+", id="mid")
        assert router_examples([text], mid, [[]]) == [(text, ROUTER_CORRECT)]


def six_sentence_fixture(t_gate=0.5, t_router=0.5):
    """Hand-evaluated routing table.

    s0: gate skip conf .9  -> skipped
    s1: gate keep          -> router correct conf .9  -> mid
    s2: gate keep          -> router correct conf .4  -> full (below t_router)
    s3: gate skip conf .4  -> survives (below t_gate) -> router incorrect .9 -> full
    s4: gate keep          -> router correct conf .7  -> mid
    s5: gate skip conf .95 -> skipped
    """
    sents = [
        "Aa zero xqent0.", "Bb one xqent1.", "Cc two xqent2.",
        "Dd three xqent3.", "Ee four xqent4.", "Ff five xqent5.",
    ]
    doc = Document(id="six", text=" ".join(sents))
    gate = gate_mock({
        sents[0]: skip_dist(0.9),
        sents[1]: keep_dist(0.8),
        sents[2]: keep_dist(0.8),
        sents[3]: skip_dist(0.4),
        sents[4]: keep_dist(0.8),
        sents[5]: skip_dist(0.95),
    })
    router = router_mock({
        sents[1]: {ROUTER_CORRECT: 0.9, ROUTER_INCORRECT: 0.1},
        sents[2]: {ROUTER_CORRECT: 0.4, ROUTER_INCORRECT: 0.6},
        sents[3]: {ROUTER_INCORRECT: 0.9, ROUTER_CORRECT: 0.1},
        sents[4]: {ROUTER_CORRECT: 0.7, ROUTER_INCORRECT: 0.3},
    })
    expected = [
        ROUTED_SKIPPED, ROUTED_MID, ROUTED_FULL, ROUTED_FULL, ROUTED_MID, ROUTED_SKIPPED,
    ]
    return doc, sents, gate, router, expected


class TestRoutedNerTriage:
    def test_routing_table_matches_hand_evaluation(self):
        doc, sents, gate, router, expected = six_sentence_fixture()
        mid = RecordingPredictor(pattern_ner_mock(id="mid"))
        full = RecordingPredictor(pattern_ner_mock(id="full"))
        outcome = routed_ner_triage(gate, router, mid, full, doc, 0.5, 0.5)
        assert [v.routed_to for v in outcome.verdicts] == expected
        assert mid.calls == [(f"{sents[1]} {sents[4]}",)]
        assert full.calls == [(f"{sents[2]} {sents[3]}",)]
        # All six entity tokens recovered despite three-way routing,
        # because skipped sentences contribute nothing and both backends
        # are pattern-perfect.
        got = {doc.text[s.start : s.end] for s in outcome.predicted}
        assert got == {"xqent1", "xqent2", "xqent3", "xqent4"}

    def test_router_threshold_one_reduces_to_gated(self):
        doc, sents, gate, router, _ = six_sentence_fixture()
        mid = pattern_ner_mock(id="mid")
        full = pattern_ner_mock(id="full")
        routed = routed_ner_triage(gate, router, mid, full, doc, 0.5, 1.0)
        gated = gated_ner_triage(gate, pattern_ner_mock(id="full"), doc, 0.5)
        assert routed.predicted == gated.predicted
        assert routed.skipped_fraction == gated.skipped_fraction
        assert all(v.routed_to != ROUTED_MID for v in routed.verdicts)

    def test_confident_router_everywhere_full_never_called(self):
        doc, sents, gate, _, _ = six_sentence_fixture()
        router = router_mock({s: {ROUTER_CORRECT: 0.99, ROUTER_INCORRECT: 0.01} for s in sents})
        mid = pattern_ner_mock(id="mid")
        full = RecordingPredictor(pattern_ner_mock(id="full"))
        routed_ner_triage(gate, router, mid, full, doc, 0.5, 0.5)
        assert full.calls == []

    def test_cost_per_backend_invoked(self):
        doc, sents, gate, router, _ = six_sentence_fixture()
        mid = pattern_ner_mock(id="mid")
        full = pattern_ner_mock(id="full")
        outcome = routed_ner_triage(
            gate, router, mid, full, doc, 0.5, 0.5,
            gate_cost=1.0, router_cost=2.0, mid_cost=10.0, full_cost=100.0,
        )
        survivors = [sents[1], sents[2], sents[3], sents[4]]
        expected = (
            1.0 * sum(len(s) for s in sents)
            + 2.0 * sum(len(s) for s in survivors)
            + 10.0 * len(f"{sents[1]} {sents[4]}")
            + 100.0 * len(f"{sents[2]} {sents[3]}")
        )
        assert outcome.cost == pytest.approx(expected)


class TestEntityF1:
    def test_perfect(self):
        spans = [EntitySpan(0, 3, "x"), EntitySpan(5, 9, "y")]
        assert entity_f1(spans, list(spans)) == (1.0, 1.0, 1.0)

    def test_empty_prediction_convention(self):
        assert entity_f1([], [EntitySpan(0, 3, "x")]) == (0.0, 0.0, 0.0)

    def test_half_right_counted_by_hand(self):
        # 2 predicted, 1 correct, 2 gold: TP=1, FP=1, FN=1 -> P=R=F1=0.5.
        predicted = [EntitySpan(0, 3, "x"), EntitySpan(10, 12, "x")]
        gold = [EntitySpan(0, 3, "x"), EntitySpan(4, 8, "x")]
        assert entity_f1(predicted, gold) == (0.5, 0.5, 0.5)

    def test_type_mismatch_is_wrong(self):
        assert entity_f1([EntitySpan(0, 3, "x")], [EntitySpan(0, 3, "y")])[2] == 0.0

    def test_micro_average(self):
        pairs = [
            ([EntitySpan(0, 3, "x")], [EntitySpan(0, 3, "x")]),        # TP=1
            ([EntitySpan(0, 2, "x")], [EntitySpan(5, 7, "x")]),        # FP=1, FN=1
            ([], []),                                                   # nothing
        ]
        p, r, f1 = micro_entity_f1(pairs)
        assert (p, r) == (0.5, 0.5)
        assert f1 == pytest.approx(0.5)


class TestEntityHistogram:
    def _sentence_with_spans(self, i, k):
        tokens, tags = [f"s{i}"], ["0"]
        for j in range(k):
            tokens += [f"e{j}", "pad"]
            tags += ["1", "0"]
        return TaggedSentence.from_tokens(tokens, tags)

    def test_counts_and_fraction(self):
        sents = [self._sentence_with_spans(i, k) for i, k in enumerate([0, 0, 1, 2])]
        hist = entity_histogram(sents)
        assert hist.counts == {0: 2, 1: 1, 2: 1}
        assert hist.no_entity_fraction == 0.5

    def test_empty_corpus(self):
        hist = entity_histogram([])
        assert hist.counts == {}
        assert hist.no_entity_fraction == 0.0

    def test_conll_scale_fraction(self):
        # 645 entity-free of 3453 sentences -> fraction ~= 0.187.
        sents = [self._sentence_with_spans(i, 0 if i < 645 else 1) for i in range(3453)]
        hist = entity_histogram(sents)
        assert hist.counts[0] == 645
        assert hist.no_entity_fraction == pytest.approx(0.187, abs=5e-4)

    def test_csv(self):
        hist = EntityHistogram(counts={0: 2, 2: 1}, no_entity_fraction=2 / 3)
        assert hist.to_csv() == "entities_per_sentence,sentence_count\n0,2\n2,1\n"


def random_ner_fixture(rng, n_docs=12, sentences_per_doc=4, entity_free=0.5,
                       perfect_gate=False):
    """Synthetic corpus with pattern entities plus a scripted gate whose
    argmax may be wrong unless perfect_gate is set."""
    docs, gate_pairs = [], {}
    sid = 0
    for d in range(n_docs):
        sents = []
        for _ in range(sentences_per_doc):
            has_entity = rng.random() >= entity_free
            if has_entity:
                tokens = [f"Ss{sid}", "word", f"xqent{sid}", "tail."]
                tags = ["0", "0", "1", "0"]
            else:
                tokens = [f"Ss{sid}", "plain", "words", "only."]
                tags = ["0", "0", "0", "0"]
            sent = TaggedSentence.from_tokens(tokens, tags)
            sents.append(sent)
            conf = round(rng.uniform(0.55, 0.99), 6)
            if perfect_gate:
                right = True
            else:
                right = rng.random() < 0.9
            says_no_entity = (not has_entity) if right else has_entity
            gate_pairs[sent.text] = skip_dist(conf) if says_no_entity else keep_dist(conf)
            sid += 1
        docs.append(sentences_to_document(sents, f"nd{d}"))
    return docs, gate_mock(gate_pairs)


class TestNerProperties:
    def test_recall_monotone_in_threshold(self):
        rng = random.Random(31)
        docs, gate = random_ner_fixture(rng)
        backend = pattern_ner_mock()
        grid = [0.0, 0.25, 0.5, 0.75, 1.0]
        recalls = []
        for t in grid:
            pairs = []
            for d in docs:
                outcome = gated_ner_triage(gate, backend, d, t)
                pairs.append((outcome.predicted, d.gold_entities))
            recalls.append(micro_entity_f1(pairs)[1])
        for lo, hi in zip(recalls, recalls[1:]):
            assert hi >= lo - 1e-12

    def test_perfect_gate_skip_bounded_by_no_entity_fraction(self):
        rng = random.Random(8)
        docs, gate = random_ner_fixture(rng, perfect_gate=True)
        backend = pattern_ner_mock()
        # fraction of entity-free sentences, computed from gold
        total = skipped_possible = 0
        from modelcascade.corpus import split_sentences

        for d in docs:
            for text, offset in split_sentences(d.text):
                total += 1
                covered = any(
                    offset <= s.start < offset + len(text) for s in d.gold_entities
                )
                if not covered:
                    skipped_possible += 1
        bound = skipped_possible / total
        for t in (0.0, 0.3, 0.6, 0.9):
            skipped = 0
            seen = 0
            for d in docs:
                outcome = gated_ner_triage(gate, backend, d, t)
                skipped += sum(1 for v in outcome.verdicts if v.routed_to == ROUTED_SKIPPED)
                seen += len(outcome.verdicts)
            assert skipped / seen <= bound + 1e-12

    def test_skip_bound_with_imperfect_gate(self):
        # skipped <= no-entity fraction + confidently-wrong-skip fraction,
        # with equality: every skip is either a correct or a wrong skip.
        rng = random.Random(14)
        docs, gate = random_ner_fixture(rng, n_docs=15)
        backend = pattern_ner_mock()
        from modelcascade.corpus import split_sentences

        for t in (0.0, 0.4, 0.8):
            skipped = wrong_skips = no_entity = total = 0
            for d in docs:
                outcome = gated_ner_triage(gate, backend, d, t)
                pieces = split_sentences(d.text)
                for v, (text, offset) in zip(outcome.verdicts, pieces):
                    total += 1
                    has_gold = any(
                        offset <= s.start < offset + len(text)
                        for s in d.gold_entities
                    )
                    if not has_gold:
                        no_entity += 1
                    if v.routed_to == ROUTED_SKIPPED:
                        skipped += 1
                        if has_gold:
                            wrong_skips += 1
            assert skipped / total <= no_entity / total + wrong_skips / total + 1e-12

    def test_f1_at_threshold_one_equals_backend_only(self):
        rng = random.Random(77)
        docs, gate = random_ner_fixture(rng)
        backend = pattern_ner_mock()
        pairs_gated, pairs_direct = [], []
        for d in docs:
            outcome = gated_ner_triage(gate, backend, d, 1.0)
            pairs_gated.append((outcome.predicted, d.gold_entities))
            direct = pattern_ner_mock().predict_batch([d.text])[0]
            pairs_direct.append((tuple(direct), d.gold_entities))
        assert micro_entity_f1(pairs_gated) == micro_entity_f1(pairs_direct)

    def test_remap_roundtrip_on_random_docs(self):
        rng = random.Random(5)
        docs, gate = random_ner_fixture(rng, n_docs=20)
        backend = pattern_ner_mock()
        for d in docs:
            outcome = gated_ner_triage(gate, backend, d, rng.random())
            for span in outcome.predicted:
                assert d.text[span.start : span.end].startswith("xqent")


class TestSweepGate:
    def test_matches_naive_per_point_rerun(self):
        rng = random.Random(13)
        docs, gate = random_ner_fixture(rng, n_docs=10)
        backend = pattern_ner_mock()
        grid = default_grid(21)
        fast = sweep_gate(gate, backend, docs, grid)

        from modelcascade.corpus import split_sentences

        total_sentences = sum(len(split_sentences(d.text)) for d in docs)
        total_chars = sum(
            len(t) for d in docs for t, _ in split_sentences(d.text)
        )
        for point in fast:
            outcomes = [
                gated_ner_triage(gate, pattern_ner_mock(), d, point.threshold)
                for d in docs
            ]
            pairs = [(o.predicted, d.gold_entities) for o, d in zip(outcomes, docs)]
            f1 = micro_entity_f1(pairs)[2]
            skipped = sum(
                1 for o in outcomes for v in o.verdicts if v.routed_to == ROUTED_SKIPPED
            )
            full_chars = sum(
                v.n_chars for o in outcomes for v in o.verdicts
                if v.routed_to == ROUTED_FULL
            )
            assert point.accuracy == f1
            assert point.savings_docs == skipped / total_sentences
            assert point.savings_cost == 1.0 - full_chars / total_chars
            assert point.stage_counts == (skipped, total_sentences - skipped)

    def test_calibrate_gate_meets_floor(self):
        rng = random.Random(21)
        docs, gate = random_ner_fixture(rng, n_docs=20, perfect_gate=True)
        result = calibrate_gate(gate, pattern_ner_mock(), docs, 0.95, default_grid(21))
        assert not result.shortfall
        assert result.achieved >= 0.95

    def test_sweep_router_counts(self):
        doc, sents, gate, router, _ = six_sentence_fixture()
        mid = pattern_ner_mock(id="mid")
        full = pattern_ner_mock(id="full")
        points = sweep_router(
            gate, router, mid, full, [
                Document(id=doc.id, text=doc.text, gold_entities=tuple(
                    pattern_ner_mock().predict_batch([doc.text])[0]
                ))
            ],
            gate_threshold=0.5, grid=[0.5],
        )
        (point,) = points
        assert point.stage_counts == (2, 2, 2)
