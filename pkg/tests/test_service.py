import random

import pytest
from fastapi.testclient import TestClient

from modelcascade.cascade import CascadeConfig, CascadeStage, triage_batch
from modelcascade.config import cascade_summary
from modelcascade.errors import ValidationError
from modelcascade.service import create_app

from conftest import classification_mock, make_docs, pattern_ner_mock, two_stage_cascade
from test_entity import gate_mock, keep_dist, skip_dist

LABELS = ("a", "b")


def random_cascade(rng, n_docs=30, threshold=0.7):
    texts = [f"doc {i} {rng.random():.6f}" for i in range(n_docs)]
    cheap_pairs, final_pairs = {}, {}
    for t in texts:
        p = round(rng.uniform(0.5, 1.0), 6)
        label = rng.choice(LABELS)
        other = "b" if label == "a" else "a"
        cheap_pairs[t] = {label: p, other: round(1 - p, 6)}
        final_pairs[t] = {label: 1.0, other: 0.0}
    cascade = two_stage_cascade(
        classification_mock(cheap_pairs, LABELS, id="cheap"),
        classification_mock(final_pairs, LABELS, id="final"),
        threshold=threshold,
    )
    return cascade, texts


class TestHealthAndConfig:
    def test_health_has_version_metadata(self):
        cascade, _ = random_cascade(random.Random(0))
        client = TestClient(create_app(cascade))
        body = client.get("/v1/health").json()
        assert body["status"] == "ok"
        assert body["service"] == "modelcascade"
        assert "version" in body

    def test_config_exposes_thresholds(self):
        cascade, _ = random_cascade(random.Random(0), threshold=0.65)
        client = TestClient(create_app(cascade))
        body = client.get("/v1/config").json()
        assert body == cascade_summary(cascade)
        assert body["stages"][0]["threshold"] == 0.65
        assert body["stages"][1]["threshold"] is None


class TestTriageEndpoint:
    def test_matches_library_triage_exactly(self):
        rng = random.Random(42)
        cascade, texts = random_cascade(rng, n_docs=100)
        docs = make_docs(texts)
        expected = triage_batch(cascade, docs)
        client = TestClient(create_app(cascade))
        response = client.post(
            "/v1/triage",
            json={"inputs": [{"id": d.id, "text": d.text} for d in docs]},
        )
        assert response.status_code == 200
        outputs = response.json()["outputs"]
        assert len(outputs) == len(expected)
        for out, outcome in zip(outputs, expected):
            assert out["id"] == outcome.doc_id
            assert out["label"] == outcome.prediction.top_label()
            assert out["answering_stage"] == outcome.answering_stage
            assert out["confidence"] == pytest.approx(
                outcome.confidences[outcome.answering_stage]
            )

    def test_empty_inputs(self):
        cascade, _ = random_cascade(random.Random(1))
        client = TestClient(create_app(cascade))
        response = client.post("/v1/triage", json={"inputs": []})
        assert response.status_code == 200
        assert response.json() == {"outputs": []}

    def test_malformed_body_is_machine_readable_4xx(self):
        cascade, _ = random_cascade(random.Random(1))
        client = TestClient(create_app(cascade))
        for payload in ({"nope": 1}, {"inputs": [{"id": "x"}]}, {"inputs": [{"id": "", "text": "t"}]}):
            response = client.post("/v1/triage", json=payload)
            assert response.status_code == 400
            assert response.json()["error"]["code"] == "invalid_request"
        response = client.post(
            "/v1/triage", content=b"{not json", headers={"content-type": "application/json"}
        )
        assert response.status_code == 400
        assert response.json()["error"]["code"] == "invalid_json"

    def test_backend_outage_names_stage(self):
        cheap = classification_mock({}, LABELS, default={"a": 0.6, "b": 0.4})
        final = classification_mock({}, LABELS, fail_first=50)  # always failing
        cascade = two_stage_cascade(cheap, final, 0.9)
        client = TestClient(create_app(cascade))
        response = client.post(
            "/v1/triage", json={"inputs": [{"id": "d", "text": "t"}]}
        )
        assert response.status_code == 502
        body = response.json()["error"]
        assert body["code"] == "backend_failure"
        assert body["stage"] == 1

    def test_counters_advance(self):
        cascade, texts = random_cascade(random.Random(2), n_docs=3)
        client = TestClient(create_app(cascade))
        client.post("/v1/triage", json={"inputs": [{"id": "a", "text": texts[0]}]})
        counters = client.get("/v1/health").json()["counters"]
        assert counters["triage_requests"] == 1
        assert counters["documents"] == 1

    def test_concurrent_requests_counted_atomically(self):
        import concurrent.futures

        cascade, texts = random_cascade(random.Random(6), n_docs=4)
        client = TestClient(create_app(cascade))

        def hit(_):
            r = client.post(
                "/v1/triage",
                json={"inputs": [{"id": f"x{_}", "text": texts[0]},
                                 {"id": f"y{_}", "text": texts[1]}]},
            )
            return r.status_code

        with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
            codes = list(pool.map(hit, range(40)))
        assert codes == [200] * 40
        counters = client.get("/v1/health").json()["counters"]
        assert counters["triage_requests"] == 40
        assert counters["documents"] == 80


class TestEntityService:
    def _entity_cascade(self):
        s0, s1 = "Aa xqent1 here.", "Bb plain words."
        gate = gate_mock({s0: keep_dist(0.9), s1: skip_dist(0.95)})
        backend = pattern_ner_mock()
        return (
            CascadeConfig(
                task="entity-recognition",
                stages=[
                    CascadeStage(predictor=gate, unit_cost=1.0, threshold=0.5, stage_id="gate"),
                    CascadeStage(predictor=backend, unit_cost=100.0, stage_id="full"),
                ],
            ),
            f"{s0} {s1}",
        )

    def test_entities_returned_in_document_coordinates(self):
        cascade, text = self._entity_cascade()
        client = TestClient(create_app(cascade))
        response = client.post(
            "/v1/triage", json={"inputs": [{"id": "d", "text": text}]}
        )
        assert response.status_code == 200
        (out,) = response.json()["outputs"]
        assert [text[e["start"]:e["end"]] for e in out["entities"]] == ["xqent1"]
        assert out["answering_stage"] == 1


class TestConfigValidationEquivalence:
    def test_invalid_cascade_rejected_at_serve_time_and_library(self):
        cheap = classification_mock({}, LABELS, default={"a": 0.6, "b": 0.4})
        final = classification_mock({}, LABELS, default={"a": 1.0, "b": 0.0})
        bad = two_stage_cascade(cheap, final, threshold=1.5)
        with pytest.raises(ValidationError):
            bad.validate()
        with pytest.raises(ValidationError):
            create_app(bad)
