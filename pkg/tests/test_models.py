import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modelcascade.corpus import Document
from modelcascade.errors import BackendError, ValidationError
from modelcascade.models import (
    LabelDistribution,
    LinearTextClassifier,
    NO_ENTITY,
    TrainConfig,
    WITH_ENTITY,
    featurize,
    loss_and_gradient,
    oracle_label,
    train,
)

from conftest import classification_mock, pattern_ner_mock

DIM = 2**10
CFG = TrainConfig(feature_dim=DIM, ngram_range=(1, 1), epochs=30)


def separable_examples(per_class=50):
    """Two one-word classes with disjoint vocabulary."""
    out = []
    for i in range(per_class):
        out.append((f"cat{i % 7}", "feline"))
        out.append((f"dog{i % 7}", "canine"))
    return out


class TestLabelDistribution:
    def test_needs_labels(self):
        with pytest.raises(ValidationError):
            LabelDistribution({})

    def test_sum_enforced(self):
        with pytest.raises(ValidationError, match="sum"):
            LabelDistribution({"a": 0.5, "b": 0.3})

    def test_range_enforced(self):
        with pytest.raises(ValidationError):
            LabelDistribution({"a": 1.2, "b": -0.2})

    def test_argmax_tie_breaks_by_order(self):
        assert LabelDistribution({"a": 0.5, "b": 0.5}).top_label() == "a"
        assert LabelDistribution({"b": 0.5, "a": 0.5}).top_label() == "b"


class TestFeaturize:
    def test_empty_text_is_zero_vector(self):
        vec = featurize("", DIM, (1, 1))
        assert vec.nnz == 0

    def test_repeated_token_normalizes_to_unit(self):
        vec = featurize("a a", DIM, (1, 1))
        assert vec.nnz == 1
        assert vec.values[0] == 1.0

    def test_bag_of_words_order_invariance(self):
        assert featurize("a b", DIM, (1, 1)) == featurize("b a", DIM, (1, 1))

    def test_bigrams_are_order_sensitive(self):
        assert featurize("a b", DIM, (1, 2)) != featurize("b a", DIM, (1, 2))

    def test_requires_power_of_two(self):
        with pytest.raises(ValidationError, match="power of two"):
            featurize("a", 1000, (1, 1))

    def test_lowercased(self):
        assert featurize("Dog", DIM, (1, 1)) == featurize("dog", DIM, (1, 1))

    @given(st.lists(st.text(alphabet="abcd", min_size=1, max_size=5), min_size=1, max_size=12))
    @settings(max_examples=100)
    def test_nonempty_text_has_unit_norm(self, words):
        vec = featurize(" ".join(words), DIM, (1, 2))
        assert np.linalg.norm(vec.values) == pytest.approx(1.0, abs=1e-12)


class TestGradientCheck:
    def test_analytic_matches_central_differences(self):
        # Fixed 5-example, 2-label instance over a small hashed space.
        texts = ["red apple", "green pear", "red red", "pear pear green", "apple"]
        labels = np.array([0, 1, 0, 1, 0])
        feats = [featurize(t, DIM, (1, 1)) for t in texts]
        rng = np.random.default_rng(42)
        weights = rng.normal(scale=0.5, size=(2, DIM))
        bias = rng.normal(scale=0.5, size=2)
        l2 = 1e-3

        loss, grad_w, grad_b = loss_and_gradient(weights, bias, feats, labels, l2)
        assert np.isfinite(loss)

        h = 1e-6
        touched = sorted({int(i) for f in feats for i in f.indices})
        # Finite differences on every touched weight, a few untouched, and both biases.
        check_coords = [(k, j) for k in range(2) for j in touched] + [(0, 999), (1, 998)]
        for k, j in check_coords:
            weights[k, j] += h
            up, _, _ = loss_and_gradient(weights, bias, feats, labels, l2)
            weights[k, j] -= 2 * h
            down, _, _ = loss_and_gradient(weights, bias, feats, labels, l2)
            weights[k, j] += h
            numeric = (up - down) / (2 * h)
            denom = max(abs(numeric), abs(grad_w[k, j]), 1e-8)
            assert abs(numeric - grad_w[k, j]) / denom < 1e-4
        for k in range(2):
            bias[k] += h
            up, _, _ = loss_and_gradient(weights, bias, feats, labels, l2)
            bias[k] -= 2 * h
            down, _, _ = loss_and_gradient(weights, bias, feats, labels, l2)
            bias[k] += h
            numeric = (up - down) / (2 * h)
            denom = max(abs(numeric), abs(grad_b[k]), 1e-8)
            assert abs(numeric - grad_b[k]) / denom < 1e-4


def _convex_oracle_fit(examples, cfg):
    """Independent convex fit of the same objective on the same features,
    via scipy's L-BFGS with a test-local dense loss/gradient."""
    from scipy.optimize import minimize
    from scipy.special import log_softmax

    labels = sorted({l for _, l in examples})
    pos = {l: i for i, l in enumerate(labels)}
    x = np.stack(
        [featurize(t, cfg.feature_dim, cfg.ngram_range).to_dense() for t, _ in examples]
    )
    y = np.array([pos[l] for _, l in examples])
    n, d = x.shape
    k = len(labels)

    def objective(params):
        w = params[: k * d].reshape(k, d)
        b = params[k * d :]
        logp = log_softmax(x @ w.T + b, axis=1)
        nll = -logp[np.arange(n), y].mean()
        loss = nll + 0.5 * cfg.l2 * np.sum(w * w)
        probs = np.exp(logp)
        delta = probs
        delta[np.arange(n), y] -= 1.0
        grad_w = delta.T @ x / n + cfg.l2 * w
        grad_b = delta.mean(axis=0)
        return loss, np.concatenate([grad_w.ravel(), grad_b])

    result = minimize(
        objective, np.zeros(k * d + k), jac=True, method="L-BFGS-B",
        options={"maxiter": 200},
    )
    w = result.x[: k * d].reshape(k, d)
    b = result.x[k * d :]

    def predict(text):
        v = featurize(text, cfg.feature_dim, cfg.ngram_range).to_dense()
        return labels[int(np.argmax(w @ v + b))]

    return predict


class TestTrain:
    def test_separable_accuracy_verified_against_convex_oracle(self):
        examples = separable_examples()
        oracle_predict = _convex_oracle_fit(examples, CFG)
        oracle_acc = sum(oracle_predict(t) == l for t, l in examples) / len(examples)
        assert oracle_acc == 1.0  # the problem really is separable

        model = train(examples, CFG)
        acc = sum(model.predict(t).top_label() == l for t, l in examples) / len(examples)
        assert acc >= 0.98

    def test_deterministic_bitwise(self):
        examples = separable_examples(10)
        a = train(examples, CFG)
        b = train(examples, CFG)
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)

    def test_single_label_rejected(self):
        with pytest.raises(ValidationError, match="labels"):
            train([(f"t{i}", "x") for i in range(12)], CFG)

    def test_too_few_examples(self):
        with pytest.raises(ValidationError, match="10"):
            train([("a", "x"), ("b", "y")] * 3, CFG)

    def test_final_loss_not_above_initial(self):
        model = train(separable_examples(10), CFG)
        assert model.train_losses[-1] <= model.train_losses[0]

    def test_label_set_sorted(self):
        model = train(separable_examples(10), CFG)
        assert model.label_set == ("canine", "feline")


class TestPredict:
    def test_zero_weights_uniform(self):
        model = LinearTextClassifier(
            id="z", label_set=("a", "b", "c"),
            weights=np.zeros((3, DIM)), bias=np.zeros(3),
            feature_dim=DIM, ngram_range=(1, 1),
        )
        d = model.predict("anything at all")
        for p in d.probs.values():
            assert p == pytest.approx(1 / 3, abs=1e-12)

    @given(st.text(alphabet="abScd \n.", max_size=40), st.integers(0, 2**31))
    @settings(max_examples=60)
    def test_any_text_valid_distribution(self, text, seed):
        rng = np.random.default_rng(seed)
        model = LinearTextClassifier(
            id="r", label_set=("a", "b"),
            weights=rng.normal(size=(2, DIM)), bias=rng.normal(size=2),
            feature_dim=DIM, ngram_range=(1, 2),
        )
        d = model.predict(text)  # LabelDistribution validates on construction
        assert abs(sum(d.probs.values()) - 1.0) <= 1e-9

    def test_training_examples_recovered(self):
        examples = separable_examples()
        model = train(examples, CFG)
        for text, label in examples[:20]:
            assert model.predict(text).top_label() == label

    def test_non_finite_weights_rejected(self):
        with pytest.raises(ValidationError, match="finite"):
            LinearTextClassifier(
                id="bad", label_set=("a", "b"),
                weights=np.full((2, DIM), np.nan), bias=np.zeros(2),
                feature_dim=DIM, ngram_range=(1, 1),
            )


class TestPersistence:
    def test_roundtrip_identical_predictions(self, tmp_path):
        model = train(separable_examples(10), CFG, trained_on="oracle-1")
        model.save(tmp_path / "m")
        loaded = LinearTextClassifier.load(tmp_path / "m")
        assert loaded.label_set == model.label_set
        assert loaded.trained_on == "oracle-1"
        assert np.array_equal(loaded.weights, model.weights)
        text = "cat0 dog1"
        assert loaded.predict(text) == model.predict(text)

    def test_manifest_version_validated(self, tmp_path):
        model = train(separable_examples(10), CFG)
        model.save(tmp_path / "m")
        manifest = (tmp_path / "m" / "manifest.json").read_text()
        (tmp_path / "m" / "manifest.json").write_text(
            manifest.replace('"format_version": 1', '"format_version": 99')
        )
        with pytest.raises(ValidationError, match="version"):
            LinearTextClassifier.load(tmp_path / "m")


class TestOracleLabel:
    def test_argmax(self):
        backend = classification_mock(
            {"hello": {"joy": 0.9, "anger": 0.1}}, ("joy", "anger")
        )
        docs = [Document(id="a", text="hello")]
        assert oracle_label(backend, docs) == [("a", "joy")]

    def test_tie_break_lowest_index(self):
        backend = classification_mock({"t": {"a": 0.5, "b": 0.5}}, ("a", "b"))
        assert oracle_label(backend, [Document(id="x", text="t")]) == [("x", "a")]

    def test_entity_binarization(self):
        backend = pattern_ner_mock()
        docs = [
            Document(id="none", text="plain words only"),
            Document(id="one", text="has xqent7 inside"),
        ]
        assert oracle_label(backend, docs) == [
            ("none", NO_ENTITY),
            ("one", WITH_ENTITY),
        ]

    def test_failure_aborts_with_doc_id(self):
        backend = classification_mock({}, ("a", "b"))  # no responses, no default
        with pytest.raises(BackendError, match="doc-1"):
            oracle_label(backend, [Document(id="doc-1", text="unknown")])

    def test_oracle_then_train_label_set(self):
        texts = {f"cat text {i}": {"feline": 0.8, "canine": 0.2} for i in range(6)}
        texts.update({f"dog text {i}": {"canine": 0.8, "feline": 0.2} for i in range(6)})
        backend = classification_mock(texts, ("canine", "feline"))
        docs = [Document(id=f"d{i}", text=t) for i, t in enumerate(texts)]
        labeled = oracle_label(backend, docs)
        by_id = {d.id: d.text for d in docs}
        model = train([(by_id[i], lab) for i, lab in labeled], CFG)
        assert set(model.label_set) == {lab for _, lab in labeled}
