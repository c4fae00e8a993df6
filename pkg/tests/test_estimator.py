"""The sklearn-style facade: params, fit/transform, validation helpers."""

import numpy as np
import pytest
from sklearn.base import clone

from mlmme.estimator import MlmmeEmbedder
from mlmme.numerics import rng_stream
from mlmme.validation import as_tokens, check_feature_matrix, check_raw_instances


def toy_instances(n=12, dim=8, seed=0):
    rng = rng_stream(seed)
    words_a = ["red", "blue", "green", "dog", "cat", "bird"]
    words_b = ["rot", "blau", "gruen", "hund", "katze", "vogel"]
    out = []
    for i in range(n):
        k = int(rng.integers(0, 6))
        feature = np.zeros(dim)
        feature[k] = 2.0
        feature[6] = 1.0
        out.append({
            "sentences": {"en": [words_a[k], "thing"], "de": [words_b[k], "ding"]},
            "image_feature": feature,
        })
    return out


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        est = MlmmeEmbedder(languages=("en", "de"), beta=0.5, hidden_dim=16)
        params = est.get_params()
        assert params["beta"] == 0.5
        est.set_params(beta=0.75)
        assert est.beta == 0.75

    def test_clone(self):
        est = MlmmeEmbedder(languages=("en",), margin=0.3, seed=9)
        copied = clone(est)
        assert copied.get_params() == est.get_params()

    def test_unfitted_transform_raises(self):
        with pytest.raises(RuntimeError):
            MlmmeEmbedder().transform([["a"]])


@pytest.fixture(scope="module")
def fitted():
    est = MlmmeEmbedder(
        languages=("en", "de"), embed_dim=6, hidden_dim=8, multimodal_dim=10,
        beta=0.5, negatives_per_instance=2, dropout=0.0, batch_size=6,
        max_epochs=3, patience=5, learning_rate=1e-3,
        selection_metric="loss", seed=1,
    )
    return est.fit(toy_instances())


class TestFitTransform:

    def test_transform_returns_unit_rows(self, fitted):
        out = fitted.transform([["red", "thing"], ["dog"]], language="en")
        assert out.shape == (2, 10)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_transform_accepts_strings(self, fitted):
        out = fitted.transform(["red thing"], language="en")
        assert out.shape == (1, 10)

    def test_encode_images(self, fitted):
        feats = np.stack([inst["image_feature"] for inst in toy_instances(3)])
        out = fitted.encode_images(feats)
        assert out.shape == (3, 10)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_history_recorded(self, fitted):
        assert len(fitted.history_.epochs) == 3

    def test_missing_language_rejected(self):
        est = MlmmeEmbedder(languages=("en", "fr"), max_epochs=1)
        with pytest.raises(ValueError, match="fr"):
            est.fit(toy_instances(4))


class TestValidationHelpers:
    def test_check_feature_matrix_rejects_zero_row(self):
        X = np.ones((3, 4))
        X[1] = 0.0
        with pytest.raises(ValueError, match="row 1"):
            check_feature_matrix(X)

    def test_check_feature_matrix_rejects_nan(self):
        X = np.ones((2, 2))
        X[0, 0] = np.nan
        with pytest.raises(ValueError):
            check_feature_matrix(X)

    def test_expected_dim_enforced(self):
        with pytest.raises(ValueError):
            check_feature_matrix(np.ones((2, 3)), expected_dim=4)

    def test_as_tokens(self):
        assert as_tokens("a b  c") == ["a", "b", "c"]
        assert as_tokens(["x", "y"]) == ["x", "y"]
        with pytest.raises(ValueError):
            as_tokens("")

    def test_check_raw_instances_shapes(self):
        sents, feats = check_raw_instances(toy_instances(5), ["en", "de"])
        assert len(sents) == 5
        assert feats.shape == (5, 8)
