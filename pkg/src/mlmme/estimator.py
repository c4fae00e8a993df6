"""scikit-learn style facade over the trainable embedding model.

fit() consumes paired (sentences per language, image feature) instances,
transform() maps sentences to unit-norm vectors in the shared space, and
get_params/set_params come from BaseEstimator so the embedder composes with
the usual tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .dataio import TrainingInstance
from .encoder import build_vocabulary
from .model import LossConfig, MlmmeModel
from .training import TrainingConfig, train
from .validation import as_tokens, check_feature_matrix, check_raw_instances


class MlmmeEmbedder(BaseEstimator, TransformerMixin):
    """Trainable multilingual multimodal embedder.

    Parameters mirror the library defaults; pass smaller dimensions for
    desk-scale experiments. X for fit() is a sequence of instances, each a
    mapping (or object) with `sentences` (language -> tokens or whitespace
    string) and `image_feature`.
    """

    def __init__(self, languages=("en",), embed_dim=620, hidden_dim=1024,
                 multimodal_dim=2048, margin=0.2, beta=1.0,
                 negatives_per_instance=5, dropout=0.5, min_count=1,
                 batch_size=128, max_epochs=30, patience=10,
                 learning_rate=2e-4, selection_metric="sum_of_recalls",
                 grad_clip=0.0, seed=0):
        self.languages = languages
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.multimodal_dim = multimodal_dim
        self.margin = margin
        self.beta = beta
        self.negatives_per_instance = negatives_per_instance
        self.dropout = dropout
        self.min_count = min_count
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.selection_metric = selection_metric
        self.grad_clip = grad_clip
        self.seed = seed

    def _encode_instances(self, X, vocabs):
        sentences, features = check_raw_instances(X, list(self.languages))
        features = features.astype(np.float32)
        return [
            TrainingInstance(
                {lang: vocabs[lang].encode(toks) for lang, toks in row.items()},
                features[i], i,
            )
            for i, row in enumerate(sentences)
        ]

    def fit(self, X, y=None, validation=None):
        """Build vocabularies from X, train, and keep the best checkpoint.

        validation defaults to X itself (fine for smoke-scale use; pass a
        held-out split for real model selection).
        """
        languages = list(self.languages)
        sentences, features = check_raw_instances(X, languages)
        vocabs = {
            lang: build_vocabulary((row[lang] for row in sentences),
                                   min_count=self.min_count, language_id=lang)
            for lang in languages
        }
        model = MlmmeModel.build(
            vocabs,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            multimodal_dim=self.multimodal_dim,
            image_feature_dim=features.shape[1],
            config=LossConfig(self.margin, self.beta,
                              self.negatives_per_instance, self.dropout),
            seed=self.seed,
        )
        train_set = self._encode_instances(X, vocabs)
        val_set = (self._encode_instances(validation, vocabs)
                   if validation is not None else train_set)
        config = TrainingConfig(
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience, seed=self.seed,
            learning_rate=self.learning_rate,
            selection_metric=self.selection_metric, grad_clip=self.grad_clip,
        )
        self.model_, self.history_ = train(model, train_set, val_set, config)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this MlmmeEmbedder instance is not fitted yet")

    def transform(self, X, language=None) -> np.ndarray:
        """Encode sentences (token lists or whitespace strings) to unit-norm
        vectors. `language` defaults to the first registered language."""
        self._check_fitted()
        language = language or self.model_.language_ids[0]
        return np.stack([
            self.model_.encode_text(language, as_tokens(s)) for s in X
        ])

    def encode_images(self, X) -> np.ndarray:
        """Embed precomputed image feature rows into the shared space."""
        self._check_fitted()
        X = check_feature_matrix(X, self.model_.image_feature_dim)
        return np.stack([self.model_.encode_image(row) for row in X])
