"""Input validation helpers shared by the estimator facade and ingestion."""

from __future__ import annotations

import numpy as np


def check_feature_matrix(X, expected_dim: int | None = None) -> np.ndarray:
    """Coerce to a finite 2-D float array with no all-zero rows."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    bad = np.where(~np.isfinite(X).all(axis=1))[0]
    if bad.size:
        raise ValueError(f"non-finite value in feature row {bad[0]}")
    zero = np.where(~X.any(axis=1))[0]
    if zero.size:
        raise ValueError(f"feature row {zero[0]} is all zeros")
    if expected_dim is not None and X.shape[1] != expected_dim:
        raise ValueError(f"features have dim {X.shape[1]}, expected {expected_dim}")
    return X


def as_tokens(sentence) -> list[str]:
    """Accept a whitespace string or an iterable of tokens."""
    if isinstance(sentence, str):
        tokens = sentence.split()
    else:
        tokens = [str(t) for t in sentence]
    if not tokens:
        raise ValueError("empty sentence")
    return tokens


def check_token_sequences(X) -> list[list[str]]:
    if not len(X):
        raise ValueError("no sentences given")
    return [as_tokens(s) for s in X]


def check_raw_instances(X, languages) -> tuple[list[dict], np.ndarray]:
    """Validate fit() input: a sequence of mappings (or objects) carrying
    `sentences` per language and an `image_feature` vector. Returns
    (per-instance token dicts, feature matrix)."""
    if not len(X):
        raise ValueError("no training instances given")
    sentences = []
    features = []
    for i, item in enumerate(X):
        if isinstance(item, dict):
            sents, feat = item.get("sentences"), item.get("image_feature")
        else:
            sents = getattr(item, "sentences", None)
            feat = getattr(item, "image_feature", None)
        if sents is None or feat is None:
            raise ValueError(
                f"instance {i} needs 'sentences' and 'image_feature'")
        row = {}
        for lang in languages:
            if lang not in sents:
                raise ValueError(f"instance {i} is missing language '{lang}'")
            row[lang] = as_tokens(sents[lang])
        sentences.append(row)
        features.append(np.asarray(feat, dtype=np.float64))
    return sentences, check_feature_matrix(np.stack(features))
