"""Retrieval metrics (recall@k, median rank) for image-sentence ranking in
both directions, and graded sentence-similarity scoring with Pearson
correlation.

Ranking convention: a query's rank is 1 + the number of candidates scoring
strictly higher than its best-scoring gold candidate, so ties never hurt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RECALL_KS = (1, 5, 10)

SENTENCE_TO_IMAGE = "sentence_to_image"
IMAGE_TO_SENTENCE = "image_to_sentence"


@dataclass
class ScoreMatrix:
    """Query-by-candidate similarity scores plus gold candidate sets."""

    scores: np.ndarray
    gold: list[set[int]]

    def validate(self) -> None:
        q, c = self.scores.shape
        if len(self.gold) != q:
            raise ValueError(f"{q} queries but {len(self.gold)} gold sets")
        for i, g in enumerate(self.gold):
            if not g:
                raise ValueError(f"query {i} has an empty gold set")
            if max(g) >= c or min(g) < 0:
                raise ValueError(f"query {i} has gold indices outside 0..{c - 1}")


@dataclass
class RetrievalReport:
    r_at: dict[int, float]
    median_rank: float
    ranks: np.ndarray = field(repr=False, default=None)

    def lines(self) -> list[str]:
        out = [f"r@{k}\t{self.r_at[k]:.4f}" for k in sorted(self.r_at)]
        out.append(f"mrank\t{self.median_rank:g}")
        return out


def retrieval_eval(matrix: ScoreMatrix) -> RetrievalReport:
    """Recall@{1,5,10} and median rank with optimistic tie-breaking.

    Multi-gold queries are scored against their best-scoring gold
    candidate; an even query count averages the two middle ranks.
    """
    matrix.validate()
    scores = matrix.scores
    ranks = np.empty(scores.shape[0], dtype=np.float64)
    for i, gold in enumerate(matrix.gold):
        best_gold = max(scores[i, j] for j in gold)
        ranks[i] = 1 + int(np.sum(scores[i] > best_gold))
    r_at = {k: float(np.mean(ranks <= k)) for k in RECALL_KS}
    return RetrievalReport(r_at, float(np.median(ranks)), ranks)


def _group_images(instances):
    """Unique images in first-appearance order; returns (features, group-of-
    instance) where group[i] is the image position for instance i."""
    features = []
    group = []
    seen: dict[int, int] = {}
    for idx, inst in enumerate(instances):
        image_id = inst.image_id if inst.image_id >= 0 else idx
        if image_id not in seen:
            seen[image_id] = len(features)
            features.append(inst.image_feature)
        group.append(seen[image_id])
    return features, np.array(group, dtype=np.int64)


def rank_cross_modal(model, instances, direction: str, language_id: str) -> RetrievalReport:
    """Build the similarity matrix for one language and direction, then score.

    sentence_to_image: each sentence queries the unique images, gold = its
    own image. image_to_sentence: each image queries all sentences, gold =
    its caption group.
    """
    if language_id not in model.languages:
        raise ValueError(f"language '{language_id}' is not registered")
    if direction not in (SENTENCE_TO_IMAGE, IMAGE_TO_SENTENCE):
        raise ValueError(f"unknown direction '{direction}'")
    if not instances:
        raise ValueError("no instances to evaluate")
    features, group = _group_images(instances)
    sent = np.stack([
        model.encode_text(language_id, inst.sentences[language_id])
        for inst in instances
    ])
    img = np.stack([model.encode_image(f) for f in features])
    if direction == SENTENCE_TO_IMAGE:
        scores = sent @ img.T
        gold = [{int(g)} for g in group]
    else:
        scores = img @ sent.T
        gold = [set() for _ in range(len(features))]
        for i, g in enumerate(group):
            gold[g].add(i)
    return retrieval_eval(ScoreMatrix(scores, gold))


def rank_cross_lingual(model, instances, query_lang: str,
                       candidate_lang: str) -> RetrievalReport:
    """Rank candidate-language captions given a query-language caption;
    gold = the captions describing the same image."""
    for lang in (query_lang, candidate_lang):
        if lang not in model.languages:
            raise ValueError(f"language '{lang}' is not registered")
    if query_lang == candidate_lang:
        raise ValueError("cross-lingual ranking needs two distinct languages")
    _, group = _group_images(instances)
    queries = np.stack([
        model.encode_text(query_lang, inst.sentences[query_lang])
        for inst in instances
    ])
    candidates = np.stack([
        model.encode_text(candidate_lang, inst.sentences[candidate_lang])
        for inst in instances
    ])
    by_image: dict[int, set[int]] = {}
    for i, g in enumerate(group):
        by_image.setdefault(int(g), set()).add(i)
    gold = [by_image[int(g)] for g in group]
    return retrieval_eval(ScoreMatrix(queries @ candidates.T, gold))


@dataclass
class StsPair:
    sentence_a: list[str]
    sentence_b: list[str]
    gold: float

    def validate(self) -> None:
        if not 0.0 <= self.gold <= 5.0:
            raise ValueError(f"gold similarity {self.gold} outside [0, 5]")


def sts_score(model, pair: StsPair, language_id: str) -> float:
    """5 x the (clamped) inner product of the two sentence embeddings.

    Unit-vector inner products can be negative; scores are clamped at 0 so
    the output stays in [0, 5].
    """
    if not pair.sentence_a or not pair.sentence_b:
        raise ValueError("STS sentences must be non-empty")
    a = model.encode_text(language_id, pair.sentence_a)
    b = model.encode_text(language_id, pair.sentence_b)
    return 5.0 * max(0.0, float(np.dot(a, b)))


def pearson(predictions, golds) -> float:
    """Pearson product-moment correlation."""
    x = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(golds, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length vectors")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for constant input")
    return float(np.sum(xc * yc) / (sx * sy))
