"""n-best list re-ranking: wire-format parsing, embedding-distance feature
extraction, smoothed sentence-level and corpus-level BLEU, and hope/fear
k-best MIRA weight tuning.

Wire format, one hypothesis per line with literal " ||| " separators:
    segment_id ||| hypothesis tokens ||| log_likelihood
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError
from .model import embed_image, similarity
from .numerics import rng_stream

FEATURE_NAMES_FULL = ("log_likelihood", "s_s", "s_i")
FEATURE_NAMES_TEXT_ONLY = ("log_likelihood", "s_s")


@dataclass
class NBestEntry:
    segment_id: int
    tokens: list[str]
    log_likelihood: float
    features: np.ndarray | None = None


@dataclass
class NBestList:
    segment_id: int
    entries: list[NBestEntry]
    source: list[str] | None = None
    image_feature: np.ndarray | None = None


def parse_nbest(path) -> list[NBestList]:
    """Parse a wire-format file into lists grouped by segment id (order of
    first appearance preserved; ids need not be contiguous)."""
    lists: dict[int, NBestList] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ||| ")
            if len(parts) != 3:
                raise DataFormatError(
                    f"expected 'segment ||| hypothesis ||| log_likelihood', "
                    f"got {len(parts)} fields", line=lineno)
            seg_text, hyp, ll_text = parts
            try:
                seg = int(seg_text)
            except ValueError as exc:
                raise DataFormatError(f"bad segment id '{seg_text}'", line=lineno) from exc
            if seg < 0:
                raise DataFormatError(f"negative segment id {seg}", line=lineno)
            try:
                ll = float(ll_text)
            except ValueError as exc:
                raise DataFormatError(f"bad log-likelihood '{ll_text}'",
                                      line=lineno) from exc
            if not math.isfinite(ll):
                raise DataFormatError(f"non-finite log-likelihood {ll}", line=lineno)
            entry = NBestEntry(seg, hyp.split(), ll)
            if seg not in lists:
                lists[seg] = NBestList(seg, [])
            lists[seg].entries.append(entry)
    return list(lists.values())


def read_sentences(path) -> list[list[str]]:
    """One tokenized sentence per line; line i belongs to segment id i."""
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh]


def attach_sources(lists: list[NBestList], sources: list[list[str]]) -> None:
    for nb in lists:
        if nb.segment_id >= len(sources):
            raise DataFormatError(
                f"segment {nb.segment_id} has no source sentence "
                f"({len(sources)} lines)")
        nb.source = sources[nb.segment_id]


def attach_images(lists: list[NBestList], store, alignment: list[int]) -> None:
    """alignment[i] is the feature-store row for segment i."""
    for nb in lists:
        if nb.segment_id >= len(alignment):
            raise DataFormatError(
                f"segment {nb.segment_id} has no image alignment entry")
        row = alignment[nb.segment_id]
        if not 0 <= row < len(store):
            raise DataFormatError(
                f"segment {nb.segment_id}: feature row {row} out of range")
        nb.image_feature = store.features[row]


def extract_features(nbest: NBestList, model, source_lang: str, target_lang: str,
                     use_image: bool) -> NBestList:
    """Populate each entry with [log_likelihood, s_s, (s_i)].

    s_s is the inner product between the encoded source sentence and the
    encoded hypothesis; s_i compares the hypothesis with the image
    embedding. Whether s_i is present is a run-level configuration, not a
    per-segment one.
    """
    if nbest.source is None:
        raise ValueError(f"segment {nbest.segment_id} has no source sentence")
    if use_image and nbest.image_feature is None:
        raise ValueError(f"segment {nbest.segment_id} has no image feature")
    src = model.encode_text(source_lang, nbest.source)
    img = model.encode_image(nbest.image_feature) if use_image else None
    for entry in nbest.entries:
        if not entry.tokens:
            raise DataFormatError(
                f"segment {nbest.segment_id}: empty hypothesis cannot be encoded")
        hyp = model.encode_text(target_lang, entry.tokens)
        feats = [entry.log_likelihood, similarity(src, hyp)]
        if use_image:
            feats.append(similarity(img, hyp))
        entry.features = np.array(feats, dtype=np.float64)
    return nbest


# -- BLEU -----------------------------------------------------------------------


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_bleu(hypothesis, reference) -> float:
    """Smoothed sentence-level BLEU-4 in [0, 1].

    Unigram precision is unsmoothed (zero overlap gives 0); higher orders
    get add-one smoothing. Brevity penalty exp(min(0, 1 - |ref|/|hyp|)).
    """
    if not reference:
        raise ValueError("reference must be non-empty")
    if not hypothesis:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        hyp_counts = _ngrams(hypothesis, n)
        ref_counts = _ngrams(reference, n)
        total = max(len(hypothesis) - n + 1, 0)
        clipped = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        if n == 1:
            if clipped == 0:
                return 0.0
            precision = clipped / total
        else:
            precision = (clipped + 1) / (total + 1)
        log_sum += math.log(precision)
    bp = math.exp(min(0.0, 1.0 - len(reference) / len(hypothesis)))
    return bp * math.exp(log_sum / 4.0)


def corpus_bleu(hypotheses, references) -> float:
    """Corpus-level BLEU-4 in [0, 1]: micro-averaged clipped counts, corpus
    brevity penalty, no smoothing. Orders with no n-grams anywhere in the
    corpus are dropped from the geometric mean."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    clip = [0] * 4
    total = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        if not ref:
            raise ValueError("references must be non-empty")
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            total[n - 1] += max(len(hyp) - n + 1, 0)
            clip[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    orders = 0
    for c, t in zip(clip, total):
        if t == 0:
            continue
        if c == 0:
            return 0.0
        log_sum += math.log(c / t)
        orders += 1
    if orders == 0:
        return 0.0
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return bp * math.exp(log_sum / orders)


# -- k-best MIRA ------------------------------------------------------------------


@dataclass
class MiraConfig:
    regularizer: float = 0.01
    epochs: int = 30
    seed: int = 0
    background_bleu_decay: float = 0.999  # accepted for config compatibility

    def validate(self) -> None:
        if self.regularizer <= 0:
            raise ValueError("MIRA regularizer C must be positive")
        if self.epochs < 1:
            raise ValueError("MIRA needs at least one epoch")


@dataclass
class WeightVector:
    names: tuple
    values: np.ndarray

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for name, value in zip(self.names, self.values):
                fh.write(f"{name}\t{float(value)!r}\n")

    @classmethod
    def load(cls, path) -> "WeightVector":
        names = []
        values = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataFormatError("expected 'name<TAB>value'", line=lineno)
                names.append(parts[0])
                try:
                    values.append(float(parts[1]))
                except ValueError as exc:
                    raise DataFormatError(f"bad weight '{parts[1]}'", line=lineno) from exc
        return cls(tuple(names), np.array(values, dtype=np.float64))


def mira_train(lists: list[NBestList], references: list[list[str]],
               config: MiraConfig, feature_names=None) -> WeightVector:
    """Online hope/fear k-best MIRA.

    Per segment: hope maximizes model score + sentence BLEU, fear maximizes
    model score - sentence BLEU; the update step is
    min(C, loss / ||delta_features||^2) along the feature difference, with
    loss = (bleu(hope) - bleu(fear)) - w . delta, skipped when <= 0.
    Returns the average of end-of-epoch weight vectors.
    """
    config.validate()
    if len(references) != len(lists):
        raise ValueError(f"{len(lists)} segments vs {len(references)} references")
    if not lists:
        raise ValueError("empty development set")
    feature_dims = set()
    for nb in lists:
        for entry in nb.entries:
            if entry.features is None:
                raise ValueError(
                    f"segment {nb.segment_id} has unpopulated feature vectors")
            feature_dims.add(entry.features.shape[0])
    if len(feature_dims) != 1:
        raise ValueError(f"inconsistent feature dimensions: {sorted(feature_dims)}")
    dim = feature_dims.pop()
    if feature_names is None:
        feature_names = FEATURE_NAMES_FULL if dim == 3 else \
            tuple(f"f{i}" for i in range(dim))
        if dim == 2:
            feature_names = FEATURE_NAMES_TEXT_ONLY

    feats = [np.stack([e.features for e in nb.entries]) for nb in lists]
    bleus = [
        np.array([sentence_bleu(e.tokens, ref) for e in nb.entries])
        for nb, ref in zip(lists, references)
    ]
    if all(np.allclose(f, f[0]) for f in feats):
        warnings.warn("all feature vectors are identical; MIRA cannot learn",
                      stacklevel=2)

    w = np.zeros(dim, dtype=np.float64)
    w[0] = 1.0  # start from the log-likelihood baseline ranking
    snapshots = []
    for epoch in range(config.epochs):
        order = rng_stream(config.seed, "mira", epoch).permutation(len(lists))
        for si in order:
            f = feats[si]
            if f.shape[0] < 2:
                continue
            b = bleus[si]
            scores = f @ w
            hope = int(np.argmax(scores + b))
            fear = int(np.argmax(scores - b))
            delta = f[hope] - f[fear]
            norm_sq = float(delta @ delta)
            if norm_sq == 0.0:
                continue
            loss = (b[hope] - b[fear]) - float(w @ delta)
            if loss <= 0.0:
                continue
            eta = min(config.regularizer, loss / norm_sq)
            w = w + eta * delta
        snapshots.append(w.copy())
    return WeightVector(tuple(feature_names), np.mean(snapshots, axis=0))


def rerank_apply(lists: list[NBestList], weights: WeightVector) -> list[NBestEntry]:
    """Best entry per segment under w . features; ties keep n-best order."""
    best = []
    for nb in lists:
        chosen = None
        chosen_score = None
        for entry in nb.entries:
            if entry.features is None or entry.features.shape != weights.values.shape:
                raise ValueError(
                    f"segment {nb.segment_id}: feature vector does not match "
                    f"{len(weights.values)} weights")
            score = float(entry.features @ weights.values)
            if chosen is None or score > chosen_score:
                chosen = entry
                chosen_score = score
        best.append(chosen)
    return best
