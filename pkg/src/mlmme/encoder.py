"""Per-language text pipeline: vocabulary, word embeddings, a GRU encoder
with hand-written backprop, and the projection into the shared multimodal
space.

Sentences are processed one at a time (no padded batch math); a minibatch
gradient is the sum of per-sentence gradients.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numerics import (
    dropout_apply,
    gaussian_init,
    l2_normalize,
    l2_normalize_backward,
    orthogonal_init,
)

PAD_INDEX = 0
UNK_INDEX = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
RESERVED = (PAD_TOKEN, UNK_TOKEN)

INIT_STDDEV = 0.01


@dataclass
class Vocabulary:
    """Word-index mapping for one language. Indices 0 and 1 are reserved
    for padding and unknown tokens and never assigned to corpus tokens."""

    language_id: str
    token_to_index: dict[str, int]
    index_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.index_to_token)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array(
            [self.token_to_index.get(t, UNK_INDEX) for t in tokens], dtype=np.int64
        )

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.index_to_token[i] for i in ids]

    @classmethod
    def from_tokens(cls, language_id: str, tokens: Sequence[str]) -> "Vocabulary":
        """Build from an ordered token list (index = position + 2)."""
        index_to_token = list(RESERVED) + list(tokens)
        token_to_index = {t: i for i, t in enumerate(index_to_token)}
        if len(token_to_index) != len(index_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        return cls(language_id, token_to_index, index_to_token)

    def save_text(self, path) -> None:
        # One token per line, line number = index - 2; reserved rows implicit.
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.index_to_token[len(RESERVED):]:
                fh.write(token + "\n")

    @classmethod
    def load_text(cls, path, language_id: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls.from_tokens(language_id, tokens)


def build_vocabulary(corpus: Iterable[Sequence[str]], min_count: int = 1,
                     language_id: str = "") -> Vocabulary:
    """Index all tokens with frequency >= min_count, in descending frequency
    then lexicographic order; everything else maps to the unknown index."""
    counts: Counter[str] = Counter()
    n_sentences = 0
    for sentence in corpus:
        n_sentences += 1
        counts.update(sentence)
    if n_sentences == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary.from_tokens(language_id, kept)


@dataclass
class GruParameters:
    """Gate parameters of one GRU encoder.

    Input-to-hidden W_* are (hidden, embed), hidden-to-hidden U_* are
    (hidden, hidden), biases are (hidden,).
    """

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.W_z.shape[1]

    @classmethod
    def init(cls, embed_dim: int, hidden_dim: int, rng: np.random.Generator,
             dtype=np.float32) -> "GruParameters":
        """Gaussian input matrices, orthogonal recurrent matrices, zero biases."""
        def w():
            return gaussian_init(hidden_dim, embed_dim, INIT_STDDEV, rng, dtype)

        def u():
            return orthogonal_init(hidden_dim, rng, dtype)

        def b():
            return np.zeros(hidden_dim, dtype=dtype)

        return cls(w(), w(), w(), u(), u(), u(), b(), b(), b())

    def fields(self) -> dict[str, np.ndarray]:
        return {
            "W_z": self.W_z, "W_r": self.W_r, "W_h": self.W_h,
            "U_z": self.U_z, "U_r": self.U_r, "U_h": self.U_h,
            "b_z": self.b_z, "b_r": self.b_r, "b_h": self.b_h,
        }


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GruCache:
    """Everything the backward pass needs from one forward run."""

    inputs: np.ndarray   # (T, E)
    z: np.ndarray        # (T, H)
    r: np.ndarray        # (T, H)
    h_bar: np.ndarray    # (T, H)
    h: np.ndarray        # (T, H), h[t] is the state after step t


def gru_forward(inputs: np.ndarray, params: GruParameters) -> GruCache:
    """Run the GRU over a (T, E) input sequence starting from h_0 = 0.

    Per step: z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
    h_bar = tanh(W_h x + U_h (r * h) + b_h), h' = (1 - z) * h + z * h_bar.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("gru_forward expects a non-empty (T, E) input sequence")
    if inputs.shape[1] != params.embed_dim:
        raise ValueError(
            f"input dim {inputs.shape[1]} does not match W matrices "
            f"(embed dim {params.embed_dim})"
        )
    T = inputs.shape[0]
    H = params.hidden_dim
    dtype = params.W_z.dtype
    # Input contributions have no recurrence; compute them for all steps at once.
    wx_z = inputs @ params.W_z.T + params.b_z
    wx_r = inputs @ params.W_r.T + params.b_r
    wx_h = inputs @ params.W_h.T + params.b_h

    z = np.empty((T, H), dtype=dtype)
    r = np.empty((T, H), dtype=dtype)
    h_bar = np.empty((T, H), dtype=dtype)
    h = np.empty((T, H), dtype=dtype)
    h_prev = np.zeros(H, dtype=dtype)
    for t in range(T):
        z[t] = _sigmoid(wx_z[t] + params.U_z @ h_prev)
        r[t] = _sigmoid(wx_r[t] + params.U_r @ h_prev)
        h_bar[t] = np.tanh(wx_h[t] + params.U_h @ (r[t] * h_prev))
        h[t] = (1.0 - z[t]) * h_prev + z[t] * h_bar[t]
        h_prev = h[t]
    return GruCache(inputs, z, r, h_bar, h)


def gru_backward(params: GruParameters, cache: GruCache,
                 grad_h: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backprop through a cached forward pass.

    grad_h is either (H,) — the loss gradient at the last hidden state — or
    (T, H) with one upstream gradient per step. Returns (parameter grads
    keyed like GruParameters.fields(), input grads of shape (T, E)).
    """
    T, H = cache.h.shape
    if grad_h.ndim == 1:
        full = np.zeros_like(cache.h)
        full[-1] = grad_h
        grad_h = full
    if grad_h.shape != cache.h.shape:
        raise ValueError(
            f"grad shape {grad_h.shape} does not match cached states {cache.h.shape}"
        )

    grads = {name: np.zeros_like(arr) for name, arr in params.fields().items()}
    d_inputs = np.zeros_like(cache.inputs)
    dh_next = np.zeros(H, dtype=cache.h.dtype)

    for t in range(T - 1, -1, -1):
        h_prev = cache.h[t - 1] if t > 0 else np.zeros(H, dtype=cache.h.dtype)
        z, r, h_bar = cache.z[t], cache.r[t], cache.h_bar[t]
        g = grad_h[t] + dh_next

        da_z = g * (h_bar - h_prev) * z * (1.0 - z)
        da_h = g * z * (1.0 - h_bar * h_bar)
        d_rh = params.U_h.T @ da_h
        da_r = d_rh * h_prev * r * (1.0 - r)

        x = cache.inputs[t]
        grads["W_z"] += np.outer(da_z, x)
        grads["W_r"] += np.outer(da_r, x)
        grads["W_h"] += np.outer(da_h, x)
        grads["U_z"] += np.outer(da_z, h_prev)
        grads["U_r"] += np.outer(da_r, h_prev)
        grads["U_h"] += np.outer(da_h, r * h_prev)
        grads["b_z"] += da_z
        grads["b_r"] += da_r
        grads["b_h"] += da_h

        dh_next = (
            g * (1.0 - z)
            + params.U_z.T @ da_z
            + params.U_r.T @ da_r
            + d_rh * r
        )
        d_inputs[t] = params.W_z.T @ da_z + params.W_r.T @ da_r + params.W_h.T @ da_h

    return grads, d_inputs


@dataclass
class LanguageBranch:
    """All trainable state of one language: embeddings, GRU, projection."""

    vocab: Vocabulary
    embeddings: np.ndarray   # (V, E); row 0 is the all-zero padding row
    gru: GruParameters
    projection: np.ndarray   # (multimodal, hidden)

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.gru.hidden_dim

    @property
    def multimodal_dim(self) -> int:
        return self.projection.shape[0]

    @classmethod
    def init(cls, vocab: Vocabulary, embed_dim: int, hidden_dim: int,
             multimodal_dim: int, rng: np.random.Generator,
             dtype=np.float32) -> "LanguageBranch":
        emb = gaussian_init(vocab.size, embed_dim, INIT_STDDEV, rng, dtype)
        emb[PAD_INDEX] = 0.0
        gru = GruParameters.init(embed_dim, hidden_dim, rng, dtype)
        proj = gaussian_init(multimodal_dim, hidden_dim, INIT_STDDEV, rng, dtype)
        return cls(vocab, emb, gru, proj)


def lookup(token_ids: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Embedding rows for a sentence, one (E,) vector per token."""
    token_ids = np.asarray(token_ids)
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= table.shape[0]):
        raise ValueError(
            f"token index out of range for vocabulary of size {table.shape[0]}"
        )
    return table[token_ids]


@dataclass
class SentenceCache:
    """Forward-pass record for one sentence, consumed by the backward pass."""

    token_ids: np.ndarray
    gru: GruCache
    hidden: np.ndarray        # h_N
    projected: np.ndarray     # projection @ h_N, before dropout
    dropout_mask: np.ndarray | None
    prenorm: np.ndarray       # after dropout, before normalization
    embedding: np.ndarray     # unit-norm output


def encode_sentence(token_ids: np.ndarray, branch: LanguageBranch,
                    training: bool = False, dropout_p: float = 0.5,
                    rng: np.random.Generator | None = None) -> SentenceCache:
    """lookup -> GRU -> last state -> projection -> dropout -> unit norm."""
    token_ids = np.asarray(token_ids)
    if token_ids.size == 0:
        raise ValueError("cannot encode an empty sentence")
    inputs = lookup(token_ids, branch.embeddings)
    gru_cache = gru_forward(inputs, branch.gru)
    hidden = gru_cache.h[-1]
    projected = branch.projection @ hidden
    dropped, mask = dropout_apply(projected, dropout_p, training, rng)
    embedding = l2_normalize(dropped)
    return SentenceCache(token_ids, gru_cache, hidden, projected, mask, dropped, embedding)


def encode_sentence_backward(cache: SentenceCache, branch: LanguageBranch,
                             grad_embedding: np.ndarray,
                             grads: dict[str, np.ndarray],
                             prefix: str) -> None:
    """Accumulate dLoss/dParams for one encoded sentence into `grads`.

    Keys are '{prefix}emb', '{prefix}proj', '{prefix}W_z', ... The padding
    embedding row receives no gradient.
    """
    d_pre = l2_normalize_backward(cache.prenorm, cache.embedding, grad_embedding)
    if cache.dropout_mask is not None:
        d_pre = d_pre * cache.dropout_mask
    grads[prefix + "proj"] += np.outer(d_pre, cache.hidden)
    d_hidden = branch.projection.T @ d_pre
    gru_grads, d_inputs = gru_backward(branch.gru, cache.gru, d_hidden)
    for name, g in gru_grads.items():
        grads[prefix + name] += g
    d_emb = grads[prefix + "emb"]
    np.add.at(d_emb, cache.token_ids, d_inputs)
    d_emb[PAD_INDEX] = 0.0
