"""The joint multilingual multimodal embedding model: image projection,
inner-product similarities, the two hinge ranking losses and their
beta-weighted combination, per-epoch contrastive sampling, and the binary
checkpoint format.

Loss terms, per instance with margin alpha:
  image side      max(0, alpha - s(d, v) + s(d, v_r))   and the
                  sentence-queried twin with contrastive images d_r;
  sentence pairs  max(0, alpha - s(v_k, v_l) + s(v_k, v_l_r)) in both
                  directions for every unordered language pair.
Contrastive items are drawn uniformly from the whole training set (never
the instance itself) and resampled every epoch.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .encoder import (
    GruParameters,
    LanguageBranch,
    SentenceCache,
    Vocabulary,
    encode_sentence,
    encode_sentence_backward,
)
from .errors import ConfigError, DataFormatError, NumericalError
from .numerics import (
    dropout_apply,
    gaussian_init,
    l2_normalize,
    l2_normalize_backward,
    rng_stream,
)

CHECKPOINT_MAGIC = b"MLMM"
CHECKPOINT_VERSION = 1


@dataclass
class LossConfig:
    margin: float = 0.2
    beta: float = 1.0
    negatives_per_instance: int = 5
    dropout: float = 0.5

    def validate(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.negatives_per_instance < 1:
            raise ConfigError("need at least one contrastive example per instance")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


class MlmmeModel:
    """Per-language encoder branches plus the shared image projection."""

    def __init__(self, languages: dict[str, LanguageBranch],
                 image_projection: np.ndarray, config: LossConfig):
        if not languages:
            raise ConfigError("a model needs at least one language")
        dims = {b.multimodal_dim for b in languages.values()}
        dims.add(image_projection.shape[0])
        if len(dims) != 1:
            raise ConfigError(f"multimodal dimensions disagree: {sorted(dims)}")
        config.validate()
        if len(languages) == 1 and config.beta < 1.0:
            raise ConfigError(
                "beta < 1 needs at least two languages (the sentence-sentence "
                "loss is undefined for a single language)"
            )
        self.languages = dict(sorted(languages.items()))
        self.image_projection = image_projection
        self.config = config

    @property
    def language_ids(self) -> list[str]:
        return list(self.languages)

    @property
    def multimodal_dim(self) -> int:
        return self.image_projection.shape[0]

    @property
    def image_feature_dim(self) -> int:
        return self.image_projection.shape[1]

    @property
    def dtype(self):
        return self.image_projection.dtype

    @classmethod
    def build(cls, vocabs: dict[str, Vocabulary], *, embed_dim: int = 620,
              hidden_dim: int = 1024, multimodal_dim: int = 2048,
              image_feature_dim: int = 4096, config: LossConfig | None = None,
              seed: int = 0, dtype=np.float32) -> "MlmmeModel":
        config = config or LossConfig()
        rng = rng_stream(seed, "init")
        branches = {}
        for lang in sorted(vocabs):
            branches[lang] = LanguageBranch.init(
                vocabs[lang], embed_dim, hidden_dim, multimodal_dim, rng, dtype
            )
        image_proj = gaussian_init(multimodal_dim, image_feature_dim, 0.01, rng, dtype)
        return cls(branches, image_proj, config)

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable parameter group."""
        params: dict[str, np.ndarray] = {}
        for lang, branch in self.languages.items():
            params[f"{lang}.emb"] = branch.embeddings
            for name, arr in branch.gru.fields().items():
                params[f"{lang}.{name}"] = arr
            params[f"{lang}.proj"] = branch.projection
        params["image_proj"] = self.image_projection
        return params

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(p) for name, p in self.parameters().items()}

    def encode_text(self, language_id: str, tokens) -> np.ndarray:
        """Unit-norm inference embedding of a sentence (tokens or token ids)."""
        branch = self.languages.get(language_id)
        if branch is None:
            raise ValueError(f"language '{language_id}' is not registered "
                             f"(have {self.language_ids})")
        ids = np.asarray(tokens)
        if ids.dtype.kind in ("U", "S", "O"):
            ids = branch.vocab.encode(list(tokens))
        return encode_sentence(ids, branch, training=False).embedding

    def encode_image(self, feature) -> np.ndarray:
        """Unit-norm inference embedding of a precomputed image feature."""
        return embed_image(feature, self, training=False).embedding

    def astype(self, dtype) -> "MlmmeModel":
        """Copy of the model with all parameters cast to dtype."""
        branches = {
            lang: LanguageBranch(
                b.vocab,
                b.embeddings.astype(dtype),
                type(b.gru)(**{k: v.astype(dtype) for k, v in b.gru.fields().items()}),
                b.projection.astype(dtype),
            )
            for lang, b in self.languages.items()
        }
        return MlmmeModel(branches, self.image_projection.astype(dtype), self.config)

    # -- checkpoint container -------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IB", CHECKPOINT_VERSION, self.dtype.itemsize))
            fh.write(struct.pack("<ddId", self.config.margin, self.config.beta,
                                 self.config.negatives_per_instance, self.config.dropout))
            fh.write(struct.pack("<I", len(self.languages)))
            for lang, branch in self.languages.items():
                _write_str(fh, lang)
                _write_str(fh, "\n".join(branch.vocab.index_to_token[2:]))
                for arr in _branch_arrays(branch):
                    _write_matrix(fh, arr)
            _write_matrix(fh, self.image_projection)

    @classmethod
    def load(cls, path) -> "MlmmeModel":
        with open(path, "rb") as fh:
            data = fh.read()
        buf = io.BytesIO(data)
        if buf.read(4) != CHECKPOINT_MAGIC:
            raise DataFormatError("not a model checkpoint (bad magic bytes)")
        version, itemsize = struct.unpack("<IB", buf.read(5))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        dtype = {4: np.float32, 8: np.float64}.get(itemsize)
        if dtype is None:
            raise DataFormatError(f"unsupported precision ({itemsize} bytes)")
        margin, beta, negatives, dropout = struct.unpack("<ddId", buf.read(28))
        config = LossConfig(margin, beta, negatives, dropout)
        n_langs, = struct.unpack("<I", buf.read(4))
        branches = {}
        for _ in range(n_langs):
            lang = _read_str(buf)
            blob = _read_str(buf)
            tokens = blob.split("\n") if blob else []
            vocab = Vocabulary.from_tokens(lang, tokens)
            emb = _read_matrix(buf, dtype)
            gru_fields = {k: _read_matrix(buf, dtype)
                          for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h")}
            for k in ("b_z", "b_r", "b_h"):
                gru_fields[k] = _read_matrix(buf, dtype).reshape(-1)
            proj = _read_matrix(buf, dtype)
            branches[lang] = LanguageBranch(vocab, emb, GruParameters(**gru_fields), proj)
        image_proj = _read_matrix(buf, dtype)
        return cls(branches, image_proj, config)


def _branch_arrays(branch: LanguageBranch):
    yield branch.embeddings
    f = branch.gru.fields()
    for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h"):
        yield f[k]
    for k in ("b_z", "b_r", "b_h"):
        yield f[k].reshape(1, -1)
    yield branch.projection


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(buf) -> str:
    n, = struct.unpack("<I", buf.read(4))
    return buf.read(n).decode("utf-8")


def _write_matrix(fh, arr: np.ndarray) -> None:
    mat = np.atleast_2d(arr)
    code = "<f4" if arr.dtype.itemsize == 4 else "<f8"
    fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
    fh.write(np.ascontiguousarray(mat).astype(code, copy=False).tobytes())


def _read_matrix(buf, dtype) -> np.ndarray:
    rows, cols = struct.unpack("<II", buf.read(8))
    code = "<f4" if dtype == np.float32 else "<f8"
    n = rows * cols * np.dtype(code).itemsize
    arr = np.frombuffer(buf.read(n), dtype=code).reshape(rows, cols)
    return np.ascontiguousarray(arr).astype(dtype, copy=False)


# -- image side ---------------------------------------------------------------


@dataclass
class ImageCache:
    feature: np.ndarray
    projected: np.ndarray
    dropout_mask: np.ndarray | None
    prenorm: np.ndarray
    embedding: np.ndarray


def embed_image(feature: np.ndarray, model: MlmmeModel, training: bool = False,
                rng: np.random.Generator | None = None) -> ImageCache:
    """W_I q -> dropout (training only) -> unit norm."""
    feature = np.asarray(feature)
    if feature.shape != (model.image_feature_dim,):
        raise ValueError(
            f"image feature has shape {feature.shape}, expected "
            f"({model.image_feature_dim},)"
        )
    if not np.any(feature):
        raise ValueError("all-zero image feature cannot be embedded")
    projected = model.image_projection @ feature.astype(model.dtype, copy=False)
    dropped, mask = dropout_apply(projected, model.config.dropout, training, rng)
    embedding = l2_normalize(dropped)
    return ImageCache(feature, projected, mask, dropped, embedding)


def embed_image_backward(cache: ImageCache, model: MlmmeModel,
                         grad_embedding: np.ndarray,
                         grads: dict[str, np.ndarray]) -> None:
    d_pre = l2_normalize_backward(cache.prenorm, cache.embedding, grad_embedding)
    if cache.dropout_mask is not None:
        d_pre = d_pre * cache.dropout_mask
    grads["image_proj"] += np.outer(d_pre, cache.feature.astype(model.dtype, copy=False))


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product; for unit vectors this is the cosine similarity."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"similarity needs equal lengths, got {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


# -- contrastive sampling -----------------------------------------------------


def dir_image_to_sentence(lang: str) -> str:
    """Negative sentences in `lang`, scored against an image query."""
    return f"image_to_sentence:{lang}"


def dir_sentence_to_image(lang: str) -> str:
    """Negative images, scored against a sentence query in `lang`."""
    return f"sentence_to_image:{lang}"


def dir_sentence_pair(query_lang: str, neg_lang: str) -> str:
    """Negative sentences in `neg_lang` for a query sentence in `query_lang`."""
    return f"sentence_pair:{query_lang}>{neg_lang}"


def plan_directions(languages, include_multilingual: bool) -> list[str]:
    languages = sorted(languages)
    dirs = []
    for k in languages:
        dirs.append(dir_image_to_sentence(k))
        dirs.append(dir_sentence_to_image(k))
    if include_multilingual:
        for k in languages:
            for l in languages:
                if k != l:
                    dirs.append(dir_sentence_pair(k, l))
    return dirs


@dataclass
class ContrastivePlan:
    """Per-epoch negative indices: one (dataset_size, R) array per direction,
    entries never equal to the row's own instance index."""

    size: int
    negatives_per_instance: int
    epoch: int
    directions: dict[str, np.ndarray] = field(default_factory=dict)


def sample_contrastive(dataset_size: int, negatives_per_instance: int, epoch: int,
                       seed: int, directions) -> ContrastivePlan:
    """Uniform negatives excluding each instance's own index, deterministic
    in (seed, epoch, direction)."""
    if dataset_size < 2:
        raise ValueError("contrastive sampling needs at least two instances")
    if negatives_per_instance < 1:
        raise ValueError("need at least one negative per instance")
    plan = ContrastivePlan(dataset_size, negatives_per_instance, epoch)
    own = np.arange(dataset_size, dtype=np.int64)[:, None]
    for direction in directions:
        rng = rng_stream(seed, "plan", epoch, direction)
        draws = rng.integers(0, dataset_size - 1,
                             size=(dataset_size, negatives_per_instance))
        draws = draws + (draws >= own)
        plan.directions[direction] = draws.astype(np.int64)
    return plan


# -- hinge losses over embeddings ---------------------------------------------


def _hinge_terms(query, positive_sim, negatives, margin):
    """Hinge matrix max(0, margin - pos + s(query, neg)) and its activity mask.

    query: (B, D); positive_sim: (B,); negatives: (B, R, D).
    """
    neg_sim = np.einsum("bd,brd->br", query, negatives)
    slack = margin - positive_sim[:, None] + neg_sim
    active = slack > 0
    return slack, active


def loss_multimodal(sent_embs: dict[str, np.ndarray], img_embs: np.ndarray,
                    batch: np.ndarray, neg_sent: dict[str, np.ndarray],
                    neg_img: dict[str, np.ndarray], margin: float):
    """Image-sentence ranking loss over a batch, with exact subgradients.

    Embedding arrays cover a working set of instances; `batch` holds the
    positions contributing positive pairs, and the neg_* arrays hold (B, R)
    positions of contrastive items per batch instance. Returns
    (loss, grads w.r.t. sentence embeddings per language, grads w.r.t.
    image embeddings).
    """
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("empty batch")
    grad_img = np.zeros_like(img_embs)
    grad_sent = {k: np.zeros_like(v) for k, v in sent_embs.items()}
    total = 0.0
    d = img_embs[batch]
    for lang, embs in sent_embs.items():
        v = embs[batch]
        pos = np.sum(d * v, axis=1)

        # image query vs contrastive sentences
        negs = neg_sent[lang]
        vneg = embs[negs]
        slack, active = _hinge_terms(d, pos, vneg, margin)
        total += float(slack[active].sum())
        act = active.astype(embs.dtype)
        counts = act.sum(axis=1)
        np.add.at(grad_img, batch,
                  np.einsum("br,brd->bd", act, vneg) - counts[:, None] * v)
        np.add.at(grad_sent[lang], batch, -counts[:, None] * d)
        np.add.at(grad_sent[lang], negs.ravel(),
                  (act[:, :, None] * d[:, None, :]).reshape(-1, d.shape[1]))

        # sentence query vs contrastive images
        negs = neg_img[lang]
        dneg = img_embs[negs]
        slack, active = _hinge_terms(v, pos, dneg, margin)
        total += float(slack[active].sum())
        act = active.astype(embs.dtype)
        counts = act.sum(axis=1)
        np.add.at(grad_sent[lang], batch,
                  np.einsum("br,brd->bd", act, dneg) - counts[:, None] * d)
        np.add.at(grad_img, batch, -counts[:, None] * v)
        np.add.at(grad_img, negs.ravel(),
                  (act[:, :, None] * v[:, None, :]).reshape(-1, v.shape[1]))

    return total, grad_sent, grad_img


def loss_multilingual(sent_embs: dict[str, np.ndarray], batch: np.ndarray,
                      neg_pair: dict[str, np.ndarray], margin: float):
    """Sentence-sentence ranking loss over every unordered language pair,
    both hinge directions per pair.

    neg_pair is keyed by dir_sentence_pair(query_lang, neg_lang) and holds
    (B, R) positions of contrastive sentences in neg_lang.
    """
    if len(sent_embs) < 2:
        raise ConfigError("the sentence-sentence loss needs at least two languages")
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("empty batch")
    grad_sent = {k: np.zeros_like(v) for k, v in sent_embs.items()}
    total = 0.0
    langs = sorted(sent_embs)
    for i, k in enumerate(langs):
        for l in langs[i + 1:]:
            vk = sent_embs[k][batch]
            vl = sent_embs[l][batch]
            pos = np.sum(vk * vl, axis=1)
            for qlang, nlang, q, p in ((k, l, vk, vl), (l, k, vl, vk)):
                negs = neg_pair[dir_sentence_pair(qlang, nlang)]
                nembs = sent_embs[nlang][negs]
                slack, active = _hinge_terms(q, pos, nembs, margin)
                total += float(slack[active].sum())
                act = active.astype(q.dtype)
                counts = act.sum(axis=1)
                np.add.at(grad_sent[qlang], batch,
                          np.einsum("br,brd->bd", act, nembs) - counts[:, None] * p)
                np.add.at(grad_sent[nlang], batch, -counts[:, None] * q)
                np.add.at(grad_sent[nlang], negs.ravel(),
                          (act[:, :, None] * q[:, None, :]).reshape(-1, q.shape[1]))
    return total, grad_sent


# -- full-pipeline joint loss ---------------------------------------------------


@dataclass
class JointLossResult:
    total: float
    multimodal: float
    multilingual: float
    grads: dict[str, np.ndarray]


def joint_loss(model: MlmmeModel, dataset, batch_indices, plan: ContrastivePlan,
               training: bool = False,
               rng: np.random.Generator | None = None) -> JointLossResult:
    """beta * S_I + (1 - beta) * S_S over one minibatch, with gradients for
    every model parameter.

    `dataset` is indexable by the plan's instance indices; each item carries
    .sentences (language -> token ids) and .image_feature. At the beta
    endpoints only the corresponding loss is evaluated, so beta = 1 is
    bitwise-identical to the pure image-sentence loss (and with one language
    reduces to the visual-semantic-embedding objective).
    """
    beta = model.config.beta
    margin = model.config.margin
    langs = model.language_ids
    if len(langs) == 1 and beta < 1.0:
        raise ConfigError("beta < 1 is undefined with a single language")
    batch_ds = np.asarray(batch_indices, dtype=np.int64)
    if batch_ds.size == 0:
        raise ValueError("empty batch")

    use_multimodal = beta > 0.0
    use_multilingual = beta < 1.0

    # Working set: the batch plus every contrastive instance it references.
    needed = set(batch_ds.tolist())
    for direction, table in plan.directions.items():
        if not use_multilingual and direction.startswith("sentence_pair:"):
            continue
        if not use_multimodal and not direction.startswith("sentence_pair:"):
            continue
        needed.update(table[batch_ds].ravel().tolist())
    order = sorted(needed)
    position = {ds: i for i, ds in enumerate(order)}
    m = len(order)
    dim = model.multimodal_dim

    sent_caches: dict[str, list[SentenceCache]] = {}
    sent_embs: dict[str, np.ndarray] = {}
    for lang in langs:
        branch = model.languages[lang]
        caches = []
        embs = np.empty((m, dim), dtype=model.dtype)
        for i, ds in enumerate(order):
            cache = encode_sentence(dataset[ds].sentences[lang], branch,
                                    training=training,
                                    dropout_p=model.config.dropout, rng=rng)
            caches.append(cache)
            embs[i] = cache.embedding
        sent_caches[lang] = caches
        sent_embs[lang] = embs

    img_caches: list[ImageCache] = []
    img_embs = np.empty((m, dim), dtype=model.dtype)
    if use_multimodal:
        for i, ds in enumerate(order):
            cache = embed_image(dataset[ds].image_feature, model,
                                training=training, rng=rng)
            img_caches.append(cache)
            img_embs[i] = cache.embedding

    def to_positions(direction):
        table = plan.directions[direction][batch_ds]
        return np.vectorize(position.__getitem__, otypes=[np.int64])(table)

    batch_pos = np.array([position[ds] for ds in batch_ds.tolist()], dtype=np.int64)

    s_i = 0.0
    s_s = 0.0
    grad_sent = {lang: np.zeros_like(sent_embs[lang]) for lang in langs}
    grad_img = np.zeros_like(img_embs)

    if use_multimodal:
        neg_sent = {k: to_positions(dir_image_to_sentence(k)) for k in langs}
        neg_img = {k: to_positions(dir_sentence_to_image(k)) for k in langs}
        s_i, g_sent, g_img = loss_multimodal(
            sent_embs, img_embs, batch_pos, neg_sent, neg_img, margin
        )
        if beta == 1.0:
            grad_sent, grad_img = g_sent, g_img
        else:
            for lang in langs:
                grad_sent[lang] += beta * g_sent[lang]
            grad_img += beta * g_img

    if use_multilingual:
        neg_pair = {}
        for k in langs:
            for l in langs:
                if k != l:
                    name = dir_sentence_pair(k, l)
                    neg_pair[name] = to_positions(name)
        s_s, g_sent = loss_multilingual(sent_embs, batch_pos, neg_pair, margin)
        if beta == 0.0:
            grad_sent = g_sent
        else:
            for lang in langs:
                grad_sent[lang] += (1.0 - beta) * g_sent[lang]

    if beta == 1.0:
        total = s_i
    elif beta == 0.0:
        total = s_s
    else:
        total = beta * s_i + (1.0 - beta) * s_s
    if not np.isfinite(total):
        raise NumericalError(f"non-finite loss value {total}")

    grads = model.zero_grads()
    for lang in langs:
        branch = model.languages[lang]
        caches = sent_caches[lang]
        gl = grad_sent[lang]
        for i in range(m):
            if np.any(gl[i]):
                encode_sentence_backward(caches[i], branch, gl[i], grads, f"{lang}.")
    if use_multimodal:
        for i in range(m):
            if np.any(grad_img[i]):
                embed_image_backward(img_caches[i], model, grad_img[i], grads)

    return JointLossResult(total, s_i, s_s, grads)
