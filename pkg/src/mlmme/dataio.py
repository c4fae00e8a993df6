"""Dataset ingestion: tokenized corpora with image alignment, the binary
image-feature container, instance assembly, and a synthetic data generator
that produces desk-scale corpora with learnable cross-modal and
cross-lingual structure.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError
from .numerics import rng_stream

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MFEA"
FEATURE_VERSION = 1


@dataclass
class Corpus:
    """Tokenized sentences of one language, aligned to image rows.

    Caption groups are contiguous: sentence i describes image i //
    captions_per_image and occupies slot i % captions_per_image.
    """

    language_id: str
    sentences: list[list[str]]
    captions_per_image: int

    @property
    def image_index(self) -> np.ndarray:
        return np.arange(len(self.sentences), dtype=np.int64) // self.captions_per_image

    @property
    def image_count(self) -> int:
        return len(self.sentences) // self.captions_per_image


def load_corpus(path, captions_per_image: int, language_id: str) -> Corpus:
    """One whitespace-tokenized sentence per line; empty lines are skipped
    with a warning. The line count must divide evenly into caption groups."""
    if captions_per_image < 1:
        raise ValueError("captions_per_image must be >= 1")
    sentences = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read corpus {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                log.warning("%s: skipping empty line %d", path, lineno)
                continue
            sentences.append(tokens)
    if len(sentences) % captions_per_image != 0:
        raise DataFormatError(
            f"{path}: {len(sentences)} sentences do not divide into groups "
            f"of {captions_per_image}"
        )
    return Corpus(language_id, sentences, captions_per_image)


@dataclass
class ImageFeatureStore:
    """Validated dense image features, one row per image."""

    features: np.ndarray
    identifiers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.identifiers:
            self.identifiers = [f"img{i:06d}" for i in range(len(self.features))]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.features)


def _validate_features(features: np.ndarray) -> np.ndarray:
    if features.ndim != 2:
        raise DataFormatError(f"feature matrix must be 2-D, got shape {features.shape}")
    bad = np.where(~np.isfinite(features).all(axis=1))[0]
    if bad.size:
        raise DataFormatError(f"non-finite value in feature row {bad[0]}")
    zero = np.where(~features.any(axis=1))[0]
    if zero.size:
        raise DataFormatError(f"all-zero feature row {zero[0]} cannot be embedded")
    return features


def write_features(store: ImageFeatureStore, path) -> None:
    """Binary layout: magic, u32 version, u32 rows, u32 cols (little-endian),
    then row-major little-endian float32 data."""
    feats = np.ascontiguousarray(store.features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, feats.shape[0], feats.shape[1]))
        fh.write(feats.tobytes())


def load_features(path) -> ImageFeatureStore:
    """Read the binary container, falling back to whitespace-separated text
    (one row per line) when the magic bytes are absent."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
            if head == FEATURE_MAGIC:
                raw = fh.read(12)
                if len(raw) != 12:
                    raise DataFormatError(f"{path}: truncated feature header")
                version, rows, cols = struct.unpack("<III", raw)
                if version != FEATURE_VERSION:
                    raise DataFormatError(f"{path}: unsupported feature version {version}")
                body = fh.read()
                expect = rows * cols * 4
                if len(body) != expect:
                    raise DataFormatError(
                        f"{path}: header promises {rows}x{cols} "
                        f"({expect} bytes) but body has {len(body)}"
                    )
                feats = np.frombuffer(body, dtype="<f4").reshape(rows, cols)
                feats = np.ascontiguousarray(feats, dtype=np.float32)
            else:
                feats = _load_text_features(path)
    except OSError as exc:
        raise DataFormatError(f"cannot read features {path}: {exc}") from exc
    return ImageFeatureStore(_validate_features(feats))


def _load_text_features(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                row = np.array([float(x) for x in parts], dtype=np.float32)
            except ValueError as exc:
                raise DataFormatError(f"bad feature value: {exc}", line=lineno) from exc
            if width is None:
                width = row.size
            elif row.size != width:
                raise DataFormatError(
                    f"row has {row.size} values, expected {width}", line=lineno
                )
            rows.append(row)
    if not rows:
        raise DataFormatError(f"{path}: no feature rows")
    return np.stack(rows)


@dataclass
class TrainingInstance:
    """One sentence per registered language plus the image they describe."""

    sentences: dict[str, np.ndarray]
    image_feature: np.ndarray
    image_id: int = -1


def encode_instances(corpora: dict[str, Corpus], store: ImageFeatureStore,
                     vocabs: dict) -> list[TrainingInstance]:
    """Pair up the aligned corpora into per-sentence training instances.

    All corpora must cover the same images with the same group size; the
    sentence at row i in every language describes image i // group.
    """
    if not corpora:
        raise ValueError("no corpora given")
    lengths = {lang: len(c.sentences) for lang, c in corpora.items()}
    groups = {c.captions_per_image for c in corpora.values()}
    if len(set(lengths.values())) != 1 or len(groups) != 1:
        raise DataFormatError(f"corpora are not aligned: lengths {lengths}, groups {groups}")
    n = next(iter(lengths.values()))
    group = groups.pop()
    if n // group > len(store):
        raise DataFormatError(
            f"corpora reference {n // group} images but the store has {len(store)}"
        )
    instances = []
    for i in range(n):
        image = i // group
        sentences = {
            lang: vocabs[lang].encode(c.sentences[i]) for lang, c in corpora.items()
        }
        instances.append(TrainingInstance(sentences, store.features[image], image))
    return instances


def subset_images(corpora: dict[str, Corpus], store: ImageFeatureStore,
                  image_indices) -> tuple[dict[str, Corpus], ImageFeatureStore]:
    """New (corpora, store) restricted to the given images, groups intact."""
    image_indices = list(image_indices)
    new_corpora = {}
    for lang, corpus in corpora.items():
        g = corpus.captions_per_image
        sentences = []
        for img in image_indices:
            sentences.extend(corpus.sentences[img * g:(img + 1) * g])
        new_corpora[lang] = Corpus(lang, sentences, g)
    feats = store.features[image_indices].copy()
    ids = [store.identifiers[i] for i in image_indices]
    return new_corpora, ImageFeatureStore(feats, ids)


# -- synthetic data -------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Latent-class corpus generator settings.

    Every image belongs to a class and carries a distinct subset of its
    class's attributes; captions name the class (one of two synonyms) and
    the attribute words in a rotated order, so images are identifiable from
    captions whenever noise > 0 separates their features.
    """

    classes: int = 10
    images_per_class: int = 20
    captions_per_image: int = 5
    vocab_size: int | None = None
    noise: float = 0.2
    seed: int = 13
    languages: tuple = ("en", "de")
    feature_dim: int = 256
    attrs_per_class: int = 16
    attrs_per_image: int = 2

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least two latent classes")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        if self.images_per_class < 1 or self.captions_per_image < 1:
            raise ValueError("images and captions per image must be >= 1")
        if len(self.languages) < 1:
            raise ValueError("need at least one language")
        if not 1 <= self.attrs_per_image <= self.attrs_per_class:
            raise ValueError("attrs_per_image must lie in [1, attrs_per_class]")
        if math.comb(self.attrs_per_class, self.attrs_per_image) < self.images_per_class:
            raise ValueError(
                "not enough attribute combinations for distinct images per class"
            )
        required = self.classes * (2 + self.attrs_per_class)
        if self.vocab_size is not None and self.vocab_size < required:
            raise ValueError(
                f"vocab_size {self.vocab_size} below the {required} tokens the "
                f"class/attribute pools need"
            )


@dataclass
class SyntheticDataset:
    corpora: dict[str, Corpus]
    features: ImageFeatureStore
    image_class: np.ndarray
    prototypes: np.ndarray
    attribute_sets: list[tuple[int, ...]]


def _class_word(lang: str, cls: int, synonym: int) -> str:
    return f"{lang}obj{cls}v{synonym}"


def _attr_word(lang: str, cls: int, attr: int) -> str:
    return f"{lang}attr{cls}q{attr}"


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Deterministic synthetic corpora + features.

    Feature of image (class c, attributes S):
        prototype[c] + noise * (sum of attribute vectors + 0.05 eps)
    with eps isotropic Gaussian, so noise = 0 collapses a class to one point.
    Captions in each language use class-specific word pools only (class
    synonyms + the class's attribute words), so classes never share tokens.
    Each caption names the class then walks its attributes forward and back
    ([syn, a1, a2, a2, a1]); the walk's starting point rotates per caption
    and per language, so captions vary within an image and cross-language
    captions are not token-for-token relabelings.
    """
    spec.validate()
    rng = rng_stream(spec.seed, "synthetic")
    dim = spec.feature_dim
    prototypes = rng.standard_normal((spec.classes, dim))
    attr_vecs = rng.standard_normal((spec.classes, spec.attrs_per_class, dim))

    n_images = spec.classes * spec.images_per_class
    features = np.empty((n_images, dim), dtype=np.float32)
    image_class = np.empty(n_images, dtype=np.int64)
    attribute_sets: list[tuple[int, ...]] = []
    sentences: dict[str, list[list[str]]] = {lang: [] for lang in spec.languages}

    img = 0
    for cls in range(spec.classes):
        chosen: set[tuple[int, ...]] = set()
        while len(chosen) < spec.images_per_class:
            draw = tuple(sorted(rng.choice(spec.attrs_per_class,
                                           size=spec.attrs_per_image, replace=False)))
            chosen.add(draw)
        for attrs in sorted(chosen):
            structured = attr_vecs[cls, list(attrs)].sum(axis=0)
            eps = rng.standard_normal(dim) * 0.05
            features[img] = prototypes[cls] + spec.noise * (structured + eps)
            image_class[img] = cls
            attribute_sets.append(attrs)
            for li, lang in enumerate(spec.languages):
                for j in range(spec.captions_per_image):
                    rot = (j + li) % len(attrs)
                    ordered = attrs[rot:] + attrs[:rot]
                    walk = ordered + tuple(reversed(ordered))
                    tokens = [_class_word(lang, cls, j % 2)]
                    tokens += [_attr_word(lang, cls, a) for a in walk]
                    sentences[lang].append(tokens)
            img += 1

    corpora = {
        lang: Corpus(lang, sents, spec.captions_per_image)
        for lang, sents in sentences.items()
    }
    store = ImageFeatureStore(_validate_features(features))
    return SyntheticDataset(corpora, store, image_class, prototypes, attribute_sets)
