"""Trainable multilingual multimodal embeddings.

Sentences in any number of languages and precomputed image features are
mapped into one unit-norm vector space by per-language GRU encoders and a
learned image projection, trained jointly with margin-based ranking losses
(image<->sentence and sentence<->sentence, mixed by beta). The package also
ships the evaluation pipelines that consume the space: bidirectional
retrieval, graded sentence similarity, and n-best re-ranking with k-best
MIRA.
"""

from .dataio import (
    Corpus,
    ImageFeatureStore,
    SyntheticSpec,
    TrainingInstance,
    generate_synthetic,
    load_corpus,
    load_features,
    write_features,
)
from .encoder import Vocabulary, build_vocabulary
from .errors import ConfigError, DataFormatError, NumericalError
from .estimator import MlmmeEmbedder
from .evaluation import (
    RetrievalReport,
    ScoreMatrix,
    StsPair,
    pearson,
    rank_cross_lingual,
    rank_cross_modal,
    retrieval_eval,
    sts_score,
)
from .model import (
    ContrastivePlan,
    LossConfig,
    MlmmeModel,
    embed_image,
    joint_loss,
    loss_multilingual,
    loss_multimodal,
    sample_contrastive,
    similarity,
)
from .rerank import (
    MiraConfig,
    NBestEntry,
    NBestList,
    WeightVector,
    corpus_bleu,
    extract_features,
    mira_train,
    parse_nbest,
    rerank_apply,
    sentence_bleu,
)
from .training import TrainingConfig, TrainingHistory, train, validation_score

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContrastivePlan",
    "Corpus",
    "DataFormatError",
    "ImageFeatureStore",
    "LossConfig",
    "MiraConfig",
    "MlmmeEmbedder",
    "MlmmeModel",
    "NBestEntry",
    "NBestList",
    "NumericalError",
    "RetrievalReport",
    "ScoreMatrix",
    "StsPair",
    "SyntheticSpec",
    "TrainingConfig",
    "TrainingHistory",
    "TrainingInstance",
    "Vocabulary",
    "WeightVector",
    "build_vocabulary",
    "corpus_bleu",
    "embed_image",
    "extract_features",
    "generate_synthetic",
    "joint_loss",
    "load_corpus",
    "load_features",
    "loss_multilingual",
    "loss_multimodal",
    "mira_train",
    "parse_nbest",
    "pearson",
    "rank_cross_lingual",
    "rank_cross_modal",
    "rerank_apply",
    "retrieval_eval",
    "sample_contrastive",
    "sentence_bleu",
    "similarity",
    "sts_score",
    "train",
    "validation_score",
    "write_features",
]
