"""Self-check harness: a tiny double-precision model whose full training
objective is verified against central finite differences, parameter group
by parameter group."""

from __future__ import annotations

import numpy as np

from .dataio import TrainingInstance
from .encoder import Vocabulary
from .model import LossConfig, MlmmeModel, joint_loss, plan_directions, sample_contrastive
from .numerics import GradCheckReport, gradcheck, rng_stream


def tiny_setup(beta: float, *, hidden_dim: int = 8, embed_dim: int = 6,
               multimodal_dim: int = 10, n_languages: int = 2,
               n_instances: int = 4, image_feature_dim: int = 12,
               vocab_tokens: int = 9, seed: int = 5):
    """Tiny float64 model + batch, dropout off, for gradient verification."""
    rng = rng_stream(seed, "tiny")
    langs = [f"l{j}" for j in range(n_languages)]
    vocabs = {
        lang: Vocabulary.from_tokens(lang, [f"{lang}t{i}" for i in range(vocab_tokens)])
        for lang in langs
    }
    config = LossConfig(margin=0.2, beta=beta, negatives_per_instance=2, dropout=0.0)
    model = MlmmeModel.build(
        vocabs, embed_dim=embed_dim, hidden_dim=hidden_dim,
        multimodal_dim=multimodal_dim, image_feature_dim=image_feature_dim,
        config=config, seed=seed, dtype=np.float64,
    )
    # The production init (N(0, 0.01)) leaves pre-normalization vectors at
    # ~1e-6 magnitude, where the unit-norm map is too curved for central
    # differences at any workable step size. Probe at an O(1) point instead.
    jitter = rng_stream(seed, "jitter")
    for name, p in model.parameters().items():
        p += jitter.standard_normal(p.shape) * 0.4
        if name.endswith(".emb"):
            p[0] = 0.0
    instances = []
    for _ in range(n_instances):
        sentences = {
            lang: rng.integers(2, vocabs[lang].size, size=int(rng.integers(3, 6)))
            for lang in langs
        }
        feature = rng.standard_normal(image_feature_dim)
        instances.append(TrainingInstance(sentences, feature))
    directions = plan_directions(langs, include_multilingual=beta < 1.0)
    if beta == 0.0:
        directions = [d for d in directions if d.startswith("sentence_pair:")]
    plan = sample_contrastive(n_instances, config.negatives_per_instance, 0,
                              seed, directions)
    return model, instances, plan


def tiny_gradcheck(beta: float, h: float = 1e-5, seed: int = 5,
                   **dims) -> GradCheckReport:
    """Finite-difference check of every parameter group of the tiny model."""
    model, instances, plan = tiny_setup(beta, seed=seed, **dims)
    batch = np.arange(len(instances))

    def loss_fn():
        result = joint_loss(model, instances, batch, plan, training=False)
        return result.total, result.grads

    return gradcheck(loss_fn, model.parameters(), h=h)
