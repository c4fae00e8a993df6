"""Command-line driver.

Subcommands: train, eval-rank, eval-sts, rerank-train, rerank-apply,
gradcheck, gen-synthetic. Options may come from a JSON config file
(--config); explicit flags override it. Exit codes: 0 success, 1
usage/configuration error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import dataio, evaluation, rerank
from .checks import tiny_gradcheck
from .encoder import build_vocabulary
from .errors import ConfigError, DataFormatError, NumericalError
from .evaluation import IMAGE_TO_SENTENCE, SENTENCE_TO_IMAGE, StsPair
from .model import LossConfig, MlmmeModel
from .training import TrainingConfig, train

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _lang_paths(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"expected LANG=PATH, got '{item}'")
        lang, path = item.split("=", 1)
        out[lang] = path
    return out


def _load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge precedence: explicit flag > config file > built-in default."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None and value != []:
            cfg[key] = value
    return cfg


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()
    ).hexdigest()


def _write_manifest(run_dir: Path, command: str, cfg: dict) -> None:
    manifest = {
        "command": command,
        "config_hash": _config_hash(cfg),
        "seed": cfg.get("seed"),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    with open(run_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_eval_data(model, corpus_paths: dict, features_path, captions_per_image):
    unknown = set(corpus_paths) - set(model.language_ids)
    if unknown:
        raise ConfigError(
            f"languages {sorted(unknown)} are not in the checkpoint "
            f"(has {model.language_ids})")
    corpora = {
        lang: dataio.load_corpus(path, captions_per_image, lang)
        for lang, path in corpus_paths.items()
    }
    store = dataio.load_features(features_path)
    vocabs = {lang: model.languages[lang].vocab for lang in corpora}
    return dataio.encode_instances(corpora, store, vocabs)


# -- subcommands ------------------------------------------------------------------


TRAIN_DEFAULTS = {
    "train_corpus": {}, "val_corpus": {}, "train_features": None,
    "val_features": None, "out": "run", "captions_per_image": 1,
    "embed_dim": 620, "hidden_dim": 1024, "multimodal_dim": 2048,
    "margin": 0.2, "beta": 1.0, "negatives": 5, "dropout": 0.5,
    "min_count": 1, "batch_size": 128, "max_epochs": 30, "patience": 10,
    "learning_rate": 2e-4, "selection_metric": "sum_of_recalls",
    "grad_clip": 0.0, "seed": 0, "log_timing": None,
}


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    cfg["train_corpus"] = _lang_paths(cfg["train_corpus"]) \
        if isinstance(cfg["train_corpus"], list) else cfg["train_corpus"]
    cfg["val_corpus"] = _lang_paths(cfg["val_corpus"]) \
        if isinstance(cfg["val_corpus"], list) else cfg["val_corpus"]
    if cfg["log_timing"] is None:
        cfg["log_timing"] = True
    if not cfg["train_corpus"] or not cfg["train_features"]:
        raise ConfigError("train needs --train-corpus LANG=PATH and --train-features")
    if not cfg["val_corpus"] or not cfg["val_features"]:
        raise ConfigError("train needs --val-corpus LANG=PATH and --val-features")
    languages = sorted(cfg["train_corpus"])
    if len(languages) == 1 and cfg["beta"] < 1.0:
        raise ConfigError(
            "a single language computes the visual semantic embedding, which "
            "has no sentence-sentence term: beta must be 1")
    print(f"root seed: {cfg['seed']}")

    corpora = {
        lang: dataio.load_corpus(path, cfg["captions_per_image"], lang)
        for lang, path in cfg["train_corpus"].items()
    }
    store = dataio.load_features(cfg["train_features"])
    vocabs = {
        lang: build_vocabulary(c.sentences, cfg["min_count"], lang)
        for lang, c in corpora.items()
    }
    train_set = dataio.encode_instances(corpora, store, vocabs)

    val_corpora = {
        lang: dataio.load_corpus(path, cfg["captions_per_image"], lang)
        for lang, path in cfg["val_corpus"].items()
    }
    val_store = dataio.load_features(cfg["val_features"])
    val_set = dataio.encode_instances(val_corpora, val_store, vocabs)

    model = MlmmeModel.build(
        vocabs, embed_dim=cfg["embed_dim"], hidden_dim=cfg["hidden_dim"],
        multimodal_dim=cfg["multimodal_dim"], image_feature_dim=store.dim,
        config=LossConfig(cfg["margin"], cfg["beta"], cfg["negatives"],
                          cfg["dropout"]),
        seed=cfg["seed"],
    )
    tconfig = TrainingConfig(
        batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
        patience=cfg["patience"], seed=cfg["seed"],
        learning_rate=cfg["learning_rate"],
        selection_metric=cfg["selection_metric"], grad_clip=cfg["grad_clip"],
        log_timing=bool(cfg["log_timing"]),
    )
    best, history = train(model, train_set, val_set, tconfig)

    run_dir = Path(cfg["out"])
    run_dir.mkdir(parents=True, exist_ok=True)
    best.save(run_dir / "checkpoint.bin")
    history.write_log(run_dir / "history.jsonl")
    _write_manifest(run_dir, "train", cfg)
    print(f"best epoch: {history.best_epoch} (score {history.best_score:.6f})")
    print(f"checkpoint: {run_dir / 'checkpoint.bin'}")
    return 0


EVAL_RANK_DEFAULTS = {
    "checkpoint": None, "corpus": {}, "features": None,
    "captions_per_image": 1, "seed": 0,
}


def cmd_eval_rank(args) -> int:
    cfg = _resolve(args, EVAL_RANK_DEFAULTS)
    cfg["corpus"] = _lang_paths(cfg["corpus"]) \
        if isinstance(cfg["corpus"], list) else cfg["corpus"]
    if not cfg["checkpoint"] or not cfg["corpus"] or not cfg["features"]:
        raise ConfigError("eval-rank needs --checkpoint, --corpus and --features")
    model = MlmmeModel.load(cfg["checkpoint"])
    instances = _load_eval_data(model, cfg["corpus"], cfg["features"],
                                cfg["captions_per_image"])
    for lang in sorted(cfg["corpus"]):
        for direction in (SENTENCE_TO_IMAGE, IMAGE_TO_SENTENCE):
            report = evaluation.rank_cross_modal(model, instances, direction, lang)
            for k in sorted(report.r_at):
                print(f"{lang}\t{direction}\tr@{k}\t{report.r_at[k]:.6f}")
            print(f"{lang}\t{direction}\tmrank\t{report.median_rank:g}")
    return 0


EVAL_STS_DEFAULTS = {
    "checkpoint": None, "pairs": None, "language": None, "out": None, "seed": 0,
}


def read_sts_pairs(path) -> list[StsPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataFormatError(
                    "expected 'sentenceA<TAB>sentenceB<TAB>gold'", line=lineno)
            try:
                gold = float(parts[2])
            except ValueError as exc:
                raise DataFormatError(f"bad gold score '{parts[2]}'",
                                      line=lineno) from exc
            pair = StsPair(parts[0].split(), parts[1].split(), gold)
            try:
                pair.validate()
            except ValueError as exc:
                raise DataFormatError(str(exc), line=lineno) from exc
            pairs.append(pair)
    if not pairs:
        raise DataFormatError(f"{path}: no sentence pairs")
    return pairs


def cmd_eval_sts(args) -> int:
    cfg = _resolve(args, EVAL_STS_DEFAULTS)
    if not cfg["checkpoint"] or not cfg["pairs"]:
        raise ConfigError("eval-sts needs --checkpoint and --pairs")
    model = MlmmeModel.load(cfg["checkpoint"])
    language = cfg["language"] or model.language_ids[0]
    if language not in model.languages:
        raise ConfigError(f"language '{language}' is not in the checkpoint")
    pairs = read_sts_pairs(cfg["pairs"])
    preds = [evaluation.sts_score(model, p, language) for p in pairs]
    if cfg["out"]:
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            for i, score in enumerate(preds):
                fh.write(f"{i}\t{score:.6f}\n")
    golds = [p.gold for p in pairs]
    try:
        r = evaluation.pearson(preds, golds)
        print(f"pearson\t{r:.6f}")
    except ValueError:
        print("pearson\tundefined (constant input)")
    return 0


RERANK_DEFAULTS = {
    "checkpoint": None, "nbest": None, "source": None, "references": None,
    "images": None, "image_alignment": None, "source_lang": None,
    "target_lang": None, "out": None, "weights": None,
    "mira_c": 0.01, "mira_epochs": 30, "seed": 0,
}


def _prepare_nbest(cfg, model):
    lists = rerank.parse_nbest(cfg["nbest"])
    rerank.attach_sources(lists, rerank.read_sentences(cfg["source"]))
    use_image = bool(cfg["images"])
    if use_image:
        store = dataio.load_features(cfg["images"])
        with open(cfg["image_alignment"], encoding="utf-8") as fh:
            alignment = [int(line) for line in fh if line.strip()]
        rerank.attach_images(lists, store, alignment)
    source_lang = cfg["source_lang"] or model.language_ids[0]
    target_lang = cfg["target_lang"] or model.language_ids[-1]
    for lang in (source_lang, target_lang):
        if lang not in model.languages:
            raise ConfigError(f"language '{lang}' is not in the checkpoint")
    for nb in lists:
        rerank.extract_features(nb, model, source_lang, target_lang, use_image)
    return lists


def cmd_rerank_train(args) -> int:
    cfg = _resolve(args, RERANK_DEFAULTS)
    for key in ("checkpoint", "nbest", "source", "out"):
        if not cfg[key]:
            raise ConfigError(f"rerank-train needs --{key.replace('_', '-')}")
    if not cfg["references"]:
        raise ConfigError("rerank-train needs --references")
    print(f"root seed: {cfg['seed']}")
    if bool(cfg["images"]) != bool(cfg["image_alignment"]):
        raise ConfigError("--images and --image-alignment go together")
    model = MlmmeModel.load(cfg["checkpoint"])
    lists = _prepare_nbest(cfg, model)
    refs_all = rerank.read_sentences(cfg["references"])
    try:
        references = [refs_all[nb.segment_id] for nb in lists]
    except IndexError:
        raise DataFormatError("references file has fewer lines than segments")
    weights = rerank.mira_train(
        lists, references,
        rerank.MiraConfig(cfg["mira_c"], cfg["mira_epochs"], cfg["seed"]),
    )
    weights.save(cfg["out"])
    for name, value in zip(weights.names, weights.values):
        print(f"{name}\t{value:.6f}")
    return 0


def cmd_rerank_apply(args) -> int:
    cfg = _resolve(args, RERANK_DEFAULTS)
    for key in ("checkpoint", "nbest", "source", "weights", "out"):
        if not cfg[key]:
            raise ConfigError(f"rerank-apply needs --{key.replace('_', '-')}")
    model = MlmmeModel.load(cfg["checkpoint"])
    lists = _prepare_nbest(cfg, model)
    weights = rerank.WeightVector.load(cfg["weights"])
    best = rerank.rerank_apply(lists, weights)
    with open(cfg["out"], "w", encoding="utf-8") as fh:
        for entry in best:
            fh.write(" ".join(entry.tokens) + "\n")
    if cfg["references"]:
        refs_all = rerank.read_sentences(cfg["references"])
        references = [refs_all[nb.segment_id] for nb in lists]
        bleu = rerank.corpus_bleu([e.tokens for e in best], references)
        print(f"corpus_bleu\t{100.0 * bleu:.2f}")
    return 0


GRADCHECK_DEFAULTS = {
    "betas": "0,0.5,1", "h": 1e-5, "seed": 5, "hidden_dim": 8, "embed_dim": 6,
    "multimodal_dim": 10, "languages": 2, "instances": 4,
}


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args, GRADCHECK_DEFAULTS)
    print(f"root seed: {cfg['seed']}")
    betas = [float(b) for b in str(cfg["betas"]).split(",")]
    worst = 0.0
    for beta in betas:
        report = tiny_gradcheck(
            beta, h=cfg["h"], seed=cfg["seed"], hidden_dim=cfg["hidden_dim"],
            embed_dim=cfg["embed_dim"], multimodal_dim=cfg["multimodal_dim"],
            n_languages=cfg["languages"], n_instances=cfg["instances"],
        )
        for name in sorted(report.per_param):
            print(f"beta={beta:g}\t{name}\t{report.per_param[name]:.3e}")
        print(f"beta={beta:g}\tmax\t{report.max_relative_error:.3e}"
              f"\t(worst group: {report.worst_param})")
        worst = max(worst, report.max_relative_error)
    print(f"overall max relative error: {worst:.3e}")
    return 0 if worst < GRADCHECK_TOLERANCE else 3


GEN_DEFAULTS = {
    "out": None, "classes": 10, "images_per_class": 20, "captions_per_image": 5,
    "noise": 0.1, "seed": 13, "feature_dim": 128, "languages": "en,de",
    "attrs_per_class": 16, "attrs_per_image": 3, "val_images_per_class": 0,
    "test_images_per_class": 0,
}


def cmd_gen_synthetic(args) -> int:
    cfg = _resolve(args, GEN_DEFAULTS)
    if not cfg["out"]:
        raise ConfigError("gen-synthetic needs --out DIR")
    print(f"root seed: {cfg['seed']}")
    langs = tuple(cfg["languages"].split(",")) \
        if isinstance(cfg["languages"], str) else tuple(cfg["languages"])
    per_class = (cfg["images_per_class"] + cfg["val_images_per_class"]
                 + cfg["test_images_per_class"])
    spec = dataio.SyntheticSpec(
        classes=cfg["classes"], images_per_class=per_class,
        captions_per_image=cfg["captions_per_image"], noise=cfg["noise"],
        seed=cfg["seed"], languages=langs, feature_dim=cfg["feature_dim"],
        attrs_per_class=cfg["attrs_per_class"],
        attrs_per_image=cfg["attrs_per_image"],
    )
    data = dataio.generate_synthetic(spec)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    counts = {"train": cfg["images_per_class"],
              "val": cfg["val_images_per_class"],
              "test": cfg["test_images_per_class"]}
    offsets = {}
    pos = 0
    for split, count in counts.items():
        offsets[split] = (pos, pos + count)
        pos += count
    for split, (lo, hi) in offsets.items():
        if lo == hi:
            continue
        indices = []
        for cls in range(cfg["classes"]):
            base = cls * per_class
            indices.extend(range(base + lo, base + hi))
        corpora, store = dataio.subset_images(data.corpora, data.features, indices)
        for lang, corpus in corpora.items():
            with open(out / f"{split}.{lang}.txt", "w", encoding="utf-8") as fh:
                for tokens in corpus.sentences:
                    fh.write(" ".join(tokens) + "\n")
        dataio.write_features(store, out / f"{split}.features.bin")
        print(f"{split}: {len(indices)} images, "
              f"{len(indices) * cfg['captions_per_image']} captions per language")
    meta = {k: cfg[k] for k in GEN_DEFAULTS if k != "out"}
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlmme", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)
        return p

    p = add("train", cmd_train, "train a model and write a checkpoint")
    p.add_argument("--train-corpus", action="append", metavar="LANG=PATH")
    p.add_argument("--val-corpus", action="append", metavar="LANG=PATH")
    p.add_argument("--train-features")
    p.add_argument("--val-features")
    p.add_argument("--out")
    p.add_argument("--captions-per-image", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--multimodal-dim", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--negatives", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--min-count", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--selection-metric", choices=["sum_of_recalls", "loss"])
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--log-timing", dest="log_timing", action="store_const",
                   const=True)
    p.add_argument("--no-log-timing", dest="log_timing", action="store_const",
                   const=False)

    p = add("eval-rank", cmd_eval_rank, "image<->sentence retrieval metrics")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", action="append", metavar="LANG=PATH")
    p.add_argument("--features")
    p.add_argument("--captions-per-image", type=int)

    p = add("eval-sts", cmd_eval_sts, "semantic similarity scoring")
    p.add_argument("--checkpoint")
    p.add_argument("--pairs")
    p.add_argument("--language")
    p.add_argument("--out")

    for name, fn, helptext in (
        ("rerank-train", cmd_rerank_train, "tune re-ranking weights with MIRA"),
        ("rerank-apply", cmd_rerank_apply, "apply weights to an n-best list"),
    ):
        p = add(name, fn, helptext)
        p.add_argument("--checkpoint")
        p.add_argument("--nbest")
        p.add_argument("--source")
        p.add_argument("--references")
        p.add_argument("--images")
        p.add_argument("--image-alignment")
        p.add_argument("--source-lang")
        p.add_argument("--target-lang")
        p.add_argument("--out")
        p.add_argument("--weights")
        p.add_argument("--mira-c", type=float)
        p.add_argument("--mira-epochs", type=int)

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    p.add_argument("--betas")
    p.add_argument("--h", type=float)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--multimodal-dim", type=int)
    p.add_argument("--languages", type=int)
    p.add_argument("--instances", type=int)

    p = add("gen-synthetic", cmd_gen_synthetic, "write a synthetic dataset")
    p.add_argument("--out")
    p.add_argument("--classes", type=int)
    p.add_argument("--images-per-class", type=int)
    p.add_argument("--captions-per-image", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--languages")
    p.add_argument("--attrs-per-class", type=int)
    p.add_argument("--attrs-per-image", type=int)
    p.add_argument("--val-images-per-class", type=int)
    p.add_argument("--test-images-per-class", type=int)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
