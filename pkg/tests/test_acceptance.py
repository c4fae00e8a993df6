"""Acceptance criteria, one test per criterion, one PASS line each.

Criteria 4 and 5 train real models on generated data and take a few
minutes apiece; everything else is seconds. Run with `pytest -v -s` to see
the per-criterion lines as they complete.
"""

import time

import numpy as np
import pytest

from mlmme.checks import tiny_gradcheck, tiny_setup
from mlmme.cli import main
from mlmme.dataio import SyntheticSpec, encode_instances, generate_synthetic, subset_images
from mlmme.encoder import build_vocabulary, encode_sentence
from mlmme.evaluation import (
    SENTENCE_TO_IMAGE,
    ScoreMatrix,
    pearson,
    rank_cross_lingual,
    rank_cross_modal,
    retrieval_eval,
)
from mlmme.model import (
    LossConfig,
    MlmmeModel,
    dir_image_to_sentence,
    dir_sentence_pair,
    dir_sentence_to_image,
    embed_image,
    joint_loss,
    loss_multilingual,
    loss_multimodal,
    sample_contrastive,
)
from mlmme.numerics import rng_stream
from mlmme.rerank import (
    MiraConfig,
    WeightVector,
    corpus_bleu,
    mira_train,
    parse_nbest,
    rerank_apply,
    sentence_bleu,
)
from mlmme.training import TrainingConfig, train

GRADCHECK_TOL = 1e-4


def report(number, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {number:02d} {name}: {status}{suffix}")
    assert ok, f"criterion {number} failed{suffix}"


# -- 1: gradient correctness ------------------------------------------------------


def test_c01_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for beta in (0.0, 0.5, 1.0):
        rep = tiny_gradcheck(beta, hidden_dim=8, embed_dim=6, multimodal_dim=10,
                             n_languages=2, n_instances=4)
        for group, err in rep.per_param.items():
            assert err < GRADCHECK_TOL, f"beta={beta} group {group}: {err:.2e}"
        worst = max(worst, rep.max_relative_error)
    elapsed = time.perf_counter() - start
    report(1, "gradient correctness",
           worst < GRADCHECK_TOL and elapsed < 60.0,
           f"max err {worst:.2e}, {elapsed:.1f}s")


# -- 2: single-language reduction --------------------------------------------------


def test_c02_vse_reduction():
    model, instances, plan = tiny_setup(1.0, n_languages=1, n_instances=12,
                                        seed=23)
    lang = model.language_ids[0]
    sent = np.stack([
        encode_sentence(inst.sentences[lang], model.languages[lang]).embedding
        for inst in instances
    ])
    img = np.stack([embed_image(inst.image_feature, model).embedding
                    for inst in instances])
    rng = rng_stream(24)
    identical = True
    for _ in range(100):
        size = int(rng.integers(1, 7))
        batch = rng.choice(len(instances), size=size, replace=False)
        joint = joint_loss(model, instances, batch, plan)
        neg_sent = {lang: plan.directions[dir_image_to_sentence(lang)][batch]}
        neg_img = {lang: plan.directions[dir_sentence_to_image(lang)][batch]}
        s_i, _, _ = loss_multimodal({lang: sent}, img, batch, neg_sent, neg_img,
                                    model.config.margin)
        identical &= joint.total == s_i

    # the multilingual sampler must never run during beta = 1 training
    model_b1, instances_b1, _ = tiny_setup(1.0, n_languages=2, seed=25)
    cfg = TrainingConfig(batch_size=2, max_epochs=3, patience=5, seed=1,
                         selection_metric="loss", log_timing=False)
    _, history = train(model_b1, instances_b1, instances_b1, cfg)
    counter = history.plan_counts["multilingual"]
    report(2, "single-language reduction",
           identical and counter == 0,
           f"100 batches bitwise, multilingual plans {counter}")


# -- 3: loss-oracle equivalence ----------------------------------------------------


def enumerate_multimodal(sent, img, batch, neg_sent, neg_img, margin):
    total = 0.0
    for lang, embs in sent.items():
        for bi, b in enumerate(batch):
            d, v = img[b], embs[b]
            pos = sum(float(x) * float(y) for x, y in zip(d, v))
            for r in neg_sent[lang][bi]:
                s = sum(float(x) * float(y) for x, y in zip(d, embs[r]))
                if margin - pos + s > 0:
                    total += margin - pos + s
            for r in neg_img[lang][bi]:
                s = sum(float(x) * float(y) for x, y in zip(v, img[r]))
                if margin - pos + s > 0:
                    total += margin - pos + s
    return total


def enumerate_multilingual(sent, batch, neg_pair, margin):
    total = 0.0
    langs = sorted(sent)
    for i, k in enumerate(langs):
        for l in langs[i + 1:]:
            for bi, b in enumerate(batch):
                vk, vl = sent[k][b], sent[l][b]
                pos = sum(float(x) * float(y) for x, y in zip(vk, vl))
                for q, nl in ((vk, l), (vl, k)):
                    for r in neg_pair[dir_sentence_pair(k if nl == l else l, nl)][bi]:
                        s = sum(float(x) * float(y) for x, y in zip(q, sent[nl][r]))
                        if margin - pos + s > 0:
                            total += margin - pos + s
    return total


def test_c03_loss_oracle_equivalence():
    rng = rng_stream(31)
    margin = 0.2
    worst = 0.0
    for trial in range(50):
        m = int(rng.integers(4, 10))
        b = int(rng.integers(1, m + 1))
        r = int(rng.integers(1, 4))
        d = int(rng.integers(2, 7))
        langs = ("a", "b") if trial % 2 == 0 else ("a", "b", "c")
        sent = {}
        for k in langs:
            x = rng.standard_normal((m, d))
            sent[k] = x / np.linalg.norm(x, axis=1, keepdims=True)
        x = rng.standard_normal((m, d))
        img = x / np.linalg.norm(x, axis=1, keepdims=True)
        batch = rng.choice(m, size=b, replace=False)
        neg_sent = {k: rng.integers(0, m, size=(b, r)) for k in langs}
        neg_img = {k: rng.integers(0, m, size=(b, r)) for k in langs}
        neg_pair = {
            dir_sentence_pair(k, l): rng.integers(0, m, size=(b, r))
            for k in langs for l in langs if k != l
        }
        li, _, _ = loss_multimodal(sent, img, batch, neg_sent, neg_img, margin)
        ls, _ = loss_multilingual(sent, batch, neg_pair, margin)
        worst = max(worst,
                    abs(li - enumerate_multimodal(sent, img, batch, neg_sent,
                                                  neg_img, margin)),
                    abs(ls - enumerate_multilingual(sent, batch, neg_pair, margin)))
    report(3, "loss-oracle equivalence", worst < 1e-10, f"max |diff| {worst:.1e}")


# -- 4 & 5: synthetic retrieval after real training --------------------------------

SYNTH = dict(classes=10, images_per_class=40, captions_per_image=5, seed=13)
TRAIN_DIMS = dict(embed_dim=32, hidden_dim=48, multimodal_dim=96)
TRAIN_LOSS = dict(margin=0.5, negatives_per_instance=15, dropout=0.0)
TRAIN_CFG = dict(batch_size=32, learning_rate=1e-2, seed=7,
                 selection_metric="loss", log_timing=False)
EPOCHS_MAIN = 50
EPOCHS_XLING = 30


@pytest.fixture(scope="module")
def synthetic_splits():
    spec = SyntheticSpec(**SYNTH)
    data = generate_synthetic(spec)
    per_class = SYNTH["images_per_class"]

    def pick(lo, hi):
        idx = []
        for cls in range(SYNTH["classes"]):
            idx.extend(range(cls * per_class + lo, cls * per_class + hi))
        return subset_images(data.corpora, data.features, idx)

    vocabs = {lang: build_vocabulary(data.corpora[lang].sentences, 1, lang)
              for lang in data.corpora}
    train_c, train_f = pick(0, 20)
    test_c, test_f = pick(20, 40)
    return {
        "vocabs": vocabs,
        "train": encode_instances(train_c, train_f, vocabs),
        "test": encode_instances(test_c, test_f, vocabs),
        "feature_dim": data.features.dim,
    }


def run_training(splits, beta, epochs):
    model = MlmmeModel.build(
        splits["vocabs"], image_feature_dim=splits["feature_dim"],
        config=LossConfig(beta=beta, **TRAIN_LOSS), **TRAIN_DIMS,
    )
    config = TrainingConfig(max_epochs=epochs, patience=epochs, **TRAIN_CFG)
    best, history = train(model, splits["train"], splits["train"][:100], config)
    return best, history


@pytest.fixture(scope="module")
def trained_main(synthetic_splits):
    start = time.perf_counter()
    best, _ = run_training(synthetic_splits, beta=0.75, epochs=EPOCHS_MAIN)
    return best, time.perf_counter() - start


def test_c04_synthetic_retrieval(synthetic_splits, trained_main):
    model, elapsed = trained_main
    test_set = synthetic_splits["test"]
    ok = elapsed < 900.0
    details = [f"train {elapsed:.0f}s"]
    for lang in ("en", "de"):
        rep = rank_cross_modal(model, test_set, SENTENCE_TO_IMAGE, lang)
        details.append(f"{lang} r@1={rep.r_at[1]:.3f} mrank={rep.median_rank:g}")
        ok &= rep.r_at[1] >= 0.9 and rep.median_rank <= 2.0
    report(4, "synthetic retrieval", ok, ", ".join(details))


def test_c05_multilingual_signal(synthetic_splits):
    test_set = synthetic_splits["test"]
    model_mid, _ = run_training(synthetic_splits, beta=0.5, epochs=EPOCHS_XLING)
    model_img, _ = run_training(synthetic_splits, beta=1.0, epochs=EPOCHS_XLING)
    r_mid = min(rank_cross_lingual(model_mid, test_set, q, c).r_at[10]
                for q, c in (("en", "de"), ("de", "en")))
    r_img = max(rank_cross_lingual(model_img, test_set, q, c).r_at[10]
                for q, c in (("en", "de"), ("de", "en")))
    ok = r_mid >= 0.8 and r_img <= 0.5 * r_mid
    report(5, "multilingual signal", ok,
           f"beta=0.5 r@10={r_mid:.3f}, beta=1 r@10={r_img:.3f}")


# -- 6: metric oracles --------------------------------------------------------------


def test_c06_metric_oracles():
    rng = rng_stream(61)
    for _ in range(1000):
        q = int(rng.integers(1, 101))
        c = int(rng.integers(1, 501))
        scores = rng.standard_normal((q, c))
        if rng.random() < 0.5:
            scores = np.round(scores * 4) / 4  # force ties
        gold = [set(rng.choice(c, size=int(rng.integers(1, min(c, 5) + 1)),
                               replace=False).tolist()) for _ in range(q)]
        rep = retrieval_eval(ScoreMatrix(scores, gold))
        # independent path: sorted array + binary search
        ranks = np.empty(q)
        for i, g in enumerate(gold):
            best = max(scores[i][j] for j in g)
            srt = np.sort(scores[i])
            ranks[i] = c - np.searchsorted(srt, best, side="right") + 1
        expect_rat = {k: float(np.mean(ranks <= k)) for k in (1, 5, 10)}
        srt = np.sort(ranks)
        expect_med = (srt[q // 2] if q % 2 else (srt[q // 2 - 1] + srt[q // 2]) / 2)
        assert rep.r_at == expect_rat
        assert rep.median_rank == float(expect_med)

    worst = 0.0
    for _ in range(300):
        x = rng.standard_normal(int(rng.integers(3, 40)))
        y = rng.standard_normal(x.size)
        r = pearson(x, y)
        xc, yc = x - x.mean(), y - y.mean()
        direct = float(xc @ yc / np.sqrt((xc @ xc) * (yc @ yc)))
        worst = max(worst, abs(r - direct))
        a = float(rng.uniform(0.5, 3.0)) * (-1 if rng.random() < 0.5 else 1)
        b = float(rng.uniform(-2, 2))
        worst = max(worst, abs(pearson(a * x + b, y) - np.sign(a) * r))
        assert abs(r) <= 1 + 1e-12
    report(6, "metric oracles", worst < 1e-12, f"pearson max dev {worst:.1e}")


# -- 7: BLEU fixtures ----------------------------------------------------------------


def test_c07_bleu_fixtures():
    fixtures_ok = []
    # 1: exact self-match, length >= 4
    fixtures_ok.append(sentence_bleu(list("abcde"), list("abcde")) == 1.0)
    # 2: clipped-count example (p1=2/4, p2=2/4, p3=1/3, p4=1/2, BP=1)
    hyp = "the the the cat".split()
    ref = "the cat sat down".split()
    fixtures_ok.append(
        sentence_bleu(hyp, ref) == pytest.approx((0.5 * 0.5 * (1 / 3) * 0.5) ** 0.25,
                                                 abs=1e-15))
    # 3: disjoint tokens -> exactly 0
    fixtures_ok.append(sentence_bleu(["x", "y", "z"], ["p", "q"]) == 0.0)
    # 4: brevity penalty alone (all precisions 1 after smoothing)
    fixtures_ok.append(
        sentence_bleu(["a", "b"], ["a", "b", "c", "d"]) ==
        pytest.approx(np.exp(1 - 4 / 2), abs=1e-15))
    # 5: corpus identity -> 1.0 (100.0 on the x100 scale)
    hyps = [list("wxyz"), ["m", "n"]]
    fixtures_ok.append(100.0 * corpus_bleu(hyps, hyps) == 100.0)
    # 6: corpus micro-average by hand (3-gram corpus, no 4-grams anywhere)
    h2 = ["the cat sat".split(), "a dog ran".split()]
    r2 = ["the cat sat".split(), "the dog ran".split()]
    expected = np.exp((np.log(5 / 6) + np.log(3 / 4) + np.log(1 / 2)) / 3)
    fixtures_ok.append(corpus_bleu(h2, r2) == pytest.approx(float(expected), abs=1e-15))
    # 7: any zero matched order -> corpus BLEU exactly 0
    h3 = ["u v w x".split()]
    r3 = ["u v y x".split()]  # no matching 3-gram or 4-gram
    fixtures_ok.append(corpus_bleu(h3, r3) == 0.0)
    report(7, "bleu fixtures", all(fixtures_ok),
           f"{sum(fixtures_ok)}/{len(fixtures_ok)} fixtures exact")


# -- 8: re-ranking end to end --------------------------------------------------------


def write_separable_benchmark(path, n_segments, n_hyps, seed):
    """Wire-format n-best lists whose hidden ordering (0, 1, 0.6) over the
    features equals sentence BLEU; the log-likelihood prefers mid-quality
    hypotheses so the baseline is clearly beatable."""
    rng = rng_stream(seed)
    vocab = [f"tok{i}" for i in range(50)]
    lines = []
    references = []
    feat_rows = {}
    for seg in range(n_segments):
        ref = [vocab[i] for i in rng.integers(0, 50, size=9)]
        references.append(ref)
        entries = []
        for j in range(n_hyps):
            hyp = list(ref)
            for k in rng.choice(9, size=min(j, 9), replace=False):
                hyp[k] = vocab[rng.integers(0, 50)]
            ll = -0.4 * abs(j - 3) + float(rng.uniform(-0.1, 0.1))
            nuisance = float(rng.uniform(-1, 1))
            bleu = sentence_bleu(hyp, ref)
            feats = np.array([ll, bleu + 0.3 * nuisance, -0.5 * nuisance])
            entries.append((hyp, ll, feats))
        for hyp, ll, feats in [entries[i] for i in rng.permutation(n_hyps)]:
            lines.append(f"{seg} ||| {' '.join(hyp)} ||| {ll!r}")
            feat_rows.setdefault(seg, []).append(feats)
    path.write_text("\n".join(lines) + "\n")
    return references, feat_rows


def test_c08_reranking_end_to_end(tmp_path):
    nbest_path = tmp_path / "dev.nbest"
    dev_refs, dev_feats = write_separable_benchmark(nbest_path, 60, 8, seed=81)
    dev_lists = parse_nbest(nbest_path)
    for nb in dev_lists:
        for entry, feats in zip(nb.entries, dev_feats[nb.segment_id]):
            entry.features = feats

    test_path = tmp_path / "test.nbest"
    test_refs, test_feats = write_separable_benchmark(test_path, 60, 8, seed=82)
    test_lists = parse_nbest(test_path)
    for nb in test_lists:
        for entry, feats in zip(nb.entries, test_feats[nb.segment_id]):
            entry.features = feats

    weights = mira_train(dev_lists, dev_refs, MiraConfig(epochs=30, seed=3))
    chosen = rerank_apply(test_lists, weights)

    oracle_hits = 0
    for nb, pick, ref in zip(test_lists, chosen, test_refs):
        bleus = [sentence_bleu(e.tokens, ref) for e in nb.entries]
        if sentence_bleu(pick.tokens, ref) == max(bleus):
            oracle_hits += 1
    hit_rate = oracle_hits / len(test_lists)

    baseline_w = WeightVector(("log_likelihood", "s_s", "s_i"),
                              np.array([1.0, 0.0, 0.0]))
    baseline = rerank_apply(test_lists, baseline_w)
    for nb, pick in zip(test_lists, baseline):
        by_ll = max(nb.entries, key=lambda e: e.log_likelihood)
        assert pick.log_likelihood == by_ll.log_likelihood

    bleu_base = 100 * corpus_bleu([e.tokens for e in baseline], test_refs)
    bleu_rerank = 100 * corpus_bleu([e.tokens for e in chosen], test_refs)
    gain = bleu_rerank - bleu_base
    report(8, "re-ranking end to end",
           hit_rate >= 0.95 and gain >= 5.0,
           f"oracle {hit_rate:.2%}, BLEU {bleu_base:.1f} -> {bleu_rerank:.1f}")


# -- 9: reproducibility ---------------------------------------------------------------


def test_c09_reproducibility(tmp_path):
    data = tmp_path / "data"
    assert main([
        "gen-synthetic", "--out", str(data), "--classes", "3",
        "--images-per-class", "5", "--captions-per-image", "2",
        "--val-images-per-class", "2", "--feature-dim", "24",
        "--attrs-per-class", "8", "--attrs-per-image", "2", "--seed", "5",
    ]) == 0
    payloads = []
    for run in ("a", "b"):
        out = tmp_path / f"run_{run}"
        code = main([
            "train",
            "--train-corpus", f"en={data}/train.en.txt",
            "--train-corpus", f"de={data}/train.de.txt",
            "--train-features", f"{data}/train.features.bin",
            "--val-corpus", f"en={data}/val.en.txt",
            "--val-corpus", f"de={data}/val.de.txt",
            "--val-features", f"{data}/val.features.bin",
            "--captions-per-image", "2", "--out", str(out),
            "--embed-dim", "8", "--hidden-dim", "10", "--multimodal-dim", "12",
            "--beta", "0.5", "--negatives", "2", "--dropout", "0.4",
            "--batch-size", "8", "--max-epochs", "4", "--patience", "8",
            "--learning-rate", "2e-3", "--selection-metric", "loss",
            "--seed", "17", "--no-log-timing",
        ])
        assert code == 0
        payloads.append(((out / "checkpoint.bin").read_bytes(),
                         (out / "history.jsonl").read_bytes()))
    same_ckpt = payloads[0][0] == payloads[1][0]
    same_log = payloads[0][1] == payloads[1][1]
    report(9, "reproducibility", same_ckpt and same_log,
           f"checkpoint {len(payloads[0][0])} bytes identical, logs identical")


# -- 10: unit-norm invariant -----------------------------------------------------------


def test_c10_unit_norm_invariant():
    model, _, _ = tiny_setup(0.5, hidden_dim=12, embed_dim=8, multimodal_dim=16,
                             image_feature_dim=20, vocab_tokens=30, seed=101)
    model32 = model.astype(np.float32)
    rng = rng_stream(102)
    worst = 0.0
    lang_ids = model32.language_ids
    for i in range(5000):
        lang = lang_ids[i % len(lang_ids)]
        size = int(rng.integers(1, 9))
        ids = rng.integers(2, model32.languages[lang].vocab.size, size=size)
        v = model32.encode_text(lang, ids)
        worst = max(worst, abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0))
    for _ in range(5000):
        q = rng.standard_normal(20)
        d = model32.encode_image(q)
        worst = max(worst, abs(float(np.linalg.norm(d.astype(np.float64))) - 1.0))
    report(10, "unit-norm invariant", worst < 1e-6, f"max |norm-1| {worst:.1e}")
