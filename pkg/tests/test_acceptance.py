"""Acceptance checks, one test (or group of tests) per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary lists one
PASS/FAIL line per criterion.
"""
import filecmp
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as sps

from posmask.cli import main
from posmask.corpus import WhitespaceTokenizer
from posmask.finetune import (
    EntitySpan, decode_entities, evaluate, finetune, load_funsd, score_entities,
)
from posmask.gradcheck import gradcheck_config
from posmask.masking import MaskConfig, apply_position_mask, apply_token_mask, restore, sample_mask_plan
from posmask.model import combined_loss, init_params, pretrain_losses, system_config
from posmask.stats import anova_oneway, tukey_hsd
from posmask.synthetic import layout_corpus, synthetic_vocab, write_funsd_fixtures, write_hocr_fixtures
from posmask.checkpoint import load_checkpoint
from posmask.training import SpecialIds, TrainConfig, make_pretrain_batch, pretrain

SYSTEMS = ["baseline", "x1_ce", "x1_reg", "full_ce", "full_reg"]


def c(number, title):
    return pytest.mark.criterion(number, title)


# ------------------------------------------------------------------ 1


@c(1, "gradient correctness, 5 systems, rel. err < 1e-4, < 5 min")
def test_gradients_match_finite_differences(record_property):
    start = time.perf_counter()
    errs = {}
    for name in SYSTEMS:
        cfg = system_config(name, vocab_size=50, hidden_size=16, num_layers=2, num_heads=2,
                            grid_max=100, max_seq_len=16)
        report = gradcheck_config(cfg, seed=0, seq_len=16)
        errs[name] = report.max_rel_err
        assert len(report.checks) == len(init_params(cfg, np.random.default_rng(0)))
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {elapsed:.0f}s")
    assert max(errs.values()) < 1e-4
    assert elapsed < 300


# ------------------------------------------------------------------ 2


def _mean_losses(cfg, pages, n_batches=4):
    v = synthetic_vocab(cfg.vocab_size - 5)
    params = init_params(cfg, np.random.default_rng([0, 0]))
    mc = MaskConfig(variant=cfg.pm_variant)
    out = []
    for s in range(n_batches):
        batch, _ = make_pretrain_batch(pages, cfg, mc, SpecialIds.from_vocab(v), np.random.default_rng(s))
        mlm, pm = pretrain_losses(params, cfg, batch)
        out.append((mlm.item(), pm.item()))
    return np.mean(out, axis=0)


@pytest.mark.parametrize("m", [100, 1000])
@pytest.mark.parametrize("name", ["x1_ce", "full_ce"])
@c(2, "init L_MLM ~ ln|V|, classification L_PM ~ ln(m+1), within 10%")
def test_initial_losses(name, m, record_property):
    v = synthetic_vocab(45)
    cfg = system_config(name, vocab_size=len(v), hidden_size=64, num_layers=2, num_heads=4,
                        grid_max=m, max_seq_len=32)
    mlm, pm = _mean_losses(cfg, layout_corpus(16, v, m=m, seed=3))
    record_property("detail", f"{name} m={m}: {mlm / math.log(len(v)):.3f}, {pm / math.log(m + 1):.3f}")
    assert abs(mlm - math.log(len(v))) <= 0.1 * math.log(len(v))
    assert abs(pm - math.log(m + 1)) <= 0.1 * math.log(m + 1)


# ------------------------------------------------------------------ 3


def _eval_losses(params, cfg, pages, vocab, seeds=range(5)):
    mc = MaskConfig(variant=cfg.pm_variant)
    sp = SpecialIds.from_vocab(vocab)
    vals = []
    for s in seeds:
        batch, _ = make_pretrain_batch(pages, cfg, mc, sp, np.random.default_rng(1000 + s))
        mlm, pm = pretrain_losses(params, cfg, batch)
        vals.append((mlm.item(), pm.item(), combined_loss(mlm, pm, cfg.lam).item()))
    return np.mean(vals, axis=0)


def _desk_config(name, vocab):
    return system_config(name, vocab_size=len(vocab), hidden_size=64, num_layers=2, num_heads=4,
                         max_seq_len=32, grid_max=1000)


@pytest.mark.parametrize("name", SYSTEMS)
@c(3, "learning: 200 steps halve L_MLM and L_PM; 2 pages overfit to < 0.1 L0 in 300 steps; < 10 min")
def test_learning_capability(name, record_property):
    start = time.perf_counter()
    v = synthetic_vocab(40)
    cfg = _desk_config(name, v)
    pages = layout_corpus(50, v, m=1000, tokens_per_page=24, seed=0)
    probe = pages[:16]
    before = _eval_losses(init_params(cfg, np.random.default_rng([0, 0])), cfg, probe, v)
    res = pretrain(pages, v, cfg, MaskConfig(variant=cfg.pm_variant),
                   TrainConfig(learning_rate=1e-3, batch_size=8, max_steps=200, seed=0))
    after = _eval_losses(res.params, cfg, probe, v)
    ratio_mlm = after[0] / before[0]
    ratio_pm = after[1] / before[1] if cfg.pm_variant != "none" else 0.0

    tiny = layout_corpus(2, v, m=1000, tokens_per_page=24, seed=5)
    l0 = _eval_losses(init_params(cfg, np.random.default_rng([0, 0])), cfg, tiny, v)[2]
    fit = pretrain(tiny, v, cfg, MaskConfig(variant=cfg.pm_variant),
                   TrainConfig(learning_rate=3e-3, batch_size=2, max_steps=300, seed=0))
    ratio_fit = _eval_losses(fit.params, cfg, tiny, v)[2] / l0
    elapsed = time.perf_counter() - start
    pm_text = f"x{ratio_pm:.2f}" if cfg.pm_variant != "none" else "n/a"
    record_property("detail", f"{name}: mlm x{ratio_mlm:.2f} pm {pm_text} overfit x{ratio_fit:.3f}")
    assert ratio_mlm <= 0.5
    assert ratio_pm <= 0.5
    assert ratio_fit < 0.1
    assert elapsed < 600 / len(SYSTEMS)


# ------------------------------------------------------------------ 4


@c(4, "masking statistics within 3 sigma; masked coords = m; replay exact")
def test_masking_statistics(record_property):
    n, p = 10_000, 0.15
    rng = np.random.default_rng(0)
    ids = rng.integers(5, 50, size=n)
    lo = rng.integers(0, 900, size=(n, 2))
    boxes = np.concatenate([lo, lo + rng.integers(0, 100, size=(n, 2))], axis=1)
    plan = sample_mask_plan(ids, boxes, np.ones(n, bool), MaskConfig(p, p, "full"), 0, 50)
    observed = {
        "J": (len(plan.token_idx) / n, p),
        "K": (len(plan.position_idx) / n, p),
        "JK": (len(plan.overlap) / n, p * p),
    }
    detail = []
    for key, (frac, q) in observed.items():
        sigma = math.sqrt(q * (1 - q) / n)
        detail.append(f"{key} {frac:.4f} ({(frac - q) / sigma:+.2f} sigma)")
        assert abs(frac - q) <= 3 * sigma, key
    record_property("detail", ", ".join(detail))

    for variant, coords in [("x1", [0]), ("x1y1", [0, 1]), ("x2y2", [2, 3]), ("full", [0, 1, 2, 3])]:
        plan = sample_mask_plan(ids, boxes, np.ones(n, bool), MaskConfig(p, p, variant), 1, 50)
        mb = apply_position_mask(boxes, plan, 1000)
        assert (mb[np.ix_(plan.position_idx, coords)] == 1000).all()
        mi = apply_token_mask(ids, plan, 4)
        ri, rb = restore(mi, mb, plan)
        assert ri.tobytes() == ids.astype(np.int64).tobytes()
        assert rb.tobytes() == boxes.astype(np.int64).tobytes()


# ------------------------------------------------------------------ 5


def brute_force_prf(gold_pages, pred_pages):
    tp = n_pred = n_gold = 0
    for gold, pred in zip(gold_pages, pred_pages):
        n_pred += len(pred)
        n_gold += len(gold)
        for pspan in pred:
            if any(g.label == pspan.label and g.start == pspan.start and g.end == pspan.end for g in gold):
                tp += 1
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def random_tags(rng, n):
    labels = ["HEADER", "QUESTION", "ANSWER", "OTHER"]
    return [("O" if k == 0 else f"{'BI'[k - 1]}-{labels[rng.integers(0, 4)]}")
            for k in rng.integers(0, 3, size=n)]


@c(5, "entity P/R/F1 equals brute-force span matcher; hand fixture 0.5/0.5/0.5")
def test_entity_scores_match_brute_force(record_property):
    rng = np.random.default_rng(0)
    gold, pred = [], []
    for _ in range(50):
        n = int(rng.integers(1, 25))
        g = random_tags(rng, n)
        # predictions: gold with some corruption so matches actually occur
        p = [t if rng.random() < 0.7 else random_tags(rng, 1)[0] for t in g]
        gold.append(decode_entities(g))
        pred.append(decode_entities(p))
    s = score_entities(gold, pred)
    assert (s.precision, s.recall, s.f1) == brute_force_prf(gold, pred)
    for g, p in itertools.islice(zip(gold, pred), 10):
        one = score_entities([g], [p])
        assert (one.precision, one.recall, one.f1) == brute_force_prf([g], [p])

    hand_gold = [[EntitySpan("QUESTION", 0, 1), EntitySpan("ANSWER", 3, 4)]]
    hand_pred = [[EntitySpan("QUESTION", 0, 1), EntitySpan("ANSWER", 2, 4)]]
    h = score_entities(hand_gold, hand_pred)
    assert (h.precision, h.recall, h.f1) == (0.5, 0.5, 0.5)
    record_property("detail", f"50 pages, tp={s.tp} pred={s.n_pred} gold={s.n_gold}")


# ------------------------------------------------------------------ 6

HANDBOOK = [
    [6.9, 5.4, 5.8, 4.6, 4.0],
    [8.3, 6.8, 7.8, 9.2, 6.5],
    [8.0, 10.5, 8.1, 6.9, 9.3],
    [5.8, 3.8, 6.1, 5.6, 6.2],
]


@c(6, "ANOVA/Tukey oracles: hand table F = 3, df (2, 6); worked example")
def test_statistics_oracles(record_property):
    a = anova_oneway([[1, 2, 3], [2, 3, 4], [3, 4, 5]])
    assert a.f == pytest.approx(3.0, abs=1e-12) and (a.df_between, a.df_within) == (2, 6)

    a = anova_oneway(HANDBOOK)
    # printed table: SS 38.820 / 21.292, df 3 / 16, F 9.724
    assert (round(a.ss_between, 3), round(a.ss_within, 3), round(a.f, 3)) == (38.820, 21.292, 9.724)
    ref = sps.f_oneway(*HANDBOOK)
    assert abs(a.f - ref.statistic) < 1e-6 and abs(a.p - ref.pvalue) < 1e-6
    t = tukey_hsd(HANDBOOK, alpha=0.05)
    tref = sps.tukey_hsd(*HANDBOOK)
    for pr in t.pairs:
        assert abs(pr.p_adj - tref.pvalue[pr.i, pr.j]) < 1e-6
        assert pr.reject == (tref.pvalue[pr.i, pr.j] < 0.05)
    assert {(pr.i, pr.j) for pr in t.pairs if pr.reject} == {(0, 1), (0, 2), (1, 3), (2, 3)}
    record_property("detail", f"F={a.f:.6f} p={a.p:.3e}")


# ------------------------------------------------------------------ 7

PIPE_CFG = """\
model.hidden_size = 32
model.num_layers = 2
model.num_heads = 2
model.max_seq_len = 64
model.pm_loss = classification
train.learning_rate = 1e-3
train.batch_size = 4
train.max_steps = 100
finetune.learning_rate = 1e-3
finetune.batch_size = 5
"""


def _pipeline(root, vocab):
    root.mkdir()
    vocab.save(root / "vocab.txt")
    write_hocr_fixtures(root / "hocr", vocab, n_pages=20, n_blank=2)
    write_funsd_fixtures(root / "funsd", vocab, n_pages=5, seed=0)
    reports = []
    assert main(["ingest", "--input", str(root / "hocr"), "--vocab", str(root / "vocab.txt"),
                 "--min-bytes", "1800", "--grid", "1000", "--out", str(root / "corpus")]) == 0
    for system, variant in [("baseline", "none"), ("x1_ce", "x1")]:
        cfg = root / f"{system}.cfg"
        cfg.write_text(PIPE_CFG + f"mask.variant = {variant}\n")
        assert main(["pretrain", "--corpus", str(root / "corpus"), "--config", str(cfg),
                     "--out", str(root / f"pt_{system}"), "--seed", "0"]) == 0
        assert main(["finetune", "--checkpoint", str(root / f"pt_{system}/final.npz"),
                     "--data", str(root / "funsd"), "--runs", "2", "--epochs", "5", "--config", str(cfg),
                     "--out", str(root / f"ft_{system}")]) == 0
        report = root / f"{system}.tsv"
        assert main(["evaluate", "--model", str(root / f"ft_{system}"), "--data", str(root / "funsd"),
                     "--system", system, "--out", str(report)]) == 0
        reports.append(str(report))
    assert main(["stats", "--reports", *reports, "--out", str(root / "stats.tsv")]) == 0


def _tree(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


@c(7, "end-to-end CLI pipeline twice, identical outputs, < 15 min")
def test_pipeline_reproducible(tmp_path, record_property, capsys):
    start = time.perf_counter()
    v = synthetic_vocab(40)
    _pipeline(tmp_path / "a", v)
    _pipeline(tmp_path / "b", v)
    elapsed = time.perf_counter() - start

    manifest = (tmp_path / "a/corpus/manifest.tsv").read_text().splitlines()[1:]
    dropped = [row.split("\t") for row in manifest if row.endswith("dropped")]
    assert len(manifest) == 20 and len(dropped) >= 1
    assert all(int(r[2]) < 1800 for r in dropped)
    ck = load_checkpoint(tmp_path / "a/pt_x1_ce/final.npz")
    assert ck.meta["step"] == 100

    files = _tree(tmp_path / "a")
    assert files == _tree(tmp_path / "b")
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [str(f) for f in files], shallow=False)
    assert not mismatch and not errors, mismatch
    record_property("detail", f"{len(files)} files identical, {len(dropped)} dropped, {elapsed:.0f}s")
    assert elapsed < 900


# ------------------------------------------------------------------ 8


@c(8, "non-gating: position-masked model overfits position-labelled task to train F1 = 1")
def test_position_signal_smoke(tmp_path, record_property):
    v = synthetic_vocab(40)
    cfg = system_config("x1_ce", vocab_size=len(v), hidden_size=32, num_layers=2, num_heads=2, max_seq_len=64)
    pretrain(layout_corpus(20, v, seed=1), v, cfg, MaskConfig(variant="x1"),
             TrainConfig(learning_rate=1e-3, batch_size=4, max_steps=100), out_dir=tmp_path / "pt",
             tokenizer={"name": "whitespace", "lowercase": False})
    ck = load_checkpoint(tmp_path / "pt/final.npz")
    write_funsd_fixtures(tmp_path / "funsd", v, n_pages=5, seed=2)
    pages = load_funsd(tmp_path / "funsd", WhitespaceTokenizer(v), m=1000, max_len=64)
    (model, _), = finetune(ck, pages, epochs=100, runs=1,
                           train_config=TrainConfig(learning_rate=3e-3, batch_size=5))
    s = evaluate(model, pages)
    record_property("detail", f"train F1 {s.f1:.3f}")
    assert s.f1 == 1.0
