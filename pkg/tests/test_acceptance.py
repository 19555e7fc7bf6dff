"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (see ``criterion`` in conftest.py); the
lines are printed together at the end of the pytest run.  Long training runs
are marked ``slow``; deselect them with ``-m "not slow"``.
"""

from __future__ import annotations

import string
import time

import numpy as np
import pytest
import torch

from helpers import corpus, finite_difference_check, make_trainer
from oracles import GRID, anls_oracle, cider_oracle, phoc_oracle, raster_relation, vqa_accuracy_oracle
from scenetext.config import RunConfig
from scenetext.coref import analyze
from scenetext.corpus import build_corpus, read_records
from scenetext.geometry import BoundingBox, classify_relation, is_on
from scenetext.metrics import anls, cider, vqa_accuracy
from scenetext.samples import ItmLabel, apply_mlm_mask, build_pretrain_instance, derive_rng
from scenetext.text import DEFAULT_BIGRAMS, MASK, ExtendedText, Vocabulary, phoc_encode
from scenetext.training import (
    Trainer,
    finetune,
    finetune_trainer_from,
    model_config_variant,
    pretrain,
    text_vocabulary,
)

VARIANTS = ((3, 4), (0, 12))
SEEDS = (0, 1, 2)


def variant_cfg(base: RunConfig, text_layers: int, mm_layers: int, **over) -> RunConfig:
    cfg = base.updated({"model": model_config_variant(base.model, text_layers, mm_layers).model_dump()})
    return cfg.updated(over) if over else cfg


# ---------------------------------------------------------------- 1. MLM statistics


def test_c01_mlm_statistics(criterion, desk_cfg):
    start = time.perf_counter()
    data = corpus(desk_cfg, 0, 200)
    vocab = Vocabulary.build(s.extended_text.tokens for s in data)
    words = vocab.to_list()
    rng = np.random.default_rng(1)
    tokens = masked = as_mask = as_random = as_kept = 0
    while tokens < 100_000:
        text = ExtendedText(tuple(rng.choice(words, size=250)))
        out, pos, _ = apply_mlm_mask(text, vocab, rng)
        tokens += len(text)
        masked += len(pos)
        for p in pos:
            if out.tokens[p] == MASK:
                as_mask += 1
            elif out.tokens[p] == text.tokens[p]:
                as_kept += 1
            else:
                as_random += 1
    elapsed = time.perf_counter() - start
    frac = masked / tokens
    # random replacement hits the original word 1/|V| of the time and then looks unchanged
    hit = 0.1 / len(words)
    fr = (as_mask / masked, as_random / masked, as_kept / masked)
    ok = (
        0.145 <= frac <= 0.155
        and abs(fr[0] - 0.8) <= 0.01
        and abs(fr[1] - (0.1 - hit)) <= 0.01
        and abs(fr[2] - (0.1 + hit)) <= 0.01
        and elapsed < 30
    )
    criterion(1, ok, f"tokens={tokens} masked={frac:.4f} mask/random/kept={fr[0]:.3f}/{fr[1]:.3f}/{fr[2]:.3f} "
                     f"({elapsed:.1f}s)")
    assert ok


# ---------------------------------------------------------------- 2. ITM statistics


def test_c02_itm_statistics(criterion, desk_cfg):
    start = time.perf_counter()
    data = corpus(desk_cfg, 1, 200)
    vocab = Vocabulary.build(s.extended_text.tokens for s in data)
    polluted = masked_polluted = 0
    n = 10_000
    for i in range(n):
        inst = build_pretrain_instance(data[i % len(data)], data, vocab, derive_rng(2, i))
        if inst.itm_label is ItmLabel.POLLUTED:
            polluted += 1
            masked_polluted += bool(inst.mask_positions)
    elapsed = time.perf_counter() - start
    ok = 0.49 <= polluted / n <= 0.51 and masked_polluted == 0 and elapsed < 30
    criterion(2, ok, f"polluted={polluted / n:.4f} over {n}, polluted-with-masks={masked_polluted} ({elapsed:.1f}s)")
    assert ok


# ---------------------------------------------------------------- 3. RPP geometry


def _grid_pair(rng):
    def rand_box(side):
        w, h = rng.integers(1, side, size=2)
        x, y = rng.integers(0, GRID - w + 1), rng.integers(0, GRID - h + 1)
        return (int(x), int(y), int(x + w), int(y + h))

    a = rand_box(400)
    kind = rng.integers(3)
    if kind == 0:
        return a, rand_box(400)
    if kind == 1:
        return rand_box(60), rand_box(60)
    w, h = max(1, (a[2] - a[0]) // 2), max(1, (a[3] - a[1]) // 2)
    x = int(np.clip(rng.integers(a[0] - w, a[2] + 1), 0, GRID - w))
    y = int(np.clip(rng.integers(a[1] - h, a[3] + 1), 0, GRID - h))
    b = (x, y, x + int(rng.integers(1, w + 1)), y + int(rng.integers(1, h + 1)))
    return (a, b) if rng.random() < 0.5 else (b, a)


def test_c03_rpp_geometry(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    agree = on_agree = 0
    labels = set()
    n = 10_000
    for _ in range(n):
        a, b = _grid_pair(rng)
        want = raster_relation(a, b)
        ba, bb = BoundingBox(*(v / GRID for v in a)), BoundingBox(*(v / GRID for v in b))
        agree += classify_relation(ba, bb).value == want
        on_agree += is_on(ba, bb) == (want == "On")
        labels.add(want)
    elapsed = time.perf_counter() - start
    ok = agree == n and on_agree == n and elapsed < 60
    criterion(3, ok, f"label agreement {agree}/{n}, binary agreement {on_agree}/{n}, "
                     f"{len(labels)} classes seen ({elapsed:.1f}s)")
    assert ok


# ---------------------------------------------------------------- 4. PHOC


def test_c04_phoc(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    letters = list(string.ascii_lowercase + string.digits)
    words = ["".join(rng.choice(letters, size=int(rng.integers(1, 15)))) for _ in range(100)]
    equal = sum(np.array_equal(phoc_encode(w), phoc_oracle(w, list(DEFAULT_BIGRAMS))) for w in words)
    empty = phoc_encode("")
    elapsed = time.perf_counter() - start
    ok = phoc_encode("word").shape == (604,) and equal == 100 and empty.shape == (604,) and not empty.any() and elapsed < 5
    criterion(4, ok, f"dim={phoc_encode('word').shape[0]} oracle agreement {equal}/100, empty word zero={not empty.any()} "
                     f"({elapsed:.2f}s)")
    assert ok


# ---------------------------------------------------------------- 5. metric oracles


def test_c05_metrics(criterion):
    fixed = (
        vqa_accuracy("cola", ["cola"] * 3 + ["stop"] * 7) == 0.9,
        abs(anls("hello", ["helo"]) - 0.8) <= 1e-9,
    )
    hand = ["a red stop sign on the corner", "two cups of hot coffee"]
    self_match = cider(hand, [[c] for c in hand])[1]
    cider_ok = all(abs(s - 10.0) <= 1e-6 for s in self_match)

    rng = np.random.default_rng(5)
    words = ["cola", "stop", "exit", "open", "sale", "taxi", "hotel", "bank", "red", "sign"]
    agree = [0, 0, 0]
    for _ in range(100):
        answers = list(rng.choice(words[:4], size=10))
        pred = str(rng.choice(words[:5]))
        agree[0] += abs(vqa_accuracy(pred, answers) - vqa_accuracy_oracle(pred, answers)) <= 1e-12
        a = "".join(rng.choice(list("abcde"), size=int(rng.integers(0, 9))))
        gts = ["".join(rng.choice(list("abcde"), size=int(rng.integers(1, 9)))) for _ in range(3)]
        agree[1] += abs(anls(a, gts) - anls_oracle(a, gts)) <= 1e-12
        n = int(rng.integers(1, 5))
        cands = [" ".join(rng.choice(words, size=int(rng.integers(1, 8)))) for _ in range(n)]
        refs = [[" ".join(rng.choice(words, size=int(rng.integers(1, 8)))) for _ in range(int(rng.integers(1, 4)))]
                for _ in range(n)]
        agree[2] += np.allclose(cider(cands, refs)[1], cider_oracle(cands, refs), rtol=0, atol=1e-9)
    ok = all(fixed) and cider_ok and agree == [100, 100, 100]
    criterion(5, ok, f"vqa 3-of-10={fixed[0]} anls(hello,helo)={fixed[1]} cider self-match={self_match} "
                     f"oracle agreement acc/anls/cider={agree}")
    assert ok


# ---------------------------------------------------------------- 6. gradient checks


def _gradient_errors(cfg: RunConfig) -> dict[str, float]:
    cfg = cfg.updated({"train": {"float64": True}, "model": {"dropout": 0.0}})
    data = corpus(cfg, 6, 16)
    trainer = make_trainer(cfg, data, mode="caption")
    model = trainer.model.eval()
    batch = trainer.pretrain_batch(data, list(range(8)), 6)
    out = {}
    for task, module in (("mlm", "mlm_head"), ("itm", "itm_head"), ("rpp", "rpp_head"),
                         ("fusion", "mm_encoder.layers.0")):

        def loss(task=task):
            losses = model.pretrain_losses(batch)
            return losses["mlm"] + losses["itm"] + losses["rpp"] if task == "fusion" else losses[task]

        params = dict(model.get_submodule(module).named_parameters())
        out[task] = max(finite_difference_check(model, loss, params, n=10, h=1e-5, seed=len(out)))
    return out


GRADIENTS: dict[tuple[int, int], dict[str, float]] = {}


def test_c06_gradient_checks(criterion, desk_cfg):
    for t, m in VARIANTS:
        GRADIENTS[(t, m)] = _gradient_errors(variant_cfg(desk_cfg, t, m))
    worst = max(e for errs in GRADIENTS.values() for e in errs.values())
    ok = worst < 1e-4
    detail = "; ".join(f"({t},{m}) " + " ".join(f"{k}={v:.1e}" for k, v in GRADIENTS[(t, m)].items())
                       for t, m in VARIANTS)
    criterion(6, ok, f"max relative error {worst:.1e} (limit 1e-4): {detail}")
    assert ok


# ---------------------------------------------------------------- 7. training smoke


SMOKE: dict[tuple[int, int, int], dict] = {}


def _smoke(cfg: RunConfig, seed: int) -> dict:
    cfg = cfg.updated({"train": {"seed": seed}})
    data = corpus(cfg, seed, 500)
    trainer = make_trainer(cfg, data, mode="caption")
    start = time.perf_counter()
    result = pretrain(trainer, data, iters=200)
    elapsed = time.perf_counter() - start
    drops = {}
    finite = True
    for k in ("mlm", "itm", "rpp"):
        trace = np.array([r[k] for r in result.history])
        finite &= bool(np.isfinite(trace).all())
        drops[k] = 1 - trace[-20:].mean() / trace[:20].mean()
    return {"drops": drops, "finite": finite, "seconds": elapsed}


def _smoke_ok(run: dict) -> bool:
    return run["finite"] and min(run["drops"].values()) >= 0.20 and run["seconds"] < 600


@pytest.mark.slow
def test_c07_training_smoke(criterion, desk_cfg):
    for t, m in VARIANTS:
        for seed in SEEDS:
            SMOKE[(t, m, seed)] = _smoke(variant_cfg(desk_cfg, t, m), seed)
    ok = all(_smoke_ok(r) for r in SMOKE.values())
    detail = "; ".join(
        f"({t},{m}) s{seed}: " + "/".join(f"{r['drops'][k]:.0%}" for k in ("mlm", "itm", "rpp")) + f" {r['seconds']:.0f}s"
        for (t, m, seed), r in SMOKE.items()
    )
    criterion(7, ok, f"200-iter moving-average drop mlm/itm/rpp (need >=20%, finite, <600s): {detail}")
    assert ok


# ---------------------------------------------------------------- 8. pretraining direction of effect


def _vqa_accuracy(trainer: Trainer, val) -> float:
    return trainer.evaluate(val, "vqa", ["accuracy"])["accuracy"].aggregate


def _pretrained_vs_baseline(base: RunConfig, seed: int, pre_iters: int = 1000, ft_iters: int = 1000) -> tuple[float, float]:
    """Same total budget: (pre_iters pretrain + ft_iters finetune) against (pre_iters + ft_iters) finetune-only."""
    cfg = base.updated({"train": {"seed": seed}})
    train = corpus(cfg, 100 + seed, 500, task="vqa", prefix="tr")
    val = corpus(cfg, 200 + seed, 300, task="vqa", prefix="va")
    pre = corpus(cfg, 300 + seed, 4000, task="pretrain", prefix="pt")
    text = text_vocabulary(train + val + pre)

    baseline = finetune_trainer_from(None, cfg, train, "vqa", text_vocab=text)
    finetune(baseline, train, "vqa", iters=pre_iters + ft_iters)

    pre_trainer = Trainer(cfg, text, baseline.answer_vocab)
    state = pretrain(pre_trainer, pre, iters=pre_iters).best_state
    tuned = finetune_trainer_from(state, cfg, train, "vqa", text_vocab=text)
    finetune(tuned, train, "vqa", iters=ft_iters)
    return _vqa_accuracy(tuned, val), _vqa_accuracy(baseline, val)


@pytest.mark.slow
def test_c08_pretraining_direction(criterion, desk_cfg):
    start = time.perf_counter()
    runs = {seed: _pretrained_vs_baseline(desk_cfg, seed) for seed in SEEDS}
    elapsed = time.perf_counter() - start
    gain = 100 * np.mean([pre - base for pre, base in runs.values()])
    ok = gain >= 5.0 and elapsed < 1800
    detail = "; ".join(f"s{s}: pretrain+finetune {pre:.3f} vs finetune-only {base:.3f}" for s, (pre, base) in runs.items())
    criterion(8, ok, f"mean gain {gain:+.1f} points (need >= +5, <1800s): {detail} ({elapsed:.0f}s)")
    assert ok


# ---------------------------------------------------------------- 9. coreference direction


@pytest.mark.slow
def test_c09_coreference_direction(criterion, desk_cfg):
    runs = {}
    for seed in SEEDS:
        cfg = desk_cfg.updated({"train": {"seed": seed}})
        data = corpus(cfg, 10 + seed, 500)
        val = corpus(cfg, 50 + seed, 100, prefix="v")
        trainer = make_trainer(cfg, data + val, mode="caption")
        random_score = analyze(trainer.model, val, trainer.text_vocab)["word->ocr"]["score"]
        pretrain(trainer, data, iters=200)
        runs[seed] = (analyze(trainer.model, val, trainer.text_vocab)["word->ocr"]["score"], random_score)
    wins = sum(pre > rand for pre, rand in runs.values())
    ok = wins == len(SEEDS)
    detail = "; ".join(f"s{s}: pretrained {pre:.4f} vs random {rand:.4f}" for s, (pre, rand) in runs.items())
    criterion(9, ok, f"word->ocr wins {wins}/{len(SEEDS)}: {detail}")
    assert ok


# ---------------------------------------------------------------- 10. variant parity


@pytest.mark.slow
def test_c10_variant_parity(criterion, desk_cfg):
    if not GRADIENTS:
        for t, m in VARIANTS:
            GRADIENTS[(t, m)] = _gradient_errors(variant_cfg(desk_cfg, t, m))
    if not SMOKE:
        for t, m in VARIANTS:
            for seed in SEEDS:
                SMOKE[(t, m, seed)] = _smoke(variant_cfg(desk_cfg, t, m), seed)
    data = corpus(desk_cfg, 7, 4)
    shapes = {}
    for t, m in VARIANTS:
        trainer = make_trainer(variant_cfg(desk_cfg, t, m), data, mode="caption")
        batch = trainer.pretrain_batch(data, list(range(4)), 0)
        fused, _ = trainer.model.eval()(batch)
        shapes[(t, m)] = tuple(tuple(getattr(fused, k).shape) for k in ("text", "obj", "ocr", "dec"))
    per_variant = {
        v: max(GRADIENTS[v].values()) < 1e-4 and all(_smoke_ok(SMOKE[(*v, s)]) for s in SEEDS) for v in VARIANTS
    }
    same = len(set(shapes.values())) == 1
    ok = all(per_variant.values()) and same
    criterion(10, ok, f"criteria 6-7 per variant {per_variant}; fused shapes identical={same} {shapes[VARIANTS[0]]}")
    assert ok


# ---------------------------------------------------------------- 11. filter fixture


def test_c11_filter_fixture(criterion, fixtures_dir, builder):
    result = build_corpus(read_records(fixtures_dir / "raw_records.jsonl"), builder=builder)
    reasons = {k: v for k, v in result.stats["filter_reasons"].items() if k != "kept"}
    ok = len(result.samples) == 4 and reasons == {"no_text": 3, "watermark_only": 2, "tiny_only": 1}
    criterion(11, ok, f"kept {len(result.samples)} of {result.stats['input_records']}, reasons {reasons}")
    assert ok


# ---------------------------------------------------------------- 12. determinism and resume


def test_c12_determinism_and_resume(criterion, desk_cfg, tmp_path):
    data = corpus(desk_cfg, 12, 64)
    first = make_trainer(desk_cfg, data, mode="caption")
    second = make_trainer(desk_cfg, data, mode="caption")
    trace_a = [first.pretrain_step(data)["loss"] for _ in range(10)]
    trace_b = [second.pretrain_step(data)["loss"] for _ in range(10)]
    same_trace = trace_a == trace_b

    cfg = desk_cfg.updated({"train": {"float64": True}})
    straight = make_trainer(cfg, data, mode="caption")
    for _ in range(5):
        straight.pretrain_step(data)
    straight.save(tmp_path / "ck.pt", "pretrain")
    tail = [straight.pretrain_step(data)["loss"] for _ in range(5)]
    resumed = Trainer.from_checkpoint(tmp_path / "ck.pt", cfg)
    again = [resumed.pretrain_step(data)["loss"] for _ in range(5)]
    params_equal = all(
        torch.equal(a, b) for a, b in zip(straight.model.state_dict().values(), resumed.model.state_dict().values())
    )
    ok = same_trace and again == tail and params_equal
    criterion(12, ok, f"10-iter traces identical={same_trace}; 64-bit resume losses identical={again == tail}, "
                      f"parameters identical={params_equal}")
    assert ok
