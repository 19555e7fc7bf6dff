import json

import numpy as np
import pytest
import torch

from helpers import corpus, make_trainer
from scenetext.batching import IGNORE, collate_decoding
from scenetext.config import RunConfig
from scenetext.model import ConfigMismatch
from scenetext.training import (
    Trainer,
    batch_indices,
    blank_question,
    finetune,
    finetune_trainer_from,
    joint_split,
    joint_train,
    load_checkpoint,
    lr_at,
    pretrain,
)


@pytest.fixture(scope="module")
def data(tiny_cfg):
    return corpus(tiny_cfg, 31, 40)


@pytest.fixture(scope="module")
def vqa(tiny_cfg):
    return corpus(tiny_cfg, 32, 40, task="vqa")


def test_lr_schedule_full_preset():
    s = RunConfig.full().schedule
    assert lr_at(0, s) == pytest.approx(2e-5)
    assert lr_at(1000, s) == pytest.approx(0.6e-4)
    assert lr_at(2000, s) == pytest.approx(1e-4)
    assert lr_at(13999, s) == pytest.approx(1e-4)
    assert lr_at(14000, s) == pytest.approx(1e-5)
    assert lr_at(19000, s) == pytest.approx(1e-6)
    assert lr_at(23999, s) == pytest.approx(1e-6)


def test_batch_indices_cover_each_epoch():
    n, b = 10, 4
    flat = [i for it in range(5) for i in batch_indices(0, it, b, n)]
    assert sorted(flat[:10]) == list(range(10)) and sorted(flat[10:20]) == list(range(10))
    assert batch_indices(0, 3, b, n) == batch_indices(0, 3, b, n)
    assert batch_indices(0, 0, b, n) != batch_indices(1, 0, b, n)


def test_joint_split_fraction():
    rows = [joint_split(0, it, 16, 0.5) for it in range(1000)]
    assert np.mean(rows) == pytest.approx(0.5, abs=0.02)
    assert sum(joint_split(0, 0, 16, 0.0)) == 0 and sum(joint_split(0, 0, 16, 1.0)) == 16


def test_same_seed_same_trace(tiny_cfg, data):
    cfg = tiny_cfg.updated({"model": {"dropout": 0.1}})
    a = make_trainer(cfg, data, mode="caption")
    b = make_trainer(cfg, data, mode="caption")
    ta = [a.pretrain_step(data) for _ in range(10)]
    torch.rand(3)  # unrelated use of the global generator must not matter
    tb = [b.pretrain_step(data) for _ in range(10)]
    assert [r["loss"] for r in ta] == [r["loss"] for r in tb]
    c = make_trainer(cfg.updated({"train": {"seed": 1}}), data, mode="caption")
    assert [c.pretrain_step(data)["loss"] for _ in range(10)] != [r["loss"] for r in ta]


def test_worker_count_does_not_change_instances(tiny_cfg, data):
    one = make_trainer(tiny_cfg, data, mode="caption")
    four = make_trainer(tiny_cfg.updated({"train": {"workers": 4}}), data, mode="caption")
    a = one.pretrain_batch(data, list(range(12)), 5)
    b = four.pretrain_batch(data, list(range(12)), 5)
    for k in ("txt_ids", "mlm_labels", "itm_labels", "rpp_labels"):
        assert torch.equal(getattr(a, k), getattr(b, k))


def test_zero_learning_rate_freezes_model(tiny_cfg, data):
    cfg = tiny_cfg.updated({"schedule": {"base_lr": 0.0}})
    trainer = make_trainer(cfg, data, mode="caption")
    before = {k: v.clone() for k, v in trainer.model.state_dict().items()}
    probe = trainer.pretrain_batch(data, list(range(8)), 7)
    trainer.model.eval()
    l0 = trainer.model.pretrain_losses(probe)["mlm"].item()
    for _ in range(5):
        trainer.pretrain_step(data)
    trainer.model.eval()
    assert trainer.model.pretrain_losses(probe)["mlm"].item() == pytest.approx(l0, rel=1e-6)
    assert all(torch.equal(before[k], v) for k, v in trainer.model.state_dict().items())


def test_resume_is_bitwise_identical(tiny_cfg, data, tmp_path):
    cfg = tiny_cfg.updated({"train": {"float64": True}, "model": {"dropout": 0.1}})
    straight = make_trainer(cfg, data, mode="caption")
    for _ in range(5):
        straight.pretrain_step(data)
    straight.save(tmp_path / "ck.pt", "pretrain")
    tail = [straight.pretrain_step(data)["loss"] for _ in range(5)]

    resumed = Trainer.from_checkpoint(tmp_path / "ck.pt", cfg)
    assert resumed.iteration == 5
    again = [resumed.pretrain_step(data)["loss"] for _ in range(5)]
    assert again == tail
    for (k, v), w in zip(straight.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(v, w), k


def test_checkpoint_mismatch(tiny_cfg, data, tmp_path):
    trainer = make_trainer(tiny_cfg, data, mode="caption")
    trainer.save(tmp_path / "ck.pt", "pretrain")
    wider = tiny_cfg.updated({"model": {"hidden_size": 64}})
    with pytest.raises(ConfigMismatch, match="model"):
        load_checkpoint(tmp_path / "ck.pt", wider)
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "bad.pt")
    # a schedule change is fine for fine-tuning
    load_checkpoint(tmp_path / "ck.pt", tiny_cfg.updated({"schedule": {"base_lr": 1e-5}}))


def test_pretrain_keeps_best_heldout_state(tiny_cfg, data):
    cfg = tiny_cfg.updated({"train": {"eval_interval": 2}})
    trainer = make_trainer(cfg, data, mode="caption")
    result = pretrain(trainer, data, iters=4)
    assert len(result.history) == 4 and [e["iter"] for e in result.evals] == [2, 4]
    best = max(result.evals, key=lambda e: e["eval"]["combined"])
    assert result.best_metrics == best["eval"]
    assert result.best_state["iteration"] == best["iter"]


def test_run_dir_artifacts(tiny_cfg, data, tmp_path):
    cfg = tiny_cfg.updated({"train": {"eval_interval": 2, "checkpoint_interval": 2}})
    trainer = make_trainer(cfg, data, mode="caption", run_dir=tmp_path)
    pretrain(trainer, data, iters=4)
    assert {p.name for p in (tmp_path / "checkpoints").iterdir()} == {"best.pt", "last.pt"}
    assert (tmp_path / "config.yaml").exists()
    log = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in log if "loss" in r] == [0, 1, 2, 3]


def test_finetune_from_random_and_from_pretrained(tiny_cfg, data, vqa):
    trainer = make_trainer(tiny_cfg, data + vqa, mode="caption")
    pretrain(trainer, data, iters=2, heldout=[])
    state = trainer.state("pretrain")
    ft = finetune_trainer_from(state, tiny_cfg, vqa, "vqa")
    for name, p in ft.model.named_parameters():
        if name.startswith("mm_encoder") or name.startswith("tok_emb"):
            assert torch.equal(p, trainer.model.state_dict()[name]), name
    assert not torch.equal(ft.model.vocab_head.weight[:3], trainer.model.vocab_head.weight[:3])
    baseline = finetune_trainer_from(None, tiny_cfg, vqa, "vqa")
    result = finetune(baseline, vqa, "vqa", iters=3, val=vqa[:5])
    assert len(result.history) == 3 and "accuracy" in result.evals[-1]["eval"]


def test_caption_mode_blanks_question(tiny_cfg, data):
    trainer = finetune_trainer_from(None, tiny_cfg, data, "caption")
    seen = []
    original = trainer.decoding_batch

    def spy(samples, mode):
        seen.extend(samples)
        return original(samples, mode)

    trainer.decoding_batch = spy
    finetune(trainer, data, "caption", iters=2)
    assert seen and all(s.extended_text.question == () for s in seen)
    assert blank_question(data[0]).extended_text.objects == data[0].extended_text.objects


def test_decoding_targets(tiny_cfg, vqa):
    trainer = make_trainer(tiny_cfg, vqa)
    s = vqa[0]
    batch = collate_decoding([s], trainer.text_vocab, trainer.answer_vocab, trainer.obj_dim, trainer.ocr_dim, "vqa", 12)
    V = len(trainer.answer_vocab)
    j = s.ocr_words.index(s.answers[0])
    assert batch.dec_targets[0, 0, V + j] == 1 and batch.dec_targets[0, 0, trainer.answer_vocab.id(s.answers[0])] == 1
    assert batch.dec_targets[0, 1, trainer.answer_vocab.end_id] == 1
    assert batch.prev_inds[0].tolist() == [trainer.answer_vocab.begin_id, V + j]


def _same_model(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()))


def test_joint_fraction_zero_is_finetune(tiny_cfg, vqa):
    cfg = tiny_cfg.updated({"train": {"joint_pretrain_fraction": 0.0}})
    a, b = make_trainer(cfg, vqa), make_trainer(cfg, vqa)
    joint_train(a, vqa, "vqa", iters=3)
    finetune(b, vqa, "vqa", iters=3)
    assert [r["answer"] for r in a.history] == [r["answer"] for r in b.history]
    assert _same_model(a, b)


def test_joint_fraction_one_is_pretrain(tiny_cfg, vqa):
    cfg = tiny_cfg.updated({"train": {"joint_pretrain_fraction": 1.0}})
    a, b = make_trainer(cfg, vqa), make_trainer(cfg, vqa)
    joint_train(a, vqa, "vqa", iters=3)
    pretrain(b, vqa, iters=3, heldout=[])
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    assert _same_model(a, b)


def test_joint_half_split(tiny_cfg, vqa):
    trainer = make_trainer(tiny_cfg, vqa)
    rec = trainer.joint_step(vqa, "vqa")
    assert rec["pretrain_rows"] == tiny_cfg.schedule.batch_size // 2
    assert {"mlm", "itm", "rpp", "answer"} <= set(rec)


def test_iteration_cap_from_config(tiny_cfg, vqa):
    cfg = tiny_cfg.updated({"schedule": {"max_iters": 3, "lr_steps": [1], "warmup_iters": 1}})
    trainer = make_trainer(cfg, vqa)
    finetune(trainer, vqa, "vqa")
    assert trainer.iteration == 3


def test_mlm_labels_only_on_masked_positions(tiny_cfg, data):
    trainer = make_trainer(tiny_cfg, data, mode="caption")
    inst = trainer.pretrain_instances(data, list(range(8)), 3)
    batch = trainer.pretrain_batch(data, list(range(8)), 3)
    for b, x in enumerate(inst):
        assert (batch.mlm_labels[b] != IGNORE).nonzero().flatten().tolist() == sorted(set(x.mask_positions))


def test_lr_monotone_by_phase():
    s = RunConfig.full().schedule
    warm = [lr_at(i, s) for i in range(0, s.warmup_iters + 1, 50)]
    after = [lr_at(i, s) for i in range(s.warmup_iters, s.max_iters, 250)]
    assert all(a <= b for a, b in zip(warm, warm[1:]))
    assert all(a >= b for a, b in zip(after, after[1:]))


def test_gradient_norm_clipped(tiny_cfg, data):
    cfg = tiny_cfg.updated({"schedule": {"base_lr": 1e-2}})
    trainer = make_trainer(cfg, data, mode="caption")
    norms = []
    step = trainer.optimizer.step

    def checked_step(*a, **kw):
        grads = [p.grad for p in trainer.model.parameters() if p.grad is not None]
        norms.append(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])).item())
        return step(*a, **kw)

    trainer.optimizer.step = checked_step
    records = [trainer.pretrain_step(data) for _ in range(5)]
    assert max(norms) <= 0.25 + 1e-6
    assert any(r["grad_norm"] > 0.25 for r in records)  # clipping was actually exercised
