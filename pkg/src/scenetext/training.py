"""Pre-training, fine-tuning and joint training loops.

Data order, every per-instance random draw and the dropout masks are pure
functions of ``(seed, iteration, sample index)``, so a run can be resumed from any
checkpoint without replaying a data loader, and results do not depend on the
number of worker threads.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .batching import (
    Batch,
    answer_vocabulary,
    collate_decoding,
    collate_pretrain,
    text_vocabulary,
)
from .config import ModelConfig, RunConfig, ScheduleConfig
from .decoding import decode_answer
from .metrics import MetricReport, check_task_metrics, ground_truth_for, score_predictions
from .model import ConfigMismatch, FusionModel, NumericDivergence
from .samples import PretrainInstance, Sample, build_pretrain_instance, derive_rng
from .text import PHOC_DIM, Vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "scenetext-checkpoint"
CHECKPOINT_VERSION = 1
TASKS = ("pretrain", "finetune_vqa", "finetune_caption", "joint")

# stream tags for derive_rng
_ORDER, _INSTANCE, _EVAL, _SPLIT, _DROPOUT = 1, 2, 3, 4, 5


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Path | None):
        super().__init__(message)
        self.last_good = last_good


def lr_at(iteration: int, schedule: ScheduleConfig) -> float:
    """Linear warmup from ``warmup_factor * base_lr``, then step decay."""
    if iteration < schedule.warmup_iters:
        alpha = iteration / schedule.warmup_iters
        factor = schedule.warmup_factor * (1 - alpha) + alpha
    else:
        factor = 1.0
    k = sum(1 for s in schedule.lr_steps if iteration >= s)
    return schedule.base_lr * factor * schedule.lr_decay**k


def batch_indices(seed: int, iteration: int, batch_size: int, n: int) -> list[int]:
    """Indices for one iteration: consecutive slices of per-epoch seeded permutations."""
    out = []
    start = iteration * batch_size
    for pos in range(start, start + batch_size):
        epoch, k = divmod(pos, n)
        out.append(int(_permutation(seed, epoch, n)[k]))
    return out


_PERM_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    key = (seed, epoch, n)
    if key not in _PERM_CACHE:
        if len(_PERM_CACHE) > 64:
            _PERM_CACHE.clear()
        _PERM_CACHE[key] = derive_rng(seed, _ORDER, epoch).permutation(n)
    return _PERM_CACHE[key]


def joint_split(seed: int, iteration: int, batch_size: int, fraction: float) -> list[bool]:
    """Which rows of a joint-training batch take the pre-training losses."""
    k = int(round(fraction * batch_size))
    chosen = set(derive_rng(seed, _SPLIT, iteration).permutation(batch_size)[:k].tolist())
    return [i in chosen for i in range(batch_size)]


@contextmanager
def step_rng(seed: int, iteration: int):
    """Seed torch's RNG (dropout) from ``(seed, iteration)`` without disturbing the caller's RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(derive_rng(seed, _DROPOUT, iteration).integers(2**63)))
        yield


@dataclass
class RunManifest:
    seed: int
    task: str
    datasets: dict
    config_hash: str
    decoder_init: str = "fresh"
    iterations: int = 0
    best: dict = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=2, default=str))


def dataset_id(samples: Sequence[Sample]) -> str:
    import hashlib

    h = hashlib.sha256()
    for s in samples:
        h.update(s.sample_id.encode())
        h.update(b"\0")
    return f"{len(samples)}:{h.hexdigest()[:12]}"


class Trainer:
    """Model + optimizer + bookkeeping for one run."""

    def __init__(
        self,
        cfg: RunConfig,
        text_vocab: Vocabulary,
        answer_vocab: Vocabulary,
        run_dir: str | Path | None = None,
        model: FusionModel | None = None,
    ):
        self.cfg = cfg
        self.text_vocab = text_vocab
        self.answer_vocab = answer_vocab
        self.obj_dim = cfg.features.object_visual_dim
        self.ocr_dim = cfg.features.ocr_visual_dim + cfg.text.word_vector_dim + PHOC_DIM
        self.dtype = torch.float64 if cfg.train.float64 else torch.float32
        if model is None:
            torch.manual_seed(cfg.train.seed)
            model = FusionModel(cfg.model, len(text_vocab), len(answer_vocab), self.obj_dim, self.ocr_dim)
        self.model = model.to(self.dtype)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=cfg.schedule.base_lr, betas=cfg.train.adam_betas, eps=cfg.train.adam_eps
        )
        self.iteration = 0
        self.run_dir = Path(run_dir) if run_dir else None
        self.history: list[dict] = []
        self.last_checkpoint: Path | None = None
        self._pool = ThreadPoolExecutor(cfg.train.workers) if cfg.train.workers > 1 else None
        if self.run_dir:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            cfg.to_file(self.run_dir / "config.yaml")

    # ------------------------------------------------------------ data

    def _map(self, fn: Callable, items: Sequence):
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def pretrain_instances(self, data: Sequence[Sample], idx: Sequence[int], *keys: int) -> list[PretrainInstance]:
        task = self.cfg.pretrain_tasks.task(self.cfg.geometry)
        seed = self.cfg.train.seed
        return self._map(
            lambda i: build_pretrain_instance(data[i], data, self.text_vocab, derive_rng(seed, *keys, i), task), idx
        )

    def pretrain_batch(self, data: Sequence[Sample], idx: Sequence[int], *keys: int) -> Batch:
        inst = self.pretrain_instances(data, idx, *keys)
        return collate_pretrain(inst, self.text_vocab, self.obj_dim, self.ocr_dim, self.dtype)

    def decoding_batch(self, samples: Sequence[Sample], mode: str) -> Batch:
        return collate_decoding(
            samples, self.text_vocab, self.answer_vocab, self.obj_dim, self.ocr_dim, mode,
            self.cfg.model.max_decode_steps(mode), self.dtype,
        )

    # ------------------------------------------------------------ steps

    def _weighted(self, losses: dict) -> torch.Tensor:
        w = self.cfg.train.loss_weights
        return sum(w.get(k, 1.0) * losses[k] for k in ("mlm", "itm", "rpp"))

    def _apply(self, loss: torch.Tensor, record: dict) -> dict:
        if not torch.isfinite(loss):
            raise NumericDivergence(f"non-finite loss at iteration {self.iteration}")
        lr = lr_at(self.iteration, self.cfg.schedule)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for p in self.model.parameters() if p.grad is not None]
        norm = torch.nn.utils.clip_grad_norm_(params, self.cfg.train.grad_clip)
        self.optimizer.step()
        record.update(iter=self.iteration, lr=lr, loss=loss.item(), grad_norm=float(norm))
        self.iteration += 1
        self.history.append(record)
        self._log(record)
        return record

    def pretrain_step(self, data: Sequence[Sample]) -> dict:
        with step_rng(self.cfg.train.seed, self.iteration):
            return self._pretrain_step(data)

    def finetune_step(self, data: Sequence[Sample], mode: str) -> dict:
        with step_rng(self.cfg.train.seed, self.iteration):
            return self._finetune_step(data, mode)

    def joint_step(self, data: Sequence[Sample], mode: str) -> dict:
        with step_rng(self.cfg.train.seed, self.iteration):
            return self._joint_step(data, mode)

    def _pretrain_step(self, data: Sequence[Sample]) -> dict:
        self.model.train()
        idx = batch_indices(self.cfg.train.seed, self.iteration, self.cfg.schedule.batch_size, len(data))
        batch = self.pretrain_batch(data, idx, _INSTANCE, self.iteration)
        losses = self.model.pretrain_losses(batch)
        rec = {k: losses[k].item() for k in ("mlm", "itm", "rpp")}
        return self._apply(self._weighted(losses), rec)

    def _finetune_step(self, data: Sequence[Sample], mode: str) -> dict:
        self.model.train()
        idx = batch_indices(self.cfg.train.seed, self.iteration, self.cfg.schedule.batch_size, len(data))
        batch = self.decoding_batch([data[i] for i in idx], mode)
        loss = self.model.answer_loss(batch)
        return self._apply(loss, {"answer": loss.item()})

    def _joint_step(self, data: Sequence[Sample], mode: str) -> dict:
        self.model.train()
        B = self.cfg.schedule.batch_size
        idx = batch_indices(self.cfg.train.seed, self.iteration, B, len(data))
        split = joint_split(self.cfg.train.seed, self.iteration, B, self.cfg.train.joint_pretrain_fraction)
        pre = [i for i, s in zip(idx, split) if s]
        ans = [i for i, s in zip(idx, split) if not s]
        total, rec = None, {"pretrain_rows": len(pre)}
        if pre:
            losses = self.model.pretrain_losses(self.pretrain_batch(data, pre, _INSTANCE, self.iteration))
            total = self._weighted(losses)
            rec.update({k: losses[k].item() for k in ("mlm", "itm", "rpp")})
        if ans:
            a = self.model.answer_loss(self.decoding_batch([data[i] for i in ans], mode))
            total = a if total is None else total + a
            rec["answer"] = a.item()
        return self._apply(total, rec)

    # ------------------------------------------------------------ evaluation

    @torch.no_grad()
    def pretrain_accuracy(self, data: Sequence[Sample]) -> dict:
        """Top-1 MLM, ITM and RPP accuracy on fixed (seeded) instances; ``combined`` is their mean."""
        self.model.eval()
        correct = {"mlm": 0, "itm": 0, "rpp": 0}
        total = {"mlm": 0, "itm": 0, "rpp": 0}
        B = max(self.cfg.schedule.batch_size, 16)
        for start in range(0, len(data), B):
            idx = list(range(start, min(start + B, len(data))))
            out = self.model.pretrain_losses(self.pretrain_batch(data, idx, _EVAL))
            for k in correct:
                if f"{k}_total" in out:
                    correct[k] += int(out[f"{k}_correct"])
                    total[k] += int(out[f"{k}_total"])
        self.model.train()
        acc = {k: correct[k] / total[k] for k in correct if total[k]}
        acc["combined"] = float(np.mean(list(acc.values()))) if acc else 0.0
        return acc

    @torch.no_grad()
    def predict(self, data: Sequence[Sample], mode: str, batch_size: int = 32) -> dict[str, str]:
        preds = {}
        for start in range(0, len(data), batch_size):
            chunk = list(data[start : start + batch_size])
            batch = self.decoding_batch(chunk, mode)
            for s, p in zip(chunk, decode_answer(self.model, batch, self.answer_vocab, mode)):
                preds[s.sample_id] = p
        return preds

    def evaluate(self, data: Sequence[Sample], task: str, metrics: Sequence[str] = ()) -> dict[str, MetricReport]:
        mode = "caption" if task == "caption" else "vqa"
        metrics = check_task_metrics(task, metrics)
        gt = ground_truth_for(data, task)
        preds = self.predict(data, mode)
        e = self.cfg.eval
        return score_predictions(preds, gt, metrics, e.anls_threshold, e.cider_sigma, e.cider_n)

    # ------------------------------------------------------------ persistence

    def _log(self, record: dict) -> None:
        if self.run_dir:
            with open(self.run_dir / "metrics.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")

    def state(self, task: str, extra: dict | None = None) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "task": task,
            "config": self.cfg.model_dump(mode="json"),
            "config_hash": self.cfg.config_hash(),
            "dims": dict(self.model.dims),
            "text_vocab": self.text_vocab.to_list(),
            "answer_vocab": self.answer_vocab.to_list(),
            "dtype": str(self.dtype),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": {"torch": torch.get_rng_state(), "seed": self.cfg.train.seed},
            "iteration": self.iteration,
            "extra": extra or {},
        }

    def save(self, path: str | Path, task: str, extra: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(task, extra), path)
        return path

    @classmethod
    def from_checkpoint(
        cls, path: str | Path, cfg: RunConfig | None = None, run_dir: str | Path | None = None, resume: bool = True
    ) -> "Trainer":
        ckpt = load_checkpoint(path, cfg)
        cfg = cfg or RunConfig.model_validate(ckpt["config"])
        t = cls(cfg, Vocabulary.from_list(ckpt["text_vocab"]), Vocabulary.from_list(ckpt["answer_vocab"]), run_dir)
        t.model.load_state_dict(ckpt["model"])
        if resume:
            t.optimizer.load_state_dict(ckpt["optimizer"])
            torch.set_rng_state(ckpt["rng"]["torch"])
            t.iteration = ckpt["iteration"]
        return t


def load_checkpoint(path: str | Path | dict, expect: RunConfig | None = None, sections: Sequence[str] = ("model", "features", "text")) -> dict:
    ckpt = path if isinstance(path, dict) else torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ConfigMismatch(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigMismatch(f"checkpoint version {ckpt.get('version')} != {CHECKPOINT_VERSION}")
    if expect is not None:
        mine = expect.model_dump(mode="json")
        for sec in sections:
            if ckpt["config"].get(sec) != mine[sec]:
                diff = sorted(k for k in mine[sec] if ckpt["config"][sec].get(k) != mine[sec][k])
                raise ConfigMismatch(f"checkpoint config mismatch in section {sec!r}: {diff}")
    return ckpt


# ---------------------------------------------------------------- pipelines


@dataclass
class RunResult:
    trainer: Trainer
    history: list[dict]
    best_checkpoint: Path | None = None
    best_metrics: dict = field(default_factory=dict)
    # in-memory copy of the best checkpoint when no run directory is used
    best_state: dict | None = None
    evals: list[dict] = field(default_factory=list)


def _split_heldout(data: Sequence[Sample], fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    n_hold = int(round(len(data) * fraction))
    if n_hold == 0 or len(data) - n_hold < 1:
        return list(data), []
    perm = derive_rng(seed, _EVAL, 0).permutation(len(data))
    hold = set(perm[:n_hold].tolist())
    return [s for i, s in enumerate(data) if i not in hold], [s for i, s in enumerate(data) if i in hold]


def build_vocabularies(cfg: RunConfig, *datasets: Sequence[Sample], mode: str = "vqa") -> tuple[Vocabulary, Vocabulary]:
    everything = [s for d in datasets for s in d]
    text = text_vocabulary(everything)
    answers = answer_vocabulary([s for s in everything if s.answers or s.caption], mode, cfg.train.answer_vocab_size)
    return text, answers


def _run_loop(trainer: Trainer, iters: int, step: Callable[[], dict], on_eval: Callable[[], None] | None, task: str):
    cfg = trainer.cfg.train
    end = trainer.iteration + iters if iters is not None else trainer.cfg.schedule.max_iters
    try:
        while trainer.iteration < end:
            step()
            it = trainer.iteration
            if trainer.run_dir and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                trainer.last_checkpoint = trainer.save(trainer.run_dir / "checkpoints" / "last.pt", task)
            if on_eval and cfg.eval_interval and it % cfg.eval_interval == 0:
                on_eval()
        if on_eval and not (cfg.eval_interval and trainer.iteration % cfg.eval_interval == 0):
            on_eval()
    except NumericDivergence as e:
        logger.error("%s; last good checkpoint: %s", e, trainer.last_checkpoint)
        raise TrainingDiverged(str(e), trainer.last_checkpoint) from e


def pretrain(
    trainer: Trainer, data: Sequence[Sample], iters: int | None = None, heldout: Sequence[Sample] | None = None
) -> RunResult:
    """Optimize MLM + ITM + RPP; keep the checkpoint with the best combined held-out accuracy."""
    if heldout is None:
        data, heldout = _split_heldout(data, trainer.cfg.train.heldout_fraction, trainer.cfg.train.seed)
    result = RunResult(trainer, trainer.history)
    best = {"combined": -1.0}
    best_state: dict | None = None

    def on_eval():
        nonlocal best, best_state
        if not heldout:
            return
        acc = trainer.pretrain_accuracy(heldout)
        rec = {"iter": trainer.iteration, "eval": acc}
        result.evals.append(rec)
        trainer._log(rec)
        if acc["combined"] > best["combined"]:
            best = acc
            if trainer.run_dir:
                result.best_checkpoint = trainer.save(trainer.run_dir / "checkpoints" / "best.pt", "pretrain", {"eval": acc})
            else:
                best_state = copy.deepcopy(trainer.state("pretrain", {"eval": acc}))

    _run_loop(trainer, iters, lambda: trainer.pretrain_step(data), on_eval, "pretrain")
    result.best_metrics = best if best["combined"] >= 0 else {}
    result.best_state = best_state
    return result


def finetune(
    trainer: Trainer, data: Sequence[Sample], mode: str = "vqa", iters: int | None = None,
    val: Sequence[Sample] | None = None,
) -> RunResult:
    """Teacher-forced answer/caption loss; evaluation metric logged at each eval interval."""
    if mode == "caption":
        data = [blank_question(s) for s in data]
        val = None if val is None else [blank_question(s) for s in val]
    result = RunResult(trainer, trainer.history)
    task = "caption" if mode == "caption" else "vqa"
    steps_per_epoch = max(1, math.ceil(len(data) / trainer.cfg.schedule.batch_size))

    def on_eval():
        if not val:
            return
        reports = trainer.evaluate(val, task)
        rec = {"iter": trainer.iteration, "epoch": trainer.iteration / steps_per_epoch,
               "eval": {m: r.aggregate for m, r in reports.items()}}
        result.evals.append(rec)
        trainer._log(rec)

    _run_loop(trainer, iters, lambda: trainer.finetune_step(data, mode), on_eval, f"finetune_{task}")
    if trainer.run_dir:
        result.best_checkpoint = trainer.save(trainer.run_dir / "checkpoints" / "final.pt", f"finetune_{task}")
    return result


def joint_train(trainer: Trainer, data: Sequence[Sample], mode: str = "vqa", iters: int | None = None,
                val: Sequence[Sample] | None = None) -> RunResult:
    """Per batch, a seeded subset takes the pre-training losses and the rest the answer loss."""
    if mode == "caption":
        data = [blank_question(s) for s in data]
    result = RunResult(trainer, trainer.history)
    task = "caption" if mode == "caption" else "vqa"

    def on_eval():
        if not val:
            return
        reports = trainer.evaluate(val, task)
        rec = {"iter": trainer.iteration, "eval": {m: r.aggregate for m, r in reports.items()}}
        result.evals.append(rec)
        trainer._log(rec)

    _run_loop(trainer, iters, lambda: trainer.joint_step(data, mode), on_eval, "joint")
    if trainer.run_dir:
        result.best_checkpoint = trainer.save(trainer.run_dir / "checkpoints" / "final.pt", "joint")
    return result


def blank_question(sample: Sample) -> Sample:
    from dataclasses import replace

    from .text import Segment

    if not sample.extended_text.question:
        return sample
    return replace(sample, extended_text=sample.extended_text.with_part(Segment.Q, ()))


def finetune_trainer_from(
    checkpoint: str | Path | dict | None,
    cfg: RunConfig,
    data: Sequence[Sample],
    mode: str,
    run_dir: str | Path | None = None,
    text_vocab: Vocabulary | None = None,
) -> Trainer:
    """Trainer for fine-tuning: encoder/fusion weights from ``checkpoint`` (or random), fresh decoder."""
    answers = answer_vocabulary(data, mode, cfg.train.answer_vocab_size)
    if checkpoint is None:
        text = text_vocab or text_vocabulary(data)
        return Trainer(cfg, text, answers, run_dir)
    ckpt = load_checkpoint(checkpoint, cfg, sections=("model", "features", "text"))
    text = Vocabulary.from_list(ckpt["text_vocab"])
    trainer = Trainer(cfg, text, answers, run_dir)
    state = {k: v for k, v in ckpt["model"].items() if not k.startswith(FusionModel.DECODER_PREFIXES)}
    missing, unexpected = trainer.model.load_state_dict(state, strict=False)
    if unexpected:
        raise ConfigMismatch(f"unexpected parameters in checkpoint: {unexpected}")
    return trainer


def model_config_variant(cfg: ModelConfig, text_layers: int, mm_layers: int) -> ModelConfig:
    return cfg.model_copy(update={"text_layers": text_layers, "mm_layers": mm_layers})
