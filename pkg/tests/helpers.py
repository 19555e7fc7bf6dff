"""Small builders shared by model, training and acceptance tests."""

from __future__ import annotations

import numpy as np
import torch

from scenetext.config import RunConfig
from scenetext.corpus import FeatureBuilder, synth_corpus
from scenetext.training import Trainer, build_vocabularies


def make_trainer(cfg: RunConfig, data, mode: str = "vqa", **kw) -> Trainer:
    text, answers = build_vocabularies(cfg, data, mode=mode)
    return Trainer(cfg, text, answers, **kw)


def corpus(cfg: RunConfig, seed: int, n: int, task: str = "pretrain", prefix: str | None = None):
    return synth_corpus(seed, n, task, FeatureBuilder.from_config(cfg), prefix)


def finite_difference_check(model, loss_fn, params: dict[str, torch.Tensor], n: int = 10, h: float = 1e-5,
                            seed: int = 0) -> list[float]:
    """Relative errors between autograd and central differences at ``n`` random entries."""
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    names = sorted(params)
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        flat = p.data.view(-1)
        k = int(rng.integers(flat.numel()))
        analytic = p.grad.view(-1)[k].item() if p.grad is not None else 0.0
        orig = flat[k].item()
        with torch.no_grad():
            flat[k] = orig + h
            up = loss_fn().item()
            flat[k] = orig - h
            down = loss_fn().item()
            flat[k] = orig
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric))
        errors.append(0.0 if scale < 1e-12 else abs(analytic - numeric) / scale)
    return errors
