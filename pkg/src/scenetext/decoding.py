"""Greedy multi-step pointer decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .batching import Batch
from .model import NEG_INF, FusionModel
from .text import Vocabulary


@dataclass
class DecoderState:
    """Decoding progress for a batch.

    ``prev_inds[:, t]`` is the input at slot ``t`` (slot 0 = begin).  Indices
    ``>= len(answer_vocab)`` are scene-text copies of region ``index - V``.
    """

    prev_inds: torch.Tensor
    finished: torch.Tensor
    emitted: list[list[tuple[str, int | None]]]
    scores: list[torch.Tensor] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.prev_inds.shape[1] - 1

    @classmethod
    def start(cls, batch_size: int, begin_id: int) -> "DecoderState":
        return cls(
            prev_inds=torch.full((batch_size, 1), begin_id, dtype=torch.long),
            finished=torch.zeros(batch_size, dtype=torch.bool),
            emitted=[[] for _ in range(batch_size)],
        )


def decode_step(model: FusionModel, batch: Batch, state: DecoderState) -> torch.Tensor:
    """Scores ``(B, V + N)`` for the current step given previously emitted tokens."""
    batch.prev_inds = state.prev_inds
    batch.dec_mask = torch.ones_like(state.prev_inds, dtype=torch.bool)
    fused, _ = model(batch)
    scores = model.decode_scores(fused.dec[:, -1:], fused.ocr, fused.ocr_mask)[:, 0]
    return scores


@torch.no_grad()
def decode_answer(
    model: FusionModel, batch: Batch, answer_vocab: Vocabulary, mode: str = "vqa", max_steps: int | None = None
) -> list[str]:
    """Greedy decoding; stops at END or ``max_steps`` (12 VQA / 30 caption by default)."""
    was_training = model.training
    model.eval()
    if max_steps is None:
        max_steps = model.cfg.max_decode_steps(mode)
    V = len(answer_vocab)
    state = DecoderState.start(batch.size, answer_vocab.begin_id)
    banned = [answer_vocab.pad_id, answer_vocab.mask_id, answer_vocab.begin_id]
    for _ in range(max_steps):
        scores = decode_step(model, batch, state)
        scores[:, banned] = NEG_INF
        state.scores.append(scores)
        choice = scores.argmax(-1)
        for b, c in enumerate(choice.tolist()):
            if state.finished[b]:
                continue
            if c == answer_vocab.end_id:
                state.finished[b] = True
            elif c >= V:
                state.emitted[b].append((batch.samples[b].ocr[c - V].word, c - V))
            else:
                state.emitted[b].append((answer_vocab.token(c), None))
        state.prev_inds = torch.cat([state.prev_inds, choice[:, None]], dim=1)
        if bool(state.finished.all()):
            break
    model.train(was_training)
    return [" ".join(tok for tok, _ in toks) for toks in state.emitted]
