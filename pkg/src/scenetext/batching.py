"""Padding and tensorization of samples / pre-training instances."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import torch

from .samples import ItmLabel, PretrainInstance, Sample
from .text import Vocabulary, normalize_ocr_token, tokenize

IGNORE = -100


@dataclass
class Batch:
    txt_ids: torch.Tensor
    txt_seg: torch.Tensor
    txt_mask: torch.Tensor
    obj_feat: torch.Tensor
    obj_box: torch.Tensor
    obj_mask: torch.Tensor
    ocr_feat: torch.Tensor
    ocr_box: torch.Tensor
    ocr_mask: torch.Tensor
    samples: list = field(default_factory=list)
    # pre-training targets
    mlm_labels: torch.Tensor | None = None
    itm_labels: torch.Tensor | None = None
    rpp_obj: torch.Tensor | None = None
    rpp_ocr: torch.Tensor | None = None
    rpp_labels: torch.Tensor | None = None
    # decoding inputs / targets
    prev_inds: torch.Tensor | None = None
    dec_mask: torch.Tensor | None = None
    dec_targets: torch.Tensor | None = None

    @property
    def size(self) -> int:
        return self.txt_ids.shape[0]

    def to(self, dtype: torch.dtype) -> "Batch":
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, torch.Tensor) and v.is_floating_point():
                setattr(self, f.name, v.to(dtype))
        return self

    def select(self, idx: Sequence[int]) -> "Batch":
        """Row subset of every tensor field."""
        index = torch.as_tensor(list(idx), dtype=torch.long)
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, torch.Tensor):
                kw[f.name] = v.index_select(0, index)
            elif f.name == "samples":
                kw[f.name] = [v[i] for i in idx] if v else []
            else:
                kw[f.name] = v
        return Batch(**kw)


def ocr_region_dim(sample: Sample) -> int:
    r = sample.ocr[0]
    return r.visual_feature.shape[0] + r.word_vec.shape[0] + r.phoc.shape[0]


def collate_inputs(
    samples: Sequence[Sample], vocab: Vocabulary, obj_dim: int, ocr_dim: int, dtype: torch.dtype = torch.float32
) -> Batch:
    B = len(samples)
    K = max(1, max(len(s.extended_text) for s in samples))
    M = max((s.num_objects for s in samples), default=0)
    N = max((s.num_ocr for s in samples), default=0)
    txt_ids = np.full((B, K), vocab.pad_id, np.int64)
    txt_seg = np.zeros((B, K), np.int64)
    txt_mask = np.zeros((B, K), bool)
    obj_feat = np.zeros((B, M, obj_dim), np.float32)
    obj_box = np.zeros((B, M, 4), np.float32)
    obj_mask = np.zeros((B, M), bool)
    ocr_feat = np.zeros((B, N, ocr_dim), np.float32)
    ocr_box = np.zeros((B, N, 4), np.float32)
    ocr_mask = np.zeros((B, N), bool)
    for b, s in enumerate(samples):
        t = s.extended_text
        n = len(t)
        txt_ids[b, :n] = vocab.ids(t.tokens)
        txt_seg[b, :n] = [int(g) for g in t.segments]
        txt_mask[b, :n] = True
        for i, o in enumerate(s.objects):
            obj_feat[b, i] = o.visual_feature
            obj_box[b, i] = o.box.as_list()
        obj_mask[b, : s.num_objects] = True
        for j, r in enumerate(s.ocr):
            ocr_feat[b, j] = np.concatenate([r.visual_feature, r.word_vec, r.phoc.astype(np.float32)])
            ocr_box[b, j] = r.box.as_list()
        ocr_mask[b, : s.num_ocr] = True
    return Batch(
        txt_ids=torch.from_numpy(txt_ids),
        txt_seg=torch.from_numpy(txt_seg),
        txt_mask=torch.from_numpy(txt_mask),
        obj_feat=torch.from_numpy(obj_feat).to(dtype),
        obj_box=torch.from_numpy(obj_box).to(dtype),
        obj_mask=torch.from_numpy(obj_mask),
        ocr_feat=torch.from_numpy(ocr_feat).to(dtype),
        ocr_box=torch.from_numpy(ocr_box).to(dtype),
        ocr_mask=torch.from_numpy(ocr_mask),
        samples=list(samples),
    )


def collate_pretrain(
    instances: Sequence[PretrainInstance], vocab: Vocabulary, obj_dim: int, ocr_dim: int, dtype=torch.float32
) -> Batch:
    batch = collate_inputs([x.sample for x in instances], vocab, obj_dim, ocr_dim, dtype)
    B, K = batch.txt_ids.shape
    mlm = np.full((B, K), IGNORE, np.int64)
    rpp_obj = np.zeros(B, np.int64)
    rpp_ocr = np.zeros(B, np.int64)
    rpp_lab = np.full(B, IGNORE, np.int64)
    for b, x in enumerate(instances):
        for p, tok in zip(x.mask_positions, x.mask_targets):
            mlm[b, p] = vocab.id(tok)
        if x.has_rpp:
            rpp_obj[b], rpp_ocr[b] = x.rpp_pair
            rpp_lab[b] = x.rpp_target
    batch.mlm_labels = torch.from_numpy(mlm)
    batch.itm_labels = torch.tensor([float(x.itm_label is ItmLabel.POLLUTED) for x in instances], dtype=dtype)
    batch.rpp_obj = torch.from_numpy(rpp_obj)
    batch.rpp_ocr = torch.from_numpy(rpp_ocr)
    batch.rpp_labels = torch.from_numpy(rpp_lab)
    # a lone begin slot carries the sequence feature for ITM
    batch.prev_inds = torch.full((B, 1), vocab.begin_id, dtype=torch.long)
    batch.dec_mask = torch.ones((B, 1), dtype=torch.bool)
    return batch


def target_tokens(sample: Sample, mode: str) -> list[str]:
    """Gold decoding sequence: majority answer (VQA) or the caption."""
    if mode == "caption":
        return tokenize(sample.caption or "")
    if not sample.answers:
        return []
    counts = Counter(sample.answers)
    best = max(counts.values())
    answer = next(a for a in sample.answers if counts[a] == best)
    return tokenize(answer)


def collate_decoding(
    samples: Sequence[Sample],
    vocab: Vocabulary,
    answer_vocab: Vocabulary,
    obj_dim: int,
    ocr_dim: int,
    mode: str,
    max_steps: int,
    dtype=torch.float32,
) -> Batch:
    """Teacher-forcing inputs and multi-positive targets over ``answer_vocab + ocr``."""
    batch = collate_inputs(samples, vocab, obj_dim, ocr_dim, dtype)
    B, N = batch.ocr_mask.shape
    V = len(answer_vocab)
    seqs = [target_tokens(s, mode)[: max_steps - 1] for s in samples]
    T = max(len(q) for q in seqs) + 1
    prev = np.full((B, T), answer_vocab.pad_id, np.int64)
    prev[:, 0] = answer_vocab.begin_id
    dmask = np.zeros((B, T), bool)
    targets = np.zeros((B, T, V + N), np.float32)
    for b, (s, seq) in enumerate(zip(samples, seqs)):
        ocr_tokens = [normalize_ocr_token(r.word) for r in s.ocr]
        for t, tok in enumerate(seq):
            copies = [j for j, w in enumerate(ocr_tokens) if w == tok]
            if tok in answer_vocab:
                targets[b, t, answer_vocab.id(tok)] = 1.0
            for j in copies:
                targets[b, t, V + j] = 1.0
            if not copies and tok not in answer_vocab:
                targets[b, t, answer_vocab.unk_id] = 1.0
            prev[b, t + 1] = V + copies[0] if copies else answer_vocab.id(tok)
        targets[b, len(seq), answer_vocab.end_id] = 1.0
        dmask[b, : len(seq) + 1] = True
    batch.prev_inds = torch.from_numpy(prev)
    batch.dec_mask = torch.from_numpy(dmask)
    batch.dec_targets = torch.from_numpy(targets).to(dtype)
    return batch


def answer_vocabulary(samples: Sequence[Sample], mode: str, max_size: int = 5000, min_count: int = 1) -> Vocabulary:
    return Vocabulary.build((target_tokens(s, mode) for s in samples), min_count=min_count, max_size=max_size)


def text_vocabulary(samples: Sequence[Sample], extra: Sequence[str] = ()) -> Vocabulary:
    return Vocabulary.build([*(s.extended_text.tokens for s in samples), list(extra)])

