"""Coreference scores: how strongly corresponded positions attend to each other.

For each pair of positions that refer to the same thing (a text token and the
scene-text region carrying that word, or an object and the scene text printed
on it) the score is the largest attention weight from source to target over
every layer and head of the fusion stack.  Scores are averaged per pair kind.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .batching import collate_inputs
from .geometry import RelationThresholds, is_on
from .model import AttentionMaps, FusionModel
from .samples import Sample
from .text import Vocabulary, normalize_ocr_token


class PairKind(str, Enum):
    WORD_TO_OCR = "word->ocr"
    OCR_TO_WORD = "ocr->word"
    OBJ_TO_OCR = "obj->ocr"
    OCR_TO_OBJ = "ocr->obj"

    @property
    def parts(self) -> tuple[str, str]:
        src, tgt = self.value.split("->")
        rename = {"word": "text"}
        return rename.get(src, src), rename.get(tgt, tgt)


@dataclass(frozen=True)
class CorefPair:
    """``source``/``target`` index within their own part (text, obj or ocr)."""

    kind: PairKind
    source: int
    target: int
    sample: int = 0


def find_corresponded_pairs(
    sample: Sample, index: int = 0, thresholds: RelationThresholds | None = None
) -> list[CorefPair]:
    """Every word<->scene-text and object<->scene-text correspondence, both directions."""
    pairs: list[CorefPair] = []
    ocr_tokens = [normalize_ocr_token(r.word) for r in sample.ocr]
    for i, tok in enumerate(sample.extended_text.tokens):
        for j, w in enumerate(ocr_tokens):
            if tok == w:
                pairs.append(CorefPair(PairKind.WORD_TO_OCR, i, j, index))
                pairs.append(CorefPair(PairKind.OCR_TO_WORD, j, i, index))
    kw = {} if thresholds is None else {"thresholds": thresholds}
    for i, o in enumerate(sample.objects):
        for j, r in enumerate(sample.ocr):
            if is_on(o.box, r.box, **kw):
                pairs.append(CorefPair(PairKind.OBJ_TO_OCR, i, j, index))
                pairs.append(CorefPair(PairKind.OCR_TO_OBJ, j, i, index))
    return pairs


def pair_scores(maps: AttentionMaps, pairs: Sequence[CorefPair]) -> torch.Tensor:
    """Per-pair max over layers and heads of ``A[source, target]``."""
    if not pairs:
        return torch.zeros(0)
    b = torch.tensor([p.sample for p in pairs])
    rows = torch.tensor([maps.offset(p.kind.parts[0]) + p.source for p in pairs])
    cols = torch.tensor([maps.offset(p.kind.parts[1]) + p.target for p in pairs])
    entries = maps.maps[b, :, :, rows, cols]  # (P, layers, heads)
    return entries.flatten(1).amax(dim=1)


def coreference_score(maps: AttentionMaps, pairs: Sequence[CorefPair]) -> dict[str, dict]:
    """``{kind: {"score": mean or None, "pairs": count}}``; kinds without pairs have score None."""
    scores = pair_scores(maps, pairs)
    grouped: dict[PairKind, list[float]] = defaultdict(list)
    for p, s in zip(pairs, scores.tolist()):
        grouped[p.kind].append(s)
    return _summarize(grouped)


def _summarize(grouped) -> dict[str, dict]:
    out = {}
    for kind in PairKind:
        vals = grouped.get(kind, [])
        out[kind.value] = {"score": sum(vals) / len(vals) if vals else None, "pairs": len(vals)}
    return out


@torch.no_grad()
def analyze(
    model: FusionModel,
    samples: Sequence[Sample],
    text_vocab: Vocabulary,
    batch_size: int = 32,
    thresholds: RelationThresholds | None = None,
) -> dict[str, dict]:
    """Coreference report over ``samples``: pairs pooled across the whole set."""
    was_training = model.training
    model.eval()
    grouped: dict[PairKind, list[float]] = defaultdict(list)
    for start in range(0, len(samples), batch_size):
        chunk = list(samples[start : start + batch_size])
        maps = attention_maps(model, chunk, text_vocab)
        pairs = [p for b, s in enumerate(chunk) for p in find_corresponded_pairs(s, b, thresholds)]
        for p, s in zip(pairs, pair_scores(maps, pairs).tolist()):
            grouped[p.kind].append(s)
    model.train(was_training)
    return _summarize(grouped)


@torch.no_grad()
def attention_maps(model: FusionModel, samples: Sequence[Sample], text_vocab: Vocabulary) -> AttentionMaps:
    dims = model.dims
    batch = collate_inputs(samples, text_vocab, dims["obj_dim"], dims["ocr_dim"], model.dtype)
    batch.prev_inds = torch.full((batch.size, 1), text_vocab.begin_id, dtype=torch.long)
    batch.dec_mask = torch.ones((batch.size, 1), dtype=torch.bool)
    _, maps = model(batch, keep_attention=True)
    return maps


def write_report(report: dict, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps({"coreference": report, **(extra or {})}, indent=2) + "\n")


def dump_attention_grids(
    model: FusionModel, samples: Iterable[Sample], text_vocab: Vocabulary, out_dir: str | Path, limit: int = 8
) -> list[Path]:
    """One PNG per sample: text tokens (rows) against scene-text words (columns),
    max attention over layers and heads."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in list(samples)[:limit]:
        if not s.ocr or not len(s.extended_text):
            continue
        maps = attention_maps(model, [s], text_vocab)
        K, N = len(s.extended_text), s.num_ocr
        t0, o0 = maps.offset("text"), maps.offset("ocr")
        grid = maps.maps[0, :, :, t0 : t0 + K, o0 : o0 + N].flatten(0, 1).amax(0).float().numpy()
        fig, ax = plt.subplots(figsize=(1 + 0.45 * N, 1 + 0.3 * K))
        im = ax.imshow(grid, cmap="viridis", aspect="auto")
        fig.colorbar(im, ax=ax, fraction=0.05)
        ax.set_xticks(range(N), [r.word for r in s.ocr], rotation=60, ha="right", fontsize=7)
        ax.set_yticks(range(K), list(s.extended_text.tokens), fontsize=7)
        ax.set_title(s.sample_id, fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{s.sample_id}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
