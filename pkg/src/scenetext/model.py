"""Multimodal fusion transformer with pre-training heads and a pointer decoder.

Input sequence to the fusion stack is ``[text, objects, scene text, decode
slots]``.  Text, object and scene-text positions attend to each other freely;
decode slots attend to all of those and causally to earlier decode slots.
Encoder positions never see decode slots, so teacher-forced answer tokens
cannot leak into ``f_ocr``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .batching import IGNORE, Batch
from .config import ModelConfig
from .text import Vocabulary

NEG_INF = -1e9


class NumericDivergence(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass
class FusedFeatures:
    text: torch.Tensor  # (B, K, H)
    obj: torch.Tensor  # (B, M, H)
    ocr: torch.Tensor  # (B, N, H)
    dec: torch.Tensor  # (B, T, H); dec[:, 0] is the begin slot
    text_mask: torch.Tensor
    obj_mask: torch.Tensor
    ocr_mask: torch.Tensor
    dec_mask: torch.Tensor


@dataclass
class AttentionMaps:
    """Per-layer, per-head attention of the fusion stack: (B, layers, heads, S, S)."""

    maps: torch.Tensor
    sizes: tuple[int, int, int, int]  # K, M, N, T

    @property
    def num_maps(self) -> int:
        return self.maps.shape[1] * self.maps.shape[2]

    def offset(self, part: str) -> int:
        K, M, N, _ = self.sizes
        return {"text": 0, "obj": K, "ocr": K + M, "dec": K + M + N}[part]


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, L, H = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim) + bias
        probs = scores.softmax(-1)
        ctx = (self.drop(probs) @ v).transpose(1, 2).reshape(B, L, H)
        return self.out(ctx), probs


class TransformerLayer(nn.Module):
    """Post-norm encoder layer (BERT layout)."""

    def __init__(self, hidden: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.attn = SelfAttention(hidden, heads, dropout)
        self.ln1 = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(nn.Linear(hidden, ffn), nn.GELU(), nn.Linear(ffn, hidden))
        self.ln2 = nn.LayerNorm(hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, bias):
        a, probs = self.attn(x, bias)
        x = self.ln1(x + self.drop(a))
        x = self.ln2(x + self.drop(self.ffn(x)))
        return x, probs


class Encoder(nn.Module):
    def __init__(self, n_layers: int, hidden: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(TransformerLayer(hidden, heads, ffn, dropout) for _ in range(n_layers))

    def forward(self, x: torch.Tensor, bias: torch.Tensor, keep_attention: bool = False):
        maps = []
        for i, layer in enumerate(self.layers):
            x, probs = layer(x, bias)
            if not torch.isfinite(x).all():
                raise NumericDivergence(f"numeric divergence at layer {i}")
            if keep_attention:
                maps.append(probs)
        return x, maps


def key_padding_bias(mask: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """(B, L) validity -> additive (B, 1, 1, L) bias."""
    return ((~mask).to(dtype) * NEG_INF)[:, None, None, :]


def fusion_bias(txt_mask, obj_mask, ocr_mask, dec_mask, dtype) -> torch.Tensor:
    """Additive (B, 1, S, S) bias: encoder positions see encoder keys; decode slots also see earlier slots."""
    enc = torch.cat([txt_mask, obj_mask, ocr_mask], dim=1)
    B, E = enc.shape
    T = dec_mask.shape[1]
    S = E + T
    allowed = torch.zeros(B, S, S, dtype=torch.bool, device=enc.device)
    allowed[:, :, :E] = enc[:, None, :]
    causal = torch.tril(torch.ones(T, T, dtype=torch.bool, device=enc.device))
    allowed[:, E:, E:] = causal[None] & dec_mask[:, None, :]
    return ((~allowed).to(dtype) * NEG_INF)[:, None]


class MlmHead(nn.Module):
    """Transform then project to the text vocabulary.

    With ``tied`` the projection shares its weight with the token embedding, as
    in BERT, so recovering a word that is visible elsewhere in the sequence is
    a matter of copying its embedding.
    """

    def __init__(self, hidden: int, vocab_size: int, embedding: nn.Embedding | None):
        super().__init__()
        self.transform = nn.Linear(hidden, hidden)
        self.ln = nn.LayerNorm(hidden)
        self.embedding = embedding
        if embedding is None:
            self.decoder = nn.Linear(hidden, vocab_size)
        else:
            self.bias = nn.Parameter(torch.zeros(vocab_size))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln(F.gelu(self.transform(x)))
        if self.embedding is None:
            return self.decoder(h)
        return h @ self.embedding.weight.t() + self.bias


class FusionModel(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        text_vocab_size: int,
        answer_vocab_size: int,
        obj_dim: int,
        ocr_dim: int,
    ):
        super().__init__()
        self.cfg = cfg
        self.dims = {
            "text_vocab_size": text_vocab_size,
            "answer_vocab_size": answer_vocab_size,
            "obj_dim": obj_dim,
            "ocr_dim": ocr_dim,
        }
        H, p = cfg.hidden_size, cfg.dropout
        # text
        self.tok_emb = nn.Embedding(text_vocab_size, H)
        self.pos_emb = nn.Embedding(cfg.max_text_positions, H)
        self.seg_emb = nn.Embedding(3, H)
        self.txt_ln = nn.LayerNorm(H)
        self.text_encoder = Encoder(cfg.text_layers, H, cfg.num_heads, cfg.ffn_size, p)
        # objects
        self.obj_feat = nn.Linear(obj_dim, H)
        self.obj_box = nn.Linear(4, H)
        self.obj_feat_ln = nn.LayerNorm(H)
        self.obj_box_ln = nn.LayerNorm(H)
        # scene text: visual || word vector || phoc
        self.ocr_feat = nn.Linear(ocr_dim, H)
        self.ocr_box = nn.Linear(4, H)
        self.ocr_feat_ln = nn.LayerNorm(H)
        self.ocr_box_ln = nn.LayerNorm(H)
        # decode slots
        self.begin_emb = nn.Parameter(torch.zeros(H))
        max_steps = max(cfg.max_decode_steps_vqa, cfg.max_decode_steps_caption)
        self.dec_pos = nn.Embedding(max_steps, H)
        self.dec_tok_ln = nn.LayerNorm(H)
        self.dec_pos_ln = nn.LayerNorm(H)
        self.drop = nn.Dropout(p)
        self.mm_encoder = Encoder(cfg.mm_layers, H, cfg.num_heads, cfg.ffn_size, p)
        # pre-training heads
        self.mlm_head = MlmHead(H, text_vocab_size, self.tok_emb if cfg.tie_mlm_decoder else None)
        self.itm_head = nn.Linear(H, 1)
        self.rpp_head = nn.Sequential(nn.Linear(2 * H, H), nn.GELU(), nn.Linear(H, cfg.rpp_classes))
        # pointer decoder
        self.vocab_head = nn.Linear(H, answer_vocab_size)
        self.ocr_query = nn.Linear(H, H)
        self.ocr_key = nn.Linear(H, H)
        self.apply(self._init)
        nn.init.trunc_normal_(self.begin_emb, std=cfg.init_std, a=-2 * cfg.init_std, b=2 * cfg.init_std)

    DECODER_PREFIXES = ("vocab_head.", "ocr_query.", "ocr_key.", "dec_pos.")

    def _init(self, m: nn.Module):
        std = self.cfg.init_std
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def reset_decoder(self) -> None:
        """Fresh decoder-only parameters (used when fine-tuning from a pre-trained checkpoint)."""
        for name, m in self.named_modules():
            if any(name + "." == pfx for pfx in self.DECODER_PREFIXES):
                m.apply(self._init)

    @property
    def dtype(self) -> torch.dtype:
        return self.begin_emb.dtype

    # ------------------------------------------------------------ embeddings

    def embed_text(self, batch: Batch) -> torch.Tensor:
        K = batch.txt_ids.shape[1]
        pos = torch.arange(K, device=batch.txt_ids.device)[None]
        x = self.tok_emb(batch.txt_ids) + self.pos_emb(pos) + self.seg_emb(batch.txt_seg)
        return self.drop(self.txt_ln(x))

    def embed_objects(self, batch: Batch) -> torch.Tensor:
        self._check_dim("obj_dim", batch.obj_feat)
        x = self.obj_feat_ln(self.obj_feat(batch.obj_feat)) + self.obj_box_ln(self.obj_box(batch.obj_box))
        return self.drop(x)

    def embed_ocr(self, batch: Batch) -> torch.Tensor:
        self._check_dim("ocr_dim", batch.ocr_feat)
        x = self.ocr_feat_ln(self.ocr_feat(batch.ocr_feat)) + self.ocr_box_ln(self.ocr_box(batch.ocr_box))
        return self.drop(x)

    def _check_dim(self, name: str, feat: torch.Tensor) -> None:
        if feat.shape[-1] != self.dims[name]:
            raise ConfigMismatch(f"{name}: model expects {self.dims[name]}, batch has {feat.shape[-1]}")

    def embed_decode(self, prev_inds: torch.Tensor, ocr_emb: torch.Tensor) -> torch.Tensor:
        """Slot 0 is the learned begin embedding; later slots embed the previous
        prediction: answer-vocab rows of the vocab classifier, or the input
        embedding of the copied scene-text region."""
        B, T = prev_inds.shape
        V = self.dims["answer_vocab_size"]
        H = self.cfg.hidden_size
        tok = torch.empty(B, T, H, dtype=ocr_emb.dtype, device=prev_inds.device)
        tok[:, 0] = self.begin_emb
        if T > 1:
            prev = prev_inds[:, 1:]
            is_ocr = prev >= V
            vocab_part = self.vocab_head.weight[prev.clamp(max=V - 1)]
            if ocr_emb.shape[1] > 0:
                idx = (prev - V).clamp(min=0, max=ocr_emb.shape[1] - 1)
                ocr_part = torch.gather(ocr_emb, 1, idx[..., None].expand(-1, -1, H))
                vocab_part = torch.where(is_ocr[..., None], ocr_part, vocab_part)
            tok[:, 1:] = vocab_part
        pos = self.dec_pos(torch.arange(T, device=prev_inds.device))[None]
        return self.drop(self.dec_tok_ln(tok) + self.dec_pos_ln(pos))

    def embed_modalities(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Input embeddings (text, objects, scene text, decode slots) before any transformer layer."""
        ocr = self.embed_ocr(batch)
        return self.embed_text(batch), self.embed_objects(batch), ocr, self.embed_decode(batch.prev_inds, ocr)

    # ------------------------------------------------------------ fusion

    def forward(self, batch: Batch, keep_attention: bool = False) -> tuple[FusedFeatures, AttentionMaps | None]:
        dtype = self.dtype
        txt, obj, ocr, dec = self.embed_modalities(batch)
        if len(self.text_encoder.layers):
            txt, _ = self.text_encoder(txt, key_padding_bias(batch.txt_mask, dtype))
        x = torch.cat([txt, obj, ocr, dec], dim=1)
        bias = fusion_bias(batch.txt_mask, batch.obj_mask, batch.ocr_mask, batch.dec_mask, dtype)
        x, maps = self.mm_encoder(x, bias, keep_attention)
        K, M, N, T = txt.shape[1], obj.shape[1], ocr.shape[1], dec.shape[1]
        fused = FusedFeatures(
            text=x[:, :K],
            obj=x[:, K : K + M],
            ocr=x[:, K + M : K + M + N],
            dec=x[:, K + M + N :],
            text_mask=batch.txt_mask,
            obj_mask=batch.obj_mask,
            ocr_mask=batch.ocr_mask,
            dec_mask=batch.dec_mask,
        )
        att = AttentionMaps(torch.stack(maps, dim=1), (K, M, N, T)) if keep_attention else None
        return fused, att

    # ------------------------------------------------------------ heads

    def mlm_logits(self, f_masked: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(f_masked)

    def itm_logit(self, f_p0: torch.Tensor) -> torch.Tensor:
        return self.itm_head(f_p0).squeeze(-1)

    def rpp_logits(self, f_obj: torch.Tensor, f_ocr: torch.Tensor) -> torch.Tensor:
        return self.rpp_head(torch.cat([f_obj, f_ocr], dim=-1))

    def decode_scores(self, f_dec: torch.Tensor, f_ocr: torch.Tensor, ocr_mask: torch.Tensor) -> torch.Tensor:
        """Scores over ``answer vocab ++ scene-text regions`` for each decode slot."""
        vocab = self.vocab_head(f_dec)
        q = self.ocr_query(f_dec)
        k = self.ocr_key(f_ocr)
        ptr = q @ k.transpose(-1, -2) / math.sqrt(self.cfg.hidden_size)
        ptr = ptr.masked_fill(~ocr_mask[:, None, :], NEG_INF)
        return torch.cat([vocab, ptr], dim=-1)

    # ------------------------------------------------------------ losses

    def pretrain_losses(self, batch: Batch, fused: FusedFeatures | None = None) -> dict[str, torch.Tensor]:
        """Per-task losses plus accuracy counts (``*_correct`` / ``*_total``)."""
        if fused is None:
            fused, _ = self(batch)
        out: dict[str, torch.Tensor] = {}
        zero = fused.dec.sum() * 0.0
        sel = batch.mlm_labels != IGNORE
        if sel.any():
            logits = self.mlm_logits(fused.text[sel])
            labels = batch.mlm_labels[sel]
            out["mlm"] = F.cross_entropy(logits, labels)
            out["mlm_correct"] = (logits.argmax(-1) == labels).sum()
            out["mlm_total"] = labels.new_tensor(labels.numel())
        else:
            out["mlm"] = zero
        itm = self.itm_logit(fused.dec[:, 0])
        out["itm"] = F.binary_cross_entropy_with_logits(itm, batch.itm_labels)
        out["itm_correct"] = ((itm > 0).to(batch.itm_labels.dtype) == batch.itm_labels).sum()
        out["itm_total"] = torch.tensor(batch.size)
        has = batch.rpp_labels != IGNORE
        if has.any():
            rows = torch.nonzero(has).squeeze(-1)
            f_obj = fused.obj[rows, batch.rpp_obj[rows]]
            f_ocr = fused.ocr[rows, batch.rpp_ocr[rows]]
            logits = self.rpp_logits(f_obj, f_ocr)
            labels = batch.rpp_labels[rows]
            out["rpp"] = F.cross_entropy(logits, labels)
            out["rpp_correct"] = (logits.argmax(-1) == labels).sum()
            out["rpp_total"] = torch.tensor(labels.numel())
        else:
            out["rpp"] = zero
        return out

    def answer_loss(self, batch: Batch, fused: FusedFeatures | None = None) -> torch.Tensor:
        """Per-step multi-label BCE over the joint score vector, averaged over valid steps."""
        if fused is None:
            fused, _ = self(batch)
        scores = self.decode_scores(fused.dec, fused.ocr, fused.ocr_mask)
        valid = torch.cat(
            [torch.ones_like(scores[..., : self.dims["answer_vocab_size"]], dtype=torch.bool),
             fused.ocr_mask[:, None, :].expand(-1, scores.shape[1], -1)],
            dim=-1,
        )
        bce = F.binary_cross_entropy_with_logits(scores, batch.dec_targets, reduction="none")
        bce = (bce * valid).sum(-1)
        steps = batch.dec_mask.to(bce.dtype)
        return (bce * steps).sum() / steps.sum().clamp(min=1)
