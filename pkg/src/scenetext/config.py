"""Run configuration: one nested document, unknown keys rejected.

``RunConfig.desk()`` is the default small CPU preset; ``RunConfig.full()``
restores the full-scale hyper-parameters (batch 128, 24K iterations, 768-wide
fusion model).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .geometry import RelationThresholds
from .samples import MaskConfig, TaskConfig
from .text import TextCaps


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometryConfig(_Section):
    on_containment: float = 0.9
    cover_containment: float = 0.9
    overlap_iou: float = 0.1
    unrelated_distance: float = 3.0

    def thresholds(self) -> RelationThresholds:
        return RelationThresholds(**self.model_dump())


class TextConfig(_Section):
    max_question: int = 20
    max_objects: int = 100
    max_ocr: int = 100
    word_vector_dim: int = 300
    word_vector_file: str | None = None
    bigram_file: str | None = None

    def caps(self) -> TextCaps:
        return TextCaps(self.max_question, self.max_objects, self.max_ocr)


class FeatureConfig(_Section):
    object_visual_dim: int = 2048
    ocr_visual_dim: int = 2048
    max_objects: int = 100
    max_ocr: int = 100


class PretrainTaskConfig(_Section):
    mlm_probability: float = 0.15
    mask_fraction: float = 0.8
    random_fraction: float = 0.1
    itm_probability: float = 0.5
    rpp_classes: Literal[2, 12] = 12
    use_mlm: bool = True
    use_itm: bool = True
    use_rpp: bool = True

    def task(self, geometry: GeometryConfig) -> TaskConfig:
        return TaskConfig(
            mask=MaskConfig(self.mlm_probability, self.mask_fraction, self.random_fraction),
            itm_probability=self.itm_probability,
            rpp_classes=self.rpp_classes,
            thresholds=geometry.thresholds(),
            use_mlm=self.use_mlm,
            use_itm=self.use_itm,
            use_rpp=self.use_rpp,
        )


class ModelConfig(_Section):
    text_layers: int = 3
    mm_layers: int = 4
    hidden_size: int = 768
    num_heads: int = 12
    intermediate_size: int | None = None
    dropout: float = 0.1
    init_std: float = 0.02
    max_text_positions: int = 220
    max_decode_steps_vqa: int = 12
    max_decode_steps_caption: int = 30
    rpp_classes: Literal[2, 12] = 12
    tie_mlm_decoder: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if self.text_layers < 0 or self.mm_layers < 1:
            raise ValueError("need text_layers >= 0 and mm_layers >= 1")
        return self

    @property
    def variant(self) -> tuple[int, int]:
        return (self.text_layers, self.mm_layers)

    @property
    def ffn_size(self) -> int:
        return self.intermediate_size or 4 * self.hidden_size

    def max_decode_steps(self, mode: str) -> int:
        return self.max_decode_steps_caption if mode == "caption" else self.max_decode_steps_vqa


class ScheduleConfig(_Section):
    base_lr: float = 1e-4
    warmup_factor: float = 0.2
    warmup_iters: int = 2000
    lr_decay: float = 0.1
    lr_steps: tuple[int, ...] = (14000, 19000)
    max_iters: int = 24000
    batch_size: int = 128

    @model_validator(mode="after")
    def _check(self):
        steps = list(self.lr_steps)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("lr_steps must be strictly increasing")
        if steps and steps[-1] >= self.max_iters:
            raise ValueError("lr_steps must be below max_iters")
        return self


class TrainConfig(_Section):
    seed: int = 0
    grad_clip: float = 0.25
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss_weights: dict[str, float] = Field(default_factory=lambda: {"mlm": 1.0, "itm": 1.0, "rpp": 1.0})
    joint_pretrain_fraction: float = 0.5
    eval_interval: int = 1000
    checkpoint_interval: int = 1000
    heldout_fraction: float = 0.1
    float64: bool = False
    workers: int = 1
    answer_vocab_size: int = 5000


class CorpusConfig(_Section):
    tiny_height: float = 0.02
    watermark_patterns: tuple[str, ...] = (
        r"^(https?://|www\.)",
        r"\.(com|net|org|co\.uk|de)$",
        r"(shutterstock|alamy|dreamstime|gettyimages|getty|istock|istockphoto|depositphotos|123rf|fotolia|bigstock|stockphoto|pond5)",
        r"^(©|\(c\)|copyright)",
    )
    max_malformed_fraction: float = 0.01
    histogram_overflow: int = 30


class EvalConfig(_Section):
    anls_threshold: float = 0.5
    cider_sigma: float = 6.0
    cider_n: int = 4


class RunConfig(_Section):
    geometry: GeometryConfig = GeometryConfig()
    text: TextConfig = TextConfig()
    features: FeatureConfig = FeatureConfig()
    pretrain_tasks: PretrainTaskConfig = PretrainTaskConfig()
    model: ModelConfig = ModelConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    train: TrainConfig = TrainConfig()
    corpus: CorpusConfig = CorpusConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _consistent(self):
        if self.model.rpp_classes != self.pretrain_tasks.rpp_classes:
            raise ValueError("model.rpp_classes must equal pretrain_tasks.rpp_classes")
        if self.model.max_text_positions < self.text.caps().total:
            raise ValueError("model.max_text_positions below the extended text cap")
        return self

    @classmethod
    def full(cls) -> "RunConfig":
        return cls()

    @classmethod
    def desk(cls) -> "RunConfig":
        """Small CPU preset: 128-wide model, 32-d visual features, 10x fewer iterations."""
        return cls(
            features=FeatureConfig(object_visual_dim=32, ocr_visual_dim=32),
            text=TextConfig(word_vector_dim=32),
            model=ModelConfig(hidden_size=128, num_heads=4, dropout=0.1),
            schedule=ScheduleConfig(
                base_lr=5e-4, warmup_iters=20, lr_steps=(1400, 1900), max_iters=2400, batch_size=16
            ),
            train=TrainConfig(eval_interval=50, checkpoint_interval=50),
        )

    def updated(self, overrides: dict) -> "RunConfig":
        return RunConfig.model_validate(_deep_merge(self.model_dump(), overrides))

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False))

    @classmethod
    def from_file(cls, path: str | Path, base: "RunConfig | None" = None) -> "RunConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        preset = data.pop("preset", None)
        if base is None:
            base = cls.full() if preset == "full" else cls.desk()
        return base.updated(data)


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "loss_weights":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out
