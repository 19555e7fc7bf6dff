"""Samples, region features, and randomized pre-training instance construction.

Every randomized operation takes an explicit ``numpy.random.Generator``.
``derive_rng`` gives each (seed, step, sample) triple its own stream so that
instances do not depend on batch order or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .geometry import (
    DEFAULT_THRESHOLDS,
    BoundingBox,
    RelationThresholds,
    RelativePosition,
    classify_relation,
    is_on,
)
from .text import MASK, PAD, ExtendedText, Segment, Vocabulary


class PollutionPoolExhausted(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ObjectRegion:
    box: BoundingBox
    label: str
    visual_feature: np.ndarray

    def __post_init__(self):
        if not self.label:
            raise ValueError("object label must be non-empty")


@dataclass(frozen=True, eq=False)
class SceneTextRegion:
    box: BoundingBox
    word: str
    visual_feature: np.ndarray
    word_vec: np.ndarray
    phoc: np.ndarray

    def __post_init__(self):
        if not self.word:
            raise ValueError("scene text word must be non-empty")


@dataclass(frozen=True, eq=False)
class Sample:
    image_id: str
    extended_text: ExtendedText
    objects: tuple[ObjectRegion, ...] = ()
    ocr: tuple[SceneTextRegion, ...] = ()
    answers: tuple[str, ...] | None = None
    caption: str | None = None
    sample_id: str = ""

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_ocr(self) -> int:
        return len(self.ocr)

    @property
    def ocr_words(self) -> list[str]:
        return [r.word for r in self.ocr]


def check_sample(sample: Sample, obj_dim: int, ocr_visual_dim: int, word_dim: int, phoc_dim: int,
                 max_objects: int = 100, max_ocr: int = 100, max_text: int = 220) -> None:
    """Raise ``ValueError`` if feature dims or caps do not match the config."""
    if len(sample.extended_text) > max_text:
        raise ValueError(f"{sample.image_id}: extended text longer than {max_text}")
    if sample.num_objects > max_objects or sample.num_ocr > max_ocr:
        raise ValueError(f"{sample.image_id}: region count over cap")
    for o in sample.objects:
        if o.visual_feature.shape != (obj_dim,):
            raise ValueError(f"object visual_feature dim {o.visual_feature.shape} != ({obj_dim},)")
    for r in sample.ocr:
        for name, arr, dim in (
            ("visual_feature", r.visual_feature, ocr_visual_dim),
            ("word_vec", r.word_vec, word_dim),
            ("phoc", r.phoc, phoc_dim),
        ):
            if arr.shape != (dim,):
                raise ValueError(f"ocr {name} dim {arr.shape} != ({dim},)")


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# ---------------------------------------------------------------- MLM


@dataclass(frozen=True)
class MaskConfig:
    probability: float = 0.15
    mask_fraction: float = 0.8
    random_fraction: float = 0.1
    # remaining mass keeps the token unchanged


def apply_mlm_mask(
    text: ExtendedText, vocab: Vocabulary, rng: np.random.Generator, config: MaskConfig = MaskConfig()
) -> tuple[ExtendedText, list[int], list[str]]:
    """BERT-style masking over every non-pad position of the extended text.

    Returns the masked text, the selected positions, and the original tokens
    at those positions (including ones left unchanged).
    """
    tokens = text.tokens
    n = len(tokens)
    if n == 0 or config.probability <= 0:
        return text, [], []
    # draw all randomness up front so the stream consumed depends only on n
    select = rng.random(n) < config.probability
    action = rng.random(n)
    regular = vocab.regular_ids
    random_ids = rng.integers(regular.start, regular.stop, size=n) if len(regular) else np.zeros(n, int)
    positions, targets = [], []
    out = list(tokens)
    for i in range(n):
        if not select[i] or tokens[i] == PAD:
            continue
        positions.append(i)
        targets.append(tokens[i])
        if action[i] < config.mask_fraction:
            out[i] = MASK
        elif action[i] < config.mask_fraction + config.random_fraction and len(regular):
            out[i] = vocab.token(int(random_ids[i]))
    return text.with_tokens(out), positions, targets


# ---------------------------------------------------------------- ITM


class ItmLabel(str, Enum):
    MATCHED = "matched"
    POLLUTED = "polluted"


def apply_itm_pollution(
    sample: Sample, pool: Sequence[Sample], rng: np.random.Generator, probability: float = 0.5
) -> tuple[Sample, ItmLabel, Segment | None]:
    """Swap one non-empty text part for the same part of a different image.

    Raises ``PollutionPoolExhausted`` if ``pool`` has no other image (checked
    on every call so the error does not depend on the coin flip).
    """
    candidates = [i for i, s in enumerate(pool) if s.image_id != sample.image_id]
    if not candidates:
        raise PollutionPoolExhausted("pollution pool exhausted")
    text = sample.extended_text
    parts = [seg for seg in Segment if len(text.part(seg)) > 0]
    coin = rng.random()
    pick_part = rng.random()
    pick_donor = rng.random()
    if coin >= probability or not parts:
        return sample, ItmLabel.MATCHED, None
    seg = parts[min(int(pick_part * len(parts)), len(parts) - 1)]
    donor = pool[candidates[min(int(pick_donor * len(candidates)), len(candidates) - 1)]]
    polluted = replace(sample, extended_text=text.with_part(seg, donor.extended_text.part(seg)))
    return polluted, ItmLabel.POLLUTED, seg


# ---------------------------------------------------------------- RPP


def relation_label(
    obj: BoundingBox, ocr: BoundingBox, rpp_classes: int = 12, thresholds: RelationThresholds = DEFAULT_THRESHOLDS
) -> int:
    """Integer RPP target: relation index (12 classes) or 1/0 for on/not-on."""
    if rpp_classes == 12:
        return classify_relation(obj, ocr, thresholds).index
    if rpp_classes == 2:
        return int(is_on(obj, ocr, thresholds))
    raise ValueError(f"rpp_classes must be 2 or 12, got {rpp_classes}")


def sample_rpp_pair(
    sample: Sample, rng: np.random.Generator, rpp_classes: int = 12, thresholds: RelationThresholds = DEFAULT_THRESHOLDS
) -> tuple[int, int, RelativePosition | bool] | None:
    """Uniform (object, scene text) pair and its relation; ``None`` if either side is empty."""
    i_draw, j_draw = rng.random(), rng.random()
    if sample.num_objects == 0 or sample.num_ocr == 0:
        return None
    i = min(int(i_draw * sample.num_objects), sample.num_objects - 1)
    j = min(int(j_draw * sample.num_ocr), sample.num_ocr - 1)
    obj, ocr = sample.objects[i].box, sample.ocr[j].box
    if rpp_classes == 2:
        return i, j, is_on(obj, ocr, thresholds)
    if rpp_classes != 12:
        raise ValueError(f"rpp_classes must be 2 or 12, got {rpp_classes}")
    return i, j, classify_relation(obj, ocr, thresholds)


# ---------------------------------------------------------------- instances


@dataclass(frozen=True)
class TaskConfig:
    mask: MaskConfig = field(default_factory=MaskConfig)
    itm_probability: float = 0.5
    rpp_classes: int = 12
    thresholds: RelationThresholds = DEFAULT_THRESHOLDS
    use_mlm: bool = True
    use_itm: bool = True
    use_rpp: bool = True


@dataclass(frozen=True, eq=False)
class PretrainInstance:
    sample: Sample
    mask_positions: tuple[int, ...]
    mask_targets: tuple[str, ...]
    itm_label: ItmLabel
    polluted_part: Segment | None
    rpp_pair: tuple[int, int] | None
    rpp_label: RelativePosition | bool | None

    @property
    def has_rpp(self) -> bool:
        return self.rpp_pair is not None

    @property
    def rpp_target(self) -> int:
        if isinstance(self.rpp_label, RelativePosition):
            return self.rpp_label.index
        return int(bool(self.rpp_label))


def build_pretrain_instance(
    sample: Sample, pool: Sequence[Sample], vocab: Vocabulary, rng: np.random.Generator, task: TaskConfig = TaskConfig()
) -> PretrainInstance:
    """Pollute first, then mask only unpolluted text, then draw one RPP pair.

    The three steps draw from independent child streams of ``rng`` so that
    disabling one task does not shift the randomness of the others.
    """
    itm_rng, mlm_rng, rpp_rng = rng.spawn(3)
    label, part = ItmLabel.MATCHED, None
    if task.use_itm:
        sample, label, part = apply_itm_pollution(sample, pool, itm_rng, task.itm_probability)
    positions: list[int] = []
    targets: list[str] = []
    if task.use_mlm and label is ItmLabel.MATCHED:
        text, positions, targets = apply_mlm_mask(sample.extended_text, vocab, mlm_rng, task.mask)
        sample = replace(sample, extended_text=text)
    pair = sample_rpp_pair(sample, rpp_rng, task.rpp_classes, task.thresholds) if task.use_rpp else None
    return PretrainInstance(
        sample=sample,
        mask_positions=tuple(positions),
        mask_targets=tuple(targets),
        itm_label=label,
        polluted_part=part,
        rpp_pair=None if pair is None else (pair[0], pair[1]),
        rpp_label=None if pair is None else pair[2],
    )
