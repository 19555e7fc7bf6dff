"""Caption-corpus construction from precomputed OCR/object records, corpus
statistics, and a deterministic synthetic corpus generator.

Raw record schema (one JSON object per line)::

    {"schema_version": 1, "image_id": str, "caption": str,
     "width": float?, "height": float?,          # present => boxes are pixels
     "ocr": [{"word": str, "box": [x1, y1, x2, y2], "confidence": float?,
              "is_watermark": bool?, "feature": [float]?}],
     "objects": [{"label": str, "box": [...], "feature": [float]?,
                  "feature_ref": int?}]}

``feature_ref`` indexes a row of an object-feature sidecar (see ``dataset``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import statistics
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .config import CorpusConfig, FeatureConfig, RunConfig, TextConfig
from .dataset import SchemaError, write_samples
from .geometry import BoundingBox, containment_ratio, is_on
from .samples import ObjectRegion, Sample, SceneTextRegion, derive_rng
from .text import (
    DEFAULT_BIGRAMS,
    WordVectorProvider,
    assemble_extended_text,
    get_word_vector_provider,
    load_bigrams,
    phoc_encode,
    tokenize,
)

logger = logging.getLogger(__name__)

RAW_SCHEMA_VERSION = 1


class CorpusError(RuntimeError):
    pass


# ---------------------------------------------------------------- raw records


@dataclass(frozen=True)
class OcrResult:
    word: str
    box: BoundingBox
    confidence: float = 1.0
    is_watermark: bool | None = None
    feature: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ObjectResult:
    label: str
    box: BoundingBox
    feature: tuple[float, ...] | None = None
    feature_ref: int | None = None


@dataclass(frozen=True)
class RawImageRecord:
    image_id: str
    caption: str
    ocr: tuple[OcrResult, ...] = ()
    objects: tuple[ObjectResult, ...] = ()

    @classmethod
    def parse(cls, d: dict) -> "RawImageRecord":
        """Validate a raw JSON record; pixel boxes are normalized by width/height."""
        if "_error" in d:
            raise SchemaError(f"unparseable record {d.get('image_id', '?')!r}: {d['_error']}")
        try:
            if d.get("schema_version", RAW_SCHEMA_VERSION) != RAW_SCHEMA_VERSION:
                raise SchemaError(f"unsupported schema_version {d['schema_version']!r}")
            image_id = str(d["image_id"])
            width, height = d.get("width"), d.get("height")

            def box(b):
                if len(b) != 4:
                    raise SchemaError(f"box needs 4 numbers, got {b!r}")
                if width and height:
                    return BoundingBox.from_pixels([float(x) for x in b], float(width), float(height))
                return BoundingBox(*(float(x) for x in b))

            ocr = []
            for r in d.get("ocr", []):
                if not str(r["word"]).strip():
                    raise SchemaError("empty OCR word")
                feat = r.get("feature")
                ocr.append(
                    OcrResult(
                        str(r["word"]),
                        box(r["box"]),
                        float(r.get("confidence", 1.0)),
                        r.get("is_watermark"),
                        None if feat is None else tuple(float(x) for x in feat),
                    )
                )
            objects = []
            for o in d.get("objects", []):
                if not str(o["label"]).strip():
                    raise SchemaError("empty object label")
                feat = o.get("feature")
                objects.append(
                    ObjectResult(
                        str(o["label"]),
                        box(o["box"]),
                        None if feat is None else tuple(float(x) for x in feat),
                        o.get("feature_ref"),
                    )
                )
            return cls(image_id, str(d.get("caption", "")), tuple(ocr), tuple(objects))
        except SchemaError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"malformed record {d.get('image_id', '?')!r}: {e}") from e


# ---------------------------------------------------------------- filtering


class FilterReason(str, Enum):
    KEPT = "kept"
    NO_TEXT = "no_text"
    WATERMARK_ONLY = "watermark_only"
    TINY_ONLY = "tiny_only"


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: FilterReason

    def __post_init__(self):
        if self.keep != (self.reason is FilterReason.KEPT):
            raise ValueError("keep must be true exactly when reason is 'kept'")


@dataclass(frozen=True)
class FilterRules:
    tiny_height: float = 0.02
    watermark_patterns: tuple[str, ...] = CorpusConfig().watermark_patterns
    _compiled: tuple[re.Pattern, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_compiled", tuple(re.compile(p, re.IGNORECASE) for p in self.watermark_patterns))

    @classmethod
    def from_config(cls, cfg: CorpusConfig) -> "FilterRules":
        return cls(cfg.tiny_height, tuple(cfg.watermark_patterns))

    @classmethod
    def from_file(cls, path: str | Path) -> "FilterRules":
        """JSON or YAML mapping with ``tiny_height`` and/or ``watermark_patterns``."""
        d = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(d, dict):
            raise SchemaError(f"{path}: rules must be a mapping")
        unknown = set(d) - {"tiny_height", "watermark_patterns"}
        if unknown:
            raise SchemaError(f"unknown rule keys: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def is_watermark(self, r: OcrResult) -> bool:
        if r.is_watermark is not None:
            return bool(r.is_watermark)
        return any(p.search(r.word.strip()) for p in self._compiled)

    def is_tiny(self, r: OcrResult) -> bool:
        return r.box.height < self.tiny_height


def filter_image(record: RawImageRecord, rules: FilterRules = FilterRules()) -> FilterDecision:
    if not record.ocr:
        return FilterDecision(False, FilterReason.NO_TEXT)
    content = [r for r in record.ocr if not rules.is_watermark(r)]
    if not content:
        return FilterDecision(False, FilterReason.WATERMARK_ONLY)
    if all(rules.is_tiny(r) for r in content):
        return FilterDecision(False, FilterReason.TINY_ONLY)
    return FilterDecision(True, FilterReason.KEPT)


# ---------------------------------------------------------------- sample building


@dataclass
class FeatureBuilder:
    """Turns regions into model-ready ``Sample`` objects with derived word features."""

    features: FeatureConfig = field(default_factory=FeatureConfig)
    text: TextConfig = field(default_factory=TextConfig)
    word_vectors: WordVectorProvider | None = None
    bigrams: Sequence[str] = DEFAULT_BIGRAMS

    def __post_init__(self):
        if self.word_vectors is None:
            self.word_vectors = get_word_vector_provider(self.text.word_vector_file, self.text.word_vector_dim)
        if self.text.bigram_file:
            self.bigrams = load_bigrams(self.text.bigram_file)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "FeatureBuilder":
        return cls(cfg.features, cfg.text)

    def scene_text(self, word: str, box: BoundingBox, visual: np.ndarray | None = None) -> SceneTextRegion:
        dim = self.features.ocr_visual_dim
        vis = np.zeros(dim, np.float32) if visual is None else np.asarray(visual, np.float32)
        if vis.shape != (dim,):
            raise SchemaError(f"ocr feature dim {vis.shape[0]} != {dim}")
        key = "".join(tokenize(word)) or word.lower()
        return SceneTextRegion(box, word, vis, np.asarray(self.word_vectors(key), np.float32), phoc_encode(word, self.bigrams))

    def object(self, label: str, box: BoundingBox, visual: np.ndarray | None = None) -> ObjectRegion:
        dim = self.features.object_visual_dim
        vis = np.zeros(dim, np.float32) if visual is None else np.asarray(visual, np.float32)
        if vis.shape != (dim,):
            raise SchemaError(f"object feature dim {vis.shape[0]} != {dim}")
        return ObjectRegion(box, label, vis)

    def sample(
        self,
        image_id: str,
        question: str | Sequence[str],
        objects: Sequence[ObjectRegion],
        ocr: Sequence[SceneTextRegion],
        answers: Sequence[str] | None = None,
        caption: str | None = None,
        sample_id: str = "",
    ) -> Sample:
        objects = tuple(objects)[: self.features.max_objects]
        ocr = tuple(ocr)[: self.features.max_ocr]
        text = assemble_extended_text(question, [o.label for o in objects], [r.word for r in ocr], self.text.caps())
        return Sample(
            image_id=image_id,
            extended_text=text,
            objects=objects,
            ocr=ocr,
            answers=None if answers is None else tuple(answers),
            caption=caption,
            sample_id=sample_id or image_id,
        )


def record_to_sample(
    record: RawImageRecord, builder: FeatureBuilder, rules: FilterRules, object_rows: list[np.ndarray] | None = None
) -> Sample:
    """Kept record -> Sample with caption as the question part; watermark words are dropped."""
    objects = []
    for o in record.objects:
        feat = o.feature
        if feat is None and o.feature_ref is not None:
            if object_rows is None:
                raise SchemaError(f"{record.image_id}: feature_ref without a feature sidecar")
            feat = object_rows[o.feature_ref]
        objects.append(builder.object(o.label, o.box, None if feat is None else np.asarray(feat)))
    ocr = [
        builder.scene_text(r.word, r.box, None if r.feature is None else np.asarray(r.feature))
        for r in record.ocr
        if not rules.is_watermark(r)
    ]
    return builder.sample(record.image_id, record.caption, objects, ocr, caption=record.caption)


@dataclass
class BuildResult:
    samples: list[Sample]
    decisions: dict[str, FilterDecision]
    malformed: list[str]
    stats: dict


def build_corpus(
    records: Iterable[dict],
    out: str | Path | None = None,
    rules: FilterRules = FilterRules(),
    builder: FeatureBuilder | None = None,
    max_malformed_fraction: float = 0.01,
    object_rows: list[np.ndarray] | None = None,
    histogram_overflow: int = 30,
    sidecar: bool = False,
) -> BuildResult:
    """Filter raw records and serialize the kept ones in input order.

    Malformed records are skipped and logged; if more than
    ``max_malformed_fraction`` of the input is malformed the build aborts with
    ``CorpusError`` before anything is written.
    """
    builder = builder or FeatureBuilder()
    samples: list[Sample] = []
    decisions: dict[str, FilterDecision] = {}
    malformed: list[str] = []
    total = 0
    for i, raw in enumerate(records):
        total += 1
        try:
            record = RawImageRecord.parse(raw)
            decision = filter_image(record, rules)
            sample = record_to_sample(record, builder, rules, object_rows) if decision.keep else None
        except SchemaError as e:
            rid = raw.get("image_id", f"#{i}") if isinstance(raw, dict) else f"#{i}"
            logger.warning("skipping malformed record %s: %s", rid, e)
            malformed.append(str(rid))
            continue
        decisions[record.image_id] = decision
        if sample is not None:
            samples.append(sample)
    if total and len(malformed) / total > max_malformed_fraction:
        raise CorpusError(f"{len(malformed)} of {total} records malformed (limit {max_malformed_fraction:.1%})")
    stats = corpus_stats(samples, histogram_overflow)
    stats["input_records"] = total
    stats["malformed"] = len(malformed)
    stats["filter_reasons"] = {r.value: 0 for r in FilterReason}
    for d in decisions.values():
        stats["filter_reasons"][d.reason.value] += 1
    if out is not None:
        write_samples(samples, out, sidecar=sidecar)
    return BuildResult(samples, decisions, malformed, stats)


def read_records(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                # keep a placeholder so it counts toward the malformed fraction
                out.append({"image_id": f"line{n}", "_error": str(e)})
    return out


# ---------------------------------------------------------------- statistics


def corpus_stats(dataset: Iterable[Sample] | Iterable[int], histogram_overflow: int = 30) -> dict:
    """Scene-text count statistics: mean, median, per-count histogram with an overflow bin."""
    counts = [x if isinstance(x, (int, np.integer)) else x.num_ocr for x in dataset]
    hist = [0] * histogram_overflow
    overflow = 0
    for c in counts:
        if c < histogram_overflow:
            hist[c] += 1
        else:
            overflow += 1
    return {
        "count": len(counts),
        "mean": float(statistics.fmean(counts)) if counts else 0.0,
        "median": float(statistics.median(counts)) if counts else 0.0,
        "histogram": {"bins": hist, "overflow": overflow, "overflow_from": histogram_overflow},
    }


def render_histogram(stats: dict, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    hist = stats["histogram"]
    labels = [str(i) for i in range(len(hist["bins"]))] + [f"{hist['overflow_from']}+"]
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.bar(range(len(labels)), hist["bins"] + [hist["overflow"]])
    ax.set_xticks(range(0, len(labels), 5), labels[::5])
    ax.set_xlabel("scene text regions per image")
    ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------- synthetic corpus

OBJECT_LABELS = (
    "bottle", "sign", "shirt", "car", "book", "cup", "bus", "box", "door", "poster",
    "truck", "bag", "hat", "board", "can", "jar", "phone", "clock", "banner", "screen",
)
SCENE_WORDS = (
    "cola", "stop", "exit", "open", "sale", "pizza", "coffee", "taxi", "hotel", "bank",
    "police", "metro", "delta", "nova", "zen", "apex", "echo", "lotus", "orbit", "pixel",
    "royal", "sunny", "tiger", "ultra", "vivid", "wave", "alpha", "bravo", "cargo", "dream",
    "eagle", "fresh", "giant", "happy", "ice", "jazz", "king", "lemon", "magic", "night",
    "ocean", "peak", "quick", "river", "star", "tower", "union", "venus", "wild", "xenon",
    "yoga", "zone", "mint", "glow", "hero", "iron", "joy", "kiwi", "luna", "neon",
)
QUESTION_TEMPLATES = (
    "what is written on the {label}",
    "what does the {label} say",
    "what word is on the {label}",
    "which text appears on the {label}",
)
CAPTION_TEMPLATES = (
    "a {label} with the word {word} on it",
    "the {label} says {word}",
    "a {label} that reads {word} near a {other}",
)
SYNTH_TASKS = ("vqa", "caption", "pretrain")


def _prototype(kind: str, name: str, dim: int) -> np.ndarray:
    # fixed per name across seeds so train/val corpora share one "visual world"
    seed = int.from_bytes(hashlib.blake2b(f"{kind}:{name}".encode(), digest_size=8).digest(), "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v) * np.sqrt(dim) * 0.5


def _place(rng, w, h, taken, tries=50):
    for _ in range(tries):
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        box = BoundingBox(round(x, 4), round(y, 4), round(x + w, 4), round(y + h, 4))
        if all(_gap(box, t) for t in taken):
            return box
    return None


def _gap(a: BoundingBox, b: BoundingBox, margin: float = 0.02) -> bool:
    return a.x2 + margin <= b.x1 or b.x2 + margin <= a.x1 or a.y2 + margin <= b.y1 or b.y2 + margin <= a.y1


def _inside(rng, outer: BoundingBox) -> BoundingBox:
    w = outer.width * rng.uniform(0.3, 0.7)
    h = outer.height * rng.uniform(0.15, 0.35)
    x = outer.x1 + rng.uniform(0, outer.width - w)
    y = outer.y1 + rng.uniform(0, outer.height - h)
    return BoundingBox(round(x, 4), round(y, 4), round(min(x + w, outer.x2), 4), round(min(y + h, outer.y2), 4))


def synth_sample(
    rng: np.random.Generator,
    index: int,
    task: str,
    builder: FeatureBuilder,
    noise: float = 0.5,
    prefix: str = "synth",
    backdrop: float = 1.0,
) -> Sample:
    """One synthetic image as a feature bundle.

    Objects are non-overlapping and labelled; each carries one scene-text word
    placed on it.  Extra free-floating words, an occasional partially
    overlapping word, and an occasional banner covering a small object make
    the relation labels diverse.  The VQA question names one object and the
    answer is the word on it.

    A word printed on an object picks up that object's appearance: its visual
    feature mixes in ``backdrop`` times the object's prototype, the way a
    detector crop of the word includes the surface behind it.
    """
    dims = builder.features
    n_obj = int(rng.integers(2, 6))
    labels = rng.choice(len(OBJECT_LABELS), size=n_obj, replace=False)
    n_words = n_obj + 4
    words = [SCENE_WORDS[i] for i in rng.choice(len(SCENE_WORDS), size=n_words, replace=False)]

    obj_boxes: list[BoundingBox] = []
    for _ in range(n_obj):
        b = _place(rng, rng.uniform(0.15, 0.3), rng.uniform(0.15, 0.3), obj_boxes)
        if b is not None:
            obj_boxes.append(b)
    n_obj = len(obj_boxes)
    labels = [OBJECT_LABELS[i] for i in labels[:n_obj]]

    ocr_boxes: list[BoundingBox] = []
    ocr_words: list[str] = []
    on_word: dict[int, str] = {}
    for k, ob in enumerate(obj_boxes):
        ocr_boxes.append(_inside(rng, ob))
        ocr_words.append(words[k])
        on_word[k] = words[k]
    free = words[n_obj:]
    for w in free[: int(rng.integers(1, 4))]:
        b = _place(rng, rng.uniform(0.05, 0.15), rng.uniform(0.03, 0.06), obj_boxes + ocr_boxes, tries=20)
        if b is not None:
            ocr_boxes.append(b)
            ocr_words.append(w)
    if rng.random() < 0.3 and n_obj:
        # word straddling an object's edge
        ob = obj_boxes[int(rng.integers(n_obj))]
        w, h = ob.width * 0.6, ob.height * 0.3
        x = min(max(ob.x2 - w / 2, 0.0), 1 - w)
        y = min(max(ob.y1 + ob.height * 0.3, 0.0), 1 - h)
        ocr_boxes.append(BoundingBox(round(x, 4), round(y, 4), round(x + w, 4), round(y + h, 4)))
        ocr_words.append(free[-1])
    if rng.random() < 0.2:
        # banner text covering a small object
        b = _place(rng, 0.3, 0.12, obj_boxes, tries=20)
        if b is not None:
            small = BoundingBox(
                round(b.x1 + 0.1, 4), round(b.y1 + 0.03, 4), round(b.x1 + 0.18, 4), round(b.y1 + 0.09, 4)
            )
            lab = OBJECT_LABELS[int(rng.integers(len(OBJECT_LABELS)))]
            if lab not in labels:
                obj_boxes.append(small)
                labels.append(lab)
                ocr_boxes.append(b)
                ocr_words.append(free[-2])

    objects = [
        builder.object(lab, box, _prototype("obj", lab, dims.object_visual_dim) + noise * rng.standard_normal(dims.object_visual_dim))
        for lab, box in zip(labels, obj_boxes)
    ]
    regions = []
    for w, box in zip(ocr_words, ocr_boxes):
        feat = _prototype("ocr", w, dims.ocr_visual_dim) + noise * rng.standard_normal(dims.ocr_visual_dim)
        for lab, ob in zip(labels, obj_boxes):
            share = containment_ratio(box, ob)
            if share > 0:
                feat = feat + backdrop * share * _prototype("obj", lab, dims.ocr_visual_dim)
        regions.append(builder.scene_text(w, box, feat))
    # reading order: top-to-bottom, then left-to-right
    regions.sort(key=lambda r: (round(r.box.y1, 2), r.box.x1))

    image_id = f"{prefix}-{index:06d}"
    target = int(rng.integers(n_obj))
    label, word = labels[target], on_word[target]
    other = labels[(target + 1) % n_obj] if n_obj > 1 else label
    caption = CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))].format(label=label, word=word, other=other)
    if task == "vqa":
        question = QUESTION_TEMPLATES[int(rng.integers(len(QUESTION_TEMPLATES)))].format(label=label)
        return builder.sample(image_id, question, objects, regions, answers=[word] * 10, sample_id=image_id)
    if task == "caption":
        return builder.sample(image_id, "", objects, regions, caption=caption, sample_id=image_id)
    if task == "pretrain":
        return builder.sample(image_id, caption, objects, regions, caption=caption, sample_id=image_id)
    raise ValueError(f"unknown synthetic task {task!r}; expected one of {SYNTH_TASKS}")


def synth_corpus(
    seed: int, n: int, task: str = "vqa", builder: FeatureBuilder | None = None, prefix: str | None = None
) -> list[Sample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    builder = builder or FeatureBuilder()
    prefix = prefix or f"synth{seed}"
    return [synth_sample(derive_rng(seed, i), i, task, builder, prefix=prefix) for i in range(n)]


def relation_histogram(samples: Iterable[Sample]) -> Counter:
    """Relation labels over every (object, scene text) pair."""
    from .geometry import classify_relation

    hist: Counter = Counter()
    for s in samples:
        for o in s.objects:
            for r in s.ocr:
                hist[classify_relation(o.box, r.box)] += 1
    return hist


def on_pairs(sample: Sample) -> list[tuple[int, int]]:
    return [(i, j) for i, o in enumerate(sample.objects) for j, r in enumerate(sample.ocr) if is_on(o.box, r.box)]
