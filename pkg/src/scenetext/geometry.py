"""Bounding-box geometry and the 12-way object/scene-text relation labels.

Coordinates are normalized to the unit square with the origin at the top-left
corner and ``y`` growing downward (image convention).  Orientation labels are
compass directions as seen on the image, so ``N`` means "above".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum


class RelativePosition(str, Enum):
    ON = "On"
    COVER = "Cover"
    OVERLAP = "Overlap"
    N = "N"
    NE = "NE"
    E = "E"
    SE = "SE"
    S = "S"
    SW = "SW"
    W = "W"
    NW = "NW"
    UNRELATED = "Unrelated"

    @property
    def index(self) -> int:
        return _LABEL_INDEX[self]

    @classmethod
    def from_index(cls, i: int) -> "RelativePosition":
        return _LABELS[i]


_LABELS = list(RelativePosition)
_LABEL_INDEX = {label: i for i, label in enumerate(_LABELS)}
NUM_RELATIONS = len(_LABELS)

# counterclockwise from east, 45 degrees apart
_SECTORS = [
    RelativePosition.E,
    RelativePosition.NE,
    RelativePosition.N,
    RelativePosition.NW,
    RelativePosition.W,
    RelativePosition.SW,
    RelativePosition.S,
    RelativePosition.SE,
]

# float slack for threshold comparisons, so exact-boundary grid boxes land on the inclusive side
_EPS = 1e-9


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"box must satisfy 0<=x1<x2<=1 and 0<=y1<y2<=1, got {coords}")

    @classmethod
    def from_pixels(cls, box, width: float, height: float) -> "BoundingBox":
        x1, y1, x2, y2 = box
        return cls(
            min(max(x1 / width, 0.0), 1.0),
            min(max(y1 / height, 0.0), 1.0),
            min(max(x2 / width, 0.0), 1.0),
            min(max(y2 / height, 0.0), 1.0),
        )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class RelationThresholds:
    on_containment: float = 0.9
    cover_containment: float = 0.9
    overlap_iou: float = 0.1
    unrelated_distance: float = 3.0


DEFAULT_THRESHOLDS = RelationThresholds()


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return min(inter / union, 1.0)


def containment_ratio(inner: BoundingBox, outer: BoundingBox) -> float:
    """Fraction of ``inner``'s area that lies inside ``outer``."""
    return min(intersection_area(inner, outer) / inner.area, 1.0)


def orientation(obj: BoundingBox, ocr: BoundingBox) -> RelativePosition:
    """Compass sector of the scene-text center as seen from the object center."""
    ox, oy = obj.center
    tx, ty = ocr.center
    # flip y so that angles grow counterclockwise on the rendered image
    angle = math.degrees(math.atan2(oy - ty, tx - ox)) % 360.0
    sector = int(math.floor((angle + 22.5) / 45.0)) % 8
    return _SECTORS[sector]


def classify_relation(
    obj: BoundingBox, ocr: BoundingBox, thresholds: RelationThresholds = DEFAULT_THRESHOLDS
) -> RelativePosition:
    if containment_ratio(ocr, obj) >= thresholds.on_containment - _EPS:
        return RelativePosition.ON
    if containment_ratio(obj, ocr) >= thresholds.cover_containment - _EPS:
        return RelativePosition.COVER
    if iou(obj, ocr) >= thresholds.overlap_iou - _EPS:
        return RelativePosition.OVERLAP
    ox, oy = obj.center
    tx, ty = ocr.center
    dist = math.hypot(tx - ox, ty - oy)
    if dist > thresholds.unrelated_distance * (obj.diagonal + ocr.diagonal) / 2.0 + _EPS:
        return RelativePosition.UNRELATED
    return orientation(obj, ocr)


def is_on(obj: BoundingBox, ocr: BoundingBox, thresholds: RelationThresholds = DEFAULT_THRESHOLDS) -> bool:
    return classify_relation(obj, ocr, thresholds) is RelativePosition.ON
