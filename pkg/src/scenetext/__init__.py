"""Text-aware multimodal pre-training for scene-text VQA and captioning."""

from .config import RunConfig
from .geometry import BoundingBox, RelativePosition, classify_relation
from .samples import Sample

__all__ = ["BoundingBox", "RelativePosition", "RunConfig", "Sample", "classify_relation"]
__version__ = "0.1.0"
