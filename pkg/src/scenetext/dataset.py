"""JSON-lines sample files, with an optional binary sidecar for feature vectors.

Each line is one sample::

    {"schema_version": 1, "sample_id": ..., "image_id": ...,
     "text": {"question": [...], "objects": [...], "ocr": [...]},
     "objects": [{"box": [x1, y1, x2, y2], "label": ..., "feature": [...]}],
     "ocr": [{"box": [...], "word": ..., "feature": [...], "word_vec": [...],
              "phoc": [active indices]}],
     "answers": [...] | null, "caption": ... | null}

With a sidecar, every ``feature``/``word_vec`` list is replaced by
``{"ref": k}`` pointing at row ``k`` of ``<dataset>.features.bin``::

    b"STFEAT01"                       8-byte magic
    uint64  row count R               little-endian
    R x (uint64 offset, uint32 len)   offsets in float32 elements from data start
    float32 data                      little-endian, rows concatenated
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .geometry import BoundingBox
from .samples import ObjectRegion, Sample, SceneTextRegion
from .text import ExtendedText

SCHEMA_VERSION = 1
SIDECAR_MAGIC = b"STFEAT01"
SIDECAR_SUFFIX = ".features.bin"


class SchemaError(ValueError):
    pass


class _SidecarWriter:
    def __init__(self):
        self.rows: list[np.ndarray] = []

    def add(self, vec: np.ndarray) -> dict:
        self.rows.append(np.asarray(vec, dtype="<f4").ravel())
        return {"ref": len(self.rows) - 1}

    def write(self, path: Path) -> None:
        with open(path, "wb") as f:
            f.write(SIDECAR_MAGIC)
            f.write(struct.pack("<Q", len(self.rows)))
            offset = 0
            for row in self.rows:
                f.write(struct.pack("<QI", offset, row.size))
                offset += row.size
            for row in self.rows:
                f.write(row.tobytes())


def read_sidecar(path: str | Path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != SIDECAR_MAGIC:
        raise SchemaError(f"{path}: bad sidecar magic")
    (count,) = struct.unpack_from("<Q", buf, 8)
    index = [struct.unpack_from("<QI", buf, 16 + 12 * i) for i in range(count)]
    data = np.frombuffer(buf, dtype="<f4", offset=16 + 12 * count)
    return [data[off : off + n].astype(np.float32) for off, n in index]


def _vec(v, sidecar: _SidecarWriter | None):
    if sidecar is not None:
        return sidecar.add(v)
    return [float(x) for x in np.asarray(v, dtype=np.float32)]


def sample_to_dict(sample: Sample, sidecar: _SidecarWriter | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "sample_id": sample.sample_id,
        "image_id": sample.image_id,
        "text": sample.extended_text.to_dict(),
        "objects": [
            {"box": o.box.as_list(), "label": o.label, "feature": _vec(o.visual_feature, sidecar)}
            for o in sample.objects
        ],
        "ocr": [
            {
                "box": r.box.as_list(),
                "word": r.word,
                "feature": _vec(r.visual_feature, sidecar),
                "word_vec": _vec(r.word_vec, sidecar),
                "phoc": [int(i) for i in np.flatnonzero(r.phoc)],
                "phoc_dim": int(r.phoc.shape[0]),
            }
            for r in sample.ocr
        ],
        "answers": None if sample.answers is None else list(sample.answers),
        "caption": sample.caption,
    }


def _read_vec(v, rows: list[np.ndarray] | None) -> np.ndarray:
    if isinstance(v, dict):
        if rows is None:
            raise SchemaError("feature reference without a sidecar file")
        return rows[v["ref"]]
    return np.asarray(v, dtype=np.float32)


def sample_from_dict(d: dict, rows: list[np.ndarray] | None = None) -> Sample:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {d.get('schema_version')!r}")
    try:
        objects = tuple(
            ObjectRegion(BoundingBox(*o["box"]), o["label"], _read_vec(o["feature"], rows)) for o in d["objects"]
        )
        ocr = []
        for r in d["ocr"]:
            phoc = np.zeros(r.get("phoc_dim", 604), dtype=np.uint8)
            phoc[r["phoc"]] = 1
            ocr.append(
                SceneTextRegion(
                    BoundingBox(*r["box"]),
                    r["word"],
                    _read_vec(r["feature"], rows),
                    _read_vec(r["word_vec"], rows),
                    phoc,
                )
            )
        return Sample(
            image_id=d["image_id"],
            extended_text=ExtendedText.from_dict(d["text"]),
            objects=objects,
            ocr=tuple(ocr),
            answers=None if d.get("answers") is None else tuple(d["answers"]),
            caption=d.get("caption"),
            sample_id=d.get("sample_id", ""),
        )
    except (KeyError, TypeError, IndexError) as e:
        raise SchemaError(f"malformed sample record: {e!r}") from e


def write_samples(samples: Iterable[Sample], path: str | Path, sidecar: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    writer = _SidecarWriter() if sidecar else None
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(sample_to_dict(s, writer), separators=(",", ":")) + "\n")
    if writer is not None:
        writer.write(path.with_name(path.name + SIDECAR_SUFFIX))
    return path


def iter_samples(path: str | Path) -> Iterator[Sample]:
    path = Path(path)
    side = path.with_name(path.name + SIDECAR_SUFFIX)
    rows = read_sidecar(side) if side.exists() else None
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield sample_from_dict(json.loads(line), rows)


def read_samples(path: str | Path) -> list[Sample]:
    return list(iter_samples(path))


def samples_equal(a: Sample, b: Sample) -> bool:
    """Structural equality including feature arrays."""
    if (a.image_id, a.sample_id, a.extended_text, a.answers, a.caption) != (
        b.image_id, b.sample_id, b.extended_text, b.answers, b.caption
    ):
        return False
    if len(a.objects) != len(b.objects) or len(a.ocr) != len(b.ocr):
        return False
    for x, y in zip(a.objects, b.objects):
        if x.box != y.box or x.label != y.label or not np.array_equal(x.visual_feature, y.visual_feature):
            return False
    for x, y in zip(a.ocr, b.ocr):
        if x.box != y.box or x.word != y.word:
            return False
        for u, v in ((x.visual_feature, y.visual_feature), (x.word_vec, y.word_vec), (x.phoc, y.phoc)):
            if not np.array_equal(u, v):
                return False
    return True
