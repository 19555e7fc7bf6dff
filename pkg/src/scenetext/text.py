"""Tokenization, the three-part extended text stream, and per-word encoders."""

from __future__ import annotations

import hashlib
import logging
import re
import string
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, MASK, BEGIN, END, UNK = "<pad>", "<mask>", "<begin>", "<end>", "<unk>"
RESERVED_TOKENS = (PAD, MASK, BEGIN, END, UNK)

_PUNCT_RE = re.compile(r"[^\w\s]|_", re.UNICODE)
_APOSTROPHES = str.maketrans("", "", "'’`")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop apostrophes, turn other punctuation into spaces, split."""
    text = text.lower().translate(_APOSTROPHES)
    return _PUNCT_RE.sub(" ", text).split()


class Segment(IntEnum):
    Q = 0
    OBJ = 1
    OCR = 2


@dataclass(frozen=True)
class TextCaps:
    question: int = 20
    objects: int = 100
    ocr: int = 100

    @property
    def total(self) -> int:
        return self.question + self.objects + self.ocr


DEFAULT_CAPS = TextCaps()


@dataclass(frozen=True)
class ExtendedText:
    """Token stream ``[question, object labels, ocr words]``.

    Parts are stored separately so that segment boundaries survive masking and
    pollution; positions index the concatenation.
    """

    question: tuple[str, ...] = ()
    objects: tuple[str, ...] = ()
    ocr: tuple[str, ...] = ()

    @property
    def tokens(self) -> list[str]:
        return [*self.question, *self.objects, *self.ocr]

    @property
    def segments(self) -> list[Segment]:
        return (
            [Segment.Q] * len(self.question)
            + [Segment.OBJ] * len(self.objects)
            + [Segment.OCR] * len(self.ocr)
        )

    @property
    def positions(self) -> list[int]:
        return list(range(len(self)))

    def __len__(self) -> int:
        return len(self.question) + len(self.objects) + len(self.ocr)

    def part(self, segment: Segment) -> tuple[str, ...]:
        return (self.question, self.objects, self.ocr)[segment]

    def offset(self, segment: Segment) -> int:
        return (0, len(self.question), len(self.question) + len(self.objects))[segment]

    def with_part(self, segment: Segment, tokens: Sequence[str]) -> "ExtendedText":
        parts = [self.question, self.objects, self.ocr]
        parts[segment] = tuple(tokens)
        return ExtendedText(*parts)

    def with_tokens(self, tokens: Sequence[str]) -> "ExtendedText":
        """Same segment layout, new token strings."""
        if len(tokens) != len(self):
            raise ValueError("token count must not change")
        q, o = len(self.question), len(self.objects)
        return ExtendedText(tuple(tokens[:q]), tuple(tokens[q : q + o]), tuple(tokens[q + o :]))

    def to_dict(self) -> dict:
        return {"question": list(self.question), "objects": list(self.objects), "ocr": list(self.ocr)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExtendedText":
        return cls(tuple(d.get("question", ())), tuple(d.get("objects", ())), tuple(d.get("ocr", ())))


def assemble_extended_text(
    question: str | Sequence[str],
    obj_labels: Sequence[str],
    ocr_words: Sequence[str],
    caps: TextCaps = DEFAULT_CAPS,
) -> ExtendedText:
    """Build the extended text, truncating each part to its cap.

    ``question`` may be a raw string (tokenized here) or a token list.  Object
    labels are tokenized and may expand to several tokens; OCR words are
    kept one token per region so that ``ocr[j]`` stays aligned with region ``j``.
    """
    q_tokens = tokenize(question) if isinstance(question, str) else list(question)
    obj_tokens = [tok for label in obj_labels for tok in tokenize(label)]
    ocr_tokens = [normalize_ocr_token(w) for w in ocr_words]
    return ExtendedText(
        tuple(q_tokens[: caps.question]),
        tuple(obj_tokens[: caps.objects]),
        tuple(ocr_tokens[: caps.ocr]),
    )


def normalize_ocr_token(word: str) -> str:
    """Single text token for an OCR word; raw strings are kept elsewhere for copying."""
    toks = tokenize(word)
    return "".join(toks) if toks else word.lower()


class Vocabulary:
    """Dense token/id map with a fixed reserved block at ids 0-4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(RESERVED_TOKENS)
        self._stoi: dict[str, int] = {t: i for i, t in enumerate(self._itos)}
        self._frozen = False
        for tok in tokens:
            self.add(tok)

    pad_id = 0
    mask_id = 1
    begin_id = 2
    end_id = 3
    unk_id = 4
    num_reserved = len(RESERVED_TOKENS)

    def add(self, token: str) -> int:
        if token in self._stoi:
            return self._stoi[token]
        if self._frozen:
            raise RuntimeError("vocabulary is frozen")
        self._stoi[token] = len(self._itos)
        self._itos.append(token)
        return self._stoi[token]

    def freeze(self) -> "Vocabulary":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    def id(self, token: str) -> int:
        return self._stoi.get(token, self.unk_id)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def token(self, i: int) -> str:
        return self._itos[i]

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    @property
    def regular_ids(self) -> range:
        return range(self.num_reserved, len(self._itos))

    @classmethod
    def build(cls, token_lists: Iterable[Iterable[str]], min_count: int = 1, max_size: int | None = None) -> "Vocabulary":
        counts: dict[str, int] = {}
        for toks in token_lists:
            for t in toks:
                counts[t] = counts.get(t, 0) + 1
        # frequency order, ties by first appearance (dicts keep insertion order)
        ranked = sorted(counts, key=lambda t: -counts[t])
        ranked = [t for t in ranked if counts[t] >= min_count and t not in RESERVED_TOKENS]
        if max_size is not None:
            ranked = ranked[: max(0, max_size - cls.num_reserved)]
        return cls(ranked).freeze()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self._itos[self.num_reserved :]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines).freeze()

    def to_list(self) -> list[str]:
        return self._itos[self.num_reserved :]

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens).freeze()


# ---------------------------------------------------------------- PHOC

PHOC_UNIGRAMS = string.ascii_lowercase + string.digits
PHOC_UNIGRAM_LEVELS = (2, 3, 4, 5)
PHOC_BIGRAM_LEVELS = (2,)


def load_bigrams(path: str | Path | None = None) -> tuple[str, ...]:
    if path is None:
        text = resources.files("scenetext").joinpath("data/bigrams.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return tuple(line.strip() for line in text.splitlines() if line.strip())


DEFAULT_BIGRAMS = load_bigrams()


def phoc_dim(n_bigrams: int = len(DEFAULT_BIGRAMS)) -> int:
    return len(PHOC_UNIGRAMS) * sum(PHOC_UNIGRAM_LEVELS) + n_bigrams * sum(PHOC_BIGRAM_LEVELS)


PHOC_DIM = phoc_dim()


def _phoc_clean(word: str) -> str:
    return "".join(c for c in word.lower() if c in _UNIGRAM_INDEX)


_UNIGRAM_INDEX = {c: i for i, c in enumerate(PHOC_UNIGRAMS)}


def _occupied_regions(start: int, width: int, n: int, level: int) -> list[int]:
    # span [start/n, (start+width)/n) vs region [r/level, (r+1)/level), scaled by n*level
    lo, hi = start * level, (start + width) * level
    out = []
    for r in range(level):
        overlap = min(hi, (r + 1) * n) - max(lo, r * n)
        if overlap > 0 and 2 * overlap >= width * level:
            out.append(r)
    return out


def phoc_encode(word: str, bigrams: Sequence[str] = DEFAULT_BIGRAMS) -> np.ndarray:
    """Binary pyramidal histogram of characters (604 dims with the default bigrams).

    Unigram block layout is level-major, then region, then character; the
    bigram block follows the same layout after all unigram levels.
    """
    vec = np.zeros(phoc_dim(len(bigrams)), dtype=np.uint8)
    word = _phoc_clean(word)
    n = len(word)
    if n == 0:
        return vec
    n_uni = len(PHOC_UNIGRAMS)
    level_base = 0
    for level in PHOC_UNIGRAM_LEVELS:
        for k, ch in enumerate(word):
            for r in _occupied_regions(k, 1, n, level):
                vec[level_base + r * n_uni + _UNIGRAM_INDEX[ch]] = 1
        level_base += level * n_uni
    bigram_index = {b: i for i, b in enumerate(bigrams)}
    for level in PHOC_BIGRAM_LEVELS:
        for k in range(n - 1):
            b = bigram_index.get(word[k : k + 2])
            if b is None:
                continue
            for r in _occupied_regions(k, 2, n, level):
                vec[level_base + r * len(bigrams) + b] = 1
        level_base += level * len(bigrams)
    return vec


# ---------------------------------------------------------------- word vectors

WordVectorProvider = Callable[[str], np.ndarray]


class HashWordVectors:
    """Deterministic unit-norm pseudo-random vectors keyed by a hash of the word."""

    def __init__(self, dim: int = 300):
        self.dim = dim
        self._cached = lru_cache(maxsize=65536)(self._compute)

    def _compute(self, word: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest(), "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        v /= np.linalg.norm(v)
        v = v.astype(np.float32)
        v.setflags(write=False)
        return v

    def __call__(self, word: str) -> np.ndarray:
        return self._cached(word)


class TextVectorFile:
    """Word vectors from a ``.vec`` text file (header line, then ``word v1 v2 ...``).

    Unknown words fall through to a hash provider of the same dimension.
    """

    def __init__(self, path: str | Path, dim: int | None = None):
        self.path = Path(path)
        self._table: dict[str, np.ndarray] = {}
        with open(self.path, encoding="utf-8") as f:
            first = f.readline().split()
            if len(first) != 2:
                f.seek(0)
            for line in f:
                parts = line.rstrip().split(" ")
                if len(parts) < 2:
                    continue
                self._table[parts[0]] = np.asarray(parts[1:], dtype=np.float32)
        file_dim = len(next(iter(self._table.values()))) if self._table else (dim or 300)
        if dim is not None and dim != file_dim:
            raise ValueError(f"word vector file has dim {file_dim}, config expects {dim}")
        self.dim = file_dim
        self._fallback = HashWordVectors(self.dim)

    def __call__(self, word: str) -> np.ndarray:
        v = self._table.get(word)
        return v if v is not None else self._fallback(word)


@lru_cache(maxsize=8)
def get_word_vector_provider(path: str | None = None, dim: int = 300) -> WordVectorProvider:
    if path:
        if Path(path).exists():
            return TextVectorFile(path, dim)
        logger.warning("word vector file %s not found; falling back to hash vectors", path)
    return HashWordVectors(dim)


def word_vector(word: str, dim: int = 300, provider: WordVectorProvider | None = None) -> np.ndarray:
    if provider is None:
        provider = get_word_vector_provider(None, dim)
    return provider(word)
