"""Input datatypes: image grids, token sequences, multimodal segments, memory
entries and training examples, plus the word-level vocabulary."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
START_ID = 1
END_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")


class DataError(ValueError):
    pass


@dataclass
class PatchGrid:
    """Dense image as [H, W, C] float intensities in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise DataError(f"image must be [H, W, C], got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise DataError("image values must lie in [0, 1]")
        self.values = v

    @property
    def shape(self):
        return self.values.shape

    def check_divisible(self, patch: int) -> None:
        h, w, _ = self.values.shape
        if h % patch or w % patch:
            raise DataError(f"image {h}x{w} not divisible by patch size {patch}")

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 3) -> "PatchGrid":
        return cls(np.zeros((height, width, channels), dtype=np.float32))

    def is_zero(self) -> bool:
        return not self.values.any()


@dataclass
class TokenSeq:
    """Sequence of token ids over some vocabulary."""

    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if ids.size and ids.min() < 0:
            raise DataError("token ids must be non-negative")
        self.ids = ids

    def __len__(self):
        return int(self.ids.size)

    def __eq__(self, other):
        return isinstance(other, TokenSeq) and np.array_equal(self.ids, other.ids)

    def key(self) -> tuple:
        return tuple(self.ids.tolist())

    @classmethod
    def empty(cls) -> "TokenSeq":
        return cls(np.zeros(0, dtype=np.int64))


@dataclass
class Segment:
    """One (optional image, optional text) element of a multimodal input."""

    image: PatchGrid | None = None
    tokens: TokenSeq | None = None

    def is_empty(self) -> bool:
        return self.image is None and (self.tokens is None or len(self.tokens) == 0)


@dataclass
class MultimodalInput:
    """Ordered segments; order is preserved into the embedding concatenation."""

    segments: list[Segment]

    def __post_init__(self):
        if not any(not s.is_empty() for s in self.segments):
            raise DataError("multimodal input needs at least one non-empty segment")


@dataclass
class MemoryEntry:
    """One indexed knowledge item. A text snippet stores image=None and is
    materialized as a zero grid at encoding time."""

    id: str
    image: PatchGrid | None
    text: TokenSeq
    kind: str  # "caption" | "passage" | "image-text-pair"

    def __post_init__(self):
        if self.kind not in ("caption", "passage", "image-text-pair"):
            raise DataError(f"unknown memory entry kind {self.kind!r}")
        if len(self.text) == 0 and self.image is None:
            raise DataError(f"entry {self.id!r}: text may be empty only if an image is present")


PRETRAIN_SOURCES = ("cap-crawl", "cap-clean", "qa-text", "qa-image")
CAPTION_SOURCES = ("cap-crawl", "cap-clean")
QA_SOURCES = ("qa-text", "qa-image")


@dataclass
class PretrainExample:
    source: str
    image: PatchGrid | None
    prompt: TokenSeq
    target: TokenSeq
    memory_text: TokenSeq

    def __post_init__(self):
        if self.source not in PRETRAIN_SOURCES:
            raise DataError(f"unknown pre-training source {self.source!r}")
        if self.source == "qa-text" and self.image is not None:
            raise DataError("qa-text examples take no input image")
        if self.source in CAPTION_SOURCES and self.target != self.memory_text:
            raise DataError("caption-source target must equal its memory text")


@dataclass
class FinetuneExample:
    id: str
    question: TokenSeq
    answer: TokenSeq
    positives: list[MemoryEntry]
    hard_negatives: list[MemoryEntry] = field(default_factory=list)

    def __post_init__(self):
        if not self.positives:
            raise DataError(f"example {self.id!r} has no positive entries")
        pos = {e.id for e in self.positives}
        neg = {e.id for e in self.hard_negatives}
        if pos & neg:
            raise DataError(f"example {self.id!r}: positives overlap hard negatives")

    @property
    def positive_ids(self) -> list[str]:
        return [e.id for e in self.positives]


class Vocab:
    """Word-level vocabulary: lowercased whitespace tokens, reserved ids 0-3,
    remaining words ordered by frequency then lexicographically."""

    def __init__(self, words: list[str]):
        self.id_to_word = list(RESERVED_TOKENS) + list(words)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise DataError("duplicate words in vocabulary")

    def __len__(self):
        return len(self.id_to_word)

    @classmethod
    def build(cls, texts) -> "Vocab":
        counts = Counter()
        for text in texts:
            counts.update(text.lower().split())
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ordered)

    def encode(self, text: str) -> TokenSeq:
        return TokenSeq(np.array(
            [self.word_to_id.get(w, UNK_ID) for w in text.lower().split()], dtype=np.int64
        ))

    def decode(self, ids) -> str:
        words = []
        for i in np.asarray(ids, dtype=np.int64).reshape(-1):
            if i in (PAD_ID, START_ID, END_ID):
                continue
            words.append(self.id_to_word[i] if 0 <= i < len(self.id_to_word) else "<unk>")
        return " ".join(words)
