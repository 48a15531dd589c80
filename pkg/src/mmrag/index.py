"""Non-parametric memory: entry encoding, a frozen exact inner-product index
with blocked (optionally multi-threaded) scans, and in-batch memory assembly.

Scans are exact: desk-scale N makes a full scan affordable, so retrieval is
testable against a brute-force oracle instead of an approximate structure.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Backbone, encode_cls_grouped
from .data import FinetuneExample, MemoryEntry, MultimodalInput, PatchGrid, Segment

MAGIC = b"MRGI"
VERSION = 1
ENCODE_CHUNK = 64  # fixed batching unit so results never depend on worker count
SCAN_BLOCK = 4096


class IndexError_(ValueError):
    """Raised for index misuse (duplicate ids, unfrozen scans, bad K)."""


@dataclass
class RetrievalResult:
    ids: list[str]
    scores: np.ndarray  # descending inner products
    warning: str | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if len(self.ids) != len(set(self.ids)):
            raise IndexError_("retrieval result ids must be distinct")
        if np.any(np.diff(self.scores) > 0):
            raise IndexError_("retrieval scores must be non-increasing")


@dataclass
class EncodedMemory:
    """Index-aligned ids and CLS vectors; immutable once frozen."""

    ids: list[str]
    vectors: np.ndarray  # [N, D] float32
    fingerprint: bytes
    frozen: bool = False
    _id_rank: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.ids)

    def freeze(self) -> "EncodedMemory":
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.vectors.setflags(write=False)
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        rank = np.empty(len(self.ids), dtype=np.int64)
        rank[order] = np.arange(len(self.ids))
        self._id_rank = rank
        self.frozen = True
        return self


def entry_input(entry: MemoryEntry, backbone: Backbone) -> MultimodalInput:
    """Render an entry as one (image, text) segment; an absent image is
    materialized as a zero grid so text snippets share the encoder geometry."""
    image = entry.image
    if image is None:
        h, w = backbone.config.image_size
        image = PatchGrid.zeros(h, w, backbone.config.channels)
    tokens = entry.text if len(entry.text) else None
    return MultimodalInput([Segment(image=image, tokens=tokens)])


def encode_entry(entry: MemoryEntry, backbone: Backbone) -> np.ndarray:
    """Frozen CLS vector for one entry (float32, no gradients)."""
    with T.no_grad():
        cls = backbone.encode(backbone.assemble(entry_input(entry, backbone))).cls
    return cls.data.astype(np.float32)


def build_index(entries: list[MemoryEntry], backbone: Backbone,
                workers: int = 1) -> EncodedMemory:
    """Encode all entries into a frozen index.

    Entries are encoded in fixed chunks placed by position, so the vectors
    are bit-identical for any worker count.
    """
    seen: set[str] = set()
    for e in entries:
        if e.id in seen:
            raise IndexError_(f"duplicate memory entry id {e.id!r}")
        seen.add(e.id)
    n = len(entries)
    d = backbone.config.D
    vectors = np.zeros((n, d), dtype=np.float32)

    def encode_chunk(lo: int) -> None:
        hi = min(lo + ENCODE_CHUNK, n)
        inputs = [entry_input(e, backbone) for e in entries[lo:hi]]
        with T.no_grad():
            cls = encode_cls_grouped(backbone, inputs)
        vectors[lo:hi] = cls.data.astype(np.float32)

    starts = range(0, n, ENCODE_CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(encode_chunk, starts))
    else:
        for lo in starts:
            encode_chunk(lo)
    return EncodedMemory(ids=[e.id for e in entries], vectors=vectors,
                         fingerprint=backbone.fingerprint()).freeze()


def _scan_scores(vectors: np.ndarray, query: np.ndarray, workers: int) -> np.ndarray:
    blocks = range(0, vectors.shape[0], SCAN_BLOCK)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda lo: vectors[lo:lo + SCAN_BLOCK] @ query, blocks))
    else:
        parts = [vectors[lo:lo + SCAN_BLOCK] @ query for lo in blocks]
    return np.concatenate(parts) if len(parts) > 1 else parts[0]


def top_k(query_vec: np.ndarray, index: EncodedMemory, k: int, workers: int = 1,
          query_fingerprint: bytes | None = None) -> RetrievalResult:
    """Exactly the K entries maximizing the inner product with the query.

    Ties break toward the lexicographically smaller id. The scan is blocked
    and optionally multi-threaded; both paths score identically.
    """
    if not index.frozen:
        raise IndexError_("cannot retrieve from an unfrozen index")
    n = len(index)
    if n == 0:
        raise IndexError_("cannot retrieve from an empty memory")
    if not 1 <= k <= n:
        raise IndexError_(f"K={k} out of range for memory of {n} entries")
    query = np.asarray(query_vec, dtype=np.float32).reshape(-1)
    scores = _scan_scores(index.vectors, query, workers)
    # partial selection: only candidates at or above the k-th score get sorted
    kth = np.partition(scores, n - k)[n - k]
    cand = np.flatnonzero(scores >= kth)
    cand = cand[np.lexsort((index._id_rank[cand], -scores[cand]))][:k]
    warning = None
    if query_fingerprint is not None and query_fingerprint != index.fingerprint:
        warning = ("query encoded under a different parameter fingerprint than "
                   "the index; scores may not be comparable")
    return RetrievalResult(ids=[index.ids[i] for i in cand], scores=scores[cand],
                           warning=warning)


def in_batch_memory(batch: list[FinetuneExample]) -> tuple[list[MemoryEntry], list[list[int]]]:
    """Assemble each example's positives then hard negatives, in batch order,
    deduplicated by id keeping the first copy. Returns the entries plus each
    example's positive positions for the contrastive labels."""
    if not batch:
        raise IndexError_("in-batch memory needs a non-empty batch")
    entries: list[MemoryEntry] = []
    position: dict[str, int] = {}

    def admit(entry: MemoryEntry) -> int:
        if entry.id not in position:
            position[entry.id] = len(entries)
            entries.append(entry)
        return position[entry.id]

    positive_positions: list[list[int]] = []
    for ex in batch:
        if not ex.positives:
            raise IndexError_(f"example {ex.id!r} has no positives")
        positive_positions.append([admit(e) for e in ex.positives])
        for e in ex.hard_negatives:
            admit(e)
    return entries, positive_positions


# -- persistence --------------------------------------------------------------


def serialize_index(index: EncodedMemory) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    n, d = index.vectors.shape
    buf.write(struct.pack("<III", VERSION, n, d))
    for entry_id in index.ids:
        enc = entry_id.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
    if len(index.fingerprint) != 32:
        raise IndexError_("fingerprint must be 32 bytes")
    buf.write(index.fingerprint)
    buf.write(index.vectors.astype("<f4").tobytes())
    return buf.getvalue()


def deserialize_index(blob: bytes) -> EncodedMemory:
    buf = io.BytesIO(blob)

    def read(nbytes: int) -> bytes:
        chunk = buf.read(nbytes)
        if len(chunk) != nbytes:
            raise IndexError_("truncated index file")
        return chunk

    if read(4) != MAGIC:
        raise IndexError_("bad magic bytes, not an index file")
    version, n, d = struct.unpack("<III", read(12))
    if version != VERSION:
        raise IndexError_(f"unsupported index version {version}")
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack("<H", read(2))
        ids.append(read(ln).decode("utf-8"))
    fingerprint = read(32)
    vectors = np.frombuffer(read(4 * n * d), dtype="<f4").reshape(n, d).copy()
    if buf.read(1):
        raise IndexError_("trailing bytes after vectors")
    return EncodedMemory(ids=ids, vectors=vectors, fingerprint=fingerprint).freeze()


def save_index(index: EncodedMemory, path) -> None:
    Path(path).write_bytes(serialize_index(index))


def load_index(path) -> EncodedMemory:
    return deserialize_index(Path(path).read_bytes())
