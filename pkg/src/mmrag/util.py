"""Seed plumbing and fingerprint helpers."""

from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np

# Named sub-seeds: every stage derives its rng from (seed, purpose) so the
# stages of a run are independently reproducible.


def named_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def config_fingerprint(obj) -> str:
    """Hex sha256 of a canonical-JSON rendering of a config mapping."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def sha256_bytes(blob: bytes) -> bytes:
    return hashlib.sha256(blob).digest()
