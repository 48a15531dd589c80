"""Autoregressive decoding: greedy argmax and beam search.

Scores are sums of token log-probabilities (no length normalization),
including the end-token emission for sequences that terminate before
max_len. Ties break toward the lexicographically smaller token sequence,
which for a single step means the lower token id.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import Backbone, EncoderOutput
from .data import END_ID, START_ID, TokenSeq


def _log_probs(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


def _step_logits(backbone: Backbone, enc: EncoderOutput, tokens: tuple[int, ...]) -> np.ndarray:
    prefix = TokenSeq(np.array((START_ID,) + tokens, dtype=np.int64))
    return backbone.decode_step(enc, prefix).data


def generate_greedy(backbone: Backbone, enc: EncoderOutput, max_len: int) -> TokenSeq:
    """Argmax token per step until the end token or max_len emitted tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    out: tuple[int, ...] = ()
    with T.no_grad():
        for _ in range(max_len):
            tok = int(np.argmax(_step_logits(backbone, enc, out)))
            if tok == END_ID:
                break
            out = out + (tok,)
    return TokenSeq(np.array(out, dtype=np.int64))


def sequence_score(backbone: Backbone, enc: EncoderOutput, ids, max_len: int) -> float:
    """Model log-probability of emitting `ids` (plus the end token when the
    sequence is shorter than max_len), computed with the same incremental
    steps generation uses."""
    toks = tuple(int(i) for i in np.asarray(ids).reshape(-1))
    score = 0.0
    with T.no_grad():
        for i, tok in enumerate(toks):
            score += _log_probs(_step_logits(backbone, enc, toks[:i]))[tok]
        if len(toks) < max_len:
            score += _log_probs(_step_logits(backbone, enc, toks))[END_ID]
    return float(score)


def generate_beam(backbone: Backbone, enc: EncoderOutput, beam_width: int,
                  max_len: int) -> TokenSeq:
    """Beam search over summed token log-probabilities.

    The greedy rollout is always kept as a candidate, so the returned
    hypothesis never scores below the greedy output; beam_width=1 follows
    exactly the greedy path.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    completed: list[tuple[float, tuple[int, ...]]] = []
    active: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    with T.no_grad():
        for _ in range(max_len):
            candidates: list[tuple[float, tuple[int, ...]]] = []
            for score, toks in active:
                logp = _log_probs(_step_logits(backbone, enc, toks))
                candidates.extend((score + logp[t], toks + (t,)) for t in range(logp.size))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            active = []
            for score, toks in candidates[:beam_width]:
                if toks[-1] == END_ID:
                    completed.append((score, toks[:-1]))
                else:
                    active.append((score, toks))
            if not active:
                break
            # token log-probs are <= 0, so once a finished hypothesis strictly
            # beats every active prefix nothing better can appear
            if completed and max(c[0] for c in completed) > max(a[0] for a in active):
                break
        pool = completed + active
        greedy_out = generate_greedy(backbone, enc, max_len)
        gtoks = tuple(int(t) for t in greedy_out.ids)
        pool.append((sequence_score(backbone, enc, gtoks, max_len), gtoks))
    best = min(pool, key=lambda c: (-c[0], c[1]))
    return TokenSeq(np.array(best[1], dtype=np.int64))
