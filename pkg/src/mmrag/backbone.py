"""Shared multimodal transformer backbone.

One parameter set serves as query encoder, memory encoder, and reader:
image patches and text tokens are embedded into a common width, a CLS row
is prepended, and full bidirectional self-attention fuses the modalities.
The pooled CLS row is the retrieval vector; the decoder cross-attends the
full row sequence to generate text.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import params_fingerprint
from .config import ModelConfig
from .data import MultimodalInput, PatchGrid, TokenSeq
from .tensor import Tensor
from .util import named_rng

MAX_DECODE_LEN = 64
MAX_ENCODER_ROWS = 2048


@dataclass
class EncoderOutput:
    """Full sequence representation plus the pooled CLS vector (row 0)."""

    rows: Tensor
    cls: Tensor


def _bucket_table(lq: int, lk: int, bidirectional: bool, num_buckets: int,
                  max_distance: int) -> np.ndarray:
    """Bucketed relative positions (memory minus query), log-spaced far away."""
    ctx = np.arange(lq)[:, None]
    mem = np.arange(lk)[None, :]
    rel = mem - ctx
    buckets = np.zeros_like(rel)
    n = num_buckets
    if bidirectional:
        n //= 2
        buckets += (rel > 0).astype(np.int64) * n
        rel = np.abs(rel)
    else:
        rel = -np.minimum(rel, 0)
    max_exact = n // 2
    large = max_exact + (
        np.log(np.maximum(rel, 1) / max_exact) / np.log(max_distance / max_exact)
        * (n - max_exact)
    ).astype(np.int64)
    large = np.minimum(large, n - 1)
    buckets += np.where(rel < max_exact, rel, large)
    return buckets


_BUCKET_CACHE: dict[tuple, np.ndarray] = {}


def relative_buckets(lq: int, lk: int, bidirectional: bool, num_buckets: int,
                     max_distance: int) -> np.ndarray:
    key = (lq, lk, bidirectional, num_buckets, max_distance)
    if key not in _BUCKET_CACHE:
        _BUCKET_CACHE[key] = _bucket_table(lq, lk, bidirectional, num_buckets, max_distance)
    return _BUCKET_CACHE[key]


def patchify(values: np.ndarray, patch: int) -> np.ndarray:
    """[..., H, W, C] -> [..., n_patches, patch*patch*C], patches row-major."""
    *lead, h, w, c = values.shape
    gh, gw = h // patch, w // patch
    x = values.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # [..., gh, gw, patch, patch, c]
    return x.reshape(*lead, gh * gw, patch * patch * c)


class Backbone:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.record_attention: list | None = None
        self._causal_cache: dict[int, np.ndarray] = {}
        rng = named_rng(seed, "init")
        cfg = config
        ppc = cfg.patch_size * cfg.patch_size * cfg.channels
        params: dict[str, Tensor] = {}

        def weight(name, shape, std=0.02):
            params[name] = T.parameter(rng.normal(0.0, std, shape), dtype=dtype)

        def zeros(name, shape):
            params[name] = T.parameter(np.zeros(shape), dtype=dtype)

        def ones(name, shape):
            params[name] = T.parameter(np.ones(shape), dtype=dtype)

        weight("cls", (1, cfg.D))
        weight("patch.w", (ppc, cfg.D))
        zeros("patch.b", (cfg.D,))
        weight("tok_embed", (cfg.V, cfg.D))
        zeros("enc.rel_bias", (cfg.relative_bias_buckets, cfg.heads))
        for i in range(cfg.encoder_layers):
            p = f"enc.{i}"
            ones(f"{p}.ln1.g", (cfg.D,))
            zeros(f"{p}.ln1.b", (cfg.D,))
            for m in ("wq", "wk", "wv", "wo"):
                weight(f"{p}.attn.{m}", (cfg.D, cfg.D))
            ones(f"{p}.ln2.g", (cfg.D,))
            zeros(f"{p}.ln2.b", (cfg.D,))
            weight(f"{p}.ffn.w1", (cfg.D, cfg.feed_forward_width))
            zeros(f"{p}.ffn.b1", (cfg.feed_forward_width,))
            weight(f"{p}.ffn.w2", (cfg.feed_forward_width, cfg.D))
            zeros(f"{p}.ffn.b2", (cfg.D,))
        ones("enc.ln.g", (cfg.D,))
        zeros("enc.ln.b", (cfg.D,))
        zeros("dec.rel_bias", (cfg.relative_bias_buckets, cfg.heads))
        for i in range(cfg.decoder_layers):
            p = f"dec.{i}"
            ones(f"{p}.ln1.g", (cfg.D,))
            zeros(f"{p}.ln1.b", (cfg.D,))
            for m in ("wq", "wk", "wv", "wo"):
                weight(f"{p}.self.{m}", (cfg.D, cfg.D))
            ones(f"{p}.ln2.g", (cfg.D,))
            zeros(f"{p}.ln2.b", (cfg.D,))
            for m in ("wq", "wk", "wv", "wo"):
                weight(f"{p}.cross.{m}", (cfg.D, cfg.D))
            ones(f"{p}.ln3.g", (cfg.D,))
            zeros(f"{p}.ln3.b", (cfg.D,))
            weight(f"{p}.ffn.w1", (cfg.D, cfg.feed_forward_width))
            zeros(f"{p}.ffn.b1", (cfg.feed_forward_width,))
            weight(f"{p}.ffn.w2", (cfg.feed_forward_width, cfg.D))
            zeros(f"{p}.ffn.b2", (cfg.D,))
        ones("dec.ln.g", (cfg.D,))
        zeros("dec.ln.b", (cfg.D,))
        weight("out.w", (cfg.D, cfg.V))
        zeros("out.b", (cfg.V,))
        self.params = params

    # -- parameter plumbing --------------------------------------------------

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ValueError(f"checkpoint mismatch: missing={missing} extra={extra}")
        for name, arr in arrays.items():
            p = self.params[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(self.dtype)
            p.grad = np.zeros_like(p.data)

    def fingerprint(self) -> bytes:
        return params_fingerprint(self.params)

    # -- embedding -----------------------------------------------------------

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.V):
            raise ValueError(f"token id out of range [0, {self.config.V})")

    def patch_embed(self, image: PatchGrid) -> Tensor:
        """One embedding row per patch: linear projection of the flat patch."""
        image.check_divisible(self.config.patch_size)
        flat = patchify(image.values.astype(self.dtype), self.config.patch_size)
        rows = T.matmul(T.constant(flat, dtype=self.dtype), self.params["patch.w"])
        return T.add(rows, self.params["patch.b"])

    def token_embed(self, tokens: TokenSeq) -> Tensor:
        ids = tokens.ids
        self._check_ids(ids)
        return T.take(self.params["tok_embed"], ids, axis=0)

    def assemble(self, inputs: MultimodalInput) -> Tensor:
        """CLS row first, then image rows followed by text rows per segment,
        in input order."""
        rows = [self.params["cls"]]
        for seg in inputs.segments:
            if seg.image is not None:
                rows.append(self.patch_embed(seg.image))
            if seg.tokens is not None and len(seg.tokens):
                rows.append(self.token_embed(seg.tokens))
        if len(rows) == 1:
            raise ValueError("all segments empty")
        out = T.concat(rows, axis=0)
        if out.shape[0] > MAX_ENCODER_ROWS:
            raise ValueError(f"input of {out.shape[0]} rows exceeds {MAX_ENCODER_ROWS}")
        return out

    def embed_batch(self, inputs: list[MultimodalInput]) -> Tensor:
        """Batched assemble for structurally identical inputs -> [B, L, D]."""
        b = len(inputs)
        sig = structure_signature(inputs[0])
        for x in inputs[1:]:
            if structure_signature(x) != sig:
                raise ValueError("embed_batch requires structurally identical inputs")
        parts = [T.expand_rows(self.params["cls"], b)]
        for s, seg0 in enumerate(inputs[0].segments):
            if seg0.image is not None:
                stack = np.stack([x.segments[s].image.values for x in inputs]).astype(self.dtype)
                flat = patchify(stack, self.config.patch_size)
                rows = T.add(T.matmul(T.constant(flat, dtype=self.dtype),
                                      self.params["patch.w"]), self.params["patch.b"])
                parts.append(rows)
            if seg0.tokens is not None and len(seg0.tokens):
                ids = np.stack([x.segments[s].tokens.ids for x in inputs])
                self._check_ids(ids)
                parts.append(T.take(self.params["tok_embed"], ids, axis=0))
        return T.concat(parts, axis=1)

    # -- transformer blocks ----------------------------------------------------

    def _mha(self, x: Tensor, prefix: str, kv: Tensor | None = None,
             biases: tuple[Tensor, ...] = ()) -> Tensor:
        p = self.params
        cfg = self.config
        h, dh = cfg.heads, cfg.D // cfg.heads
        bsz, lq = x.shape[0], x.shape[1]
        src = kv if kv is not None else x
        lk = src.shape[1]

        def split(t, l):
            return T.permute(T.reshape(t, (bsz, l, h, dh)), (0, 2, 1, 3))

        q = split(T.matmul(x, p[f"{prefix}.wq"]), lq)
        k = split(T.matmul(src, p[f"{prefix}.wk"]), lk)
        v = split(T.matmul(src, p[f"{prefix}.wv"]), lk)
        scores = T.scale(T.matmul(q, T.transpose_last(k)), 1.0 / np.sqrt(dh))
        for bias in biases:
            scores = T.add(scores, bias)
        attn = T.softmax(scores, axis=-1)
        if self.record_attention is not None:
            self.record_attention.append(attn.data)
        out = T.matmul(attn, v)
        out = T.reshape(T.permute(out, (0, 2, 1, 3)), (bsz, lq, cfg.D))
        return T.matmul(out, p[f"{prefix}.wo"])

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        hidden = T.gelu(T.add(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return T.add(T.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _rel_bias(self, table_name: str, lq: int, lk: int, bidirectional: bool) -> Tensor:
        cfg = self.config
        buckets = relative_buckets(lq, lk, bidirectional, cfg.relative_bias_buckets,
                                   cfg.relative_bias_max_distance)
        flat = T.take(self.params[table_name], buckets.reshape(-1), axis=0)
        return T.permute(T.reshape(flat, (lq, lk, cfg.heads)), (2, 0, 1))

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def encode_rows(self, rows: Tensor) -> EncoderOutput:
        """Full self-attention over [B, L, D] rows; CLS pooled from row 0."""
        x = rows
        l = x.shape[1]
        bias = self._rel_bias("enc.rel_bias", l, l, bidirectional=True)
        for i in range(self.config.encoder_layers):
            p = f"enc.{i}"
            x = T.add(x, self._mha(self._ln(x, f"{p}.ln1"), f"{p}.attn", biases=(bias,)))
            x = T.add(x, self._ffn(self._ln(x, f"{p}.ln2"), f"{p}.ffn"))
        x = self._ln(x, "enc.ln")
        return EncoderOutput(rows=x, cls=T.take(x, np.array(0), axis=1))

    def encode(self, rows: Tensor) -> EncoderOutput:
        """Single-example encode over assembled [L, D] rows."""
        if rows.ndim != 2:
            raise T.ShapeError(f"encode expects [L, D] rows, got {rows.shape}")
        l, d = rows.shape
        out = self.encode_rows(T.reshape(rows, (1, l, d)))
        return EncoderOutput(rows=T.reshape(out.rows, (l, d)), cls=T.reshape(out.cls, (d,)))

    def encode_batch(self, inputs: list[MultimodalInput]) -> EncoderOutput:
        return self.encode_rows(self.embed_batch(inputs))

    # -- decoding --------------------------------------------------------------

    def _causal_mask(self, l: int) -> np.ndarray:
        if l not in self._causal_cache:
            self._causal_cache[l] = np.triu(np.full((l, l), -1e9, dtype=self.dtype), k=1)
        return self._causal_cache[l]

    def decode_logits(self, enc_rows: Tensor, prefix_ids: np.ndarray) -> Tensor:
        """Teacher-forced logits [B, Lp, V] for every prefix position."""
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        if prefix_ids.ndim != 2 or prefix_ids.shape[1] < 1:
            raise ValueError("prefix must be [B, Lp] with Lp >= 1")
        if prefix_ids.shape[1] > MAX_DECODE_LEN:
            raise ValueError(f"prefix length {prefix_ids.shape[1]} exceeds {MAX_DECODE_LEN}")
        self._check_ids(prefix_ids)
        lp = prefix_ids.shape[1]
        x = T.take(self.params["tok_embed"], prefix_ids, axis=0)
        biases = (
            self._rel_bias("dec.rel_bias", lp, lp, bidirectional=False),
            T.constant(self._causal_mask(lp), dtype=self.dtype),
        )
        for i in range(self.config.decoder_layers):
            p = f"dec.{i}"
            x = T.add(x, self._mha(self._ln(x, f"{p}.ln1"), f"{p}.self", biases=biases))
            x = T.add(x, self._mha(self._ln(x, f"{p}.ln2"), f"{p}.cross", kv=enc_rows))
            x = T.add(x, self._ffn(self._ln(x, f"{p}.ln3"), f"{p}.ffn"))
        x = self._ln(x, "dec.ln")
        return T.add(T.matmul(x, self.params["out.w"]), self.params["out.b"])

    def decode_step(self, enc: EncoderOutput, prefix: TokenSeq) -> Tensor:
        """Next-token logits [V] given a single-example prefix."""
        if len(prefix) < 1:
            raise ValueError("prefix must start with the start token")
        rows = enc.rows
        if rows.ndim == 2:
            rows = T.reshape(rows, (1,) + rows.shape)
        logits = self.decode_logits(rows, prefix.ids[None, :])
        lp = len(prefix)
        return T.reshape(T.take(T.reshape(logits, (lp, self.config.V)),
                                np.array(lp - 1), axis=0), (self.config.V,))


def structure_signature(x: MultimodalInput) -> tuple:
    """Shape key used to group inputs that can share one batched encode."""
    sig = []
    for seg in x.segments:
        img = None if seg.image is None else seg.image.shape
        txt = 0 if seg.tokens is None else len(seg.tokens)
        sig.append((img, txt))
    return tuple(sig)


def encode_cls_grouped(backbone: Backbone, inputs: list[MultimodalInput]) -> Tensor:
    """CLS vectors [B, D] for arbitrarily mixed inputs, batched per structure
    group; output order matches input order and grads flow through."""
    groups: dict[tuple, list[int]] = {}
    for i, x in enumerate(inputs):
        groups.setdefault(structure_signature(x), []).append(i)
    cls_parts = []
    order = []
    for sig, idxs in groups.items():
        cls_parts.append(backbone.encode_batch([inputs[i] for i in idxs]).cls)
        order.extend(idxs)
    merged = cls_parts[0] if len(cls_parts) == 1 else T.concat(cls_parts, axis=0)
    perm = np.empty(len(inputs), dtype=np.int64)
    perm[np.array(order)] = np.arange(len(inputs))
    if np.array_equal(perm, np.arange(len(inputs))):
        return merged
    return T.take(merged, perm, axis=0)
