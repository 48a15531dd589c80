"""Pre-training: joint contrastive + generative objective over in-batch memory.

Each step encodes the batch's queries and its deduplicated memory texts with
the same backbone, scores them by raw inner product (no temperature), gates
the generative input by source (captions get no retrievals to avoid the
copy-through-memory shortcut), and takes one optimizer step on
total = l_gen + lambda * l_con.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .backbone import Backbone, encode_cls_grouped
from .data import (
    CAPTION_SOURCES,
    END_ID,
    QA_SOURCES,
    START_ID,
    MultimodalInput,
    PretrainExample,
    Segment,
    TokenSeq,
)
from .optim import OptimizerState, adam_step, zero_grads
from .tensor import Tensor
from .util import named_rng


@dataclass
class LossBreakdown:
    l_con: float
    l_gen: float
    total: float
    retrieval_hit: float  # fraction of the batch whose positive made top-K
    recall_at_1: float = 0.0

    def __post_init__(self):
        for name in ("l_con", "l_gen", "total"):
            if not np.isfinite(getattr(self, name)):
                raise T.NumericError(f"non-finite {name} in loss breakdown")


def contrastive_loss(query_vecs: Tensor, memory_vecs: Tensor,
                     positive_index: Sequence) -> Tensor:
    """Mean over queries of -log softmax of the positive's inner product
    against every memory entry. Raw dot products, no temperature."""
    if memory_vecs.shape[0] < 1:
        raise ValueError("contrastive loss needs at least one memory entry")
    scores = T.matmul(query_vecs, T.transpose_last(memory_vecs))
    sets = [[int(p)] if np.isscalar(p) else [int(x) for x in p] for p in positive_index]
    return T.multi_target_cross_entropy(scores, sets)


def gate_augmentation(example: PretrainExample, retrieved: Sequence | None) -> list:
    """Source-keyed case split: qa sources read their retrievals, caption
    sources get an empty set (their target already sits in the memory)."""
    if example.source in CAPTION_SOURCES:
        return []
    if example.source in QA_SOURCES:
        if retrieved is None:
            raise ValueError(f"{example.source} examples require a retrieval result")
        return list(retrieved)
    raise ValueError(f"unknown source {example.source!r}")


def query_input(example: PretrainExample) -> MultimodalInput:
    """Pre-training query: (image, prompt) with the image segment dropped for
    text-only sources."""
    if example.image is None:
        return MultimodalInput([Segment(tokens=example.prompt)])
    return MultimodalInput([Segment(image=example.image, tokens=example.prompt)])


def reader_input(m_p: Sequence[TokenSeq], image, prompt: TokenSeq) -> MultimodalInput:
    """Retrievals precede the query: [m_1, ..., m_k, q]."""
    segments = [Segment(tokens=t) for t in m_p]
    if image is None:
        segments.append(Segment(tokens=prompt))
    else:
        segments.append(Segment(image=image, tokens=prompt))
    return MultimodalInput(segments)


def _teacher_forced_ce(backbone: Backbone, inputs: list[MultimodalInput],
                       targets: np.ndarray) -> tuple[Tensor, int]:
    """Token-mean CE for one structure group; returns (loss, token count)."""
    enc = backbone.encode_batch(inputs)
    b, t = targets.shape
    prefix = np.concatenate(
        [np.full((b, 1), START_ID, dtype=np.int64), targets[:, :-1]], axis=1)
    logits = backbone.decode_logits(enc.rows, prefix)
    ce = T.cross_entropy(T.reshape(logits, (b * t, backbone.config.V)),
                         targets.reshape(-1))
    return ce, b * t


def generative_loss(backbone: Backbone, m_p: Sequence[TokenSeq], image,
                    prompt: TokenSeq, target: TokenSeq) -> Tensor:
    """Teacher-forced NLL of `target` (plus end token) given [M_p..., query]."""
    if len(target) == 0:
        raise ValueError("generative loss needs a non-empty target")
    x = reader_input(m_p, image, prompt)
    y = np.append(target.ids, END_ID)[None, :]
    loss, _ = _teacher_forced_ce(backbone, [x], y)
    return loss


def _grouped_generative_loss(backbone: Backbone,
                             readers: list[MultimodalInput],
                             targets: list[np.ndarray]) -> Tensor:
    """Batch readers by structure; combine group CEs into one global token mean."""
    from .backbone import structure_signature

    groups: dict[tuple, list[int]] = {}
    for i, x in enumerate(readers):
        groups.setdefault(structure_signature(x) + (len(targets[i]),), []).append(i)
    total = None
    n_total = 0
    for idxs in groups.values():
        ce, n = _teacher_forced_ce(
            backbone, [readers[i] for i in idxs],
            np.stack([targets[i] for i in idxs]))
        n_total += n
        part = T.scale(ce, float(n))
        total = part if total is None else T.add(total, part)
    return T.scale(total, 1.0 / n_total)


@dataclass
class StepStats:
    loss: LossBreakdown
    memory_size: int


def pretrain_step(batch: list[PretrainExample], backbone: Backbone,
                  opt: OptimizerState, lambda_: float, k: int) -> StepStats:
    """One joint optimizer step over a batch; see module docstring."""
    if not batch:
        raise ValueError("empty batch")
    zero_grads(backbone.params)
    with T.tape() as tp:
        queries = [query_input(ex) for ex in batch]
        q_cls = encode_cls_grouped(backbone, queries)

        # in-batch memory: the batch's memory texts, deduplicated
        unique_texts: list[TokenSeq] = []
        position: dict[tuple, int] = {}
        positives: list[int] = []
        for ex in batch:
            key = ex.memory_text.key()
            if key not in position:
                position[key] = len(unique_texts)
                unique_texts.append(ex.memory_text)
            positives.append(position[key])
        mem_inputs = [MultimodalInput([Segment(tokens=t)]) for t in unique_texts]
        m_cls = encode_cls_grouped(backbone, mem_inputs)
        scores = T.matmul(q_cls, T.transpose_last(m_cls))
        l_con = T.multi_target_cross_entropy(scores, [[p] for p in positives])

        # hard top-K selection is not differentiated through; only the reader
        # pass carries gradients for qa examples
        raw = scores.data
        k_eff = min(k, len(unique_texts))
        readers, targets = [], []
        hits = 0
        for i, ex in enumerate(batch):
            order = np.argsort(-raw[i], kind="stable")[:k_eff]
            m_p = gate_augmentation(ex, [unique_texts[j] for j in order])
            readers.append(reader_input(m_p, ex.image, ex.prompt))
            targets.append(np.append(ex.target.ids, END_ID))
            if positives[i] in order:
                hits += 1
        l_gen = _grouped_generative_loss(backbone, readers, targets)

        total = T.add(l_gen, T.scale(l_con, lambda_)) if lambda_ != 0.0 else l_gen
    T.backward(total, tp)
    adam_step(backbone.params, opt)
    recall1 = float(np.mean(raw.argmax(axis=1) == np.array(positives)))
    loss = LossBreakdown(
        l_con=l_con.item(), l_gen=l_gen.item(),
        total=l_gen.item() + lambda_ * l_con.item(),
        retrieval_hit=hits / len(batch), recall_at_1=recall1)
    return StepStats(loss=loss, memory_size=len(unique_texts))


# ---------------------------------------------------------------------------
# mixture schedule


@dataclass
class MixtureConfig:
    """Scheduled sampling: phase 1 draws one source only, then an i.i.d.
    ratio mixture. Lengths are counted in draws, not optimizer steps."""

    ratios: dict[str, float]
    phase1_source: str | None = "cap-crawl"
    phase1_len: int = 0
    seed: int = 0
    _names: list[str] = field(init=False, repr=False, default_factory=list)

    def __post_init__(self):
        if not self.ratios:
            raise ValueError("mixture needs at least one source ratio")
        for name, r in self.ratios.items():
            if r <= 0:
                raise ValueError(f"ratio for {name!r} must be positive")
        if self.phase1_len < 0:
            raise ValueError("phase1_len must be non-negative")
        if self.phase1_len > 0 and self.phase1_source is None:
            raise ValueError("phase 1 requires a designated source")
        self._names = sorted(self.ratios)


def mixture_sampler(sources: dict[str, list], config: MixtureConfig) -> Iterator:
    """Infinite example stream, deterministic given the seed."""
    needed = set(config._names)
    if config.phase1_len > 0:
        needed.add(config.phase1_source)
    for name in sorted(needed):
        if not sources.get(name):
            raise ValueError(f"source {name!r} is empty")
    rng = named_rng(config.seed, "sampler")
    weights = np.array([config.ratios[n] for n in config._names], dtype=np.float64)
    weights /= weights.sum()
    draw = 0
    while True:
        if draw < config.phase1_len:
            name = config.phase1_source
        else:
            name = config._names[rng.choice(len(config._names), p=weights)]
        pool = sources[name]
        yield pool[int(rng.integers(len(pool)))]
        draw += 1


# ---------------------------------------------------------------------------
# loop


def run_pretraining(pretrain_examples: list[PretrainExample], backbone: Backbone,
                    lambda_: float, batch_size: int, lr: float, phase1_steps: int,
                    phase2_steps: int, ratios: dict[str, float], seed: int,
                    topk: int, log_fn=None) -> list[dict]:
    """Scheduled two-phase pre-training; returns the per-step metrics log."""
    by_source: dict[str, list] = {}
    for ex in pretrain_examples:
        by_source.setdefault(ex.source, []).append(ex)
    mix = MixtureConfig(ratios=ratios, phase1_source="cap-crawl",
                        phase1_len=phase1_steps * batch_size, seed=seed)
    stream = mixture_sampler(by_source, mix)
    opt = OptimizerState(lr=lr)
    log: list[dict] = []
    for step in range(phase1_steps + phase2_steps):
        batch = [next(stream) for _ in range(batch_size)]
        stats = pretrain_step(batch, backbone, opt, lambda_, topk)
        line = {
            "step": step,
            "l_con": stats.loss.l_con,
            "l_gen": stats.loss.l_gen,
            "total": stats.loss.total,
            "inbatch_recall@1": stats.loss.recall_at_1,
        }
        log.append(line)
        if log_fn is not None:
            log_fn(line)
    return log
