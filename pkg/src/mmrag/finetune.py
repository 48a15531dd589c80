"""Two-stage fine-tuning and inference.

Stage 1 (in-batch): joint contrastive + generative loss where the memory is
each batch's positives and hard negatives. Stage 2 (fixed-retrieval): each
question's top-K is retrieved once at stage start against a frozen global
index, then only the generative loss is optimized. Inference retrieves from
the frozen index and beam-decodes over [retrieved..., question].

Fine-tuning queries are text only; the modality asymmetry against
pre-training (image+text -> text) is deliberate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, encode_cls_grouped
from .config import StagePlan
from .data import END_ID, START_ID, FinetuneExample, MemoryEntry, MultimodalInput, Segment, TokenSeq
from .generate import generate_beam
from .index import EncodedMemory, build_index, entry_input, in_batch_memory, top_k
from .optim import OptimizerState, adam_step, zero_grads
from .pretrain import LossBreakdown, StepStats, _grouped_generative_loss
from .util import named_rng

ANSWER_MAX_LEN = 8


def question_input(question: TokenSeq) -> MultimodalInput:
    """Fine-tuning queries consume text only."""
    if len(question) == 0:
        raise ValueError("empty question")
    return MultimodalInput([Segment(tokens=question)])


def reader_input(entries: list[MemoryEntry], question: TokenSeq,
                 backbone: Backbone) -> MultimodalInput:
    """[m_1, ..., m_k, q] with each entry as one (image-or-zero, text) segment."""
    segments = [entry_input(e, backbone).segments[0] for e in entries]
    segments.append(Segment(tokens=question))
    return MultimodalInput(segments)


def inbatch_finetune_step(batch: list[FinetuneExample], backbone: Backbone,
                          opt: OptimizerState, plan: StagePlan) -> StepStats:
    """Joint loss over the batch-assembled memory; multi-positive queries
    average their positive terms."""
    if plan.stage != "in-batch":
        raise ValueError(f"plan stage is {plan.stage!r}, expected 'in-batch'")
    entries, positive_positions = in_batch_memory(batch)
    zero_grads(backbone.params)
    with T.tape() as tp:
        q_cls = encode_cls_grouped(backbone, [question_input(ex.question) for ex in batch])
        m_cls = encode_cls_grouped(backbone, [entry_input(e, backbone) for e in entries])
        scores = T.matmul(q_cls, T.transpose_last(m_cls))
        l_con = T.multi_target_cross_entropy(scores, positive_positions)

        raw = scores.data
        k_eff = min(plan.k, len(entries))
        readers, targets = [], []
        hits = 0
        for i, ex in enumerate(batch):
            order = np.argsort(-raw[i], kind="stable")[:k_eff]
            readers.append(reader_input([entries[j] for j in order], ex.question, backbone))
            targets.append(np.append(ex.answer.ids, END_ID))
            if set(order.tolist()) & set(positive_positions[i]):
                hits += 1
        l_gen = _grouped_generative_loss(backbone, readers, targets)
        total = T.add(l_gen, T.scale(l_con, plan.lambda_)) if plan.lambda_ != 0.0 else l_gen
    T.backward(total, tp)
    adam_step(backbone.params, opt)
    top1 = raw.argmax(axis=1)
    recall1 = float(np.mean([t in set(p) for t, p in zip(top1, positive_positions)]))
    loss = LossBreakdown(l_con=l_con.item(), l_gen=l_gen.item(),
                         total=l_gen.item() + plan.lambda_ * l_con.item(),
                         retrieval_hit=hits / len(batch), recall_at_1=recall1)
    return StepStats(loss=loss, memory_size=len(entries))


def encode_questions(questions: list[TokenSeq], backbone: Backbone,
                     chunk: int = 256) -> np.ndarray:
    """Query vectors [N, D] float32, no gradients."""
    vecs = np.zeros((len(questions), backbone.config.D), dtype=np.float32)
    for lo in range(0, len(questions), chunk):
        part = [question_input(q) for q in questions[lo:lo + chunk]]
        with T.no_grad():
            vecs[lo:lo + len(part)] = encode_cls_grouped(backbone, part).data.astype(np.float32)
    return vecs


def build_global_index(entries: list[MemoryEntry], backbone: Backbone,
                       workers: int = 1) -> EncodedMemory:
    """Frozen index over the full corpus (the full-wiki analogue)."""
    return build_index(entries, backbone, workers=workers)


@dataclass
class RetrievalManifestRow:
    question_id: str
    ids: list[str]
    scores: list[float]

    def to_json_obj(self) -> dict:
        return {"question_id": self.question_id, "ids": self.ids, "scores": self.scores}


def retrieve_for_dataset(dataset: list[FinetuneExample], index: EncodedMemory,
                         backbone: Backbone, k: int) -> list[RetrievalManifestRow]:
    """One retrieval per question with the current encoder (stage-start snapshot)."""
    fp = backbone.fingerprint()
    vecs = encode_questions([ex.question for ex in dataset], backbone)
    rows = []
    for ex, vec in zip(dataset, vecs):
        res = top_k(vec, index, min(k, len(index)), query_fingerprint=fp)
        rows.append(RetrievalManifestRow(
            question_id=ex.id, ids=list(res.ids),
            scores=[float(s) for s in res.scores]))
    return rows


def fixed_retrieval_finetune(dataset: list[FinetuneExample], index: EncodedMemory,
                             backbone: Backbone, opt: OptimizerState, plan: StagePlan,
                             entry_by_id: dict[str, MemoryEntry], seed: int,
                             log_fn=None) -> list[RetrievalManifestRow]:
    """Optimize only the generative loss against retrievals fixed at stage
    start; the stored index vectors are never touched."""
    if plan.stage != "fixed-retrieval":
        raise ValueError(f"plan stage is {plan.stage!r}, expected 'fixed-retrieval'")
    manifest = retrieve_for_dataset(dataset, index, backbone, plan.k)
    retrieved = {row.question_id: row.ids for row in manifest}
    rng = named_rng(seed, "fixed-batches")
    order: list[int] = []
    for step in range(plan.steps):
        while len(order) < plan.batch_size:
            order.extend(rng.permutation(len(dataset)).tolist())
        picks, order = order[:plan.batch_size], order[plan.batch_size:]
        batch = [dataset[i] for i in picks]
        zero_grads(backbone.params)
        with T.tape() as tp:
            readers, targets = [], []
            for ex in batch:
                entries = [entry_by_id[i] for i in retrieved[ex.id]]
                readers.append(reader_input(entries, ex.question, backbone))
                targets.append(np.append(ex.answer.ids, END_ID))
            l_gen = _grouped_generative_loss(backbone, readers, targets)
        T.backward(l_gen, tp)
        adam_step(backbone.params, opt)
        if log_fn is not None:
            log_fn({"step": step, "l_gen": l_gen.item()})
        if not np.isfinite(l_gen.item()):
            raise T.NumericError("non-finite generative loss in fixed stage")
    return manifest


def answer(question: TokenSeq, index: EncodedMemory, backbone: Backbone,
           plan: StagePlan, entry_by_id: dict[str, MemoryEntry],
           max_len: int = ANSWER_MAX_LEN):
    """Retrieve top-K for the question, then beam-decode over the augmented
    input. Returns (answer tokens, retrieval result)."""
    if len(index) == 0:
        raise ValueError("cannot answer against an empty index")
    vec = encode_questions([question], backbone)[0]
    res = top_k(vec, index, min(plan.k, len(index)),
                query_fingerprint=backbone.fingerprint())
    entries = [entry_by_id[i] for i in res.ids]
    with T.no_grad():
        enc = backbone.encode(backbone.assemble(reader_input(entries, question, backbone)))
    out = generate_beam(backbone, enc, beam_width=plan.beam_width, max_len=max_len)
    return out, res


def run_inbatch_stage(dataset: list[FinetuneExample], backbone: Backbone,
                      plan: StagePlan, seed: int, log_fn=None) -> list[dict]:
    """Epoch-shuffled in-batch fine-tuning loop."""
    opt = OptimizerState(lr=plan.lr)
    rng = named_rng(seed, "inbatch-batches")
    order: list[int] = []
    log = []
    for step in range(plan.steps):
        while len(order) < plan.batch_size:
            order.extend(rng.permutation(len(dataset)).tolist())
        picks, order = order[:plan.batch_size], order[plan.batch_size:]
        stats = inbatch_finetune_step([dataset[i] for i in picks], backbone, opt, plan)
        line = {"step": step, "l_con": stats.loss.l_con, "l_gen": stats.loss.l_gen,
                "total": stats.loss.total, "inbatch_recall@1": stats.loss.recall_at_1}
        log.append(line)
        if log_fn is not None:
            log_fn(line)
    return log
