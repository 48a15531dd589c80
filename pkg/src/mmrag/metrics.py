"""Answer and retrieval metrics.

Normalization is lowercase, punctuation stripped, whitespace collapsed.
All metrics land in [0, 1]; exact match never exceeds token F1.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field

_PUNCT = str.maketrans("", "", string.punctuation)


def normalize(text: str) -> str:
    return " ".join(text.lower().translate(_PUNCT).split())


def _f1(num_same: float, n_pred: int, n_ref: int) -> float:
    if n_pred == 0 and n_ref == 0:
        return 1.0
    if num_same == 0 or n_pred == 0 or n_ref == 0:
        return 0.0
    precision = num_same / n_pred
    recall = num_same / n_ref
    return 2 * precision * recall / (precision + recall)


def exact_match(prediction: str, reference: str) -> float:
    return float(normalize(prediction) == normalize(reference))


def token_f1(prediction: str, reference: str) -> float:
    """Harmonic mean of precision/recall over normalized token bags."""
    pred = normalize(prediction).split()
    ref = normalize(reference).split()
    common = sum((Counter(pred) & Counter(ref)).values())
    return _f1(common, len(pred), len(ref))


def keyword_accuracy(prediction: str, reference_keywords) -> float:
    """F1 between the prediction's token set and the keyword set."""
    keywords = {normalize(k) for k in reference_keywords}
    keywords.discard("")
    if not keywords:
        raise ValueError("keyword_accuracy requires non-empty reference keywords")
    pred = set(normalize(prediction).split())
    return _f1(len(pred & keywords), len(pred), len(keywords))


def retrieval_f1(retrieved_ids, gold_ids) -> float:
    gold = set(gold_ids)
    if not gold:
        raise ValueError("retrieval_f1 requires non-empty gold ids")
    retrieved = set(retrieved_ids)
    return _f1(len(retrieved & gold), len(retrieved), len(gold))


def recall_at_k(results_per_query, gold_per_query, k: int) -> float:
    """Fraction of queries whose top-K contains at least one gold id."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if len(results_per_query) != len(gold_per_query):
        raise ValueError("results and gold lists differ in length")
    if not results_per_query:
        return 0.0
    hits = sum(
        bool(set(r[:k]) & set(g)) for r, g in zip(results_per_query, gold_per_query)
    )
    return hits / len(results_per_query)


@dataclass
class Metrics:
    em: float
    token_f1: float
    keyword_accuracy: float
    retrieval_f1: float
    recall_at_k: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("em", "token_f1", "keyword_accuracy", "retrieval_f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for k, v in self.recall_at_k.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"recall@{k}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "em": self.em,
            "token_f1": self.token_f1,
            "keyword_accuracy": self.keyword_accuracy,
            "retrieval_f1": self.retrieval_f1,
            "recall_at_k": {str(k): v for k, v in sorted(self.recall_at_k.items())},
        }


def score_predictions(predictions, references, retrieved_ids, gold_ids,
                      ks=(1, 4)) -> Metrics:
    """Aggregate metrics over aligned prediction/reference/retrieval lists."""
    n = len(references)
    if not (len(predictions) == len(retrieved_ids) == len(gold_ids) == n) or n == 0:
        raise ValueError("prediction, reference, and retrieval lists must align")
    em = sum(exact_match(p, r) for p, r in zip(predictions, references)) / n
    f1 = sum(token_f1(p, r) for p, r in zip(predictions, references)) / n
    kw = sum(
        keyword_accuracy(p, normalize(r).split()) for p, r in zip(predictions, references)
    ) / n
    rf1 = sum(retrieval_f1(r, g) for r, g in zip(retrieved_ids, gold_ids)) / n
    recalls = {k: recall_at_k(retrieved_ids, gold_ids, k) for k in ks}
    return Metrics(em=em, token_f1=f1, keyword_accuracy=kw, retrieval_f1=rf1,
                   recall_at_k=recalls)
