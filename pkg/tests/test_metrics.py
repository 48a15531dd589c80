import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from metric_cases import EM_CASES, KEYWORD_CASES, RETRIEVAL_F1_CASES, TOKEN_F1_CASES

from mmrag.metrics import (
    Metrics,
    exact_match,
    keyword_accuracy,
    normalize,
    recall_at_k,
    retrieval_f1,
    score_predictions,
    token_f1,
)


@pytest.mark.parametrize("pred,ref,want", EM_CASES)
def test_exact_match_table(pred, ref, want):
    assert exact_match(pred, ref) == want


@pytest.mark.parametrize("pred,ref,want", TOKEN_F1_CASES)
def test_token_f1_table(pred, ref, want):
    assert token_f1(pred, ref) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("pred,kws,want", KEYWORD_CASES)
def test_keyword_accuracy_table(pred, kws, want):
    assert keyword_accuracy(pred, kws) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("retrieved,gold,want", RETRIEVAL_F1_CASES)
def test_retrieval_f1_table(retrieved, gold, want):
    assert retrieval_f1(retrieved, gold) == pytest.approx(want, abs=1e-12)


def test_normalization_pipeline():
    assert normalize("  The, RED square!! ") == "the red square"
    assert normalize("...") == ""


def test_keyword_accuracy_requires_keywords():
    with pytest.raises(ValueError):
        keyword_accuracy("red", [])


def test_retrieval_f1_requires_gold():
    with pytest.raises(ValueError):
        retrieval_f1(["a"], [])


# ---------------------------------------------------------------------------
# recall@K


def test_recall_gold_always_rank_one():
    results = [["g", "x", "y"]] * 5
    gold = [["g"]] * 5
    for k in (1, 2, 3):
        assert recall_at_k(results, gold, k) == 1.0


def test_recall_gold_always_absent():
    results = [["x", "y"]] * 5
    gold = [["g"]] * 5
    assert recall_at_k(results, gold, 2) == 0.0


def test_recall_monte_carlo_matches_analytic():
    # 1 gold among N=100 with random scores: P(top-10 hit) = 0.1
    rng = np.random.default_rng(123)
    trials = 10_000
    results, gold = [], []
    ids = [f"d{i}" for i in range(100)]
    for _ in range(trials):
        scores = rng.random(100)
        order = np.argsort(-scores)
        results.append([ids[i] for i in order[:10]])
        gold.append(["d0"])
    got = recall_at_k(results, gold, 10)
    assert abs(got - 0.1) < 0.02


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=150, deadline=None)
@given(st.text(alphabet="abc red. ", max_size=30), st.text(alphabet="abc red. ", max_size=30))
def test_metric_bounds_and_em_le_f1(pred, ref):
    em = exact_match(pred, ref)
    f1 = token_f1(pred, ref)
    assert 0.0 <= em <= 1.0
    assert 0.0 <= f1 <= 1.0
    assert em <= f1 + 1e-12


@settings(max_examples=80, deadline=None)
@given(st.text(max_size=40))
def test_normalize_idempotent(text):
    assert normalize(normalize(text)) == normalize(text)


def test_metrics_dataclass_validates_bounds():
    with pytest.raises(ValueError):
        Metrics(em=1.2, token_f1=0.5, keyword_accuracy=0.5, retrieval_f1=0.5)


def test_score_predictions_aggregates():
    m = score_predictions(
        predictions=["red", "blue"],
        references=["red", "green"],
        retrieved_ids=[["a", "b"], ["c"]],
        gold_ids=[["a"], ["x"]],
        ks=(1, 2),
    )
    assert m.em == 0.5
    assert m.token_f1 == 0.5
    assert m.retrieval_f1 == pytest.approx((2 / 3 + 0.0) / 2)
    assert m.recall_at_k[1] == 0.5
    assert m.recall_at_k[2] == 0.5
    d = m.to_dict()
    assert set(d) == {"em", "token_f1", "keyword_accuracy", "retrieval_f1", "recall_at_k"}
