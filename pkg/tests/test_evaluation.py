import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgcl.encoder import EncoderConfig, ModelParams
from sgcl.evaluation import Metrics, evaluate, metrics_from_ranks, rank_target, score_items
from sgcl.ingest import Session


def test_unique_max_is_rank_one():
    assert rank_target(np.array([0.1, 3.0, 0.2]), 1, 20) == 1


def test_rank_past_cutoff_is_a_miss():
    scores = np.arange(30.0)[::-1]  # item i has rank i + 1
    assert rank_target(scores, 19, 20) == 20
    assert rank_target(scores, 20, 20) is None


def test_ties_resolve_by_index():
    scores = np.array([1.0, 5.0, 5.0, 5.0, 0.0])
    assert [rank_target(scores, i, 20) for i in (1, 2, 3)] == [1, 2, 3]
    assert rank_target(scores, 0, 20) == 4


def test_rank_rejects_bad_input():
    with pytest.raises(ValueError):
        rank_target(np.ones(3), 3, 20)
    with pytest.raises(ValueError):
        rank_target(np.ones(3), 0, 0)


def test_two_examples_hand_arithmetic():
    m = metrics_from_ranks([1, None], 20)
    assert (m.p_at_k, m.mrr_at_k, m.n_examples) == (0.5, 0.5, 2)


def test_all_rank_one():
    m = metrics_from_ranks([1, 1, 1], 20)
    assert m.p_at_k == m.mrr_at_k == 1.0


def test_five_example_fixture():
    m = metrics_from_ranks([1, 2, 5, None, 20], 20)
    assert m.p_at_k == pytest.approx(0.8, abs=1e-15)
    assert m.mrr_at_k == pytest.approx(0.35, abs=1e-15)
    assert m.line() == "P@20=80.0000,MRR@20=35.0000"


def test_empty_ranks_rejected():
    with pytest.raises(ValueError):
        metrics_from_ranks([], 20)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(1, 40)), min_size=1, max_size=50), st.integers(1, 30))
def test_mrr_never_exceeds_precision(ranks, k):
    m = metrics_from_ranks(ranks, k)
    assert 0 <= m.mrr_at_k <= m.p_at_k <= 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-10, 10), min_size=2, max_size=30), st.data())
def test_monotone_transform_and_neg_inf_padding(scores, data):
    # integer scores keep the transform strictly increasing in floating point
    s = np.array(scores, dtype=float)
    target = data.draw(st.integers(0, len(s) - 1))
    k = data.draw(st.integers(1, len(s)))
    base = rank_target(s, target, k)
    assert rank_target(np.exp(s / 3) * 2 + 1, target, k) == base
    padded = np.concatenate([s, np.full(5, -np.inf)])
    assert rank_target(padded, target, k) == base


def small_params():
    return ModelParams.init(9, EncoderConfig(d=4), seed=0)


def test_evaluate_matches_per_example_ranking():
    p = small_params()
    examples = [Session((1, 2), 3), Session((4,), 5), Session(tuple(range(1, 9)) * 2, 8)]
    got = evaluate(p, examples, k=3, batch_size=2)
    ranks = []
    for ex in examples:
        scores = score_items([ex.items[-10:]], p)[0]
        scores[0] = -np.inf
        ranks.append(rank_target(scores, ex.label, 3))
    assert got == metrics_from_ranks(ranks, 3)


def test_mask_never_ranked():
    p = small_params()
    # make the mask row the best match for everything
    p["item_embeddings"].data[0] = 0.0
    p["W_pred"].data[:] = 0.0
    p["b_pred"].data[:] = 0.0
    m = evaluate(p, [Session((1, 2), 1)], k=1)
    assert m.p_at_k == 1.0  # all real items tie at 0 similarity; item 1 wins by index


def test_evaluate_rejects():
    with pytest.raises(ValueError):
        evaluate(small_params(), [])
    with pytest.raises(ValueError):
        evaluate(small_params(), [Session((1, 2), 0)])


def test_metrics_line_format():
    assert Metrics(0.123456, 0.05, 20, 10).line() == "P@20=12.3456,MRR@20=5.0000"
