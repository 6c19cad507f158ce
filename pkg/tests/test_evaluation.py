import json
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from partreid.evaluation import (
    DistanceMatrix,
    attention_pixel_accuracy,
    brute_force_ap,
    cmc_map,
    distance_matrix,
    query_average_precisions,
)
from partreid.focuser import PartEmbeddings


def _dm(dist, qids, gids, qcams=None, gcams=None):
    dist = np.atleast_2d(np.asarray(dist, dtype=float))
    qids, gids = np.asarray(qids), np.asarray(gids)
    qcams = np.zeros(len(qids), int) if qcams is None else np.asarray(qcams)
    gcams = np.ones(len(gids), int) if gcams is None else np.asarray(gcams)
    return DistanceMatrix(dist, qids, gids, qcams, gcams)


def _exact_ap(relevance) -> Fraction:
    hits, total = 0, Fraction(0)
    for rank, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            total += Fraction(hits, rank)
    return total / hits


def test_perfect_ranking():
    r = cmc_map(_dm([[0.1, 0.2, 0.3]], [7], [7, 1, 2]))
    assert r.rank_k[1] == 1.0 and r.mAP == 1.0
    assert brute_force_ap([True, False, False]) == 1.0


def test_ap_seven_twelfths():
    r = cmc_map(_dm([[0.1, 0.2, 0.3]], [7], [1, 7, 7]))
    assert r.rank_k[1] == 0.0
    assert _exact_ap([False, True, True]) == Fraction(7, 12)
    assert r.mAP == pytest.approx(7 / 12, abs=1e-12)
    assert brute_force_ap([False, True, True]) == pytest.approx(7 / 12, abs=1e-15)


@pytest.mark.parametrize("n", [1, 2, 5, 20])
def test_single_relevant_at_last_rank(n):
    dist = np.arange(1, n + 1, dtype=float)[None]
    gids = np.r_[np.ones(n - 1, int), 0]
    r = cmc_map(_dm(dist, [0], gids))
    assert r.mAP == pytest.approx(1 / n, abs=1e-15)
    assert brute_force_ap([False] * (n - 1) + [True]) == pytest.approx(1 / n, abs=1e-15)


def test_same_camera_matches_are_filtered():
    # the nearest gallery item is the same person on the same camera -> junk
    dm = _dm([[0.0, 0.5, 0.7]], [3], [3, 4, 3], qcams=[1], gcams=[1, 2, 2])
    r = cmc_map(dm)
    assert r.rank_k[1] == 0.0
    assert r.mAP == pytest.approx(0.5)


def test_queries_without_matches_are_excluded_and_counted():
    dm = _dm([[0.1, 0.2], [0.3, 0.1]], [1, 9], [1, 2])
    r = cmc_map(dm)
    assert r.num_excluded == 1 and r.num_queries == 1
    assert r.mAP == 1.0


def test_ties_break_by_gallery_index():
    r = cmc_map(_dm([[0.5, 0.5]], [1], [2, 1]))
    assert r.rank_k[1] == 0.0
    r = cmc_map(_dm([[0.5, 0.5]], [1], [1, 2]))
    assert r.rank_k[1] == 1.0


def _random_instance(seed, nq=4, ng=None):
    rng = np.random.default_rng(seed)
    ng = ng or int(rng.integers(2, 21))
    gids = rng.integers(0, 4, size=ng)
    qids = rng.integers(0, 4, size=nq)
    gcams = rng.integers(0, 3, size=ng)
    qcams = rng.integers(0, 3, size=nq)
    dist = rng.uniform(0, 1, size=(nq, ng))
    return DistanceMatrix(dist, qids, gids, qcams, gcams)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 1_000_000))
def test_ap_agrees_with_brute_force(seed):
    dm = _random_instance(seed)
    aps = query_average_precisions(dm)
    for q, ap in enumerate(aps):
        keep = ~((dm.gallery_ids == dm.query_ids[q]) & (dm.gallery_cams == dm.query_cams[q]))
        # independent ranking: sort (distance, index) tuples
        ranked = sorted((dm.values[q, j], j) for j in range(len(dm.gallery_ids)) if keep[j])
        relevance = [dm.gallery_ids[j] == dm.query_ids[q] for _, j in ranked]
        if not any(relevance):
            assert ap is None
            continue
        assert ap == pytest.approx(brute_force_ap(relevance), rel=1e-12, abs=1e-15)
        assert ap == pytest.approx(float(_exact_ap(relevance)), rel=1e-12)
    valid = [a for a in aps if a is not None]
    r = cmc_map(dm)
    assert r.num_queries == len(valid)
    if valid:
        assert r.mAP == pytest.approx(float(np.mean(valid)), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 1_000_000))
def test_cmc_monotone_and_bounded(seed):
    r = cmc_map(_random_instance(seed, nq=6), ranks=(1, 2, 5, 10, 20))
    values = [r.rank_k[k] for k in (1, 2, 5, 10, 20)]
    assert values == sorted(values)
    assert all(0.0 <= v <= 1.0 for v in values) and 0.0 <= r.mAP <= 1.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 1_000_000))
def test_gallery_permutation_invariance(seed):
    dm = _random_instance(seed, nq=5)
    perm = np.random.default_rng(seed + 1).permutation(len(dm.gallery_ids))
    shuffled = DistanceMatrix(dm.values[:, perm], dm.query_ids, dm.gallery_ids[perm], dm.query_cams, dm.gallery_cams[perm])
    a, b = cmc_map(dm), cmc_map(shuffled)
    assert a.rank_k == b.rank_k
    assert a.mAP == pytest.approx(b.mAP, rel=1e-12)


def test_non_finite_distances_rejected():
    with pytest.raises(ValueError):
        _dm([[np.nan, 0.1]], [0], [0, 1])


# -- distance matrix -------------------------------------------------------


def _bundle(n, x=3, d=4, seed=0, vis=None):
    g = torch.Generator().manual_seed(seed)
    vis = torch.ones(n, x, dtype=torch.bool) if vis is None else vis
    return PartEmbeddings(torch.randn(n, d, generator=g), torch.randn(n, x, d, generator=g), vis)


def test_distance_matrix_shape_and_self_match():
    q, g = _bundle(2, seed=1), _bundle(3, seed=2)
    g.parts[1], g.foreground[1] = q.parts[0], q.foreground[0]
    dm = distance_matrix(q, g, [0, 1], [5, 0, 6], [0, 0], [1, 1, 1])
    assert dm.values.shape == (2, 3)
    assert dm.values[0, 1] == 0.0
    assert dm.values[0].argmin() == 1


def test_distance_matrix_uses_foreground_when_query_fully_hidden():
    q = _bundle(1, seed=3, vis=torch.zeros(1, 3, dtype=torch.bool))
    g = _bundle(4, seed=4)
    dm = distance_matrix(q, g, [0], [0, 1, 2, 3], [0], [1, 1, 1, 1])
    direct = torch.linalg.vector_norm(q.foreground - g.foreground, dim=1).numpy()
    np.testing.assert_allclose(dm.values[0], direct, rtol=1e-6)
    assert (dm.parts_used == 0).all()


def test_hiding_more_query_parts_never_uses_more_parts():
    q, g = _bundle(5, seed=5), _bundle(6, seed=6)
    rng = np.random.default_rng(0)
    q.visibility = torch.from_numpy(rng.random((5, 3)) < 0.7)
    g.visibility = torch.from_numpy(rng.random((6, 3)) < 0.7)
    before = distance_matrix(q, g, range(5), range(6), [0] * 5, [1] * 6).parts_used
    q.visibility = q.visibility & torch.from_numpy(rng.random((5, 3)) < 0.5)
    after = distance_matrix(q, g, range(5), range(6), [0] * 5, [1] * 6).parts_used
    assert (after <= before).all()


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        distance_matrix(_bundle(0), _bundle(2), [], [0, 1], [], [0, 0])


# -- attention accuracy ----------------------------------------------------


def test_attention_accuracy_examples():
    labels = torch.randint(0, 7, (2, 4, 4))
    one_hot = torch.nn.functional.one_hot(labels, 7).permute(0, 3, 1, 2).float()
    assert attention_pixel_accuracy(one_hot, labels) == 1.0
    half = torch.zeros(1, 4, 4, dtype=torch.long)
    half[:, 2:] = 3
    background = torch.zeros(1, 7, 4, 4)
    background[:, 0] = 1
    assert attention_pixel_accuracy(background, half) == 0.5
    uniform = torch.full((1, 7, 4, 4), 1 / 7)
    assert attention_pixel_accuracy(uniform, half) == 0.5


def test_report_json_uses_four_decimals():
    r = cmc_map(_dm([[0.1, 0.2, 0.3]], [7], [1, 7, 7]))
    r.attention_accuracy = 0.123456
    r.visibility_rates = [1 / 3]
    out = json.loads(r.to_json())
    assert out["mAP"] == 0.5833 and out["attention_pixel_accuracy"] == 0.1235
    assert out["visibility_part1"] == 0.3333 and out["rank1"] == 0.0
