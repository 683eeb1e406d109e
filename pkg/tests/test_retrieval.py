import math

import numpy as np
import pytest
import torch

from regionreid.retrieval import (
    RetrievalEntry,
    RetrievalError,
    RetrievalIndex,
    aggregate_distance,
    cosine_distance,
    distance_matrix,
    evaluate,
)


def _entry(global_feat, regions, weights, pid, cam, path=""):
    return RetrievalEntry(
        torch.as_tensor(global_feat, dtype=torch.float32),
        torch.as_tensor(regions, dtype=torch.float32),
        torch.as_tensor(weights, dtype=torch.float32),
        pid,
        cam,
        path,
    )


def _random_entry(rng, n=4, d=6, pid=0, cam=0):
    return _entry(
        rng.normal(size=d), rng.normal(size=(n, d)),
        rng.dirichlet(np.ones(n)), pid, cam,
    )


class TestCosineDistance:
    def test_identical_vectors(self):
        v = torch.tensor([1.0, 2.0, 3.0])
        assert abs(cosine_distance(v, v)) < 1e-6

    def test_orthogonal_vectors(self):
        assert abs(cosine_distance(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 2.0])) - 1.0) < 1e-6

    def test_direct_evaluation(self):
        d = cosine_distance(torch.tensor([1.0, 0.0]), torch.tensor([1.0, 1.0]))
        assert abs(d - (1.0 - 1.0 / math.sqrt(2.0))) < 1e-6
        assert abs(d - 0.2929) < 1e-4

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = torch.tensor(rng.normal(size=5))
            b = torch.tensor(rng.normal(size=5))
            d = cosine_distance(a, b)
            assert -1e-9 <= d <= 2.0 + 1e-9

    def test_zero_norm_errors(self):
        with pytest.raises(RetrievalError, match="zero-norm"):
            cosine_distance(torch.zeros(3), torch.ones(3))


class TestAggregateDistance:
    def test_zero_weight_products_fall_back_to_global(self):
        rng = np.random.default_rng(1)
        q = _entry(rng.normal(size=4), rng.normal(size=(2, 4)), [1.0, 0.0], 0, 0)
        g = _entry(rng.normal(size=4), rng.normal(size=(2, 4)), [0.0, 1.0], 1, 0)
        expected = cosine_distance(q.global_feat, g.global_feat)
        assert abs(aggregate_distance(q, g) - expected) < 1e-6

    def test_single_region_unit_weights(self):
        rng = np.random.default_rng(2)
        q = _entry(rng.normal(size=4), rng.normal(size=(1, 4)), [1.0], 0, 0)
        g = _entry(rng.normal(size=4), rng.normal(size=(1, 4)), [1.0], 1, 0)
        d1 = cosine_distance(q.region_feats[0], g.region_feats[0])
        dg = cosine_distance(q.global_feat, g.global_feat)
        assert abs(aggregate_distance(q, g) - (d1 + dg) / 2.0) < 1e-6

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            q = _random_entry(rng)
            g = _random_entry(rng, pid=1)
            # independent oracle: pure python re-evaluation
            num = 1.0 - float(
                (q.global_feat @ g.global_feat)
                / (q.global_feat.norm() * g.global_feat.norm())
            )
            den = 1.0
            for j in range(4):
                pair = float(q.weights[j]) * float(g.weights[j])
                dj = 1.0 - float(
                    (q.region_feats[j] @ g.region_feats[j])
                    / (q.region_feats[j].norm() * g.region_feats[j].norm())
                )
                num += pair * dj
                den += pair
            assert abs(aggregate_distance(q, g) - num / den) < 1e-6

    def test_symmetric_in_roles(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            q = _random_entry(rng)
            g = _random_entry(rng, pid=1)
            assert abs(aggregate_distance(q, g) - aggregate_distance(g, q)) < 1e-9

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(5)
        queries = RetrievalIndex(tuple(_random_entry(rng, pid=i) for i in range(3)))
        gallery = RetrievalIndex(tuple(_random_entry(rng, pid=i) for i in range(5)))
        matrix = distance_matrix(queries, gallery)
        for qi in range(3):
            for gi in range(5):
                pair = aggregate_distance(queries.entries[qi], gallery.entries[gi])
                assert abs(float(matrix[qi, gi]) - pair) < 1e-6

    def test_shape_mismatch_errors(self):
        rng = np.random.default_rng(6)
        q = _random_entry(rng, n=4)
        g = _random_entry(rng, n=3)
        with pytest.raises(RetrievalError, match="shapes"):
            aggregate_distance(q, g)


def _simple_index(feature_rows, pids, cams, n=2):
    rng = np.random.default_rng(42)
    entries = []
    for row, pid, cam in zip(feature_rows, pids, cams):
        vec = np.asarray(row, dtype=np.float64)
        entries.append(
            _entry(vec, np.stack([vec, vec * 2.0]), np.full(n, 1.0 / n), pid, cam)
        )
    return RetrievalIndex(tuple(entries))


class TestEvaluate:
    def test_perfect_duplicates_different_camera(self):
        rng = np.random.default_rng(7)
        rows = rng.normal(size=(4, 5))
        query = _simple_index(rows, pids=[0, 1, 2, 3], cams=[0, 0, 0, 0])
        gallery = _simple_index(
            np.concatenate([rows, rng.normal(size=(4, 5))]),
            pids=[0, 1, 2, 3, 4, 5, 6, 7],
            cams=[1] * 8,
        )
        report = evaluate(query, gallery)
        assert report["rank1"] == 1.0
        assert report["mAP"] == 1.0
        assert report["excluded_queries"] == 0

    def test_hand_computed_average_precision(self):
        # correct items at ranks 2 and 4 -> AP = (1/2 + 2/4) / 2 = 0.5
        query = _simple_index([[1.0, 0.0]], pids=[9], cams=[0])
        gallery = _simple_index(
            [[1.0, 0.05], [1.0, 0.2], [1.0, 0.4], [1.0, 0.7]],
            pids=[5, 9, 6, 9],
            cams=[1, 1, 1, 1],
        )
        report = evaluate(query, gallery)
        assert abs(report["mAP"] - 0.5) < 1e-9
        assert report["rank1"] == 0.0
        assert report["rank3"] == 1.0

    def test_same_camera_matches_excluded(self):
        query = _simple_index([[1.0, 0.0]], pids=[0], cams=[0])
        gallery = _simple_index(
            [[1.0, 0.0], [1.0, 0.1], [0.0, 1.0]], pids=[0, 0, 1], cams=[0, 1, 1]
        )
        report = evaluate(query, gallery)
        # the cam-0 duplicate is filtered; the cam-1 instance still matches
        assert report["rank1"] == 1.0
        assert report["query_count"] == 1

    def test_query_without_valid_match_counted(self):
        query = _simple_index([[1.0, 0.0], [0.0, 1.0]], pids=[0, 7], cams=[0, 0])
        gallery = _simple_index(
            [[1.0, 0.0], [0.5, 0.5]], pids=[0, 3], cams=[1, 1]
        )
        report = evaluate(query, gallery)
        assert report["excluded_queries"] == 1
        assert report["query_count"] == 1

    def test_cmc_monotone(self):
        rng = np.random.default_rng(8)
        rows = rng.normal(size=(6, 4))
        query = _simple_index(rows, pids=[0, 1, 2, 0, 1, 2], cams=[0] * 6)
        gallery = _simple_index(rng.normal(size=(12, 4)), pids=list(range(3)) * 4, cams=[1] * 12)
        report = evaluate(query, gallery)
        assert report["rank1"] <= report["rank3"] <= report["rank5"] <= report["rank10"]

    def test_ranking_invariant_under_feature_rescaling(self):
        rng = np.random.default_rng(9)
        entries = [_random_entry(rng, pid=i % 3, cam=0) for i in range(4)]
        gallery_entries = [_random_entry(rng, pid=i % 3, cam=1) for i in range(9)]
        query = RetrievalIndex(tuple(entries))
        gallery = RetrievalIndex(tuple(gallery_entries))
        base = distance_matrix(query, gallery)

        def scale(e, c):
            return RetrievalEntry(
                e.global_feat * c, e.region_feats * c, e.weights, e.person_id, e.camera_id, e.path
            )

        query2 = RetrievalIndex(tuple(scale(e, 7.5) for e in entries))
        gallery2 = RetrievalIndex(tuple(scale(e, 0.25) for e in gallery_entries))
        scaled = distance_matrix(query2, gallery2)
        assert torch.equal(base.argsort(dim=1), scaled.argsort(dim=1))

    def test_distance_ties_broken_by_gallery_order(self):
        query = _simple_index([[1.0, 0.0]], pids=[0], cams=[0])
        gallery = _simple_index(
            [[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], pids=[3, 0, 5], cams=[1, 1, 1]
        )
        report = evaluate(query, gallery, dump_top_k=3)
        dump = report["ranked"][0]["matches"]
        assert [m["person_id"] for m in dump] == [3, 0, 5]

    def test_empty_gallery_errors(self):
        query = _simple_index([[1.0, 0.0]], pids=[0], cams=[0])
        with pytest.raises(RetrievalError, match="empty gallery"):
            evaluate(query, RetrievalIndex(()))

    def test_report_keys(self):
        query = _simple_index([[1.0, 0.0]], pids=[0], cams=[0])
        gallery = _simple_index([[1.0, 0.1]], pids=[0], cams=[1])
        report = evaluate(query, gallery)
        assert {"rank1", "rank3", "rank5", "rank10", "mAP", "excluded_queries"} <= set(report)
