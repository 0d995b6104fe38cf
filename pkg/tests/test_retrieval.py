import json

import numpy as np
import pytest
from oracles import retrieval_ref

from prsnet.losses import Embedding
from prsnet.retrieval import (
    GalleryIndex,
    ReportError,
    average_precision,
    build_centroid_gallery,
    evaluate,
    rank_query,
)


def _queries(vectors, pids, cams):
    return [Embedding(v, int(p), int(c)) for v, p, c in zip(vectors, pids, cams)]


class TestRanking:
    def test_distance_order(self):
        g = GalleryIndex([[1.0, 0.0], [5.0, 0.0]], [1, 2], [2, 2])
        assert list(rank_query(Embedding(np.zeros(2), 1, 1), g)) == [0, 1]

    def test_same_camera_same_id_excluded(self):
        g = GalleryIndex([[0.0], [1.0], [2.0]], [1, 1, 2], [1, 2, 1])
        order = rank_query(Embedding(np.zeros(1), 1, 1), g)
        assert list(order) == [1, 2]
        assert list(rank_query(Embedding(np.zeros(1), 1, 1), g, protocol="none")) == [0, 1, 2]

    def test_random_against_full_sort(self):
        rng = np.random.default_rng(0)
        g = GalleryIndex(rng.standard_normal((20, 4)), rng.integers(0, 5, 20), rng.integers(1, 4, 20))
        q = Embedding(rng.standard_normal(4), 99, 1)
        d = [float(np.sum((q.vector - v) ** 2)) for v in g.vectors]
        assert list(rank_query(q, g)) == sorted(range(20), key=lambda i: (d[i], i))

    def test_ties_keep_gallery_order(self):
        g = GalleryIndex(np.ones((4, 2)), [1, 2, 3, 4], [2, 2, 2, 2])
        assert list(rank_query(Embedding(np.zeros(2), 9, 1), g)) == [0, 1, 2, 3]

    def test_cosine(self):
        g = GalleryIndex([[10.0, 0.0], [0.1, 0.1]], [1, 2], [2, 2])
        assert list(rank_query(Embedding(np.array([1.0, 1.0]), 1, 1), g, metric="cosine")) == [1, 0]


class TestAveragePrecision:
    def test_alternating(self):
        assert average_precision([1, 0, 1, 0]) == pytest.approx(0.8333, abs=1e-4)

    def test_perfect(self):
        assert average_precision([1, 1, 0, 0]) == 1.0

    def test_last(self):
        assert average_precision([0, 0, 0, 1]) == 0.25

    def test_none_relevant(self):
        with pytest.raises(ReportError):
            average_precision([0, 0])


class TestEvaluate:
    def test_separable(self):
        rng = np.random.default_rng(1)
        centers = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
        gp = np.repeat([1, 2, 3], 5)
        gv = centers[gp - 1] + rng.normal(0, 0.5, (15, 2))
        qp = np.array([1, 2, 3])
        rep = evaluate(_queries(centers[qp - 1], qp, [1, 1, 1]), GalleryIndex(gv, gp, np.full(15, 2)))
        assert rep.mAP == 1.0 and rep.rank(1) == 1.0

    def test_random_baseline(self):
        maps = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            gp = np.repeat([1, 2], 100)
            g = GalleryIndex(rng.standard_normal((200, 8)), gp, np.full(200, 2))
            qp = rng.integers(1, 3, 20)
            maps.append(evaluate(_queries(rng.standard_normal((20, 8)), qp, np.ones(20)), g).mAP)
        assert abs(np.mean(maps) - 0.5) < 0.1

    def test_single_query_equals_its_ap(self):
        g = GalleryIndex([[1.0], [2.0], [3.0], [4.0]], [7, 8, 7, 8], [2, 2, 2, 2])
        rep = evaluate([Embedding(np.zeros(1), 7, 1)], g)
        assert rep.mAP == pytest.approx(average_precision([1, 0, 1, 0]))
        assert list(rep.cmc) == [1.0, 1.0, 1.0, 1.0]

    def test_distractors_never_relevant(self):
        g = GalleryIndex([[0.0], [1.0], [2.0]], [-1, 5, -1], [2, 2, 2])
        rep = evaluate([Embedding(np.zeros(1), 5, 1), Embedding(np.zeros(1), -1, 1)], g)
        assert rep.skipped == [1]
        assert rep.per_query[0].first_match == 2

    def test_no_relevant_anywhere(self):
        g = GalleryIndex([[0.0]], [2], [2])
        with pytest.raises(ReportError):
            evaluate([Embedding(np.zeros(1), 1, 1)], g)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_quadratic_reference(self, seed):
        rng = np.random.default_rng(seed)
        G, Q = int(rng.integers(5, 40)), int(rng.integers(1, 10))
        gv, gp, gc = rng.standard_normal((G, 3)), rng.integers(0, 4, G), rng.integers(1, 4, G)
        qv, qp, qc = rng.standard_normal((Q, 3)), rng.integers(0, 4, Q), rng.integers(1, 4, Q)
        try:
            mAP, cmc, aps = retrieval_ref(qv, qp, qc, gv, gp, gc)
        except ZeroDivisionError:
            pytest.skip("no evaluable query")
        rep = evaluate(_queries(qv, qp, qc), GalleryIndex(gv, gp, gc))
        assert rep.mAP == mAP
        assert list(rep.cmc) == cmc
        assert [r.ap for r in rep.per_query] == aps

    def test_report_json(self):
        g = GalleryIndex([[1.0], [2.0]], [1, 2], [2, 2])
        doc = json.loads(evaluate([Embedding(np.zeros(1), 1, 1)], g).to_json())
        assert set(doc) >= {"mAP", "rank1", "rank5", "rank10", "cmc", "per_query", "skipped"}


class TestCentroidGallery:
    def test_means(self):
        g = GalleryIndex([[1.0, 0.0], [3.0, 0.0], [10.0, 0.0]], [1, 1, 2], [2, 3, 2])
        c = build_centroid_gallery(g)
        np.testing.assert_array_equal(c.vectors, [[2.0, 0.0], [10.0, 0.0]])
        assert list(c.person_ids) == [1, 2] and c.mode == "centroid"

    def test_query_ranking(self):
        g = GalleryIndex([[1.0, 0.0], [3.0, 0.0], [10.0, 0.0]], [1, 1, 2], [2, 3, 2])
        rep = evaluate([Embedding(np.zeros(2), 1, 2)], build_centroid_gallery(g))
        assert rep.rank(1) == 1.0 and rep.mAP == 1.0

    def test_instance_and_centroid_agree_when_separable(self):
        rng = np.random.default_rng(2)
        centers = rng.standard_normal((3, 4)) * 50
        gp = np.repeat([1, 2, 3], 4)
        g = GalleryIndex(centers[gp - 1] + rng.normal(0, 0.1, (12, 4)), gp, np.tile([2, 3, 4, 5], 3))
        qs = _queries(centers + rng.normal(0, 0.1, (3, 4)), [1, 2, 3], [1, 1, 1])
        assert evaluate(qs, g).mAP == 1.0
        assert evaluate(qs, build_centroid_gallery(g)).mAP == 1.0
