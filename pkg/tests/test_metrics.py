import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from roadwatch.core import AnomalyClass, BoundingBox, Detection
from roadwatch.metrics import (GroundTruth, MatchCounts, average_precision, evaluate, f1,
                               format_report, iou, match_detections, precision, recall,
                               report_to_dict)


def box(x, y, length, width):
    return BoundingBox(x=x, y=y, length=length, width=width)


def pred(cls, b, conf):
    return Detection(cls=cls, box=b, confidence=conf)


def brute_force_max_matching(preds, truths, iou_threshold):
    """Maximum-cardinality same-class matching by exhaustive assignment enumeration."""
    feasible = {
        (i, j)
        for i, p in enumerate(preds)
        for j, t in enumerate(truths)
        if p.cls is t.cls and iou(p.box, t.box) >= iou_threshold
    }
    for r in range(min(len(preds), len(truths)), 0, -1):
        for pred_sel in itertools.permutations(range(len(preds)), r):
            for truth_sel in itertools.combinations(range(len(truths)), r):
                if all((p, t) in feasible for p, t in zip(pred_sel, truth_sel)):
                    return r
    return 0


class TestIou:
    def test_identity(self):
        b = box(3, 4, 20, 30)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(box(0, 0, 10, 10), box(100, 100, 10, 10)) == 0.0

    def test_half_overlap(self):
        assert iou(box(0, 0, 10, 10), box(5, 0, 10, 10)) == pytest.approx(50 / 150, abs=1e-9)

    @given(
        ax=st.integers(0, 50), ay=st.integers(0, 50),
        al=st.integers(1, 50), aw=st.integers(1, 50),
        bx=st.integers(0, 50), by=st.integers(0, 50),
        bl=st.integers(1, 50), bw=st.integers(1, 50),
    )
    def test_symmetric_and_bounded(self, ax, ay, al, aw, bx, by, bl, bw):
        a, b = box(ax, ay, al, aw), box(bx, by, bl, bw)
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)


class TestMatchDetections:
    def test_exact_match(self):
        b = box(0, 0, 10, 10)
        counts = match_detections([pred(AnomalyClass.D40, b, 0.9)],
                                  [GroundTruth(AnomalyClass.D40, b)])
        assert counts == MatchCounts(tp=1, fp=0, fn=0)

    def test_no_truths(self):
        counts = match_detections([pred(AnomalyClass.D40, box(0, 0, 10, 10), 0.9)], [])
        assert counts == MatchCounts(tp=0, fp=1, fn=0)

    def test_two_preds_one_truth(self):
        truth = GroundTruth(AnomalyClass.D40, box(0, 0, 100, 100))
        preds = [pred(AnomalyClass.D40, box(0, 0, 100, 100), 0.9),
                 pred(AnomalyClass.D40, box(5, 0, 100, 100), 0.8)]
        counts = match_detections(preds, [truth])
        assert counts == MatchCounts(tp=1, fp=1, fn=0)

    def test_class_strict(self):
        b = box(0, 0, 10, 10)
        counts = match_detections([pred(AnomalyClass.D00, b, 0.9)],
                                  [GroundTruth(AnomalyClass.D10, b)])
        assert counts == MatchCounts(tp=0, fp=1, fn=1)

    def test_count_identities_random(self):
        rng = random.Random(7)
        for _ in range(200):
            preds = [pred(rng.choice([AnomalyClass.D00, AnomalyClass.D40]),
                          box(rng.randrange(40), rng.randrange(40),
                              rng.randrange(1, 30), rng.randrange(1, 30)),
                          round(rng.random(), 3))
                     for _ in range(rng.randrange(7))]
            truths = [GroundTruth(rng.choice([AnomalyClass.D00, AnomalyClass.D40]),
                                  box(rng.randrange(40), rng.randrange(40),
                                      rng.randrange(1, 30), rng.randrange(1, 30)))
                      for _ in range(rng.randrange(7))]
            c = match_detections(preds, truths)
            assert c.tp + c.fp == len(preds)
            assert c.tp + c.fn == len(truths)

    def test_greedy_equals_brute_force_on_small_instances(self):
        rng = random.Random(42)
        checked = 0
        for _ in range(300):
            n_p, n_t = rng.randrange(5), rng.randrange(5)
            preds = [pred(rng.choice([AnomalyClass.D00, AnomalyClass.D40]),
                          box(rng.randrange(0, 30, 5), rng.randrange(0, 30, 5),
                              rng.choice([10, 20]), rng.choice([10, 20])),
                          round(rng.random(), 6))
                     for _ in range(n_p)]
            # distinct confidences only: ties are resolved by documented input order
            if len({p.confidence for p in preds}) != len(preds):
                continue
            truths = [GroundTruth(rng.choice([AnomalyClass.D00, AnomalyClass.D40]),
                                  box(rng.randrange(0, 30, 5), rng.randrange(0, 30, 5),
                                      rng.choice([10, 20]), rng.choice([10, 20])))
                      for _ in range(n_t)]
            greedy = match_detections(preds, truths).tp
            exact = brute_force_max_matching(preds, truths, 0.5)
            assert greedy == exact, (preds, truths)
            checked += 1
        assert checked > 100


class TestScalarMetrics:
    def test_precision_example(self):
        assert precision(MatchCounts(tp=6, fp=4)) == 0.6

    def test_precision_degenerate(self):
        assert precision(MatchCounts()) == 0

    def test_precision_perfect(self):
        assert precision(MatchCounts(tp=5)) == 1.0

    def test_recall_example(self):
        assert recall(MatchCounts(tp=6, fn=2)) == 0.75

    def test_recall_degenerate(self):
        assert recall(MatchCounts()) == 0

    def test_recall_perfect(self):
        assert recall(MatchCounts(tp=3, fn=0)) == 1.0

    def test_f1_equal(self):
        assert f1(0.6, 0.6) == pytest.approx(0.6)

    def test_f1_example(self):
        assert f1(0.2, 0.8) == pytest.approx(0.32)

    def test_f1_zero(self):
        assert f1(0, 1) == 0

    @given(p=st.floats(0, 1), r=st.floats(0, 1))
    def test_f1_bounds(self, p, r):
        v = f1(p, r)
        assert 0 <= v <= 1
        if p + r > 0:
            assert min(p, r) - 1e-12 <= v <= (p + r) / 2 + 1e-12


class TestAveragePrecision:
    def test_perfect_single(self):
        b = box(0, 0, 10, 10)
        ap = average_precision([(0, pred(AnomalyClass.D40, b, 0.9))],
                               [(0, GroundTruth(AnomalyClass.D40, b))])
        assert ap == 1.0

    def test_no_predictions(self):
        ap = average_precision([], [(0, GroundTruth(AnomalyClass.D40, box(0, 0, 10, 10)))])
        assert ap == 0.0

    def test_three_prediction_fixture(self):
        # conf 0.9 TP, 0.8 FP, 0.7 TP over 2 truths; PR points (0.5, 1), (1.0, 2/3)
        t1, t2 = box(0, 0, 10, 10), box(100, 100, 10, 10)
        preds = [(0, pred(AnomalyClass.D40, t1, 0.9)),
                 (1, pred(AnomalyClass.D40, box(300, 300, 10, 10), 0.8)),
                 (2, pred(AnomalyClass.D40, t2, 0.7))]
        truths = [(0, GroundTruth(AnomalyClass.D40, t1)),
                  (2, GroundTruth(AnomalyClass.D40, t2))]
        assert average_precision(preds, truths) == pytest.approx(0.5 + 0.5 * (2 / 3), abs=1e-6)

    def test_equal_confidence_permutation_invariant(self):
        t = box(0, 0, 10, 10)
        fp_box = box(200, 200, 10, 10)
        preds = [(0, pred(AnomalyClass.D40, fp_box, 0.5)),
                 (1, pred(AnomalyClass.D40, fp_box, 0.5))]
        truths = [(9, GroundTruth(AnomalyClass.D40, t))]
        for perm in itertools.permutations(preds):
            assert average_precision(list(perm), truths) == average_precision(preds, truths)

    @settings(deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_bounded(self, seed):
        rng = random.Random(seed)
        preds = [(rng.randrange(3),
                  pred(AnomalyClass.D40, box(rng.randrange(20), 0, 10, 10), rng.random()))
                 for _ in range(rng.randrange(6))]
        truths = [(rng.randrange(3), GroundTruth(AnomalyClass.D40, box(rng.randrange(20), 0, 10, 10)))
                  for _ in range(rng.randrange(6))]
        assert 0.0 <= average_precision(preds, truths) <= 1.0


class TestEvaluate:
    def test_report_fields(self):
        b = box(0, 0, 10, 10)
        report = evaluate({0: [pred(AnomalyClass.D40, b, 0.9)]},
                          {0: [GroundTruth(AnomalyClass.D40, b)]})
        cr = report.per_class[AnomalyClass.D40]
        assert cr.precision == cr.recall == cr.f1 == cr.ap50 == 1.0
        assert report.map50 == 1.0

    def test_map_ignores_truthless_classes(self):
        b = box(0, 0, 10, 10)
        report = evaluate(
            {0: [pred(AnomalyClass.D40, b, 0.9), pred(AnomalyClass.D00, b, 0.9)]},
            {0: [GroundTruth(AnomalyClass.D40, b)]})
        # D00 has no ground truth: shown per-class but excluded from the mean
        assert report.map50 == 1.0

    def test_text_and_json_rendering(self):
        b = box(0, 0, 10, 10)
        report = evaluate({0: [pred(AnomalyClass.D40, b, 0.9)]},
                          {0: [GroundTruth(AnomalyClass.D40, b)]})
        text = format_report(report)
        assert "D40" in text and "mAP50" in text
        data = report_to_dict(report)
        assert data["classes"]["D40"]["tp"] == 1
