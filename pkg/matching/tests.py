import itertools
import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from autodiff.engine import DiffArray
from core.exceptions import CapacityError, DomainError, TrainingDivergedError
from detector.transformer import Prediction
from matching.criterion import LossWeights, detr_loss, detr_loss_single, match_cost_matrix, total_loss
from matching.hungarian import assignment_cost, hungarian
from matching.segments import Segment, interval_iou, iou_matrix, segment_iou


def brute_force_min(cost):
    m, n = cost.shape
    perms = np.array(list(itertools.permutations(range(n), m)))
    totals = cost[np.arange(m), perms].sum(axis=1)
    return float(totals.min())


def logit(p):
    return math.log(p / (1.0 - p))


def prediction(logits, segments):
    return Prediction(
        class_logits=DiffArray(logits, requires_grad=True),
        segments=DiffArray(segments, requires_grad=True),
    )


class SegmentTests(SimpleTestCase):
    def test_identical(self):
        self.assertEqual(segment_iou(Segment(0.5, 0.2), Segment(0.5, 0.2)), 1.0)

    def test_disjoint(self):
        self.assertEqual(segment_iou(Segment.from_bounds(0.0, 0.2), Segment.from_bounds(0.5, 0.9)), 0.0)

    def test_overlap_third(self):
        self.assertAlmostEqual(interval_iou(0.0, 2 / 3, 1 / 3, 1.0), 1 / 3, places=12)

    def test_zero_length(self):
        self.assertEqual(interval_iou(0.3, 0.3, 0.3, 0.3), 1.0)
        self.assertEqual(interval_iou(0.3, 0.3, 0.4, 0.4), 0.0)

    def test_bounds_are_clamped(self):
        seg = Segment(0.05, 0.3)
        self.assertEqual(seg.start, 0.0)
        self.assertLessEqual(seg.start, seg.end)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        a = np.sort(rng.random((4, 2)), axis=1)
        b = np.sort(rng.random((3, 2)), axis=1)
        m = iou_matrix(a[:, 0], a[:, 1], b[:, 0], b[:, 1])
        for i in range(4):
            for j in range(3):
                self.assertAlmostEqual(m[i, j], interval_iou(a[i, 0], a[i, 1], b[j, 0], b[j, 1]), places=12)


class HungarianTests(SimpleTestCase):
    def test_one_by_one(self):
        self.assertEqual(hungarian([[3.0]]), [(0, 0)])

    def test_two_by_two(self):
        cost = np.array([[1.0, 2.0], [2.0, 1.0]])
        assignment = hungarian(cost)
        self.assertEqual(assignment, [(0, 0), (1, 1)])
        self.assertEqual(assignment_cost(cost, assignment), 2.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            m = int(rng.integers(1, 8))
            n = int(rng.integers(m, 10))
            cost = rng.normal(size=(m, n))
            assignment = hungarian(cost)
            self.assertEqual(sorted(r for r, _ in assignment), list(range(m)))
            self.assertEqual(len({c for _, c in assignment}), m)
            self.assertAlmostEqual(assignment_cost(cost, assignment), brute_force_min(cost), places=9)

    def test_integer_costs_are_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            cost = rng.integers(0, 5, size=(5, 7)).astype(float)
            self.assertEqual(assignment_cost(cost, hungarian(cost)), brute_force_min(cost))

    def test_ties_resolve_lexicographically(self):
        self.assertEqual(hungarian(np.zeros((2, 3))), [(0, 0), (1, 1)])
        self.assertEqual(hungarian(np.ones((3, 3))), [(0, 0), (1, 1), (2, 2)])

    def test_permutation_equivariance(self):
        cost = np.random.default_rng(3).normal(size=(4, 6))
        order = [2, 0, 3, 1]
        base = dict(hungarian(cost))
        permuted = dict(hungarian(cost[order]))
        for new_row, old_row in enumerate(order):
            self.assertEqual(permuted[new_row], base[old_row])

    def test_errors(self):
        with self.assertRaises(CapacityError):
            hungarian(np.zeros((3, 2)))
        with self.assertRaises(DomainError):
            hungarian([[np.inf, 1.0]])
        self.assertEqual(hungarian(np.zeros((0, 4))), [])


class CostMatrixTests(SimpleTestCase):
    def test_perfect_prediction(self):
        pred = prediction([[50.0, 0.0, 0.0]], [[0.4, 0.2]])
        cost = match_cost_matrix(pred, [Segment(0.4, 0.2, 0)], LossWeights())
        self.assertAlmostEqual(cost[0, 0], -2.0, places=9)

    def test_uniform_probabilities(self):
        pred = prediction(np.zeros((3, 4)), [[0.5, 0.3]] * 3)
        cost = match_cost_matrix(pred, [Segment(0.5, 0.3, 1), Segment(0.5, 0.3, 2)], LossWeights())
        self.assertEqual(cost.shape, (2, 3))
        assert_allclose(cost, np.full((2, 3), -2.0 / 4), atol=1e-12)

    def test_capacity(self):
        pred = prediction(np.zeros((1, 3)), [[0.5, 0.5]])
        with self.assertRaises(CapacityError):
            match_cost_matrix(pred, [Segment(0.2, 0.1), Segment(0.7, 0.1)], LossWeights())


class DetrLossTests(SimpleTestCase):
    def test_no_ground_truth_is_background_cross_entropy(self):
        pred = prediction(np.zeros((2, 3)), [[0.5, 0.5]] * 2)
        loss, parts, assignment = detr_loss_single(pred, [], LossWeights())
        self.assertEqual(assignment, [])
        self.assertAlmostEqual(parts["cls"], math.log(3), places=12)
        self.assertEqual((parts["l1"], parts["iou"]), (0.0, 0.0))
        self.assertAlmostEqual(loss.item(), 2 * math.log(3), places=12)

    def test_confident_correct_prediction(self):
        pred = prediction([[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]], [[0.3, 0.2], [0.7, 0.1]])
        loss, parts, assignment = detr_loss_single(pred, [Segment(0.3, 0.2, 0)], LossWeights())
        self.assertEqual(assignment, [(0, 0)])
        self.assertAlmostEqual(parts["l1"], 0.0, places=12)
        self.assertAlmostEqual(parts["iou"], 0.0, places=12)
        self.assertLess(loss.item(), 1e-20)

    def test_hand_computed_two_queries(self):
        logits = [[math.log(3.0), 0.0], [0.0, 0.0]]
        segments = [[0.5, 0.4], [0.2, 0.1]]
        gt = Segment(0.6, 0.4, 0)
        weights = LossWeights()
        loss, parts, assignment = detr_loss_single(prediction(logits, segments), [gt], weights)
        self.assertEqual(assignment, [(0, 0)])
        # query 0 matched to class 0 (p = 3/4), query 1 background (p = 1/2, weight 0.1)
        ce = (-math.log(0.75) - 0.1 * math.log(0.5)) / 1.1
        l1 = 0.1
        iou = 0.3 / 0.5
        self.assertAlmostEqual(parts["cls"], ce, places=12)
        self.assertAlmostEqual(parts["l1"], l1, places=12)
        self.assertAlmostEqual(parts["iou"], 1 - iou, places=12)
        self.assertAlmostEqual(loss.item(), 2 * ce + 2 * l1 + 5 * (1 - iou), places=12)

    def test_deep_supervision_averages_layers(self):
        gts = [Segment(0.5, 0.2, 1)]
        layers = [
            prediction(np.random.default_rng(i).normal(size=(3, 3)), [[0.4, 0.3], [0.6, 0.2], [0.2, 0.1]])
            for i in range(3)
        ]
        single = [detr_loss_single(p, gts, LossWeights())[0].item() for p in layers]
        averaged, _ = detr_loss(layers, gts, LossWeights())
        self.assertAlmostEqual(averaged.item(), float(np.mean(single)), places=12)
        last_only, _ = detr_loss(layers, gts, LossWeights(aux_loss=False))
        self.assertEqual(last_only.item(), single[-1])

    def test_loss_is_non_negative_and_differentiable(self):
        pred = prediction(np.random.default_rng(4).normal(size=(4, 3)), [[0.4, 0.3], [0.6, 0.2], [0.2, 0.1], [0.8, 0.1]])
        loss, _, _ = detr_loss_single(pred, [Segment(0.5, 0.2, 1), Segment(0.15, 0.1, 0)], LossWeights())
        self.assertGreaterEqual(loss.item(), 0.0)
        loss.backward()
        self.assertTrue(np.all(np.isfinite(pred.class_logits.grad)))
        self.assertTrue(np.all(np.isfinite(pred.segments.grad)))


class TotalLossTests(SimpleTestCase):
    def test_weighted_sum(self):
        self.assertAlmostEqual(total_loss(1.0, 0.2, 0.3, LossWeights()).item(), 3.5, places=12)

    def test_zero_lambdas(self):
        weights = LossWeights(lambda_e=0.0, lambda_d=0.0)
        self.assertEqual(total_loss(1.25, 0.7, 0.9, weights).item(), 1.25)
        self.assertEqual(total_loss(1.25, 0.0, 0.0, LossWeights()).item(), 1.25)

    def test_zero_lambdas_do_not_reach_feedback_gradients(self):
        fb = DiffArray(0.4, requires_grad=True)
        total_loss(DiffArray(1.0), fb, DiffArray(0.0), LossWeights(lambda_e=0.0, lambda_d=0.0)).backward()
        self.assertEqual(float(fb.grad), 0.0)

    def test_non_finite_component(self):
        with self.assertRaises(TrainingDivergedError) as ctx:
            total_loss(float("nan"), 0.0, 0.0, LossWeights())
        self.assertIn("detr", ctx.exception.components)
