import math
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from autodiff.engine import DiffArray
from core.exceptions import ConfigError
from detector.transformer import ModelConfig, Prediction, TemporalDetector
from evaluation.inference import (
    EvalConfig, detections_from_prediction, ground_truth, postprocess, read_results,
    run_inference, write_results,
)
from evaluation.metrics import average_precision, interpolated_ap, mean_ap
from evaluation.nms import Decay, soft_nms
from matching.segments import Segment, segment_iou
from videos.synthetic import SynthConfig, generate_synthetic
from videos.windows import WindowConfig


def seg(start, end, cls=0, score=1.0):
    return Segment.from_bounds(start, end, cls, score)


def oracle_results(samples):
    return {s.id: [seg(g.start, g.end, g.class_id) for g in s.segments] for s in samples}


class SoftNmsTests(SimpleTestCase):
    def test_identical_segment_decays_to_zero(self):
        kept = soft_nms([seg(0.2, 0.4, score=0.8), seg(0.2, 0.4, score=0.9)])
        self.assertEqual([s.score for s in kept], [0.9, 0.0])

    def test_linear_decay_above_threshold(self):
        kept = soft_nms([seg(0.0, 0.4, score=0.9), seg(0.1, 0.4, score=0.6)], iou_thresh=0.4)
        self.assertAlmostEqual(kept[1].score, 0.6 * (1 - 0.75), places=12)

    def test_below_threshold_untouched(self):
        kept = soft_nms([seg(0.0, 0.4, score=0.9), seg(0.3, 0.7, score=0.6)], iou_thresh=0.4)
        self.assertEqual(kept[1].score, 0.6)

    def test_gaussian_decay(self):
        kept = soft_nms([seg(0.0, 0.4, score=0.9), seg(0.1, 0.4, score=0.6)], decay=Decay.GAUSSIAN, sigma=0.5)
        self.assertAlmostEqual(kept[1].score, 0.6 * math.exp(-0.75 ** 2 / 0.5), places=12)

    def test_scores_never_increase_and_ties_are_stable(self):
        rng = np.random.default_rng(0)
        preds = []
        for _ in range(30):
            a, b = sorted(rng.random(2))
            preds.append(seg(a, b, score=float(rng.choice([0.3, 0.5, 0.7]))))
        kept = soft_nms(preds)
        self.assertEqual(len(kept), len(preds))
        self.assertLessEqual(sum(s.score for s in kept), sum(p.score for p in preds) + 1e-12)
        self.assertEqual(kept, soft_nms(list(reversed(preds))))
        self.assertEqual(kept, sorted(kept, key=lambda s: (-s.score, s.start, s.end)))

    def test_top_k_and_unknown_decay(self):
        self.assertEqual(len(soft_nms([seg(0.0, 0.1), seg(0.5, 0.6), seg(0.8, 0.9)], top_k=2)), 2)
        with self.assertRaises(ConfigError):
            soft_nms([seg(0.0, 0.1)], decay="cubic")


class AveragePrecisionTests(SimpleTestCase):
    def test_duplicate_after_hit(self):
        gts = [seg(0.2, 0.5)]
        preds = [seg(0.2, 0.5, score=0.9), seg(0.2, 0.5, score=0.8)]
        self.assertEqual(average_precision(preds, gts, 0.5), 1.0)

    def test_interpolation(self):
        self.assertAlmostEqual(interpolated_ap(np.array([1.0, 0.5, 2 / 3]), np.array([0.5, 0.5, 1.0])), 5 / 6)

    def test_no_ground_truth_or_predictions(self):
        self.assertIsNone(average_precision([seg(0.1, 0.2)], [], 0.5))
        self.assertEqual(average_precision([], [seg(0.1, 0.2)], 0.5), 0.0)

    def test_prediction_only_matches_its_video(self):
        gts = [("a", seg(0.1, 0.3))]
        self.assertEqual(average_precision([("b", seg(0.1, 0.3))], gts, 0.5), 0.0)

    def test_monotone_under_added_hit(self):
        rng = np.random.default_rng(3)
        checked = 0
        for trial in range(40):
            gts = [(f"v{rng.integers(3)}", seg(*sorted(rng.random(2)))) for _ in range(5)]
            preds = [(f"v{rng.integers(3)}", seg(*sorted(rng.random(2)), score=float(rng.random())))
                     for _ in range(8)]
            unmatched = [
                (video, gt) for video, gt in gts
                if all(segment_iou(p, gt) < 0.5 for v, p in preds if v == video)
            ]
            if not unmatched:
                continue
            video, gt = unmatched[0]
            hit = (video, seg(gt.start, gt.end, score=2.0))
            with self.subTest(trial=trial):
                before = average_precision(preds, gts, 0.5)
                self.assertGreaterEqual(average_precision(preds + [hit], gts, 0.5), before - 1e-12)
            checked += 1
        self.assertGreater(checked, 10)


class MeanApTests(SimpleTestCase):
    """Two classes over three videos, scored by hand."""

    def setUp(self):
        self.gts = {
            "v1": [seg(0.1, 0.3, 0), seg(0.5, 0.8, 1)],
            "v2": [seg(0.2, 0.4, 0)],
            "v3": [seg(0.0, 0.5, 1)],
        }
        # class 0: hit, miss, hit -> P = (1, 1/2, 2/3), R = (1/2, 1/2, 1) -> AP 5/6
        # class 1: IoU 0.8 hit, then IoU 2/3 hit below tIoU 0.7 only -> AP 1, or 1/2 at 0.7
        self.results = {
            "v1": [seg(0.1, 0.3, 0, 0.9), seg(0.5, 0.7, 1, 0.6)],
            "v2": [seg(0.6, 0.8, 0, 0.8), seg(0.2, 0.4, 0, 0.7)],
            "v3": [seg(0.0, 0.4, 1, 0.95)],
        }

    def test_hand_computed_table(self):
        result = mean_ap(self.results, self.gts)
        for t in (0.3, 0.4, 0.5, 0.6):
            self.assertAlmostEqual(result.per_threshold[t], 11 / 12, places=12)
        self.assertAlmostEqual(result.per_threshold[0.7], 2 / 3, places=12)
        self.assertAlmostEqual(result.average, 13 / 15, places=12)
        self.assertAlmostEqual(result.per_class[0][0], 5 / 6, places=12)
        self.assertAlmostEqual(result.per_class[1][-1], 0.5, places=12)

    def test_frame_and_dict(self):
        result = mean_ap(self.results, self.gts)
        frame = result.to_frame()
        self.assertEqual(list(frame.columns), ["mAP@0.30", "mAP@0.40", "mAP@0.50", "mAP@0.60", "mAP@0.70", "Avg."])
        self.assertEqual(set(result.to_dict()["per_class"]), {"0", "1"})

    def test_oracle_and_empty(self):
        self.assertEqual(mean_ap(self.gts, self.gts).average, 1.0)
        empty = mean_ap({vid: [] for vid in self.gts}, self.gts)
        self.assertEqual(empty.average, 0.0)
        self.assertEqual(set(empty.per_threshold.values()), {0.0})

    def test_invariant_to_video_order_and_relabel(self):
        rename = {"v1": "z", "v2": "a", "v3": "m"}

        def relabel(table):
            return {
                rename[vid]: [replace(s, class_id=1 - s.class_id) for s in table[vid]]
                for vid in reversed(list(table))
            }

        base = mean_ap(self.results, self.gts)
        moved = mean_ap(relabel(self.results), relabel(self.gts))
        for t in base.thresholds:
            self.assertAlmostEqual(moved.per_threshold[t], base.per_threshold[t], places=12)
        self.assertAlmostEqual(moved.average, base.average, places=12)
        self.assertEqual(moved.per_class[0], base.per_class[1])
        self.assertEqual(moved.per_class[1], base.per_class[0])


class InferenceTests(SimpleTestCase):
    def setUp(self):
        synth = SynthConfig(T=32, feature_dim=4, num_classes=2, max_instances=3, min_width=0.1,
                            train_size=0, test_size=3, seed=1)
        self.samples = generate_synthetic(synth).splits["test"]
        config = ModelConfig(num_encoder_layers=1, num_decoder_layers=2, num_queries=4, model_dim=8,
                             num_heads=2, num_classes=2, feature_dim=4)
        self.model = TemporalDetector(config, seed=0)

    def test_detections_cover_every_query_and_class(self):
        pred = Prediction(DiffArray(np.zeros((2, 3))), DiffArray([[0.5, 0.2], [0.95, 0.3]]))
        detections = detections_from_prediction(pred)
        self.assertEqual(len(detections), 4)
        self.assertTrue(all(d.score == 1 / 3 for d in detections))
        self.assertAlmostEqual(detections[-1].end, 1.0)

    def test_postprocess_keeps_top_k(self):
        detections = [seg(0.1 * k, 0.1 * k + 0.05, k % 2, 0.1 * k) for k in range(8)]
        out = postprocess(detections, EvalConfig(top_k=3))
        self.assertEqual([round(d.score, 9) for d in out], [0.7, 0.6, 0.5])

    def test_threads_do_not_change_results(self):
        config = EvalConfig()
        serial = run_inference(self.model, self.samples, config, threads=1)
        parallel = run_inference(self.model, self.samples, config, threads=3)
        self.assertEqual(list(serial), [s.id for s in self.samples])
        self.assertEqual(serial, parallel)
        for detections in serial.values():
            self.assertLessEqual(len(detections), config.top_k)
            self.assertTrue(all(0.0 <= d.start <= d.end <= 1.0 for d in detections))

    def test_windowed_inference(self):
        window = WindowConfig(enabled=True, size=16, overlap=4)
        results = run_inference(self.model, self.samples, EvalConfig(top_k=10), window=window)
        self.assertTrue(all(len(d) == 10 for d in results.values()))

    def test_results_file_rescoring(self):
        results = run_inference(self.model, self.samples, EvalConfig())
        gts = ground_truth(self.samples)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_results(Path(tmp) / "results.json", results, "abc", 3)
            reread, payload = read_results(path)
        self.assertEqual((payload["config_hash"], payload["seed"]), ("abc", 3))
        first, second = mean_ap(results, gts), mean_ap(reread, gts)
        for t in first.thresholds:
            self.assertAlmostEqual(first.per_threshold[t], second.per_threshold[t], places=12)

    def test_oracle_scores_one(self):
        result = mean_ap(oracle_results(self.samples), ground_truth(self.samples))
        self.assertEqual(set(result.per_threshold.values()), {1.0})

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            EvalConfig(thresholds=[0.0]).validate()
        with self.assertRaises(ConfigError):
            EvalConfig(decay="step").validate()
