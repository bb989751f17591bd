import math
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from autodiff.engine import no_grad
from core.exceptions import DataFormatError, EmptyReportError
from detector.transformer import ModelConfig, TemporalDetector
from diversity.metrics import composite_norm, diversity, rank1_residual
from diversity.reports import diversity_report, export_attention, load_attention_csv
from videos.samples import VideoSample


class CompositeNormTests(SimpleTestCase):
    def test_examples(self):
        self.assertEqual(composite_norm(np.zeros((3, 2))), 0.0)
        self.assertEqual(composite_norm(np.eye(2)), 1.0)
        self.assertAlmostEqual(composite_norm([[1.0, -1.0], [0.0, 0.0]]), math.sqrt(2), places=12)

    def test_empty(self):
        self.assertEqual(composite_norm(np.zeros((0, 3))), 0.0)


class DiversityMetricTests(SimpleTestCase):
    def test_rank_one_is_zero(self):
        a = np.array([0.1, 0.6, 0.3])
        _, d = rank1_residual(np.tile(a, (4, 1)))
        self.assertEqual(d, 0.0)

    def test_identity(self):
        a, d = rank1_residual(np.eye(2))
        assert_array_equal(a, [0.5, 0.5])
        self.assertEqual(d, 1.0)

    def test_even_count_median(self):
        a, _ = rank1_residual([[0.0], [1.0], [3.0], [10.0]])
        assert_array_equal(a, [2.0])

    def test_invariant_to_adding_a_constant_row(self):
        attn = np.random.default_rng(0).random((5, 4))
        c = np.random.default_rng(1).normal(size=4)
        self.assertAlmostEqual(diversity(attn + c[None, :]), diversity(attn), places=12)

    def test_uniform_attention_collapses(self):
        self.assertEqual(diversity(np.full((6, 6), 1 / 6)), 0.0)
        self.assertGreater(diversity(np.eye(6)), 0.0)


class DiversityReportTests(SimpleTestCase):
    def setUp(self):
        self.config = ModelConfig(num_encoder_layers=2, num_decoder_layers=3, num_queries=4, model_dim=8,
                                  num_heads=2, num_classes=2, feature_dim=3)
        self.model = TemporalDetector(self.config, seed=0)
        rng = np.random.default_rng(2)
        self.samples = [VideoSample(f"v{i}", rng.normal(size=(10, 3))) for i in range(5)]

    def test_layers_and_determinism(self):
        first = diversity_report(self.model, self.samples, 3, seed=4, config_hash="h")
        second = diversity_report(self.model, self.samples, 3, seed=4, config_hash="h", threads=2)
        self.assertEqual(len(first.enc_self), 2)
        self.assertEqual(len(first.dec_self), 3)
        self.assertEqual(first.to_dict(), second.to_dict())
        self.assertEqual(len(set(first.sample_ids)), 3)
        self.assertEqual(first.final_layer("dec_self"), first.dec_self[-1])
        self.assertEqual(len(first.to_frame()), 5)

    def test_matches_per_sample_mean(self):
        report = diversity_report(self.model, self.samples, 5, seed=0)
        values = []
        for sample in self.samples:
            with no_grad():
                _, bundle = self.model.forward(sample.features)
            values.append(diversity(bundle.enc_self[-1].values))
        self.assertAlmostEqual(report.enc_self[-1], float(np.mean(values)), places=12)

    def test_request_is_clamped(self):
        with self.assertLogs("diversity.reports", level="WARNING"):
            report = diversity_report(self.model, self.samples, 50)
        self.assertEqual(report.sample_count, 5)

    def test_removed_blocks_give_empty_lists(self):
        config = replace(self.config, use_encoder=False, decoder_self_attention=False)
        report = diversity_report(TemporalDetector(config), self.samples, 2)
        self.assertEqual((report.enc_self, report.dec_self), ([], []))
        self.assertIsNone(report.final_layer("enc_self"))

    def test_errors(self):
        with self.assertRaises(EmptyReportError):
            diversity_report(self.model, [], 4)
        with self.assertRaises(EmptyReportError):
            diversity_report(self.model, self.samples, 0)
        with self.assertRaises(DataFormatError):
            diversity_report(self.model, [VideoSample("x", np.zeros((10, 5)))], 1)

    def test_export_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            entries = export_attention(self.model, self.samples[0], Path(tmp))
            self.assertEqual(len(entries), 2 + 3 + 3)
            with no_grad():
                _, bundle = self.model.forward(self.samples[0].features)
            for entry in entries:
                expected = getattr(bundle, entry["kind"])[entry["layer"]].values
                assert_allclose(load_attention_csv(Path(tmp) / entry["file"]), expected, atol=1e-9)
