import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from autodiff import ops
from autodiff.engine import DiffArray
from autodiff.gradcheck import grad_check
from core.exceptions import ConfigError, DimensionError
from detector.transformer import AttentionBundle
from feedback.guidance import aggregate_encoder_attention, guidance_decoder, guidance_encoder
from feedback.losses import (
    FeedbackConfig,
    Guidance,
    alternative_guidance,
    compute_feedback,
    diversity_surrogate,
    feedback_loss_decoder,
    feedback_loss_encoder,
    row_renormalize,
)


def stochastic(rng, rows, cols):
    m = rng.random((rows, cols)) + 0.05
    return m / m.sum(axis=1, keepdims=True)


def numerical_rank(m, tol=1e-8):
    return int(np.sum(np.linalg.svd(m, compute_uv=False) > tol))


class GuidanceDecoderTests(SimpleTestCase):
    def test_identity(self):
        assert_array_equal(guidance_decoder(DiffArray(np.eye(2))).values, np.eye(2))

    def test_duplicate_queries(self):
        assert_array_equal(guidance_decoder(DiffArray([[1.0, 0.0], [1.0, 0.0]])).values, np.ones((2, 2)))

    def test_matches_dense_oracle_and_is_symmetric(self):
        a = stochastic(np.random.default_rng(0), 4, 6)
        g = guidance_decoder(DiffArray(a)).values
        assert_allclose(g, np.sqrt(a @ a.T), atol=1e-12)
        self.assertLess(np.max(np.abs(g - g.T)), 1e-9)

    def test_symmetry_and_rank_on_random_maps(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            rows = int(rng.integers(2, 6))
            a = stochastic(rng, rows, int(rng.integers(rows, 9)))
            g = guidance_decoder(DiffArray(a)).values
            self.assertLess(np.max(np.abs(g - g.T)), 1e-9)
            self.assertEqual(numerical_rank(a @ a.T), numerical_rank(a))


class GuidanceEncoderTests(SimpleTestCase):
    def test_identity(self):
        assert_array_equal(guidance_encoder([DiffArray(np.eye(3))]).values, np.eye(3))

    def test_identical_maps_match_single_map(self):
        a = DiffArray(stochastic(np.random.default_rng(2), 3, 5))
        assert_allclose(guidance_encoder([a, a]).values, guidance_encoder([a]).values, atol=1e-15)

    def test_oracle(self):
        rng = np.random.default_rng(3)
        a1, a2 = stochastic(rng, 4, 5), stochastic(rng, 4, 5)
        mean = (a1 + a2) / 2
        g = guidance_encoder([DiffArray(a1), DiffArray(a2)]).values
        assert_allclose(g, np.sqrt(mean.T @ mean), atol=1e-12)
        self.assertLess(np.max(np.abs(g - g.T)), 1e-9)

    def test_empty(self):
        with self.assertRaises(ConfigError):
            guidance_encoder([])


class AggregationTests(SimpleTestCase):
    def test_single_layer(self):
        a = DiffArray(stochastic(np.random.default_rng(4), 4, 4))
        self.assertIs(aggregate_encoder_attention([a]), a)

    def test_identity_layers(self):
        eye = DiffArray(np.eye(3))
        assert_array_equal(aggregate_encoder_attention([eye, eye, eye]).values, np.eye(3))

    def test_two_layer_oracle_and_order(self):
        rng = np.random.default_rng(5)
        a1, a2 = stochastic(rng, 4, 4), stochastic(rng, 4, 4)
        h = aggregate_encoder_attention([DiffArray(a1), DiffArray(a2)]).values
        assert_allclose(h, np.sqrt(a1 @ a2.T), atol=1e-12)
        swapped = aggregate_encoder_attention([DiffArray(a2), DiffArray(a1)]).values
        self.assertFalse(np.allclose(h, swapped))

    def test_average_and_last(self):
        rng = np.random.default_rng(6)
        maps = [DiffArray(stochastic(rng, 3, 3)) for _ in range(2)]
        assert_allclose(aggregate_encoder_attention(maps, "average").values, (maps[0].values + maps[1].values) / 2)
        self.assertIs(aggregate_encoder_attention(maps, "last"), maps[1])
        with self.assertRaises(ConfigError):
            aggregate_encoder_attention(maps, "sum")


class RenormTests(SimpleTestCase):
    def test_even_row(self):
        assert_allclose(row_renormalize(DiffArray([[2.0, 2.0]])).values, [[0.5, 0.5]], atol=1e-8)

    def test_zero_row(self):
        out = row_renormalize(DiffArray([[0.0, 0.0]])).values
        self.assertTrue(np.all(np.isfinite(out)))
        assert_array_equal(out, [[0.0, 0.0]])

    def test_stochastic_input_unchanged(self):
        a = stochastic(np.random.default_rng(7), 3, 4)
        assert_allclose(row_renormalize(DiffArray(a)).values, a, atol=1e-8)


class FeedbackLossTests(SimpleTestCase):
    def test_equal_maps_give_zero(self):
        a = DiffArray(stochastic(np.random.default_rng(8), 4, 4))
        self.assertAlmostEqual(feedback_loss_encoder(a, a).item(), 0.0, delta=1e-10)
        self.assertAlmostEqual(feedback_loss_decoder([a, a], [a, a]).item(), 0.0, delta=1e-10)

    def test_uniform_against_identity_is_positive(self):
        value = feedback_loss_encoder(DiffArray(np.full((3, 3), 1 / 3)), DiffArray(np.eye(3))).item()
        self.assertTrue(np.isfinite(value))
        self.assertGreater(value, 0.0)

    def test_closed_form(self):
        h = DiffArray([[0.5, 0.5], [0.5, 0.5]])
        g = DiffArray([[0.75, 0.25], [0.75, 0.25]])
        self.assertAlmostEqual(feedback_loss_encoder(h, g).item(), 0.5 * math.log(2 / 3) + 0.5 * math.log(2), places=6)

    def test_decoder_single_layer_matches_encoder_formula(self):
        rng = np.random.default_rng(9)
        a, g = DiffArray(stochastic(rng, 3, 3)), DiffArray(stochastic(rng, 3, 3))
        self.assertEqual(feedback_loss_decoder([a], [g]).item(), feedback_loss_encoder(a, g).item())

    def test_decoder_sums_layers(self):
        rng = np.random.default_rng(10)
        maps = [DiffArray(stochastic(rng, 3, 3)) for _ in range(4)]
        expected = feedback_loss_encoder(maps[0], maps[1]).item() + feedback_loss_encoder(maps[2], maps[3]).item()
        self.assertAlmostEqual(feedback_loss_decoder([maps[0], maps[2]], [maps[1], maps[3]]).item(), expected, places=12)

    def test_positive_on_unequal_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a, g = DiffArray(stochastic(rng, 4, 4)), DiffArray(stochastic(rng, 4, 4))
            self.assertGreater(feedback_loss_encoder(a, g).item(), 0.0)

    def test_errors(self):
        with self.assertRaises(ConfigError):
            feedback_loss_decoder([DiffArray(np.eye(2))], [])
        with self.assertRaises(DimensionError):
            feedback_loss_encoder(DiffArray(np.eye(2)), DiffArray(np.eye(3)))

    def test_gradients_reach_both_arguments(self):
        rng = np.random.default_rng(12)
        h, g = stochastic(rng, 4, 4), stochastic(rng, 4, 4)
        self.assertLess(grad_check(lambda x: feedback_loss_encoder(x, DiffArray(g)), h), 1e-4)
        self.assertLess(grad_check(lambda y: feedback_loss_encoder(DiffArray(h), y), g), 1e-4)
        cross = stochastic(rng, 4, 6)
        self.assertLess(
            grad_check(lambda c: feedback_loss_decoder([DiffArray(h)], [guidance_decoder(c)]), cross), 1e-4
        )


class AlternativeGuidanceTests(SimpleTestCase):
    def test_identity_mode_on_identity(self):
        self.assertAlmostEqual(alternative_guidance(Guidance.IDENTITY, [DiffArray(np.eye(3))]).item(), 0.0, delta=1e-10)

    def test_identity_mode_closed_form(self):
        eps = 1e-8
        value = alternative_guidance(Guidance.IDENTITY, [DiffArray(np.full((2, 2), 0.5))]).item()
        q_hit = 1.0 / (1.0 + eps)
        expected = 0.5 * math.log((0.5 + eps) / (q_hit + eps)) + 0.5 * math.log((0.5 + eps) / eps)
        self.assertAlmostEqual(value, expected, places=6)

    def test_diversity_max_on_rank_one(self):
        rank_one = DiffArray(np.tile([0.2, 0.3, 0.5], (3, 1)))
        self.assertAlmostEqual(diversity_surrogate(rank_one).item(), 0.0, delta=1e-12)
        self.assertAlmostEqual(alternative_guidance(Guidance.DIVERSITY_MAX, [rank_one]).item(), 0.0, delta=1e-12)

    def test_unknown_mode(self):
        with self.assertRaises(ConfigError):
            alternative_guidance("relative", [DiffArray(np.eye(2))])


def make_bundle(rng, enc=2, dec=3, length=5, queries=4):
    return AttentionBundle(
        enc_self=[DiffArray(stochastic(rng, length, length), requires_grad=True) for _ in range(enc)],
        dec_self=[DiffArray(stochastic(rng, queries, queries), requires_grad=True) for _ in range(dec)],
        cross=[DiffArray(stochastic(rng, queries, length), requires_grad=True) for _ in range(dec)],
    )


class ComputeFeedbackTests(SimpleTestCase):
    def setUp(self):
        self.bundle = make_bundle(np.random.default_rng(13))

    def test_off_is_zero(self):
        fb_enc, fb_dec = compute_feedback(self.bundle, FeedbackConfig(guidance=Guidance.OFF))
        self.assertEqual((fb_enc.item(), fb_dec.item()), (0.0, 0.0))

    def test_default_matches_direct_formulas(self):
        b = self.bundle
        fb_enc, fb_dec = compute_feedback(b, FeedbackConfig())
        h = aggregate_encoder_attention(b.enc_self)
        expected_enc = feedback_loss_encoder(h, guidance_encoder(b.cross)).item()
        expected_dec = feedback_loss_decoder(b.dec_self, [guidance_decoder(c) for c in b.cross]).item()
        self.assertEqual(fb_enc.item(), expected_enc)
        self.assertEqual(fb_dec.item(), expected_dec)

    def test_missing_maps_contribute_zero(self):
        bundle = make_bundle(np.random.default_rng(14), enc=0, dec=0)
        bundle.cross = [DiffArray(stochastic(np.random.default_rng(15), 4, 5))]
        fb_enc, fb_dec = compute_feedback(bundle, FeedbackConfig())
        self.assertEqual((fb_enc.item(), fb_dec.item()), (0.0, 0.0))

    def test_decoder_modes(self):
        b = self.bundle
        last = compute_feedback(b, FeedbackConfig(decoder_mode="last"))[1].item()
        self.assertEqual(last, feedback_loss_encoder(b.dec_self[-1], guidance_decoder(b.cross[-1])).item())
        average = compute_feedback(b, FeedbackConfig(decoder_mode="average"))[1].item()
        mean_self, mean_cross = ops.mean_of(b.dec_self), ops.mean_of(b.cross)
        self.assertEqual(average, feedback_loss_encoder(mean_self, guidance_decoder(mean_cross)).item())

    def test_detached_guidance_blocks_cross_gradient(self):
        fb_enc, fb_dec = compute_feedback(self.bundle, FeedbackConfig(detach_guidance=True))
        ops.add(fb_enc, fb_dec).backward()
        self.assertTrue(all(c.grad is None for c in self.bundle.cross))
        self.assertIsNotNone(self.bundle.dec_self[0].grad)

    def test_guidance_gradient_flows_by_default(self):
        fb_enc, fb_dec = compute_feedback(self.bundle, FeedbackConfig())
        ops.add(fb_enc, fb_dec).backward()
        self.assertTrue(all(c.grad is not None for c in self.bundle.cross))

    def test_single_side_switches(self):
        enc_only = compute_feedback(self.bundle, FeedbackConfig(use_decoder_feedback=False))
        self.assertGreater(enc_only[0].item(), 0.0)
        self.assertEqual(enc_only[1].item(), 0.0)
        dec_only = compute_feedback(self.bundle, FeedbackConfig(use_encoder_feedback=False))
        self.assertEqual(dec_only[0].item(), 0.0)
        self.assertGreater(dec_only[1].item(), 0.0)

    def test_diversity_max_is_negative(self):
        fb_enc, fb_dec = compute_feedback(self.bundle, FeedbackConfig(guidance=Guidance.DIVERSITY_MAX))
        self.assertLess(fb_enc.item(), 0.0)
        self.assertLess(fb_dec.item(), 0.0)

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            FeedbackConfig(decoder_mode="mean").validate()
