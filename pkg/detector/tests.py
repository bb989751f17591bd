import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from autodiff.engine import DiffArray, no_grad
from core.exceptions import ConfigError, DataFormatError, DimensionError
from detector.attention import init_attention, multi_head_attention
from detector.layers import dropout
from detector.positional import positional_encoding
from detector.transformer import ModelConfig, TemporalDetector, decoder_forward, encoder_forward, predict_heads


def small_config(**overrides):
    values = dict(num_encoder_layers=2, num_decoder_layers=3, num_queries=5, model_dim=8,
                  num_heads=2, num_classes=3, feature_dim=6)
    values.update(overrides)
    return ModelConfig(**values)


class PositionalEncodingTests(SimpleTestCase):
    def test_first_position_alternates(self):
        assert_array_equal(positional_encoding(3, 6)[0], [0, 1, 0, 1, 0, 1])

    def test_range(self):
        pe = positional_encoding(50, 16)
        self.assertTrue(np.all(np.abs(pe) <= 1.0))

    def test_matches_formula(self):
        pe = positional_encoding(4, 4)
        for t in range(4):
            for k in range(2):
                angle = t / 10000 ** (2 * k / 4)
                self.assertAlmostEqual(pe[t, 2 * k], np.sin(angle), places=12)
                self.assertAlmostEqual(pe[t, 2 * k + 1], np.cos(angle), places=12)

    def test_odd_dim(self):
        with self.assertRaises(ConfigError):
            positional_encoding(4, 5)


class AttentionTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.params = {}
        init_attention(self.params, self.rng, "attn", 4)

    def test_single_key(self):
        q = DiffArray(self.rng.normal(size=(3, 4)))
        kv = DiffArray(self.rng.normal(size=(1, 4)))
        out, attn = multi_head_attention(q, kv, kv, self.params, "attn", heads=2)
        assert_array_equal(attn.values, np.ones((3, 1)))
        p = self.params
        v_proj = kv.values @ p["attn.v.weight"].values + p["attn.v.bias"].values
        expected = v_proj @ p["attn.o.weight"].values + p["attn.o.bias"].values
        assert_allclose(out.values, np.repeat(expected, 3, axis=0), atol=1e-12)

    def test_identical_queries_give_identical_rows(self):
        row = self.rng.normal(size=(1, 4))
        q = DiffArray(np.repeat(row, 3, axis=0))
        k = DiffArray(self.rng.normal(size=(5, 4)))
        _, attn = multi_head_attention(q, k, k, self.params, "attn", heads=2)
        assert_allclose(attn.values[0], attn.values[2], atol=0)

    def test_single_head_matches_direct_formula(self):
        q, k, v = (self.rng.normal(size=s) for s in ((3, 4), (5, 4), (5, 4)))
        out, attn = multi_head_attention(DiffArray(q), DiffArray(k), DiffArray(v), self.params, "attn", heads=1)
        p = {name: t.values for name, t in self.params.items()}
        qq = q @ p["attn.q.weight"] + p["attn.q.bias"]
        kk = k @ p["attn.k.weight"] + p["attn.k.bias"]
        vv = v @ p["attn.v.weight"] + p["attn.v.bias"]
        logits = qq @ kk.T / np.sqrt(4)
        a = np.exp(logits - logits.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        assert_allclose(attn.values, a, atol=1e-12)
        assert_allclose(out.values, (a @ vv) @ p["attn.o.weight"] + p["attn.o.bias"], atol=1e-12)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionError):
            multi_head_attention(DiffArray(np.zeros((2, 4))), DiffArray(np.zeros((3, 4))),
                                 DiffArray(np.zeros((2, 4))), self.params, "attn", heads=2)


class ModelConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = ModelConfig()
        self.assertEqual((cfg.num_encoder_layers, cfg.num_decoder_layers, cfg.num_queries), (2, 4, 40))
        self.assertEqual(cfg.hidden_dim, 4 * cfg.model_dim)

    def test_heads_must_divide_width(self):
        with self.assertRaises(ConfigError):
            ModelConfig(model_dim=10, num_heads=4).validate()


class DetectorTests(SimpleTestCase):
    def setUp(self):
        self.config = small_config()
        self.model = TemporalDetector(self.config, seed=1)
        self.features = np.random.default_rng(2).normal(size=(7, 6))

    def test_bundle_shapes_and_rows(self):
        predictions, bundle = self.model.forward(self.features)
        self.assertEqual(len(predictions), 3)
        self.assertEqual(len(bundle.enc_self), 2)
        self.assertEqual(len(bundle.dec_self), 3)
        self.assertEqual(len(bundle.cross), 3)
        for attn in bundle.enc_self:
            self.assertEqual(attn.shape, (7, 7))
        for attn in bundle.dec_self:
            self.assertEqual(attn.shape, (5, 5))
        for attn in bundle.cross:
            self.assertEqual(attn.shape, (5, 7))
        for attn in bundle.enc_self + bundle.dec_self + bundle.cross:
            assert_allclose(attn.values.sum(axis=1), 1.0, atol=1e-9)
            self.assertTrue(attn.requires_grad)

    def test_prediction_shapes(self):
        predictions, _ = self.model.forward(self.features)
        for pred in predictions:
            self.assertEqual(pred.class_logits.shape, (5, 4))
            self.assertEqual(pred.segments.shape, (5, 2))
            self.assertTrue(np.all((pred.segments.values > 0) & (pred.segments.values < 1)))

    def test_forward_is_deterministic(self):
        first, _ = self.model.forward(self.features)
        again = TemporalDetector(self.config, seed=1)
        second, _ = again.forward(self.features)
        assert_array_equal(first[-1].class_logits.values, second[-1].class_logits.values)
        assert_array_equal(first[-1].segments.values, second[-1].segments.values)

    def test_wrong_feature_width(self):
        with self.assertRaises(DimensionError):
            self.model.forward(np.zeros((7, 5)))

    def test_zero_encoder_layers_is_identity(self):
        x = DiffArray(np.random.default_rng(3).normal(size=(4, 8)))
        out, maps = encoder_forward(x, {}, small_config(num_encoder_layers=0))
        self.assertIs(out, x)
        self.assertEqual(maps, [])

    def test_removed_blocks(self):
        model = TemporalDetector(small_config(use_encoder=False, decoder_self_attention=False))
        predictions, bundle = model.forward(self.features)
        self.assertEqual((len(bundle.enc_self), len(bundle.dec_self), len(bundle.cross)), (0, 0, 3))
        self.assertFalse(any(name.startswith("encoder.") for name in model.params))

    def test_single_decoder_layer(self):
        model = TemporalDetector(small_config(num_decoder_layers=1))
        predictions, bundle = model.forward(self.features)
        self.assertEqual((len(predictions), len(bundle.dec_self), len(bundle.cross)), (1, 1, 1))

    def test_encoder_output_changes_cross_maps_only(self):
        p = self.model.params
        query_before = p["query_embed"].values.copy()
        enc_a = DiffArray(np.random.default_rng(4).normal(size=(7, 8)))
        enc_b = DiffArray(np.random.default_rng(5).normal(size=(7, 8)))
        _, _, cross_a = decoder_forward(enc_a, p["query_embed"], p, self.config)
        _, _, cross_b = decoder_forward(enc_b, p["query_embed"], p, self.config)
        self.assertFalse(np.allclose(cross_a[0].values, cross_b[0].values))
        assert_array_equal(p["query_embed"].values, query_before)

    def test_zero_heads_predict_half(self):
        params = {name: DiffArray(np.zeros_like(t.values)) for name, t in self.model.params.items()}
        pred = predict_heads(DiffArray(np.random.default_rng(6).normal(size=(5, 8))), params)
        assert_array_equal(pred.class_logits.values, np.zeros((5, 4)))
        assert_array_equal(pred.segments.values, np.full((5, 2), 0.5))

    def test_state_dict_round_trip(self):
        other = TemporalDetector(self.config, seed=9)
        other.load_state_dict(self.model.state_dict())
        with no_grad():
            a, _ = self.model.forward(self.features)
            b, _ = other.forward(self.features)
        assert_array_equal(a[-1].segments.values, b[-1].segments.values)

    def test_state_dict_mismatch(self):
        other = TemporalDetector(small_config(num_decoder_layers=2))
        with self.assertRaises(DataFormatError):
            other.load_state_dict(self.model.state_dict())

    def test_dropout_only_with_rng(self):
        x = DiffArray(np.ones((4, 4)))
        self.assertIs(dropout(x, 0.5, None), x)
        dropped = dropout(x, 0.5, np.random.default_rng(0)).values
        self.assertTrue(set(np.unique(dropped)) <= {0.0, 2.0})
