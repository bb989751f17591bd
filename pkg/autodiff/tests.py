import math
import tempfile
import threading
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from autodiff import ops
from autodiff.checkpoint import load_checkpoint, save_checkpoint
from autodiff.engine import DiffArray, Tape, is_grad_enabled, no_grad
from autodiff.gradcheck import grad_check, grad_check_params
from autodiff.optim import Adam, adam_step, clip_grad_norm
from core.exceptions import DataFormatError, DimensionError, DomainError, TrainingDivergedError


def param(values):
    return DiffArray(values, requires_grad=True)


class DiffArrayTests(SimpleTestCase):
    def test_rejects_more_than_three_axes(self):
        with self.assertRaises(DimensionError):
            DiffArray(np.zeros((1, 1, 1, 1)))

    def test_constants_are_not_tracked(self):
        out = ops.add(DiffArray([1.0]), DiffArray([2.0]))
        self.assertFalse(out.requires_grad)
        self.assertEqual(len(Tape.from_root(out)), 0)

    def test_non_scalar_backward_needs_seed(self):
        x = param([1.0, 2.0])
        with self.assertRaises(DimensionError):
            ops.scale(x, 2.0).backward()
        ops.scale(x, 2.0).backward(seed=np.array([1.0, 0.5]))
        assert_allclose(x.grad, [2.0, 1.0])

    def test_two_paths_accumulate(self):
        x = param(3.0)
        y = ops.add(ops.mul(x, x), ops.scale(x, 2.0))
        y.backward()
        self.assertEqual(float(x.grad), 2 * 3.0 + 2.0)

    def test_intermediate_node_receives_gradient(self):
        x = param([1.0, 2.0])
        h = ops.scale(x, 3.0)
        ops.sum_all(ops.mul(h, h)).backward()
        assert_allclose(h.grad, 2 * h.values)
        assert_allclose(x.grad, 3 * 2 * h.values)

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["worker"] = is_grad_enabled()

        with no_grad():
            self.assertFalse(is_grad_enabled())
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        self.assertTrue(seen["worker"])
        self.assertTrue(is_grad_enabled())

    def test_backward_is_bitwise_deterministic(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        grads = []
        for _ in range(2):
            x, y = param(a), param(b)
            ops.sum_all(ops.softmax_rows(ops.matmul(x, y))).backward()
            grads.append((x.grad.copy(), y.grad.copy()))
        assert_array_equal(grads[0][0], grads[1][0])
        assert_array_equal(grads[0][1], grads[1][1])


class MatmulTests(SimpleTestCase):
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert_array_equal(ops.matmul(DiffArray(np.eye(2)), DiffArray(x)).values, x)

    def test_hand_product(self):
        out = ops.matmul(DiffArray([[1.0, 2.0], [3.0, 4.0]]), DiffArray([[0.0], [1.0]]))
        assert_array_equal(out.values, [[2.0], [4.0]])

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            ops.matmul(DiffArray(np.zeros((2, 3))), DiffArray(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        b = DiffArray(rng.normal(size=(4, 2)))
        self.assertLess(grad_check(lambda a: ops.sum_all(ops.matmul(a, b)), rng.normal(size=(3, 4))), 1e-6)


class SoftmaxTests(SimpleTestCase):
    def test_uniform_row(self):
        assert_allclose(ops.softmax_rows(DiffArray([[0.0, 0.0]])).values, [[0.5, 0.5]])

    def test_closed_form(self):
        assert_allclose(ops.softmax_rows(DiffArray([[math.log(2.0), 0.0]])).values, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_rows_sum_to_one_for_large_inputs(self):
        x = np.random.default_rng(1).normal(scale=300.0, size=(6, 9))
        s = ops.softmax_rows(DiffArray(x)).values
        assert_allclose(s.sum(axis=1), np.ones(6), atol=1e-12)
        self.assertTrue(np.all(s >= 0))


class LayerNormTests(SimpleTestCase):
    def test_constant_row_maps_to_zero(self):
        out = ops.layer_norm(DiffArray([[2.0, 2.0, 2.0]]), DiffArray(np.ones(3)), DiffArray(np.zeros(3)))
        assert_array_equal(out.values, np.zeros((1, 3)))

    def test_unit_variance_row(self):
        out = ops.layer_norm(DiffArray([[1.0, -1.0]]), DiffArray(np.ones(2)), DiffArray(np.zeros(2)))
        assert_allclose(out.values, [[1.0, -1.0]], atol=1e-5)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        gain, bias = DiffArray(rng.normal(size=4)), DiffArray(rng.normal(size=4))
        w = DiffArray(rng.normal(size=(3, 4)))
        err = grad_check(lambda x: ops.sum_all(ops.mul(ops.layer_norm(x, gain, bias), w)), rng.normal(size=(3, 4)))
        self.assertLess(err, 1e-4)


class SqrtTests(SimpleTestCase):
    def test_perfect_squares(self):
        assert_array_equal(ops.elementwise_sqrt(DiffArray([[1.0, 4.0], [9.0, 0.0]])).values, [[1.0, 2.0], [3.0, 0.0]])

    def test_identity(self):
        assert_array_equal(ops.elementwise_sqrt(DiffArray(np.eye(3))).values, np.eye(3))

    def test_gradient_at_quarter(self):
        x = param(0.25)
        ops.elementwise_sqrt(x).backward()
        self.assertAlmostEqual(float(x.grad), 1.0, places=9)
        self.assertLess(grad_check(ops.elementwise_sqrt, np.array(0.25)), 1e-7)

    def test_negative_entry(self):
        with self.assertRaises(DomainError):
            ops.elementwise_sqrt(DiffArray([1.0, -1e-3]))


class KlTests(SimpleTestCase):
    def test_equal_rows(self):
        p = DiffArray([[0.2, 0.8], [0.5, 0.5]])
        self.assertAlmostEqual(ops.kl_rows(p, p).item(), 0.0, delta=1e-10)

    def test_closed_form(self):
        value = ops.kl_rows(DiffArray([[0.5, 0.5]]), DiffArray([[0.75, 0.25]])).item()
        self.assertAlmostEqual(value, 0.5 * math.log(2 / 3) + 0.5 * math.log(2), places=7)
        self.assertAlmostEqual(value, 0.14384, places=5)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p, q = rng.random((3, 5)), rng.random((3, 5))
            p /= p.sum(axis=1, keepdims=True)
            q /= q.sum(axis=1, keepdims=True)
            self.assertGreaterEqual(ops.kl_rows(DiffArray(p), DiffArray(q)).item(), 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            ops.kl_rows(DiffArray(np.ones((2, 2))), DiffArray(np.ones((2, 3))))


class GradCheckTests(SimpleTestCase):
    def test_square_sum(self):
        x = param([1.0, 2.0])
        ops.sum_all(ops.mul(x, x)).backward()
        assert_allclose(x.grad, [2.0, 4.0])
        self.assertLess(grad_check(lambda a: ops.sum_all(ops.mul(a, a)), [1.0, 2.0]), 1e-7)

    def test_constant_function(self):
        self.assertEqual(grad_check(lambda a: DiffArray(3.0), [1.0, 2.0]), 0.0)

    def test_params_dict(self):
        rng = np.random.default_rng(5)
        params = {"w": param(rng.normal(size=(3, 2))), "b": param(rng.normal(size=2))}
        x = DiffArray(rng.normal(size=(4, 3)))

        def loss():
            return ops.sum_all(ops.sigmoid(ops.add(ops.matmul(x, params["w"]), params["b"])))

        errors = grad_check_params(loss, params)
        self.assertEqual(set(errors), {"w", "b"})
        self.assertLess(max(errors.values()), 1e-6)


class AdamTests(SimpleTestCase):
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, {}, lr=1e-3)
        assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        p = {"w": np.array([0.5])}
        adam_step(p, {"w": np.array([1.0])}, {}, lr=1e-3)
        self.assertAlmostEqual(float(p["w"][0]), 0.5 - 1e-3, places=8)

    def test_two_runs_are_bitwise_equal(self):
        results = []
        for _ in range(2):
            p, state = {"w": np.array([0.3, 0.1])}, {}
            for g in ([0.2, -0.1], [0.05, 0.4]):
                adam_step(p, {"w": np.array(g)}, state, lr=1e-2)
            results.append(p["w"].copy())
        assert_array_equal(results[0], results[1])

    def test_non_finite_gradient(self):
        with self.assertRaises(TrainingDivergedError):
            adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, {}, lr=1e-3)

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        self.assertEqual(clip_grad_norm(grads, 1.0), 5.0)
        self.assertAlmostEqual(float(np.hypot(grads["a"][0], grads["b"][0])), 1.0, places=5)

    def test_optimizer_state_round_trip(self):
        w = param([1.0, 2.0])
        opt = Adam({"w": w}, lr=0.1)
        ops.sum_all(ops.mul(w, w)).backward()
        opt.step()
        restored = Adam({"w": param(w.values.copy())}, lr=0.1)
        restored.load_state(opt.step_count, opt.state_tensors())
        self.assertEqual(restored.step_count, 1)
        assert_array_equal(restored.state["m"]["w"], opt.state["m"]["w"])


class CheckpointTests(SimpleTestCase):
    def test_tensors_come_back_exactly(self):
        rng = np.random.default_rng(6)
        tensors = {"param/w": rng.normal(size=(3, 2)), "param/b": rng.normal(size=2), "param/s": np.array(1.5)}
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "m.ckpt", tensors, {"a": 1}, "abc", seed=7, epoch=2, step=9)
            header, loaded = load_checkpoint(path)
            raw = path.read_bytes()
        self.assertEqual(header["config_hash"], "abc")
        self.assertEqual((header["seed"], header["epoch"], header["step"]), (7, 2, 9))
        for name, value in tensors.items():
            assert_array_equal(loaded[name], value)
        self.assertEqual(len(raw) - raw.index(b"\n") - 1, 8 * (6 + 2 + 1))

    def test_truncated_payload(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "m.ckpt", {"param/w": np.ones(4)}, {}, "h", seed=0)
            path.write_bytes(path.read_bytes()[:-8])
            with self.assertRaises(DataFormatError):
                load_checkpoint(path)

    def test_missing_file_and_non_object_header(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DataFormatError):
                load_checkpoint(Path(tmp) / "absent.ckpt")
            for header in (b"[1, 2]", b"42", b"\"text\""):
                path = Path(tmp) / "odd.ckpt"
                path.write_bytes(header + b"\n")
                with self.subTest(header=header), self.assertRaises(DataFormatError):
                    load_checkpoint(path)

    def test_malformed_tensor_table(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "m.ckpt", {"param/w": np.ones(2)}, {}, "h", seed=0)
            header, payload = path.read_bytes().split(b"\n", 1)
            broken = header.replace(b'"shape":[2]', b'"shape":"two"')
            self.assertNotEqual(broken, header)
            path.write_bytes(broken + b"\n" + payload)
            with self.assertRaises(DataFormatError):
                load_checkpoint(path)
