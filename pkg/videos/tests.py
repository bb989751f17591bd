import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from core.exceptions import ConfigError, DataFormatError, DomainError
from matching.segments import Segment
from videos.datasets import MANIFEST, data_hash, load_split, read_manifest, write_dataset
from videos.featio import (
    load_feature_file, parse_annotations, read_feature_file, write_annotations, write_feature_file,
)
from videos.samples import VideoSample
from videos.synthetic import SynthConfig, generate_synthetic
from videos.windows import WindowConfig, resize_linear, window_slice, window_starts


def tiny_synth(**overrides):
    values = dict(T=32, feature_dim=4, num_classes=3, max_instances=3, min_width=0.1,
                  train_size=4, test_size=2, seed=5)
    values.update(overrides)
    return SynthConfig(**values)


class SyntheticTests(SimpleTestCase):
    def test_same_seed_same_bytes(self):
        a, b = generate_synthetic(tiny_synth()), generate_synthetic(tiny_synth())
        for split in ("train", "test"):
            for x, y in zip(a.splits[split], b.splits[split]):
                self.assertEqual(x.features.tobytes(), y.features.tobytes())
                self.assertEqual(x.segments, y.segments)

    def test_other_seed_differs(self):
        a = generate_synthetic(tiny_synth()).splits["train"][0]
        b = generate_synthetic(tiny_synth(seed=6)).splits["train"][0]
        self.assertFalse(np.array_equal(a.features, b.features))

    def test_split_sizes_and_ids(self):
        dataset = generate_synthetic(tiny_synth())
        self.assertEqual([s.id for s in dataset.splits["train"]], ["train_0000", "train_0001", "train_0002", "train_0003"])
        self.assertEqual(len(dataset.splits["test"]), 2)
        self.assertEqual(dataset.patterns.shape, (3, 4))

    def test_instances_are_separated(self):
        cfg = tiny_synth(train_size=30)
        for sample in generate_synthetic(cfg).splits["train"]:
            self.assertEqual(sample.features.shape, (32, 4))
            self.assertTrue(cfg.min_instances <= len(sample.segments) <= cfg.max_instances)
            bounds = sorted(sample.frame_bounds())
            for start, end, cls in bounds:
                self.assertGreaterEqual(end - start, cfg.min_width_frames - 1e-9)
                self.assertTrue(0 <= cls < cfg.num_classes)
            for (_, end, _), (start, _, _) in zip(bounds, bounds[1:]):
                self.assertGreaterEqual(start - end, cfg.min_gap - 1e-9)
            sample.validate()

    def test_linear_separability(self):
        cfg = SynthConfig(train_size=60, test_size=30, seed=0)
        dataset = generate_synthetic(cfg)

        def pooled(split):
            rows, labels = [], []
            for sample in dataset.splits[split]:
                for start, end, cls in sample.frame_bounds():
                    rows.append(sample.features[round(start):round(end)].mean(axis=0))
                    labels.append(cls)
            x = np.hstack([np.array(rows), np.ones((len(rows), 1))])
            return x, np.array(labels)

        x_train, y_train = pooled("train")
        x_test, y_test = pooled("test")
        weights, *_ = np.linalg.lstsq(x_train, np.eye(cfg.num_classes)[y_train], rcond=None)
        accuracy = float(np.mean(np.argmax(x_test @ weights, axis=1) == y_test))
        self.assertGreater(accuracy, 0.9)

    def test_impossible_packing(self):
        with self.assertRaises(ConfigError):
            tiny_synth(T=10, max_instances=5, min_width=0.2).validate()
        with self.assertRaises(ConfigError):
            tiny_synth(min_instances=3, max_instances=2).validate()


class FeatureFileTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def test_layout(self):
        features = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]])
        path = write_feature_file(self.root / "v.feat", features)
        raw = path.read_bytes()
        header, payload = raw.split(b"\n", 1)
        self.assertEqual(json.loads(header), {
            "D_feat": 3, "T": 2, "dtype": "<f8", "format": "selfdetr-features", "version": 1,
        })
        self.assertEqual(payload, features.astype("<f8").tobytes())
        assert_array_equal(read_feature_file(path), features)

    def test_payload_size_mismatch(self):
        path = write_feature_file(self.root / "v.feat", np.ones((2, 2)))
        path.write_bytes(path.read_bytes() + np.zeros(1).tobytes())
        with self.assertRaises(DataFormatError):
            read_feature_file(path)

    def test_wrong_format(self):
        path = self.root / "bad.feat"
        path.write_bytes(b'{"format": "other"}\n')
        with self.assertRaises(DataFormatError):
            read_feature_file(path)

    def test_sample_round_trip(self):
        sample = VideoSample("v", np.arange(16.0).reshape(8, 2), [Segment.from_bounds(0.25, 0.75, 1)])
        write_feature_file(self.root / "v.feat", sample.features)
        write_annotations(self.root / "v.json", sample)
        loaded = load_feature_file(self.root / "v.feat", self.root / "v.json", num_classes=2)
        self.assertEqual(loaded.id, "v")
        assert_array_equal(loaded.features, sample.features)
        self.assertEqual(json.loads((self.root / "v.json").read_text()), [{"class": 1, "end": 6.0, "start": 2.0}])
        self.assertAlmostEqual(loaded.segments[0].center, 0.5, places=12)
        self.assertAlmostEqual(loaded.segments[0].width, 0.5, places=12)


class AnnotationTests(SimpleTestCase):
    def test_frames_to_normalised(self):
        (seg,) = parse_annotations([{"start": 2, "end": 6, "class": 1}], length=8)
        self.assertEqual((seg.center, seg.width, seg.class_id), (0.5, 0.5, 1))

    def test_rejections(self):
        bad = [
            {"start": 1},
            [{"start": 5, "end": 2, "class": 0}],
            [{"start": 0, "end": 9, "class": 0}],
            [{"start": 0, "end": 2, "class": 4}],
            [{"start": "a", "end": 2, "class": 0}],
        ]
        for records in bad:
            with self.subTest(records=records), self.assertRaises(DataFormatError):
                parse_annotations(records, length=8, num_classes=3)


class WindowTests(SimpleTestCase):
    def setUp(self):
        features = np.arange(200.0)[:, None] * np.ones((1, 3))
        self.sample = VideoSample("v", features, [
            Segment.from_bounds(100 / 200, 140 / 200, 2),
            Segment.from_bounds(10 / 200, 30 / 200, 0),
        ])

    def test_starts(self):
        self.assertEqual(window_starts(300, 128, 32), [0, 96, 192])
        self.assertEqual(window_starts(224, 128, 32), [0, 96])
        self.assertEqual(window_starts(100, 128, 32), [0])
        self.assertEqual(window_starts(128, 128, 32), [0])

    def test_slices_and_padding(self):
        first, second = window_slice(self.sample, win=128, overlap=32)
        self.assertEqual((first.offset, second.offset), (0, 96))
        self.assertEqual(second.features.shape, (128, 3))
        assert_array_equal(second.features[:104, 0], np.arange(96.0, 200.0))
        assert_array_equal(second.features[104:, 0], np.full(24, 199.0))

    def test_segments_follow_coverage_rule(self):
        first, second = window_slice(self.sample, win=128, overlap=32)
        self.assertEqual(sorted(s.class_id for s in first.segments), [0, 2])
        clipped = next(s for s in first.segments if s.class_id == 2)
        self.assertAlmostEqual(clipped.start, 100 / 128, places=9)
        self.assertAlmostEqual(clipped.end, 1.0, places=9)
        (inside,) = second.segments
        self.assertAlmostEqual(inside.start, 4 / 128, places=9)
        start, end = second.to_global(inside.start, inside.end)
        self.assertAlmostEqual(start, 0.5, places=9)
        self.assertAlmostEqual(end, 0.7, places=9)

    def test_short_coverage_is_dropped(self):
        sample = self.sample.copy_with(segments=[Segment.from_bounds(120 / 200, 160 / 200, 1)])
        first, second = window_slice(sample, win=128, overlap=32)
        self.assertEqual(first.segments, [])
        self.assertEqual(len(second.segments), 1)

    def test_invalid_window(self):
        with self.assertRaises(ConfigError):
            window_slice(self.sample, win=32, overlap=32)
        with self.assertRaises(ConfigError):
            WindowConfig(size=16, overlap=20).validate()


class ResizeTests(SimpleTestCase):
    def test_linear(self):
        out = resize_linear(np.array([[0.0], [1.0], [2.0]]), 5)
        assert_allclose(out[:, 0], [0.0, 0.5, 1.0, 1.5, 2.0], atol=1e-12)

    def test_endpoints_kept(self):
        features = np.random.default_rng(0).normal(size=(37, 4))
        out = resize_linear(features, 192)
        self.assertEqual(out.shape, (192, 4))
        assert_allclose(out[[0, -1]], features[[0, -1]], atol=1e-12)

    def test_single_frame(self):
        with self.assertRaises(DomainError):
            resize_linear(np.ones((1, 3)), 10)


class DatasetTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name) / "data"
        self.dataset = generate_synthetic(tiny_synth())

    def test_write_then_load(self):
        manifest = write_dataset(self.root, self.dataset)
        self.assertEqual(manifest["data_hash"], data_hash(self.dataset.config))
        self.assertEqual(read_manifest(self.root)["feature_dim"], 4)
        samples, _ = load_split(self.root, "train")
        for loaded, original in zip(samples, self.dataset.splits["train"]):
            self.assertEqual(loaded.id, original.id)
            self.assertEqual(loaded.features.tobytes(), original.features.tobytes())
            for a, b in zip(loaded.segments, original.segments):
                self.assertAlmostEqual(a.start, b.start, places=9)
                self.assertAlmostEqual(a.end, b.end, places=9)
                self.assertEqual(a.class_id, b.class_id)

    def test_existing_directory_needs_force(self):
        write_dataset(self.root, self.dataset)
        with self.assertRaises(ConfigError):
            write_dataset(self.root, self.dataset)
        write_dataset(self.root, self.dataset, force=True)

    def test_resize_on_load(self):
        write_dataset(self.root, self.dataset)
        samples, _ = load_split(self.root, "test", resize_to=48)
        self.assertEqual(samples[0].features.shape, (48, 4))

    def test_missing_manifest_or_split(self):
        with self.assertRaises(DataFormatError):
            read_manifest(self.root)
        write_dataset(self.root, self.dataset)
        with self.assertRaises(DataFormatError):
            load_split(self.root, "validation")
        self.assertTrue((self.root / MANIFEST).exists())
