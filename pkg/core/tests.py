import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase, TestCase

from core.exceptions import ConfigError, SelfDetrError, TrainingDivergedError
from core.utils import JsonLinesWriter, canonical_json, read_json, short_hash, table_exists, write_json


class ExceptionTests(SimpleTestCase):
    def test_message(self):
        exc = ConfigError("bad key")
        self.assertIsInstance(exc, SelfDetrError)
        self.assertEqual(str(exc), "bad key")

    def test_diagnostic(self):
        exc = TrainingDivergedError("non-finite loss component", step=12, components={"detr": float("nan")})
        self.assertEqual(exc.diagnostic(), "non-finite loss component step=12 detr=nan")
        self.assertNotIsInstance(exc, SelfDetrError)


class HashingTests(SimpleTestCase):
    def test_key_order_does_not_matter(self):
        self.assertEqual(short_hash({"a": 1, "b": [1, 2]}), short_hash({"b": [1, 2], "a": 1}))
        self.assertNotEqual(short_hash({"a": 1}), short_hash({"a": 2}))
        self.assertEqual(len(short_hash({})), 16)

    def test_canonical_json(self):
        self.assertEqual(canonical_json({"b": 1, "a": {"d": 2, "c": 3}}), '{"a":{"c":3,"d":2},"b":1}')


class FileTests(SimpleTestCase):
    def test_json_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_json(Path(tmp) / "nested" / "x.json", {"b": 1.5, "a": [1, 2]})
            self.assertEqual(read_json(path), {"a": [1, 2], "b": 1.5})

    def test_json_lines(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "log.jsonl"
            with JsonLinesWriter(path, mode="w") as log:
                log.write({"step": 0})
                log.write({"step": 1})
            with JsonLinesWriter(path) as log:
                log.write({"step": 2})
            lines = path.read_text().splitlines()
        self.assertEqual([json.loads(line)["step"] for line in lines], [0, 1, 2])


class TableExistsTests(TestCase):
    def test_ledger_table(self):
        self.assertTrue(table_exists("experiments_experimentrun"))
        self.assertFalse(table_exists("no_such_table"))
