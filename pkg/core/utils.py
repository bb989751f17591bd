import hashlib
import json
from pathlib import Path

from django.db import connection


def table_exists(table_name):
    """Check whether a table has been migrated into the database."""
    return table_name in connection.introspection.table_names()


def canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def short_hash(data):
    """First 16 hex chars of SHA-256 over canonical JSON."""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:16]


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


class JsonLinesWriter:
    """Append-only JSON lines log, flushed per record."""

    def __init__(self, path, mode="a"):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, mode, encoding="utf-8")

    def write(self, record):
        self._fh.write(canonical_json(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
