"""Content-addressed response cache on the filesystem."""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Any

from ..io import atomic_write, digest_json


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ResponseCache:
    """JSON entries under ``root/<k[:2]>/<k>.json``, keyed by a digest of the inputs.

    Reads are lock-free (writes are atomic renames); writes are serialised.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()

    @staticmethod
    def key(**inputs: Any) -> str:
        return digest_json(inputs)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        try:
            return json.loads(self._path(key).read_text())
        except FileNotFoundError:
            return None

    def put(self, key: str, value: dict[str, Any]) -> None:
        data = (json.dumps(value, sort_keys=True) + "\n").encode()
        with self._lock:
            atomic_write(self._path(key), data)

    def blob_path(self, digest: str, suffix: str = "") -> Path:
        return self.root / "blobs" / f"{digest}{suffix}"
