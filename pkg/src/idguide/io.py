"""Deterministic JSON / JSONL artifact writing."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

SCHEMA_VERSION = 1


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest_json(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def make_header(seed: int | None, config_digest: str | None, **extra: Any) -> dict[str, Any]:
    return {"schema_version": SCHEMA_VERSION, "seed": seed, "config_digest": config_digest, **extra}


def write_json(path: str | Path, obj: Any) -> None:
    atomic_write(path, (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode())


def write_jsonl(path: str | Path, rows: Iterable[Any], header: dict[str, Any] | None = None) -> None:
    lines = []
    if header is not None:
        lines.append(canonical_json({"header": header}))
    lines.extend(canonical_json(r) for r in rows)
    atomic_write(path, ("\n".join(lines) + "\n").encode() if lines else b"")


def read_jsonl(path: str | Path) -> tuple[dict[str, Any] | None, list[dict[str, Any]]]:
    """Rows of a JSONL file plus its ``{"header": ...}`` line, if any."""
    header = None
    rows = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "header" in rec and len(rec) == 1:
                header = rec["header"]
                continue
            rows.append(rec)
    return header, rows
