"""
Small filesystem and JSON helpers.

Every artifact is written through ``atomic_write_*`` so a failed command never
leaves a partial file behind.
"""

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Union

from dotenv import load_dotenv

PathLike = Union[str, Path]


def canonical_json(obj: Any) -> str:
    """Deterministic JSON text (insertion-ordered keys, fixed indentation)."""
    return json.dumps(obj, indent=2, ensure_ascii=True, allow_nan=True) + "\n"


def fingerprint(obj: Any) -> str:
    """sha256 of the canonical JSON of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: PathLike, obj: Any) -> Path:
    return atomic_write_text(path, canonical_json(obj))


def read_json(path: PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def resolve_thread_count() -> int:
    """Worker cap from ``XVIEW_THREADS`` (``.env`` honoured), default all cores."""
    load_dotenv()
    raw = os.getenv("XVIEW_THREADS")
    cores = os.cpu_count() or 1
    if not raw:
        return cores
    try:
        value = int(raw)
    except ValueError:
        return cores
    return max(1, value)
