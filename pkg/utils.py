"""
Utility functions shared by the CLI and library modules.
"""

import os
import tempfile
from typing import Sequence, Tuple

THREADS_ENV = "REGFORMER_THREADS"


def thread_count() -> int:
    """Kernel/worker parallelism cap from REGFORMER_THREADS (default 1)."""
    value = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def atomic_write_bytes(path: str, payload: bytes):
    """
    Write a file by writing a temporary sibling and renaming it into place.

    Args:
        path: destination file
        payload: full file contents
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str):
    """UTF-8, LF line endings."""
    atomic_write_bytes(path, text.encode("utf-8"))


def direction_name(src_lang: int, tgt_lang: int) -> str:
    """Readable direction label, e.g. 'L0-L3'."""
    return f"L{src_lang}-L{tgt_lang}"


def parse_direction(name: str) -> Tuple[int, int]:
    """Inverse of direction_name."""
    src, tgt = name.split("-")
    return int(src.lstrip("L")), int(tgt.lstrip("L"))


def format_ids(ids: Sequence[int]) -> str:
    """Space-separated token ids (the corpus line format)."""
    return " ".join(str(int(i)) for i in ids)


def parse_ids(text: str) -> list:
    text = text.strip()
    return [int(tok) for tok in text.split()] if text else []
