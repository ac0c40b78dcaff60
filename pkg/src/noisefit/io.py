"""Atomic file writes and run-directory locking."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

from filelock import FileLock, Timeout

from .errors import UsageError


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the same directory, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def append_line(path, line: str) -> None:
    """Append one complete line with a single write on an O_APPEND descriptor."""
    data = (line.rstrip("\n") + "\n").encode("utf-8")
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, data)
    finally:
        os.close(fd)


class RunDirLock:
    """Exclusive lock on a run directory for the lifetime of a command."""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self._lock = None

    def __enter__(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.run_dir / ".lock"))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise UsageError(f"run directory {self.run_dir} is locked by another process") from None
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False
