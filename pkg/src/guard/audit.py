"""
Append-only JSONL audit log.

One line per decision carrying the raw probability next to the label, and one
line per rejected request. Writers from every worker go through a single lock;
each write_batch call ends with one fsync.
"""

import logging
import os
import threading
import time
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import orjson
import xxhash

from src.guard.domain import AuditRecord
from src.guard.errors import AuditWriteError

logger = logging.getLogger(__name__)


def input_digest(data: bytes) -> str:
    """64-bit xxHash of the raw input, hex encoded"""
    return xxhash.xxh64_hexdigest(data)


def now_ms() -> int:
    return time.time_ns() // 1_000_000


class AuditLog:
    """Serialized JSONL sink shared by all request workers"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise AuditWriteError(f"cannot create audit directory {self.path.parent}: {e}") from e

    def write_batch(self, entries: Iterable[Dict[str, Any]]) -> None:
        payload = b"".join(orjson.dumps(e, option=orjson.OPT_APPEND_NEWLINE) for e in entries)
        if not payload:
            return
        with self._lock:
            try:
                with open(self.path, "ab") as f:
                    f.write(payload)
                    f.flush()
                    os.fsync(f.fileno())
            except OSError as e:
                logger.error("Failed to append to audit log %s: %s", self.path, e)
                raise AuditWriteError(f"cannot append to {self.path}: {e}") from e

    def record_decision(self, record: AuditRecord) -> None:
        self.write_batch([record.to_dict()])

    def record_error(self, digest: str, error: Exception, threshold: Optional[float] = None) -> None:
        self.write_batch([{
            "event": "error",
            "timestamp_ms": now_ms(),
            "input_digest": digest,
            "error": type(error).__name__,
            "threshold": threshold,
        }])

    def read(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        with open(self.path, "rb") as f:
            return [orjson.loads(line) for line in f if line.strip()]

    def __repr__(self) -> str:
        return f"AuditLog(path={self.path})"
