"""Structured warning records, emitted as JSON lines on a diagnostic stream.

Non-fatal events (dropped terms, skipped calipers, ...) are reported here so
that batch runs keep a machine-readable trace without aborting.
"""

from __future__ import annotations

import json
import sys
import threading
from typing import IO

_lock = threading.Lock()
_stream: IO[str] | None = None  # None means "sys.stderr at emission time"


def set_warning_stream(stream: IO[str] | None) -> IO[str] | None:
    """Redirect warning records to ``stream``; ``None`` restores stderr.

    Returns the previous stream setting so callers can restore it.
    """
    global _stream
    with _lock:
        previous = _stream
        _stream = stream
    return previous


def emit_warning(event: str, **fields: object) -> dict:
    """Write one JSON warning record and return it."""
    record = {"event": event, **fields}
    with _lock:
        out = _stream if _stream is not None else sys.stderr
        out.write(json.dumps(record, sort_keys=True) + "\n")
    return record
