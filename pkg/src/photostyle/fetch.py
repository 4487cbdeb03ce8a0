"""Remote image fetching with an idempotent, atomically-written local cache."""

from __future__ import annotations

import logging
import os
import tempfile
import time
import urllib.error
import urllib.parse
import urllib.request
from pathlib import Path

from photostyle.manifest import ImageRecord

logger = logging.getLogger(__name__)

DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 0.5
DEFAULT_TIMEOUT = 30.0


class FetchError(RuntimeError):
    """Download failure; carries the record id."""

    def __init__(self, record_id: str, message: str):
        self.record_id = record_id
        super().__init__(f"record '{record_id}': {message}")


def is_remote(source: str) -> bool:
    return urllib.parse.urlparse(source).scheme in ("http", "https")


def cache_path(record: ImageRecord, cache_dir: str | Path) -> Path:
    """Cache location for a remote record, keyed by id (URL extension kept)."""
    suffix = Path(urllib.parse.urlparse(record.source).path).suffix or ".img"
    return Path(cache_dir) / f"{record.id}{suffix}"


def fetch_remote(
    record: ImageRecord,
    cache_dir: str | Path,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
    timeout: float = DEFAULT_TIMEOUT,
) -> Path:
    """Resolve a record source to a local file.

    Local paths are returned as-is. Remote sources are downloaded into the
    cache once; later calls return the cached file without touching the
    network. Writes go through a temp file and an atomic rename, so
    concurrent fetches of distinct records are safe.
    """
    if not is_remote(record.source):
        return Path(record.source)

    target = cache_path(record, cache_dir)
    if target.exists():
        return target
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FetchError(record.id, f"cache dir not writable: {exc}") from exc

    last_error: Exception | None = None
    for attempt in range(retries):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            with urllib.request.urlopen(record.source, timeout=timeout) as response:
                data = response.read()
                declared = response.headers.get("Content-Length")
            if declared is not None and int(declared) != len(data):
                raise FetchError(
                    record.id,
                    f"length mismatch: server declared {declared} bytes, got {len(data)}",
                )
            fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{record.id}.")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp_name, target)
            except OSError:
                if os.path.exists(tmp_name):
                    os.unlink(tmp_name)
                raise
            return target
        except (urllib.error.URLError, OSError, FetchError) as exc:
            last_error = exc
            logger.warning("fetch attempt %d/%d failed for %s: %s", attempt + 1, retries, record.id, exc)
    raise FetchError(
        record.id, f"giving up after {retries} attempts: {last_error}"
    ) from last_error
