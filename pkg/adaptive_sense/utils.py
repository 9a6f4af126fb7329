import hashlib
import logging
import os
from pathlib import Path


CACHE_PATH = Path(
    os.environ.get("ADAPTIVE_SENSE_CACHE", Path.home() / ".cache" / "adaptive-sense")
)


def relative_to(directory, path):
    """os.path.join() that gracefully handles None"""
    if path:
        return os.path.join(directory, path)
    return None


def thread_count():
    """Number of parallel evaluation workers, from ADAPTIVE_SENSE_THREADS."""
    raw = os.environ.get("ADAPTIVE_SENSE_THREADS", "1")
    try:
        count = int(raw)
    except ValueError:
        logging.warning("Ignoring invalid ADAPTIVE_SENSE_THREADS=%r", raw)
        return 1
    return max(1, count)


def hash_file(path):
    with open(path, "rb") as f:
        h = hashlib.sha256()
        while chunk := f.read(65536):
            h.update(chunk)
        return h.hexdigest()


def hash_inputs(paths, *extra):
    """Digest of several files plus string parameters, used as a cache key."""
    h = hashlib.sha256()
    for path in paths:
        h.update(hash_file(path).encode("ascii"))
        h.update(b"\0")
    h.update(b"\0".join(str(x).encode("utf-8") for x in extra))
    return h.hexdigest()
