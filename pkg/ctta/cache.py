"""
Report cache for the HTTP service.

Runs are deterministic per (checkpoint, scenario, config, baseline, seed), so a
repeated /run request can be answered from memory:
- In-memory TTLCache from cachetools
- Keys are the sha256 of the canonical JSON of the request plus the checkpoint fingerprint
- Cleared wholesale whenever a new checkpoint is written
"""
import hashlib
import json
import logging
import os
from functools import wraps
from typing import Any, Optional

from cachetools import TTLCache

logger = logging.getLogger(__name__)

# Cache configuration from environment variables
CACHE_TTL = int(os.getenv('REPORT_CACHE_TTL_SECONDS', 3600))
CACHE_MAX_SIZE = int(os.getenv('REPORT_CACHE_MAX_SIZE', 64))
CACHE_ENABLED = os.getenv('REPORT_CACHE_ENABLED', 'true').lower() == 'true'

_cache: Optional[TTLCache] = None


def _get_cache() -> Optional[TTLCache]:
    """Get or initialize the cache instance."""
    global _cache
    if not CACHE_ENABLED:
        return None
    if _cache is None:
        _cache = TTLCache(maxsize=CACHE_MAX_SIZE, ttl=CACHE_TTL)
        logger.info("report cache initialized with TTL=%ss, maxsize=%s", CACHE_TTL, CACHE_MAX_SIZE)
    return _cache


def report_cache_key(operation: str, checkpoint_fingerprint: str, request: dict) -> str:
    """
    Build the cache key for one run.

    Args:
        operation: "run" or "generalize"
        checkpoint_fingerprint: sha256 of the checkpoint file contents
        request: the request body as plain JSON-compatible data

    Returns:
        "report:<sha256>"
    """
    params = {'operation': operation, 'checkpoint': checkpoint_fingerprint, 'request': request}
    params_json = json.dumps(params, sort_keys=True, separators=(',', ':'))
    return f"report:{hashlib.sha256(params_json.encode()).hexdigest()}"


def get_cached_report(key: str) -> Optional[dict]:
    cache = _get_cache()
    if cache is None:
        return None
    return cache.get(key)


def set_cached_report(key: str, report: dict) -> None:
    cache = _get_cache()
    if cache is None:
        return
    cache[key] = report


def invalidate_report_cache() -> None:
    """Drop every cached report; called after a checkpoint is written."""
    cache = _get_cache()
    if cache is None:
        return
    cache.clear()
    logger.info("cleared report cache")


def cached_report(operation: str):
    """
    Decorator for `fn(request, fingerprint) -> dict` that serves repeats from the cache.

    Only successful results are stored; exceptions propagate untouched.
    """
    def decorate(func):
        @wraps(func)
        def wrapper(request: Any, fingerprint: str) -> dict:
            key = report_cache_key(operation, fingerprint, request.model_dump(mode='json'))
            hit = get_cached_report(key)
            if hit is not None:
                logger.info("report cache hit for %s (%s...)", operation, key[7:19])
                return hit
            result = func(request, fingerprint)
            set_cached_report(key, result)
            return result
        return wrapper
    return decorate
