from __future__ import annotations

import threading

from metahood.core import MetahoodError


class BackendNotFound(MetahoodError, KeyError):
    pass


class HsmBackend:
    """Archive tier keyed by canonical fid text; stores content hashes by value."""

    def __init__(self, objects: dict[str, str] | None = None):
        self._objects: dict[str, str] = dict(objects or {})
        self._lock = threading.Lock()

    def store(self, key: str, content_hash: str) -> str:
        with self._lock:
            self._objects[key] = content_hash
        return key

    def fetch(self, key: str) -> str:
        with self._lock:
            try:
                return self._objects[key]
            except KeyError:
                raise BackendNotFound(f"no archived object for {key}") from None

    def __contains__(self, key: object) -> bool:
        with self._lock:
            return key in self._objects

    def __len__(self) -> int:
        return len(self._objects)

    def to_dict(self) -> dict[str, str]:
        with self._lock:
            return dict(self._objects)
