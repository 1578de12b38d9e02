from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

from metahood.core import EntryId, EntryRecord, MetahoodError


class SourceError(MetahoodError):
    """A filesystem source could not serve a request."""


class EntryVanished(SourceError):
    """The entry was removed between listing and stat."""

    def __init__(self, entry_id: EntryId):
        self.entry_id = entry_id
        super().__init__(f"no such entry: {entry_id}")


@dataclass(frozen=True, slots=True)
class OstStat:
    index: int
    capacity: int
    used: int
    pool: str = ""

    @property
    def usage(self) -> float:
        return self.used / self.capacity if self.capacity else 0.0


@runtime_checkable
class FsSource(Protocol):
    """Producer side of the mirror. Implementations must be thread safe."""

    def root(self) -> EntryId: ...

    def readdir(self, dir_id: EntryId) -> list[tuple[str, EntryId]]: ...

    def stat(self, entry_id: EntryId) -> EntryRecord: ...

    def ost_usage(self) -> list[OstStat]: ...

    def now(self) -> int: ...
