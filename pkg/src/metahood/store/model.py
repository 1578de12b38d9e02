from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from metahood.core import EntryId, MetahoodError

if TYPE_CHECKING:
    from metahood.policyspec.expr import Expression


class StoreError(MetahoodError):
    pass


class TxnAborted(StoreError):
    """Raised inside a transaction body to roll it back without side effects."""


class TxnConflict(StoreError):
    """Retriable: the engine could not acquire the write lock."""


class ShardUnavailable(StoreError):
    pass


@dataclass(frozen=True, slots=True)
class SoftRmRecord:
    id: EntryId
    last_known_path: str
    size: int
    owner: str
    rm_time: int
    archived: bool
    # kept for undelete but not part of the snapshot format
    group: str = ""
    mode: int = 0o644


SORT_KEYS = ("fid", "size", "atime", "mtime", "name", "path")


@dataclass(frozen=True, slots=True)
class QuerySpec:
    filter: Optional["Expression"] = None
    sort: str = "fid"
    descending: bool = False
    limit: Optional[int] = None
    offset: int = 0
    # restrict results to strict descendants of this directory
    under: Optional[EntryId] = None

    def __post_init__(self) -> None:
        if self.sort not in SORT_KEYS:
            raise ValueError(f"unsupported sort key {self.sort!r}")
        if self.limit is not None and self.limit < 0:
            raise ValueError("negative limit")
