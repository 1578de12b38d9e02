"""Shared domain types, unit parsing, size bucketing and path resolution."""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Optional
from urllib.parse import unquote

U64_MAX = (1 << 64) - 1
U32_MAX = (1 << 32) - 1

KB = 1 << 10
MB = 1 << 20
GB = 1 << 30
TB = 1 << 40

ROOT_NAME = ""
MAX_PATH_HOPS = 4096


class MetahoodError(Exception):
    """Base class for every error raised by the package."""


class ParseError(MetahoodError, ValueError):
    def __init__(self, message: str, token: str | None = None):
        self.token = token
        super().__init__(message if token is None else f"{message}: {token!r}")


class UnresolvedPathError(MetahoodError):
    """The parent chain of an entry is broken.

    ``suffix`` holds the deepest part of the path that could be resolved,
    e.g. ``"b/c"`` when the parent of ``b`` is missing.
    """

    def __init__(self, entry_id: "EntryId", missing: "EntryId", suffix: str):
        self.entry_id = entry_id
        self.missing = missing
        self.suffix = suffix
        super().__init__(f"cannot resolve {entry_id}: ancestor {missing} missing (resolved suffix {suffix!r})")


class PathCycleError(MetahoodError):
    def __init__(self, entry_id: "EntryId"):
        self.entry_id = entry_id
        super().__init__(f"parent chain of {entry_id} exceeds {MAX_PATH_HOPS} hops")


# ---------------------------------------------------------------------------
# Identifiers
# ---------------------------------------------------------------------------

_FID_RE = re.compile(r"0x([0-9a-f]+):0x([0-9a-f]+):0x([0-9a-f]+)")


@dataclass(frozen=True, order=True, slots=True)
class EntryId:
    seq: int
    oid: int
    ver: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.seq <= U64_MAX and 0 <= self.oid <= U32_MAX and 0 <= self.ver <= U32_MAX):
            raise ValueError(f"EntryId field out of range: {self.seq}, {self.oid}, {self.ver}")

    def __str__(self) -> str:
        return f"0x{self.seq:x}:0x{self.oid:x}:0x{self.ver:x}"

    @property
    def is_null(self) -> bool:
        return self.seq == 0 and self.oid == 0 and self.ver == 0


NULL_ID = EntryId(0, 0, 0)


def parse_entry_id(text: str) -> EntryId:
    parts = text.split(":")
    if len(parts) != 3:
        raise ParseError("expected 3 colon-separated fields in entry id", text)
    for part in parts:
        if not re.fullmatch(r"0x[0-9a-f]+", part):
            raise ParseError("malformed entry id field", part)
    m = _FID_RE.fullmatch(text)
    assert m is not None
    seq, oid, ver = (int(g, 16) for g in m.groups())
    if seq > U64_MAX:
        raise ParseError("seq overflows 64 bits", parts[0])
    if oid > U32_MAX:
        raise ParseError("oid overflows 32 bits", parts[1])
    if ver > U32_MAX:
        raise ParseError("ver overflows 32 bits", parts[2])
    return EntryId(seq, oid, ver)


def stable_hash(text: str) -> int:
    """Process-independent 64-bit hash (``hash()`` is salted per process)."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


# ---------------------------------------------------------------------------
# Enumerations
# ---------------------------------------------------------------------------


class EntryType(str, enum.Enum):
    FILE = "file"
    DIR = "dir"
    SYMLINK = "symlink"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "EntryType":
        try:
            return cls(text)
        except ValueError:
            raise ParseError("unknown entry type", text) from None


class HsmState(str, enum.Enum):
    NONE = "none"
    NEW = "new"
    ARCHIVING = "archiving"
    ARCHIVED = "archived"
    DIRTY = "dirty"
    RELEASED = "released"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "HsmState":
        try:
            return cls(text)
        except ValueError:
            raise ParseError("unknown hsm state", text) from None


class HsmEvent(str, enum.Enum):
    ARCHIVE_START = "archive_start"
    ARCHIVE_DONE = "archive_done"
    MODIFY = "modify"
    RELEASE = "release"
    RESTORE = "restore"
    UNLINK = "unlink"

    def __str__(self) -> str:
        return self.value


# Legal HSM state transitions. UNLINK is legal from every state and removes
# the entry, so it is not listed here.
HSM_TRANSITIONS: dict[tuple[HsmState, HsmEvent], HsmState] = {
    (HsmState.NONE, HsmEvent.ARCHIVE_START): HsmState.ARCHIVING,
    (HsmState.NEW, HsmEvent.ARCHIVE_START): HsmState.ARCHIVING,
    (HsmState.DIRTY, HsmEvent.ARCHIVE_START): HsmState.ARCHIVING,
    (HsmState.ARCHIVING, HsmEvent.ARCHIVE_DONE): HsmState.ARCHIVED,
    (HsmState.ARCHIVED, HsmEvent.MODIFY): HsmState.DIRTY,
    (HsmState.RELEASED, HsmEvent.MODIFY): HsmState.DIRTY,
    (HsmState.ARCHIVED, HsmEvent.RELEASE): HsmState.RELEASED,
    (HsmState.RELEASED, HsmEvent.RESTORE): HsmState.ARCHIVED,
}

ARCHIVED_STATES = frozenset({HsmState.ARCHIVED, HsmState.RELEASED})


class IllegalTransition(MetahoodError):
    def __init__(self, state: HsmState, event: HsmEvent):
        self.state = state
        self.event = event
        super().__init__(f"illegal hsm transition: {event.value} from state {state.value}")


def next_hsm_state(state: HsmState, event: HsmEvent) -> HsmState:
    try:
        return HSM_TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(state, event) from None


class DirtyMask(enum.IntFlag):
    NONE = 0
    NEED_STAT = 1
    NEED_PATH = 2


# ---------------------------------------------------------------------------
# Entry record
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class EntryRecord:
    id: EntryId
    parent: EntryId
    name: str
    etype: EntryType
    size: int = 0
    blocks: int = 0
    owner: str = "root"
    group: str = "root"
    mode: int = 0o644
    atime: int = 0
    mtime: int = 0
    ctime: int = 0
    ost_set: tuple[int, ...] = ()
    pool: str = ""
    hsm: HsmState = HsmState.NONE
    dircount: int = 0
    md_gen: int = 0
    dirty_mask: int = 0

    def __post_init__(self) -> None:
        if self.id.is_null:
            raise ValueError("the null id never identifies an entry")
        if self.parent.is_null:
            if self.name != ROOT_NAME:
                raise ValueError("only the root entry may have a null parent")
        elif not self.name or "/" in self.name:
            raise ValueError(f"invalid entry name {self.name!r}")
        if self.etype is not EntryType.DIR and self.dircount:
            raise ValueError("dircount is only meaningful for directories")
        if self.size < 0 or self.blocks < 0:
            raise ValueError("size and blocks must be non-negative")
        if self.hsm is not HsmState.NONE and self.etype is not EntryType.FILE:
            raise ValueError("only files carry an hsm state")
        if not 0 <= self.mode <= 0o7777:
            raise ValueError(f"mode out of range: {self.mode:o}")

    @property
    def is_root(self) -> bool:
        return self.parent.is_null

    @property
    def space_used(self) -> int:
        return self.blocks * 512

    def evolve(self, **changes) -> "EntryRecord":
        return replace(self, **changes)


def file_blocks(size: int, hsm: HsmState = HsmState.NONE) -> int:
    """512-byte blocks held on OSTs by a file; released files hold none."""
    if hsm is HsmState.RELEASED:
        return 0
    return -(-size // 512)


# ---------------------------------------------------------------------------
# Sizes and durations
# ---------------------------------------------------------------------------

_SIZE_UNITS = {"": 1, "B": 1, "KB": KB, "MB": MB, "GB": GB, "TB": TB, "K": KB, "M": MB, "G": GB, "T": TB}
_CANON_SIZE_UNITS = (("TB", TB), ("GB", GB), ("MB", MB), ("KB", KB))
_NUM_UNIT_RE = re.compile(r"(\d+)([A-Za-z]*)")


def parse_size(text: str) -> int:
    m = _NUM_UNIT_RE.fullmatch(text.strip())
    if m is None:
        raise ParseError("malformed size", text)
    unit = m.group(2).upper()
    if unit not in _SIZE_UNITS:
        raise ParseError("unknown size unit", m.group(2))
    value = int(m.group(1)) * _SIZE_UNITS[unit]
    if value > U64_MAX:
        raise ParseError("size overflows 64 bits", text)
    return value


def format_size(value: int) -> str:
    """Canonical size text: the largest unit that divides ``value`` exactly."""
    if value < 0:
        raise ValueError("negative size")
    for unit, mult in _CANON_SIZE_UNITS:
        if value and value % mult == 0:
            return f"{value // mult}{unit}"
    return str(value)


_DURATION_UNITS = {"": 1, "s": 1, "m": 60, "h": 3600, "d": 86400, "w": 7 * 86400}
_CANON_DURATION_UNITS = (("w", 7 * 86400), ("d", 86400), ("h", 3600), ("m", 60))


def parse_duration(text: str) -> int:
    m = _NUM_UNIT_RE.fullmatch(text.strip())
    if m is None:
        raise ParseError("malformed duration", text)
    suffix = m.group(2)
    if suffix not in _DURATION_UNITS:
        raise ParseError("unknown duration suffix", suffix)
    value = int(m.group(1)) * _DURATION_UNITS[suffix]
    if value > U64_MAX:
        raise ParseError("duration overflows 64 bits", text)
    return value


def format_duration(seconds: int) -> str:
    if seconds < 0:
        raise ValueError("negative duration")
    for suffix, mult in _CANON_DURATION_UNITS:
        if seconds and seconds % mult == 0:
            return f"{seconds // mult}{suffix}"
    return f"{seconds}s"


def format_human(value: int | float) -> str:
    """Report rendering of a byte count: bare bytes below 1 KB, else two decimals."""
    if value < KB:
        return str(int(round(value)))
    for unit, mult in (("PB", 1 << 50), ("TB", TB), ("GB", GB), ("MB", MB), ("KB", KB)):
        if value >= mult:
            return f"{value / mult:.2f} {unit}"
    raise AssertionError("unreachable")


# Left edges of the nine size-profile buckets. Bucket 0 holds exactly-zero sizes.
BUCKET_EDGES: tuple[int, ...] = (0, 1, KB, 32 * KB, MB, 32 * MB, GB, 32 * GB, TB)
N_BUCKETS = len(BUCKET_EDGES)
BUCKET_LABELS: tuple[str, ...] = (
    "0", "1~1K", "1K~32K", "32K~1M", "1M~32M", "32M~1G", "1G~32G", "32G~1T", "+1T",
)


def size_bucket(size: int) -> int:
    if size < 0:
        raise ValueError("negative size")
    for i in range(N_BUCKETS - 1, -1, -1):
        if size >= BUCKET_EDGES[i]:
            return i
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Name encoding (wire and dump forms)
# ---------------------------------------------------------------------------

_ENCODE = {" ": "%20", "%": "%25", "\n": "%0A"}


def encode_name(name: str) -> str:
    return "".join(_ENCODE.get(ch, ch) for ch in name)


def decode_name(text: str) -> str:
    return unquote(text) if "%" in text else text


# ---------------------------------------------------------------------------
# Path resolution
# ---------------------------------------------------------------------------


def resolve_path(lookup: Callable[[EntryId], Optional[EntryRecord]], entry_id: EntryId) -> str:
    """Absolute path of ``entry_id`` built from parent links."""
    names: list[str] = []
    current = entry_id
    for _ in range(MAX_PATH_HOPS):
        rec = lookup(current)
        if rec is None:
            raise UnresolvedPathError(entry_id, current, "/".join(reversed(names)))
        if rec.is_root:
            return "/" + "/".join(reversed(names))
        names.append(rec.name)
        current = rec.parent
    raise PathCycleError(entry_id)


def path_depth(path: str) -> int:
    """Number of path components minus one; the root and its children are 0."""
    parts = [p for p in path.split("/") if p]
    return max(len(parts) - 1, 0)


@dataclass(slots=True)
class Counter:
    """Thread-unsafe bag of named integers used for instrumentation."""

    values: dict[str, int] = field(default_factory=dict)

    def add(self, key: str, n: int = 1) -> None:
        self.values[key] = self.values.get(key, 0) + n

    def __getitem__(self, key: str) -> int:
        return self.values.get(key, 0)
