"""Summary statistics maintained inside the mirror's transactions.

Cells are keyed by ``(dimension, key)`` and hold a count, the logical volume
(sum of sizes), the space used (sum of ``blocks * 512``) and a nine-bucket
size histogram. Subtree rollups keep the same totals per directory for the
directories near the top of the tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Literal, Optional, Protocol

from metahood.core import N_BUCKETS, EntryId, EntryRecord, EntryType, size_bucket

if TYPE_CHECKING:
    from metahood.store.sqlite import Store

DIMENSIONS = ("owner", "group", "type", "hsm_state", "owner_type", "group_type", "tags")
# separator for compound keys such as owner x type
SEP = "\x1f"
PENDING = "pending"
DEFAULT_ROLLUP_DEPTH = 2


@dataclass(slots=True)
class Cell:
    count: int = 0
    volume: int = 0
    spc: int = 0
    hist: list[int] = field(default_factory=lambda: [0] * N_BUCKETS)

    def add(self, sign: int, size: int, spc: int) -> None:
        self.count += sign
        self.volume += sign * size
        self.spc += sign * spc
        self.hist[size_bucket(size)] += sign

    def as_tuple(self) -> tuple[int, ...]:
        return (self.count, self.volume, self.spc, *self.hist)

    @classmethod
    def from_tuple(cls, t: Iterable[int]) -> "Cell":
        t = list(t)
        return cls(t[0], t[1], t[2], list(t[3:3 + N_BUCKETS]))

    def is_zero(self) -> bool:
        return not any(self.as_tuple())


def compound(a: str, b: str) -> str:
    return f"{a}{SEP}{b}"


def cell_keys(e: EntryRecord) -> list[tuple[str, str]]:
    t = e.etype.value
    keys = [
        ("owner", e.owner),
        ("group", e.group),
        ("type", t),
        ("owner_type", compound(e.owner, t)),
        ("group_type", compound(e.group, t)),
    ]
    if e.etype is EntryType.FILE:
        keys.append(("hsm_state", e.hsm.value))
    if e.dirty_mask:
        keys.append(("tags", PENDING))
    return keys


def rollup_contribution(e: EntryRecord) -> tuple[int, int, int]:
    """(count, volume, spc) an entry adds to every ancestor's rollup."""
    return 1, 0 if e.etype is EntryType.DIR else e.size, e.space_used


class LedgerTxn(Protocol):
    """What the ledger needs from a store transaction."""

    rollup_depth: int

    def agg_add(self, dim: str, key: str, sign: int, size: int, spc: int) -> None: ...

    def rollup_add(self, fid: EntryId, count: int, volume: int, spc: int) -> None: ...

    def rollup_ancestors(self, parent: EntryId) -> list[EntryId]: ...


def on_delta(txn: LedgerTxn, before: Optional[EntryRecord], after: Optional[EntryRecord], *,
             rollups: bool = True) -> None:
    """Move one entry's contribution from ``before`` to ``after``.

    Either side may be None (insert or delete). Rollups are adjusted along the
    entry's own ancestor chain; relocating a directory's descendants is the
    caller's job (see ``Txn.upsert``).
    """
    if before is not None and after is not None and _same_contribution(before, after):
        return
    if before is not None:
        for dim, key in cell_keys(before):
            txn.agg_add(dim, key, -1, before.size, before.space_used)
    if after is not None:
        for dim, key in cell_keys(after):
            txn.agg_add(dim, key, 1, after.size, after.space_used)
    if not rollups or txn.rollup_depth <= 0:
        return
    if before is not None and after is not None and before.parent == after.parent \
            and rollup_contribution(before) == rollup_contribution(after):
        return
    if before is not None:
        c, v, s = rollup_contribution(before)
        for anc in txn.rollup_ancestors(before.parent):
            txn.rollup_add(anc, -c, -v, -s)
    if after is not None:
        c, v, s = rollup_contribution(after)
        for anc in txn.rollup_ancestors(after.parent):
            txn.rollup_add(anc, c, v, s)


def _same_contribution(a: EntryRecord, b: EntryRecord) -> bool:
    return (a.parent == b.parent and a.size == b.size and a.blocks == b.blocks and a.owner == b.owner
            and a.group == b.group and a.etype is b.etype and a.hsm is b.hsm
            and bool(a.dirty_mask) == bool(b.dirty_mask))


# ---------------------------------------------------------------------------
# Oracle folds
# ---------------------------------------------------------------------------


def fold(entries: Iterable[EntryRecord]) -> dict[tuple[str, str], Cell]:
    """Recompute every ledger cell from scratch."""
    cells: dict[tuple[str, str], Cell] = {}
    for e in entries:
        for k in cell_keys(e):
            cell = cells.get(k)
            if cell is None:
                cell = cells[k] = Cell()
            cell.add(1, e.size, e.space_used)
    return cells


def tree_depths(entries: Iterable[EntryRecord]) -> tuple[dict[EntryId, EntryRecord], dict[EntryId, int]]:
    """Index entries by id and compute each one's tree depth (root = 0).

    Entries whose parent chain is broken get no depth.
    """
    by_id = {e.id: e for e in entries}
    depth: dict[EntryId, int] = {}
    for e in by_id.values():
        chain = []
        cur: Optional[EntryRecord] = e
        while cur is not None and cur.id not in depth and not cur.is_root:
            chain.append(cur.id)
            cur = by_id.get(cur.parent)
        if cur is None:
            continue
        d = depth.setdefault(cur.id, 0)
        for fid in reversed(chain):
            d += 1
            depth[fid] = d
    return by_id, depth


def fold_rollups(entries: Iterable[EntryRecord], max_depth: int) -> dict[EntryId, tuple[int, int, int]]:
    """Subtree totals of every directory at tree depth <= ``max_depth``."""
    if max_depth <= 0:
        return {}
    by_id, depth = tree_depths(entries)
    out: dict[EntryId, list[int]] = {
        fid: [0, 0, 0] for fid, e in by_id.items() if e.etype is EntryType.DIR and depth.get(fid, max_depth + 1) <= max_depth
    }
    for e in by_id.values():
        if e.id not in depth:
            continue
        c, v, s = rollup_contribution(e)
        cur = by_id.get(e.parent)
        while cur is not None:
            row = out.get(cur.id)
            if row is not None:
                row[0] += c
                row[1] += v
                row[2] += s
            cur = by_id.get(cur.parent) if not cur.is_root else None
    return {k: (r[0], r[1], r[2]) for k, r in out.items()}


def verify(store: "Store") -> list[str]:
    """Diff the stored ledger and rollups against a recomputation from the entries.

    Returns human-readable discrepancies; empty means consistent.
    """
    entries = list(store.iter_entries())
    problems: list[str] = []
    expected = fold(entries)
    stored = store.agg_cells()
    for k in sorted(set(expected) | set(stored)):
        want = expected.get(k, Cell())
        have = stored.get(k, Cell())
        if want.as_tuple() != have.as_tuple():
            dim, key = k
            neg = " (negative)" if any(x < 0 for x in have.as_tuple()) else ""
            problems.append(f"cell {dim}={key.replace(SEP, '/')}: stored {have.as_tuple()} "
                            f"expected {want.as_tuple()}{neg}")
    want_roll = fold_rollups(entries, store.rollup_depth)
    have_roll = store.rollup_rows()
    for fid in sorted(set(want_roll) | set(have_roll), key=str):
        # an empty directory may have no row at all
        w = want_roll.get(fid, (0, 0, 0))
        h = have_roll.get(fid, (0, 0, 0))
        if w != h:
            problems.append(f"rollup {fid}: stored {h} expected {w}")
    return problems


# ---------------------------------------------------------------------------
# Report lookups (ledger only, never the entry table)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ReportRow:
    key: str
    type: str
    count: int
    volume: int
    space_used: int

    @property
    def avg_size(self) -> float:
        return self.volume / self.count if self.count else 0.0


def report_key(store: "Store", dimension: str, key: str) -> tuple[int, int, float]:
    """(count, space_used, avg_size) of one ledger cell; zeros when unknown."""
    if dimension not in DIMENSIONS:
        raise ValueError(f"unknown dimension {dimension!r}")
    cell = store.agg_get(dimension, key)
    avg = cell.volume / cell.count if cell.count else 0.0
    return cell.count, cell.spc, avg


TYPE_ORDER = (EntryType.DIR.value, EntryType.FILE.value, EntryType.SYMLINK.value)


def per_type_rows(store: "Store", dimension: Literal["owner", "group"], key: str) -> list[ReportRow]:
    """The per-type breakdown of one owner or group, types in a fixed order."""
    dim = f"{dimension}_type"
    rows = []
    for t in TYPE_ORDER:
        cell = store.agg_get(dim, compound(key, t))
        if cell.count:
            rows.append(ReportRow(key, t, cell.count, cell.volume, cell.spc))
    return rows


def size_profile(store: "Store", owner: Optional[str] = None) -> list[int]:
    """File-size histogram, either global or for one owner."""
    if owner is None:
        cell = store.agg_get("type", EntryType.FILE.value)
    else:
        cell = store.agg_get("owner_type", compound(owner, EntryType.FILE.value))
    return list(cell.hist)


def owners(store: "Store") -> dict[str, Cell]:
    return {k: c for (dim, k), c in store.agg_cells("owner").items() if c.count}


Metric = Literal["count", "volume", "avg", "range"]


def top(store: "Store", metric: Metric, n: int, bucket_range: tuple[int, int] | None = None) -> list[tuple[str, float]]:
    """Rank owners by ``metric``, descending, ties broken by owner name.

    ``range`` ranks by the share of an owner's entries whose size bucket lies
    in ``bucket_range`` (inclusive bucket indices).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scored = []
    for name, cell in owners(store).items():
        if metric == "count":
            score: float = cell.count
        elif metric == "volume":
            score = cell.volume
        elif metric == "avg":
            score = cell.volume / cell.count
        elif metric == "range":
            if bucket_range is None:
                raise ValueError("range metric needs a bucket range")
            lo, hi = bucket_range
            score = sum(cell.hist[lo:hi + 1]) / cell.count
        else:
            raise ValueError(f"unknown metric {metric!r}")
        scored.append((name, score))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:n]


def activity_totals(store: "Store") -> dict[str, dict[str, dict[str, int]]]:
    """scope -> key -> rtype -> count, scopes ``all``, ``owner`` and ``jobid``."""
    return store.activity()
