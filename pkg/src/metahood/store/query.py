"""Attribute queries over the mirror.

Filters are policy expressions. Where possible a filter is pushed down to SQL
as a pre-filter; every candidate row is then checked with the entry-side
evaluator, so the result is exactly the set ``evaluate`` accepts.
"""

from __future__ import annotations

import time
from typing import TYPE_CHECKING, Any, Optional

from metahood.core import EntryId, EntryRecord, EntryType
from metahood.policyspec.expr import Compare, Expression, Glob, Not, Or, evaluate, needs_path
from metahood.store.model import QuerySpec

if TYPE_CHECKING:
    from metahood.store.sqlite import Store

_COLUMNS = {"size": "size", "dircount": "dircount", "owner": "owner", "group": "grp", "pool": "pool",
            "name": "name", "type": "etype", "hsm_state": "hsm"}
_SQL_OPS = {"==": "=", "!=": "<>", "<": "<", "<=": "<=", ">": ">", ">=": ">="}
# elapsed-time comparisons flip when rewritten against the timestamp column
_FLIP = {"==": "=", "!=": "<>", "<": ">", "<=": ">=", ">": "<", ">=": "<="}


def to_sql(e: Expression, now: int) -> Optional[tuple[str, list[Any], bool]]:
    """(where-clause, params, exact) selecting a superset of ``e``; None if none."""
    if isinstance(e, Compare):
        if isinstance(e.value, Glob):
            return None
        if e.attr in _COLUMNS:
            return f"{_COLUMNS[e.attr]} {_SQL_OPS[e.op]} ?", [e.value], True
        if e.attr in ("last_access", "last_mod"):
            col = "atime" if e.attr == "last_access" else "mtime"
            return f"{col} {_FLIP[e.op]} ?", [now - e.value], True  # type: ignore[operator]
        return None
    if isinstance(e, Not):
        inner = to_sql(e.child, now)
        if inner is None or not inner[2]:
            return None
        return f"NOT ({inner[0]})", inner[1], True
    parts = [to_sql(c, now) for c in e.children]
    if isinstance(e, Or):
        if any(p is None for p in parts):
            return None
        sql = " OR ".join(f"({p[0]})" for p in parts)  # type: ignore[index]
        return sql, [x for p in parts for x in p[1]], all(p[2] for p in parts)  # type: ignore[index]
    kept = [p for p in parts if p is not None]
    if not kept:
        return None
    sql = " AND ".join(f"({p[0]})" for p in kept)
    return sql, [x for p in kept for x in p[1]], len(kept) == len(parts) and all(p[2] for p in kept)


class PathCache:
    """Resolves entry paths with memoized directory prefixes."""

    def __init__(self, store: "Store"):
        self.store = store
        self._dirs: dict[EntryId, Optional[str]] = {}

    def dir_path(self, fid: EntryId) -> Optional[str]:
        if fid in self._dirs:
            return self._dirs[fid]
        chain = []
        cur = fid
        path: Optional[str] = None
        while True:
            if cur in self._dirs:
                path = self._dirs[cur]
                break
            e = self.store.get(cur)
            if e is None:
                path = None
                break
            if e.is_root:
                path = "/"
                self._dirs[cur] = path
                break
            chain.append(e)
            cur = e.parent
        for e in reversed(chain):
            if path is not None:
                path = path.rstrip("/") + "/" + e.name
            self._dirs[e.id] = path
        return self._dirs.get(fid, path)

    def path(self, e: EntryRecord) -> str:
        if e.is_root:
            return "/"
        parent = self.dir_path(e.parent)
        if parent is None:
            return ""
        return parent.rstrip("/") + "/" + e.name


def descendants(store: "Store", root: EntryId) -> set[EntryId]:
    """Ids strictly below ``root``."""
    out: set[EntryId] = set()
    frontier = [root]
    while frontier:
        fid = frontier.pop()
        for ch in store.children(fid):
            out.add(ch.id)
            if ch.etype is EntryType.DIR:
                frontier.append(ch.id)
    return out


def run_query(store: "Store", q: QuerySpec, now: Optional[int] = None) -> list[EntryRecord]:
    if q.limit == 0:
        return []
    if now is None:
        now = int(time.time())
    where, params = "", []
    if q.filter is not None:
        pushed = to_sql(q.filter, now)
        if pushed is not None:
            where, params = pushed[0], pushed[1]
    candidates = store.iter_entries(where, params)
    if q.under is not None:
        root = store.get(q.under)
        if root is None:
            return []
        if not root.is_root:
            allowed = descendants(store, q.under)
            candidates = (e for e in candidates if e.id in allowed)
        else:
            candidates = (e for e in candidates if not e.is_root)
    paths = PathCache(store)
    want_path = q.sort == "path" or (q.filter is not None and needs_path(q.filter))
    hits: list[tuple[EntryRecord, str]] = []
    for e in candidates:
        p = paths.path(e) if want_path else ""
        if q.filter is None or evaluate(q.filter, e, now, p):
            hits.append((e, p))
    # candidates arrive fid-ordered; a stable sort keeps fid as the tiebreak
    if q.sort != "fid":
        hits.sort(key=_sort_key(q.sort), reverse=q.descending)
    elif q.descending:
        hits.reverse()
    out = [e for e, _ in hits[q.offset:]]
    return out if q.limit is None else out[:q.limit]


def _sort_key(key: str):
    if key == "path":
        return lambda t: t[1]
    if key == "name":
        return lambda t: t[0].name
    return lambda t: getattr(t[0], key)
