"""Parallel namespace scan with depth-first priority, partitioning and eviction.

Workers share one task pool whose pop always returns the deepest pending
directory. Each listed directory's children are stat'ed and written to the
mirror before their own directories become tasks, so parents are always in
the mirror ahead of their children.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from metahood.core import EntryId, EntryRecord, EntryType, MetahoodError, stable_hash
from metahood.simfs.source import EntryVanished, FsSource, SourceError
from metahood.store.sqlite import Store

log = logging.getLogger(__name__)

DEFAULT_BATCH = 1000
SCAN_STATE = "scan_state"
SCAN_GEN = "scan_gen"


class ScanError(MetahoodError):
    pass


class FinalizeRefused(ScanError):
    pass


@dataclass(frozen=True, slots=True)
class ScanTask:
    dir_id: EntryId
    depth: int
    # name of the top-level directory this task lives under ("" for the root)
    top: str = ""


@dataclass
class ScanReport:
    generation: int
    entries_seen: int = 0
    dirs_read: int = 0
    errors: int = 0
    wall_time: float = 0.0
    per_worker: list[int] = field(default_factory=list)
    partition: tuple[int, int] = (0, 1)
    read_dirs: list[EntryId] = field(default_factory=list)
    error_messages: list[str] = field(default_factory=list)
    # (worker, popped depth, deepest pending depth at the moment of the pop)
    trace: list[tuple[int, int, int]] = field(default_factory=list)


@dataclass
class EvictionReport:
    generation: int
    files: int = 0
    dirs: int = 0
    symlinks: int = 0

    @property
    def total(self) -> int:
        return self.files + self.dirs + self.symlinks


class TaskPool:
    """Max-depth priority pool; pop blocks until a task arrives or all work is done."""

    def __init__(self, record_trace: bool = False):
        self._heap: list[tuple[int, int, ScanTask]] = []
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._active = 0
        self._closed = False
        self.record_trace = record_trace
        self.trace: list[tuple[int, int, int]] = []

    def push(self, task: ScanTask) -> None:
        with self._cond:
            heapq.heappush(self._heap, (-task.depth, next(self._seq), task))
            self._cond.notify()

    def pop(self, worker: int = 0) -> Optional[ScanTask]:
        with self._cond:
            while not self._heap:
                if self._active == 0 or self._closed:
                    self._closed = True
                    self._cond.notify_all()
                    return None
                self._cond.wait()
            deepest = -self._heap[0][0]
            _, _, task = heapq.heappop(self._heap)
            if self.record_trace:
                self.trace.append((worker, task.depth, deepest))
            self._active += 1
            return task

    def done(self) -> None:
        with self._cond:
            self._active -= 1
            if self._active == 0 and not self._heap:
                self._cond.notify_all()

    def __len__(self) -> int:
        with self._cond:
            return len(self._heap)


def partition_filter(root: EntryId, k: int, i: int) -> Callable[[ScanTask], bool]:
    """Which tasks instance ``i`` of ``k`` handles.

    Top-level subtrees are split by a stable hash of their name; the root
    itself (and so the metadata of its immediate children) belongs to
    instance 0.
    """
    if not 0 <= i < k:
        raise ValueError(f"partition index {i} not in [0, {k})")
    if k == 1:
        return lambda task: True

    def accept(task: ScanTask) -> bool:
        if task.depth == 0 or task.dir_id == root:
            return i == 0
        return stable_hash(task.top) % k == i

    return accept


def _begin_generation(store: Store, k: int, i: int) -> int:
    with store.txn() as t:
        state = t.meta_get(SCAN_STATE)
        last = int(t.meta_get(SCAN_GEN, 0))
        if (k > 1 and state and state["k"] == k and not state.get("finalized")
                and str(i) not in state["reports"] and len(state["reports"]) < k):
            return int(state["gen"])
        g = last + 1
        t.meta_set(SCAN_GEN, g)
        t.meta_set(SCAN_STATE, {"gen": g, "k": k, "reports": {}})
        return g


def _end_generation(store: Store, g: int, i: int, errors: int) -> None:
    with store.txn() as t:
        state = t.meta_get(SCAN_STATE)
        if not state or state["gen"] != g:
            return
        state["reports"][str(i)] = errors
        t.meta_set(SCAN_STATE, state)


def scan(src: FsSource, store: Store, workers: int = 4, *, partition: tuple[int, int] = (0, 1),
         batch: int = DEFAULT_BATCH, record_trace: bool = False) -> ScanReport:
    """Mirror everything reachable from ``src.root()`` with a fresh generation."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    i, k = partition
    accept = partition_filter(src.root(), k, i)
    t0 = time.monotonic()
    g = _begin_generation(store, k, i)
    report = ScanReport(generation=g, per_worker=[0] * workers, partition=(i, k))
    lock = threading.Lock()
    pool = TaskPool(record_trace)

    def note_error(msg: str) -> None:
        with lock:
            report.errors += 1
            report.error_messages.append(msg)
        log.warning("scan: %s", msg)

    def write(recs: list[EntryRecord]) -> None:
        for start in range(0, len(recs), batch):
            with store.txn() as t:
                for rec in recs[start:start + batch]:
                    t.upsert(rec.evolve(md_gen=g, dirty_mask=0))

    root_id = src.root()
    try:
        root = src.stat(root_id)
    except SourceError as exc:
        raise ScanError(f"cannot stat the scan root: {exc}") from exc
    write([root])
    if accept(ScanTask(root_id, 0)):
        pool.push(ScanTask(root_id, 0))
    else:
        # other partitions find their subtrees from an uncounted root listing
        try:
            listing = src.readdir(root_id)
        except SourceError as exc:
            raise ScanError(f"cannot list the scan root: {exc}") from exc
        mine = []
        for name, fid in listing:
            task = ScanTask(fid, 1, name)
            if not accept(task):
                continue
            try:
                rec = src.stat(fid)
            except SourceError as exc:
                note_error(f"stat {fid}: {exc}")
                continue
            if rec.etype is EntryType.DIR:
                mine.append(rec)
                pool.push(task)
        write(mine)

    def work(w: int) -> None:
        while True:
            task = pool.pop(w)
            if task is None:
                return
            try:
                _read_dir(task, w)
            except Exception as exc:  # keep the pool draining; the scan is reported partial
                note_error(f"directory {task.dir_id}: {exc}")
            finally:
                pool.done()

    def _read_dir(task: ScanTask, w: int) -> None:
        try:
            listing = src.readdir(task.dir_id)
        except EntryVanished as exc:
            note_error(f"vanished during scan: {exc.entry_id}")
            return
        except SourceError as exc:
            note_error(f"readdir {task.dir_id}: {exc}")
            return
        recs = []
        subtasks = []
        for name, fid in listing:
            try:
                rec = src.stat(fid)
            except SourceError as exc:
                note_error(f"stat {fid}: {exc}")
                continue
            recs.append(rec)
            if rec.etype is EntryType.DIR:
                sub = ScanTask(fid, task.depth + 1, name if task.depth == 0 else task.top)
                if accept(sub):
                    subtasks.append(sub)
        write(recs)
        with lock:
            report.dirs_read += 1
            report.entries_seen += len(listing)
            report.per_worker[w] += 1
            report.read_dirs.append(task.dir_id)
        for sub in subtasks:
            pool.push(sub)

    if workers == 1:
        work(0)
    else:
        threads = [threading.Thread(target=work, args=(w,), name=f"scan-{w}") for w in range(workers)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    _end_generation(store, g, i, report.errors)
    report.wall_time = time.monotonic() - t0
    report.trace = pool.trace
    return report


def finalize_scan(store: Store, g: Optional[int] = None, *, now: Optional[int] = None) -> EvictionReport:
    """Evict entries not seen by generation ``g`` (default: the latest).

    Files become soft-rm rows; directories and symlinks are dropped. Refused
    unless every partition of the generation reported a clean scan.
    """
    state = store.meta_get(SCAN_STATE)
    if not state:
        raise FinalizeRefused("no scan has been recorded")
    if g is None:
        g = int(state["gen"])
    if int(state["gen"]) != g:
        raise FinalizeRefused(f"generation {g} is not the latest scan ({state['gen']})")
    reports = state["reports"]
    if len(reports) < state["k"]:
        raise FinalizeRefused(f"only {len(reports)} of {state['k']} partitions reported for generation {g}")
    bad = sum(int(v) for v in reports.values())
    if bad:
        raise FinalizeRefused(f"generation {g} had {bad} scan error(s); refusing to evict")
    if now is None:
        now = int(time.time())
    out = EvictionReport(g)
    stale = list(store.iter_entries("md_gen < ?", (g,)))
    with store.txn() as t:
        depth = {e.id: (t.tree_depth(e.id) or 0) for e in stale}
        stale.sort(key=lambda e: (-depth[e.id], str(e.id)))
        for e in stale:
            if e.etype is EntryType.DIR:
                # children the scan did see must already have moved away
                if t.remove(e.id):
                    out.dirs += 1
            elif t.remove(e.id, to_softrm=e.etype is EntryType.FILE, rm_time=now):
                if e.etype is EntryType.FILE:
                    out.files += 1
                else:
                    out.symlinks += 1
        state["finalized"] = True
        t.meta_set(SCAN_STATE, state)
    return out
