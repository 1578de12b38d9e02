"""Staged, concurrency-limited changelog consumer.

Stages, each with its own worker count and bounded input queue::

    parse -> [sequencer] -> store_lookup -> fs_enrich -> [dispatcher] -> apply_commit lanes

The sequencer puts parsed lines back in stream order, drops records at or
below the acknowledgment cursor, quarantines malformed or out-of-order lines
and registers each surviving record with a dependency gate. The dispatcher
restores that order again and hands each record to the commit lane chosen by
its fid. A lane commits a record only once every earlier record sharing an id
with it has committed; directory renames and removals wait for everything
before them and hold back everything after them.

Each record commits in its own transaction together with its ``applied`` row
and the cursor advance, so the cursor never runs ahead of the mirror.
"""

from __future__ import annotations

import heapq
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Literal, Optional, TextIO

from metahood.core import EntryId, EntryType, MetahoodError
from metahood.ingest.apply import ApplyCounters, apply_in_txn, fetch_stat, needs_stat
from metahood.ingest.records import ChangelogRecord, RecordType, parse_record
from metahood.simfs.source import FsSource
from metahood.store.model import TxnConflict
from metahood.store.sqlite import Store, Txn

log = logging.getLogger(__name__)

POLL_INTERVAL = 0.2
CURSOR = "cursor"
STAGES = ("parse", "store_lookup", "fs_enrich", "apply_commit")


class IngestError(MetahoodError):
    pass


class CursorGap(IngestError):
    """The stream does not continue from the acknowledgment cursor."""


class IngestInterrupted(IngestError):
    """A commit failed; everything committed before it stays acknowledged."""

    def __init__(self, message: str, report: "IngestReport"):
        super().__init__(message)
        self.report = report


@dataclass
class PipelineConfig:
    parse: int = 4
    store_lookup: int = 4
    fs_enrich: int = 4
    apply_commit: int = 4
    batch: int = 256
    mode: Literal["sync", "dirty-tag"] = "sync"

    def __post_init__(self) -> None:
        for name in (*STAGES, "batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} limit must be >= 1")
        if self.mode not in ("sync", "dirty-tag"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def uniform(cls, n: int, **kw) -> "PipelineConfig":
        return cls(parse=n, store_lookup=n, fs_enrich=n, apply_commit=n, **kw)


@dataclass
class IngestReport:
    cursor_before: int = 0
    cursor_after: int = 0
    lines: int = 0
    applied: int = 0
    skipped: int = 0
    dropped: int = 0
    rejected: int = 0
    warnings: int = 0
    elapsed: float = 0.0
    # (index, fid) in commit order, when tracing
    trace: list[tuple[int, EntryId]] = field(default_factory=list)
    # most items seen inside each stage at once
    peak_in_flight: dict[str, int] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return (self.applied + self.skipped) / self.elapsed if self.elapsed > 0 else 0.0


@dataclass(slots=True)
class _Item:
    seq: int  # position among non-blank input lines
    line: str
    rec: Optional[ChangelogRecord] = None
    error: Optional[str] = None
    order: int = -1  # position among records that survived sequencing
    link: int = 0
    want_stat: bool = False
    stat: object = None


_STOP = object()


class _Stopped(Exception):
    pass


class DependencyGate:
    """Lets an item commit only after the earlier items it depends on have."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._last: dict[EntryId, int] = {}
        self._last_barrier: Optional[int] = None
        self._outstanding: set[int] = set()
        self._deps: dict[int, set[int]] = {}

    @staticmethod
    def is_barrier(rec: ChangelogRecord, mirrored_type: Optional[EntryType]) -> bool:
        if rec.rtype is RecordType.RMDIR:
            return True
        return rec.rtype is RecordType.RENME and mirrored_type is not EntryType.FILE

    def register(self, n: int, keys: Iterable[EntryId], barrier: bool) -> None:
        """Must be called in stream order."""
        with self._cond:
            if barrier:
                deps = set(self._outstanding)
                self._last_barrier = n
            else:
                deps = {self._last[k] for k in keys if k in self._last}
                if self._last_barrier is not None:
                    deps.add(self._last_barrier)
            for k in keys:
                self._last[k] = n
            self._deps[n] = deps & self._outstanding
            self._outstanding.add(n)

    def wait(self, n: int, halt: threading.Event) -> None:
        with self._cond:
            while self._deps[n] & self._outstanding:
                if halt.is_set():
                    raise _Stopped
                self._cond.wait(0.1)

    def complete(self, n: int) -> None:
        with self._cond:
            self._outstanding.discard(n)
            self._deps.pop(n, None)
            if self._last_barrier == n:
                self._last_barrier = None
            self._cond.notify_all()


class _Queue:
    """Bounded queue whose blocking calls give up once the run halts."""

    def __init__(self, maxsize: int, halt: threading.Event):
        self._q: queue.Queue = queue.Queue(maxsize)
        self._halt = halt

    def put(self, item) -> None:
        while True:
            if self._halt.is_set():
                raise _Stopped
            try:
                self._q.put(item, timeout=0.05)
                return
            except queue.Full:
                continue

    def get(self):
        while True:
            if self._halt.is_set():
                raise _Stopped
            try:
                return self._q.get(timeout=0.05)
            except queue.Empty:
                continue


def advance_cursor(t: Txn, idx: int, link: int) -> int:
    """Record ``idx`` as applied and walk the cursor over every contiguous link."""
    t.execute("INSERT OR IGNORE INTO applied (idx, prev) VALUES (?, ?)", (idx, link))
    start = cur = int(t.meta_get(CURSOR, 0))
    while True:
        row = t.execute("SELECT idx FROM applied WHERE prev = ? ORDER BY idx LIMIT 1", (cur,)).fetchone()
        if row is None:
            break
        cur = row[0]
    if cur != start:
        t.meta_set(CURSOR, cur)
        t.execute("DELETE FROM applied WHERE idx <= ?", (cur,))
    return cur


def applied_above_cursor(store: Store) -> set[int]:
    with store.txn() as t:
        return {r[0] for r in t.execute("SELECT idx FROM applied")}


class _Run:
    """State for one ``consume`` call."""

    def __init__(self, store: Store, src: Optional[FsSource], cfg: PipelineConfig, reject_path, trace: bool,
                 fault: Optional[Callable[[ChangelogRecord], None]], stop: threading.Event):
        self.store, self.src, self.cfg = store, src, cfg
        self.reject_path = reject_path
        self.want_trace = trace
        self.fault = fault
        self.stop = stop
        self.halt = threading.Event()
        self.lock = threading.Lock()
        self.failure: Optional[BaseException] = None
        self.cursor0 = store.cursor
        self.already = applied_above_cursor(store)
        self.report = IngestReport(cursor_before=self.cursor0, cursor_after=self.cursor0,
                                   peak_in_flight={s: 0 for s in STAGES})
        self.in_flight = {s: 0 for s in STAGES}
        self.gate = DependencyGate()
        self._reject_fh: Optional[TextIO] = None
        h = self.halt
        self.parse_q = _Queue(cfg.parse, h)
        self.seq_q = _Queue(cfg.parse, h)
        self.lookup_q = _Queue(cfg.store_lookup, h)
        self.enrich_q = _Queue(cfg.fs_enrich, h)
        self.disp_q = _Queue(cfg.fs_enrich, h)
        self.lanes = [_Queue(cfg.apply_commit, h) for _ in range(cfg.apply_commit)]

    # -- bookkeeping -------------------------------------------------------

    def _enter(self, stage: str) -> None:
        with self.lock:
            self.in_flight[stage] += 1
            if self.in_flight[stage] > self.report.peak_in_flight[stage]:
                self.report.peak_in_flight[stage] = self.in_flight[stage]

    def _leave(self, stage: str) -> None:
        with self.lock:
            self.in_flight[stage] -= 1

    def _fail(self, exc: BaseException) -> None:
        with self.lock:
            if self.failure is None:
                self.failure = exc
        self.halt.set()

    def _reject(self, item: _Item, reason: str) -> None:
        with self.lock:
            self.report.rejected += 1
            if self.reject_path is not None:
                if self._reject_fh is None:
                    self._reject_fh = open(self.reject_path, "a", encoding="utf-8")
                self._reject_fh.write(f"# reason={reason}\n{item.line.rstrip(chr(10))}\n")
                self._reject_fh.flush()
        log.warning("ingest: rejected input line %d: %s", item.seq + 1, reason)

    def _guard(self, body: Callable[[], None]) -> Callable[[], None]:
        def run() -> None:
            try:
                body()
            except _Stopped:
                pass
            except BaseException as exc:
                self._fail(exc)
        return run

    # -- stages ------------------------------------------------------------

    def reader(self, stream: Iterable[str]) -> None:
        n = 0
        for line in stream:
            if self.stop.is_set() or self.halt.is_set():
                break
            if not line.strip():
                continue
            self.parse_q.put(_Item(n, line))
            n += 1
            with self.lock:
                self.report.lines = n
        for _ in range(self.cfg.parse):
            self.parse_q.put(_STOP)

    def pool(self, stage: str, n: int, inq: _Queue, outq: _Queue, fn: Callable[[_Item], None],
             stops_out: int) -> list[Callable[[], None]]:
        left = [n]

        def worker() -> None:
            while True:
                item = inq.get()
                if item is _STOP:
                    break
                self._enter(stage)
                try:
                    fn(item)
                finally:
                    self._leave(stage)
                outq.put(item)
            with self.lock:
                left[0] -= 1
                last = left[0] == 0
            if last:
                for _ in range(stops_out):
                    outq.put(_STOP)

        return [worker] * n

    def do_parse(self, item: _Item) -> None:
        try:
            item.rec = parse_record(item.line)
        except ValueError as exc:  # parse errors and bad ids are ValueErrors
            item.error = str(exc) or "malformed line"

    def do_lookup(self, item: _Item) -> None:
        item.want_stat = needs_stat(item.rec, self.store.get(item.rec.fid), self.cfg.mode)

    def do_enrich(self, item: _Item) -> None:
        if item.want_stat:
            item.stat = fetch_stat(self.src, item.rec.fid)

    def sequencer(self) -> None:
        heap: list[tuple[int, _Item]] = []
        expected = 0
        order = 0
        prev: Optional[int] = None
        while True:
            item = self.seq_q.get()
            if item is _STOP:
                break
            heapq.heappush(heap, (item.seq, item))
            while heap and heap[0][0] == expected:
                _, it = heapq.heappop(heap)
                expected += 1
                prev, keep = self._sequence(it, prev)
                if keep:
                    it.order = order
                    order += 1
                    rec = it.rec
                    mirrored = self.store.get(rec.fid) if rec.rtype is RecordType.RENME else None
                    barrier = DependencyGate.is_barrier(rec, mirrored.etype if mirrored else None)
                    self.gate.register(it.order, rec.keys(), barrier)
                    self.lookup_q.put(it)
        assert not heap, "parse stage lost items"
        for _ in range(self.cfg.store_lookup):
            self.lookup_q.put(_STOP)

    def _sequence(self, item: _Item, prev: Optional[int]) -> tuple[Optional[int], bool]:
        if item.rec is None:
            self._reject(item, item.error or "malformed line")
            return prev, False
        idx = item.rec.index
        if idx <= self.cursor0 or idx in self.already:
            with self.lock:
                self.report.dropped += 1
            return (idx if prev is None or idx > prev else prev), False
        if prev is not None and idx <= prev:
            self._reject(item, f"non-monotonic index {idx} after {prev}")
            return prev, False
        if prev is None and self.cursor0 > 0 and idx != self.cursor0 + 1:
            raise CursorGap(f"stream resumes at index {idx} but the cursor is at {self.cursor0}")
        item.link = prev if prev is not None and prev > self.cursor0 else self.cursor0
        return idx, True

    def dispatcher(self) -> None:
        heap: list[tuple[int, _Item]] = []
        expected = 0
        n = len(self.lanes)
        while True:
            item = self.disp_q.get()
            if item is _STOP:
                break
            heapq.heappush(heap, (item.order, item))
            while heap and heap[0][0] == expected:
                _, it = heapq.heappop(heap)
                expected += 1
                self.lanes[hash(it.rec.fid) % n].put(it)
        assert not heap, "pipeline lost items"
        for lane in self.lanes:
            lane.put(_STOP)

    def committer(self, lane: _Queue) -> None:
        while True:
            item = lane.get()
            if item is _STOP:
                return
            self.gate.wait(item.order, self.halt)
            self._enter("apply_commit")
            try:
                self._commit(item)
            finally:
                self._leave("apply_commit")
            self.gate.complete(item.order)

    def _commit(self, item: _Item) -> None:
        rec = item.rec
        for attempt in range(5):
            local = ApplyCounters()
            try:
                with self.store.txn() as t:
                    apply_in_txn(t, rec, stat=item.stat if item.want_stat else None, src=self.src,
                                 mode=self.cfg.mode, counters=local)
                    cur = advance_cursor(t, rec.index, item.link)
                    if self.fault is not None:
                        self.fault(rec)
                break
            except TxnConflict:
                if attempt == 4:
                    raise
                time.sleep(0.01 * (attempt + 1))
        with self.lock:
            r = self.report
            r.applied += local.applied
            r.skipped += local.skipped
            r.warnings += local.warnings
            r.cursor_after = max(r.cursor_after, cur)
            if self.want_trace:
                r.trace.append((rec.index, rec.fid))

    # -- driver ------------------------------------------------------------

    def run(self, stream: Iterable[str]) -> IngestReport:
        cfg = self.cfg
        t0 = time.monotonic()
        bodies: list[tuple[str, Callable[[], None]]] = [("reader", lambda: self.reader(stream))]
        bodies += [("parse", b) for b in self.pool("parse", cfg.parse, self.parse_q, self.seq_q, self.do_parse, 1)]
        bodies.append(("sequencer", self.sequencer))
        bodies += [("lookup", b) for b in self.pool("store_lookup", cfg.store_lookup, self.lookup_q,
                                                     self.enrich_q, self.do_lookup, cfg.fs_enrich)]
        bodies += [("enrich", b) for b in self.pool("fs_enrich", cfg.fs_enrich, self.enrich_q, self.disp_q,
                                                     self.do_enrich, 1)]
        bodies.append(("dispatcher", self.dispatcher))
        bodies += [("commit", (lambda lane=lane: self.committer(lane))) for lane in self.lanes]
        threads = [threading.Thread(target=self._guard(b), name=f"ingest-{name}-{i}", daemon=True)
                   for i, (name, b) in enumerate(bodies)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if self._reject_fh is not None:
            self._reject_fh.close()
        self.report.cursor_after = max(self.report.cursor_after, self.store.cursor)
        self.report.elapsed = time.monotonic() - t0
        if self.failure is not None:
            if isinstance(self.failure, CursorGap):
                raise self.failure
            raise IngestInterrupted(f"ingest stopped: {self.failure}", self.report) from self.failure
        return self.report


def consume(stream: Iterable[str], store: Store, src: Optional[FsSource] = None,
            cfg: Optional[PipelineConfig] = None, *, reject_path: Optional[str | os.PathLike] = None,
            trace: bool = False, fault: Optional[Callable[[ChangelogRecord], None]] = None,
            stop: Optional[threading.Event] = None) -> IngestReport:
    """Run the lines of ``stream`` through the pipeline into ``store``.

    ``fault`` is called inside each commit transaction just before it
    commits and may raise to simulate a crash there. ``stop`` ends the run
    early (used by follow mode). Either way everything already committed
    stays acknowledged and a rerun picks up after it.
    """
    run = _Run(store, src, cfg or PipelineConfig(), reject_path, trace, fault, stop or threading.Event())
    return run.run(stream)


def read_lines(path: str | os.PathLike) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        yield from fh


def follow_lines(path: str | os.PathLike, stop: threading.Event, poll: float = POLL_INTERVAL) -> Iterator[str]:
    """Tail ``path`` and yield complete lines until ``stop`` is set."""
    buf = ""
    with open(path, encoding="utf-8") as fh:
        while not stop.is_set():
            chunk = fh.readline()
            if chunk:
                buf += chunk
                if buf.endswith("\n"):
                    yield buf
                    buf = ""
                continue
            stop.wait(poll)


def follow(path: str | os.PathLike, store: Store, src: Optional[FsSource] = None,
           cfg: Optional[PipelineConfig] = None, stop: Optional[threading.Event] = None, **kw) -> IngestReport:
    stop = stop or threading.Event()
    return consume(follow_lines(path, stop), store, src, cfg, stop=stop, **kw)
