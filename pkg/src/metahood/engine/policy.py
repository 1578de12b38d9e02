"""Policy runs: candidate selection, LRU ordering, rule matching and dispatch."""

from __future__ import annotations

import logging
import math
import os
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from metahood.core import EntryId, EntryRecord, EntryType, HsmState, MetahoodError, encode_name
from metahood.engine.actions import ActionContext, ActionResult, get_action
from metahood.engine.triggers import TriggerStatus
from metahood.policyspec.config import Policy, Rule
from metahood.policyspec.expr import And, Compare, Expression, Not, Or, evaluate
from metahood.simfs.backend import HsmBackend
from metahood.store.model import QuerySpec, ShardUnavailable, StoreError
from metahood.store.query import PathCache
from metahood.store.sqlite import Store

log = logging.getLogger(__name__)

EXIT_COMPLETE = 0
EXIT_FAILURES = 2
EXIT_ABORTED = 3

_run_locks: dict[str, threading.Lock] = {}
_run_locks_guard = threading.Lock()


def _policy_lock(name: str) -> threading.Lock:
    with _run_locks_guard:
        return _run_locks.setdefault(name, threading.Lock())


def iso8601(ts: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ts))


@dataclass
class ActionOutcome:
    fid: EntryId
    path: str
    rule: str
    action: str
    result: ActionResult
    size: int = 0


@dataclass
class PolicyRun:
    policy: str
    trigger: Optional[TriggerStatus] = None
    dry_run: bool = False
    # eligible candidates in LRU order (each has a matching rule)
    eligible: list[EntryId] = field(default_factory=list)
    outcomes: list[ActionOutcome] = field(default_factory=list)
    done: int = 0
    skipped: int = 0
    failed: int = 0
    volume: int = 0
    projected_start: int = 0
    projected_end: int = 0
    stop_reason: str = "candidates exhausted"
    aborted: bool = False

    @property
    def actioned(self) -> list[EntryId]:
        return [o.fid for o in self.outcomes if o.result.status == "done"]

    @property
    def exit_code(self) -> int:
        if self.aborted:
            return EXIT_ABORTED
        return EXIT_FAILURES if self.failed else EXIT_COMPLETE

    def summary(self) -> str:
        mode = " (dry run)" if self.dry_run else ""
        return (f"policy {self.policy}{mode}: eligible={len(self.eligible)} done={self.done} "
                f"skipped={self.skipped} failed={self.failed} volume={self.volume} stop={self.stop_reason}")


def candidate_filter(policy: Policy, trigger: Optional[TriggerStatus]) -> Optional[Expression]:
    """scope AND (some rule) AND NOT (some ignore), narrowed to the triggering OST."""
    parts: list[Expression] = []
    if policy.scope is not None:
        parts.append(policy.scope)
    effs = [r.effective for r in policy.rules]
    if all(e is not None for e in effs):
        parts.append(effs[0] if len(effs) == 1 else Or(tuple(effs)))
    if policy.ignore:
        ign = policy.ignore
        parts.append(Not(ign[0] if len(ign) == 1 else Or(tuple(ign))))
    if trigger is not None and trigger.trigger.kind == "ost_usage" and trigger.target is not None:
        parts.append(Compare("ost_index", "==", int(trigger.target)))
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else And(tuple(parts))


def first_rule(policy: Policy, entry: EntryRecord, now: int, path: str) -> Optional[Rule]:
    for r in policy.rules:
        if r.effective is None or evaluate(r.effective, entry, now, path):
            return r
    return None


def freed_on(entry: EntryRecord, osts: tuple[int, ...]) -> int:
    """Bytes an entry occupies on the given OSTs (its striped allocation)."""
    if entry.etype is not EntryType.FILE or entry.hsm is HsmState.RELEASED or not entry.ost_set:
        return 0
    per = math.ceil(entry.size / len(entry.ost_set))
    return per * sum(1 for i in entry.ost_set if i in osts)


def _freed(entry: EntryRecord, trigger: Optional[TriggerStatus]) -> int:
    if trigger is None:
        return 0
    kind = trigger.trigger.kind
    if trigger.trigger.is_usage:
        return freed_on(entry, trigger.osts)
    if entry.owner != trigger.target:
        return 0
    return entry.size if kind == "user_volume" else 1


def run_policy(policy: Policy, store: Store, fs, backend: Optional[HsmBackend] = None, *,
               trigger: Optional[TriggerStatus] = None, dry_run: bool = False, now: Optional[int] = None,
               audit_path: Optional[str | os.PathLike] = None, max_actions: Optional[int] = None,
               max_volume: Optional[int] = None, workers: Optional[int] = None) -> PolicyRun:
    """Run ``policy`` once. Only one run per policy name executes at a time."""
    with _policy_lock(policy.name):
        return _run(policy, store, fs, backend, trigger, dry_run, now, audit_path,
                    policy.max_actions if max_actions is None else max_actions,
                    policy.max_volume if max_volume is None else max_volume,
                    policy.max_concurrent_actions if workers is None else workers)


def _run(policy: Policy, store: Store, fs, backend, trigger, dry_run, now, audit_path, max_actions, max_volume,
         workers) -> PolicyRun:
    if now is None:
        now = fs.now() if fs is not None and hasattr(fs, "now") else int(time.time())
    if backend is None:
        backend = getattr(fs, "backend", None)
    run = PolicyRun(policy.name, trigger, dry_run)
    # usage kinds stop at the low watermark; user kinds too, in their own unit
    projected = trigger.used if trigger is not None else 0
    low = trigger.low_mark() if trigger is not None else None
    run.projected_start = projected
    try:
        cands = store.query(QuerySpec(filter=candidate_filter(policy, trigger), sort="atime"), now)
    except (ShardUnavailable, StoreError) as exc:
        log.error("policy %s aborted: %s", policy.name, exc)
        run.aborted, run.stop_reason = True, f"store unavailable: {exc}"
        return run
    paths = PathCache(store)
    in_flight: list[tuple[ActionOutcome, int, Future]] = []
    pool = ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix=f"policy-{policy.name}")
    slots = threading.BoundedSemaphore(max(1, workers))
    dispatched = 0
    abort: list[BaseException] = []

    def settle() -> None:
        """Wait for every in-flight action and fold its result in."""
        nonlocal projected
        for out, freed, fut in in_flight:
            try:
                out.result = fut.result()
            except (ShardUnavailable, StoreError) as exc:
                abort.append(exc)
                out.result = ActionResult("failed", str(exc))
            except MetahoodError as exc:  # includes source errors and refused transitions
                out.result = ActionResult("failed", str(exc))
            except Exception as exc:  # a plugin bug must not take the run down
                log.exception("action %s on %s raised", out.action, out.fid)
                out.result = ActionResult("failed", f"{type(exc).__name__}: {exc}")
            _tally(run, out)
            if out.result.status != "done":
                projected += freed
                run.volume -= out.size
        in_flight.clear()

    def execute(plugin, entry, ctx) -> ActionResult:
        try:
            return plugin.apply(entry, ctx)
        finally:
            slots.release()

    try:
        for snap in cands:
            # earlier actions in this run may have changed or removed it
            entry = store.get(snap.id)
            if entry is None:
                continue
            path = paths.path(entry)
            rule = first_rule(policy, entry, now, path)
            if rule is None:
                continue
            run.eligible.append(entry.id)
            if low is not None and projected <= low:
                settle()
                if projected <= low:
                    run.stop_reason = "low watermark reached"
                    break
            if abort:
                break
            if max_actions is not None and dispatched >= max_actions:
                run.stop_reason = "max_actions reached"
                break
            if max_volume is not None and run.volume + entry.size > max_volume:
                run.stop_reason = "max_volume reached"
                break
            plugin = get_action(rule.action.name)
            ctx = ActionContext(store, fs, backend, dict(rule.action.params), path)
            out = ActionOutcome(entry.id, path, rule.name, rule.action.name, ActionResult("skipped"), entry.size)
            reason = plugin.precheck(entry, ctx)
            if reason is not None:
                out.result = ActionResult("skipped", reason)
                out.size = 0
                run.outcomes.append(out)
                _tally(run, out)
                continue
            freed = _freed(entry, trigger) if plugin.frees_space else 0
            projected -= freed
            run.volume += entry.size
            dispatched += 1
            run.outcomes.append(out)
            if dry_run:
                out.result = ActionResult("done", "dry run")
                _tally(run, out)
                continue
            slots.acquire()
            in_flight.append((out, freed, pool.submit(execute, plugin, entry, ctx)))
            if len(in_flight) >= 64:
                settle()
        settle()
    finally:
        pool.shutdown(wait=True)
    if abort:
        run.aborted = True
        run.stop_reason = f"store unavailable: {abort[0]}"
    run.projected_end = projected
    if audit_path is not None and not dry_run:
        write_audit(audit_path, run, now)
    log.info("%s", run.summary())
    return run


def _tally(run: PolicyRun, out: ActionOutcome) -> None:
    s = out.result.status
    if s == "done":
        run.done += 1
    elif s == "skipped":
        run.skipped += 1
    else:
        run.failed += 1


def audit_lines(run: PolicyRun, now: int) -> list[str]:
    stamp = iso8601(now)
    return [f"{stamp} {run.policy} {o.rule} {o.action} {o.fid} {encode_name(o.path)} {encode_name(str(o.result))}"
            for o in run.outcomes]


def write_audit(path: str | os.PathLike, run: PolicyRun, now: int) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for line in audit_lines(run, now):
            fh.write(line + "\n")
