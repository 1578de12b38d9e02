"""Command-line interface.

Exit codes: 0 success, 1 internal error, 2 partial success, 64 usage or
configuration error. A policy run exits with the run's own code (0, 2, or 3
when aborted).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

from metahood import aggregates
from metahood.core import (
    BUCKET_LABELS,
    EntryRecord,
    EntryType,
    MetahoodError,
    ParseError,
    format_human,
    parse_duration,
    parse_size,
)
from metahood.policyspec.config import ConfigError, PolicyConfig, load_config
from metahood.policyspec.expr import And, Compare, Expression, parse_expression
from metahood.store.model import SORT_KEYS, QuerySpec, StoreError
from metahood.store.query import PathCache
from metahood.store.sqlite import Store, open_store

log = logging.getLogger("metahood")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_PARTIAL = 2
EXIT_USAGE = 64


class UsageError(MetahoodError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; we reserve 2 for partial success
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


@dataclass
class Table:
    columns: list[str]
    rows: list[list]
    text: Optional[str] = None  # pre-rendered text form, when it differs from the default


def render(table: Table, fmt: str) -> str:
    if fmt == "json":
        return json.dumps([dict(zip(table.columns, r)) for r in table.rows], indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table.columns)
        w.writerows(table.rows)
        return buf.getvalue()
    if table.text is not None:
        return table.text
    lines = [",".join(table.columns)] + [",".join(str(c) for c in r) for r in table.rows]
    return "\n".join(lines) + "\n"


def report_table(label: str, rows: Sequence[aggregates.ReportRow]) -> Table:
    """The per-type usage table: key, type, count, spc_used, avg_size."""
    w = max([len(label)] + [len(r.key) for r in rows])
    head = f"{label:<{w}},{'type':>9},{'count':>8},{'spc_used':>11},{'avg_size':>10}"
    body = [f"{r.key:<{w}},{r.type:>9},{r.count:>8},{format_human(r.space_used):>11},{format_human(r.avg_size):>10}"
            for r in rows]
    return Table([label, "type", "count", "spc_used", "avg_size"],
                 [[r.key, r.type, r.count, r.space_used, r.avg_size] for r in rows],
                 "\n".join([head] + body) + "\n")


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _open(args, *, create: bool = True) -> Store:
    if not args.db:
        raise UsageError("no database: pass --db or set METAHOOD_DB")
    if not create and not os.path.exists(args.db):
        raise UsageError(f"database {args.db} does not exist")
    return open_store(args.db, shards=args.shards, rollup_depth=args.rollup_depth)


def _config(args) -> PolicyConfig:
    if not args.config:
        raise UsageError("this command needs --config")
    return load_config(args.config)


def _load_sim(path: Optional[str], required: bool = True):
    from metahood.simfs.sim import SimFs

    if path is None:
        if required:
            raise UsageError("this command needs --sim STATE")
        return None
    return SimFs.load(path)


def _now(args, fs=None) -> int:
    if getattr(args, "now", None) is not None:
        return int(args.now)
    if fs is not None:
        return fs.now()
    return int(time.time())


def _out(args, table: Table) -> None:
    sys.stdout.write(render(table, args.format))


def _tree_depth(store: Store, e: EntryRecord) -> int:
    d = 0
    while not e.is_root:
        p = store.get(e.parent)
        if p is None:
            break
        e = p
        d += 1
    return d


def _resolve_root(store: Store, path: str) -> EntryRecord:
    e = store.lookup_path(path)
    if e is None:
        raise UsageError(f"{path}: not in the mirror")
    return e


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from metahood.core import GB
    from metahood.simfs.sim import SimConfig, create_namespace, random_workload

    cfg = SimConfig(seed=args.seed, ost_count=args.osts,
                    ost_capacity=parse_size(args.ost_capacity) if args.ost_capacity else 64 * GB,
                    stripe_count=args.stripe)
    fs = create_namespace(cfg, args.entries)
    if args.initial_state:
        fs.save(args.initial_state)
    recs = random_workload(fs, args.seed, args.ops)
    n = fs.write_changelog(args.out, recs)
    if args.state:
        fs.save(args.state)
    print(f"{len(fs)} entries, {n} changelog records written to {args.out}")
    return EXIT_OK


def cmd_scan(args) -> int:
    from metahood.scanner import FinalizeRefused, finalize_scan, scan

    store = _open(args)
    if args.posix:
        from metahood.simfs.posix import PosixSource

        src = PosixSource(args.posix)
    else:
        src = _load_sim(args.sim)
    i, k = args.partition
    rep = scan(src, store, args.threads, partition=(i, k), batch=args.batch)
    print(f"scan generation {rep.generation} partition {i}/{k}: {rep.entries_seen} entries, "
          f"{rep.dirs_read} directories, {rep.errors} errors, {rep.wall_time:.2f}s")
    for msg in rep.error_messages[:20]:
        print(f"  error: {msg}", file=sys.stderr)
    if args.finalize:
        try:
            ev = finalize_scan(store, rep.generation, now=src.now() if hasattr(src, "now") else None)
            print(f"evicted {ev.total} stale entries ({ev.files} files, {ev.dirs} dirs, {ev.symlinks} symlinks)")
        except FinalizeRefused as exc:
            print(f"finalize skipped: {exc}", file=sys.stderr)
            if rep.errors:
                return EXIT_PARTIAL
    return EXIT_PARTIAL if rep.errors else EXIT_OK


def cmd_finalize(args) -> int:
    from metahood.scanner import finalize_scan

    store = _open(args, create=False)
    ev = finalize_scan(store, args.generation, now=args.now)
    print(f"evicted {ev.total} stale entries ({ev.files} files, {ev.dirs} dirs, {ev.symlinks} symlinks)")
    return EXIT_OK


def cmd_ingest(args) -> int:
    from metahood.ingest.pipeline import CursorGap, IngestInterrupted, PipelineConfig, consume, follow, read_lines

    store = _open(args)
    src = _load_sim(args.sim, required=False)
    n = args.limits
    cfg = PipelineConfig(parse=args.parse or n, store_lookup=args.store_lookup or n, fs_enrich=args.fs_enrich or n,
                         apply_commit=args.apply_commit or n, mode=args.mode)
    try:
        if args.follow:
            stop = threading.Event()
            try:
                rep = follow(args.changelog, store, src, cfg, stop, reject_path=args.reject)
            except KeyboardInterrupt:
                stop.set()
                raise
        else:
            rep = consume(read_lines(args.changelog), store, src, cfg, reject_path=args.reject)
    except CursorGap as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IngestInterrupted as exc:
        print(f"error: {exc}; cursor at {exc.report.cursor_after}", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"ingested {rep.applied} records ({rep.skipped} skipped, {rep.dropped} already applied, "
          f"{rep.rejected} rejected, {rep.warnings} warnings); cursor {rep.cursor_before} -> {rep.cursor_after}; "
          f"{rep.rate:.0f} records/s")
    return EXIT_PARTIAL if rep.rejected else EXIT_OK


def cmd_update(args) -> int:
    from metahood.ingest.apply import updater_pass

    store = _open(args, create=False)
    fs = _load_sim(args.sim)
    n = updater_pass(store, fs, args.max)
    print(f"refreshed {n} entries; {store.pending_tags()} still tagged")
    return EXIT_OK


def cmd_report(args) -> int:
    store = _open(args, create=False)
    plot = args.plot
    if args.user is not None and not args.size_profile:
        t = report_table("user", aggregates.per_type_rows(store, "owner", args.user))
        if plot:
            from metahood.plotting import bar_chart

            bar_chart(plot, [r[1] for r in t.rows], [r[3] for r in t.rows], title=f"space used by {args.user}",
                      ylabel="bytes")
    elif args.group is not None:
        t = report_table("group", aggregates.per_type_rows(store, "group", args.group))
        if plot:
            from metahood.plotting import bar_chart

            bar_chart(plot, [r[1] for r in t.rows], [r[3] for r in t.rows], title=f"space used by group {args.group}",
                      ylabel="bytes")
    elif args.size_profile:
        hist = aggregates.size_profile(store, args.user)
        t = Table(["bucket", "count"], [[lab, n] for lab, n in zip(BUCKET_LABELS, hist)])
        w = max(len(s) for s in BUCKET_LABELS)
        t.text = "\n".join([f"{'bucket':<{w}},{'count':>10}"] + [f"{lab:<{w}},{n:>10}" for lab, n in t.rows]) + "\n"
        if plot:
            from metahood.plotting import bar_chart

            who = f" of {args.user}" if args.user else ""
            bar_chart(plot, list(BUCKET_LABELS), hist, title=f"file size profile{who}", ylabel="files")
    elif args.top_users is not None:
        by = args.by
        rng = None
        if by.startswith("range"):
            rng = _bucket_range(by)
            by = "range"
        elif by not in ("count", "volume", "avg"):
            raise UsageError(f"--by must be count, volume, avg or range LO:HI (got {args.by!r})")
        ranked = aggregates.top(store, by, args.top_users, rng)
        t = Table(["rank", "user", by], [[i + 1, u, round(v, 6)] for i, (u, v) in enumerate(ranked)])
        fmt = (lambda v: format_human(v)) if by in ("volume", "avg") else (
            (lambda v: f"{100 * v:.2f}%") if by == "range" else (lambda v: str(int(v))))
        w = max([4] + [len(u) for u, _ in ranked])
        t.text = "\n".join([f"{'rank':>4},{'user':<{w}},{by:>12}"]
                           + [f"{i + 1:>4},{u:<{w}},{fmt(v):>12}" for i, (u, v) in enumerate(ranked)]) + "\n"
        if plot:
            from metahood.plotting import bar_chart

            bar_chart(plot, [u for u, _ in ranked], [v for _, v in ranked], title=f"top users by {by}", ylabel=by)
    elif args.activity:
        act = aggregates.activity_totals(store)
        rows = []
        for scope in ("all", "owner", "jobid"):
            for key in sorted(act.get(scope, {})):
                for rtype, n in sorted(act[scope][key].items()):
                    rows.append([scope, key, rtype, n])
        t = Table(["scope", "key", "rtype", "count"], rows)
        t.text = "".join(f"{s},{k},{r}={n}\n" if s != "all" else f"{r}={n}\n" for s, k, r, n in rows)
        if plot:
            from metahood.plotting import bar_chart

            glob = [(r, n) for s, _k, r, n in rows if s == "all"]
            bar_chart(plot, [r for r, _ in glob], [n for _, n in glob], title="changelog activity", ylabel="records")
    elif args.status:
        t = _status_table(store)
        if plot:
            raise UsageError("--plot is not available for --status")
    else:
        raise UsageError("report needs one of --user, --group, --size-profile, --top-users, --activity, --status")
    _out(args, t)
    return EXIT_OK


def _bucket_range(spec: str) -> tuple[int, int]:
    body = spec[len("range"):].lstrip(" =:")
    try:
        lo_s, hi_s = body.split(":")
        lo = BUCKET_LABELS.index(lo_s) if lo_s in BUCKET_LABELS else int(lo_s)
        hi = BUCKET_LABELS.index(hi_s) if hi_s in BUCKET_LABELS else int(hi_s)
    except ValueError:
        raise UsageError(f"bad bucket range {spec!r}; use range LO:HI with bucket indices 0-8 or labels") from None
    if not 0 <= lo <= hi < len(BUCKET_LABELS):
        raise UsageError(f"bucket range {lo}:{hi} outside 0:{len(BUCKET_LABELS) - 1}")
    return lo, hi


def _status_table(store: Store) -> Table:
    types = {t: store.agg_get("type", t) for t in aggregates.TYPE_ORDER}
    state = store.meta_get("scan_state") or {}
    rows = [
        ["entries", sum(c.count for c in types.values())],
        *[[f"{t}s", c.count] for t, c in types.items()],
        ["space_used", sum(c.spc for c in types.values())],
        ["cursor", store.cursor],
        ["scan_generation", store.meta_get("scan_gen", 0)],
        ["scan_finalized", bool(state.get("finalized", False))],
        ["pending_tags", store.pending_tags()],
        ["shards", len(store.shards)],
        ["rollup_depth", store.rollup_depth],
    ]
    return Table(["key", "value"], rows, "".join(f"{k}: {v}\n" for k, v in rows))


def find_filter(args) -> Optional[Expression]:
    parts: list[Expression] = []
    if args.filter:
        parts.append(parse_expression(args.filter))
    if args.ost is not None:
        parts.append(Compare("ost_index", "==", args.ost))
    if args.size is not None:
        parts.append(_signed("size", args.size, parse_size))
    if args.user is not None:
        parts.append(parse_expression(f"owner == {_quote(args.user)}"))
    if args.mtime is not None:
        parts.append(_signed("last_mod", args.mtime, parse_duration))
    if args.type is not None:
        parts.append(Compare("type", "==", args.type))
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else And(tuple(parts))


def _quote(s: str) -> str:
    return "'" + s.replace("\\", "\\\\").replace("'", "\\'") + "'"


def _signed(attr: str, text: str, parse) -> Expression:
    """find-style value: +N means more than N, -N less than N, bare N exactly N."""
    op = "=="
    if text[:1] in "+-":
        op = ">" if text[0] == "+" else "<"
        text = text[1:]
    return Compare(attr, op, parse(text))


def cmd_find(args) -> int:
    store = _open(args, create=False)
    root = _resolve_root(store, args.root)
    now = _now(args)
    try:
        flt = find_filter(args)
    except ParseError as exc:
        print(f"error: bad filter: {exc}", file=sys.stderr)
        return EXIT_USAGE
    under = None if root.is_root else root.id
    hits = store.query(QuerySpec(filter=flt, sort=args.sort, under=under), now)
    paths = PathCache(store)
    if args.print == "long":
        rows = [[str(e.id), e.etype.value, e.size, e.owner, e.group, e.hsm.value, paths.path(e)] for e in hits]
        t = Table(["fid", "type", "size", "owner", "group", "hsm", "path"], rows,
                  "".join(f"{r[0]} {r[1]:<7} {r[2]:>14} {r[3]:<10} {r[4]:<10} {r[5]:<9} {r[6]}\n" for r in rows))
    else:
        rows = [[paths.path(e)] for e in hits]
        t = Table(["path"], rows, "".join(r[0] + "\n" for r in rows))
    _out(args, t)
    return EXIT_OK


def du_rows(store: Store, root: EntryRecord, depth: int, blocks: bool) -> tuple[list[tuple[str, int]], int]:
    """(path, total) rows partitioning the subtree of ``root`` at ``depth``, plus the grand total.

    Directories at ``depth`` below ``root`` get their subtree total. Shallower
    directories contribute a ``<dir>/.`` row for their direct non-directory
    children, so the rows always add up to the total.
    """
    idx = 2 if blocks else 1
    paths = PathCache(store)
    root_depth = _tree_depth(store, root)

    def own(e: EntryRecord) -> int:
        if e.etype is EntryType.DIR:
            return e.blocks * 512 if blocks else 0
        return e.blocks * 512 if blocks else e.size

    def subtree(d: EntryRecord, d_depth: int) -> int:
        if d.etype is not EntryType.DIR:
            return own(d)
        if d_depth <= store.rollup_depth:
            # rollups hold everything strictly below the directory; no row means an empty one
            row = store.rollup_get(d.id)
            return own(d) + (row[idx] if row else 0)
        return own(d) + sum(subtree(ch, d_depth + 1) for ch in store.children(d.id))

    rows: list[tuple[str, int]] = []

    def walk(d: EntryRecord, rel: int, absd: int) -> None:
        if rel >= depth:
            rows.append((paths.path(d), subtree(d, absd)))
            return
        kids = store.children(d.id)
        direct = own(d) + sum(own(ch) for ch in kids if ch.etype is not EntryType.DIR)
        rows.append((paths.path(d).rstrip("/") + "/.", direct))
        for ch in sorted((c for c in kids if c.etype is EntryType.DIR), key=lambda c: c.name):
            walk(ch, rel + 1, absd + 1)

    if root.etype is not EntryType.DIR:
        return [(paths.path(root), own(root))], own(root)
    walk(root, 0, root_depth)
    return rows, sum(v for _, v in rows)


def cmd_du(args) -> int:
    if args.depth < 0:
        raise UsageError("--depth must be >= 0")
    store = _open(args, create=False)
    root = _resolve_root(store, args.root)
    blocks = args.blocks
    if args.by_user:
        totals: dict[str, int] = {}
        if root.is_root:
            # whole namespace: straight from the ledger (directory sizes are not apparent usage)
            for name, cell in aggregates.owners(store).items():
                dirs = store.agg_get("owner_type", aggregates.compound(name, "dir"))
                totals[name] = cell.spc if blocks else cell.volume - dirs.volume
        else:
            from metahood.store.query import descendants

            for fid in sorted(descendants(store, root.id) | {root.id}, key=str):
                e = store.get(fid)
                if e is None:
                    continue
                v = e.blocks * 512 if blocks else (0 if e.etype is EntryType.DIR else e.size)
                totals[e.owner] = totals.get(e.owner, 0) + v
        rows = sorted(totals.items())
        total = sum(v for _, v in rows)
        t = Table(["user", "bytes"], [[u, v] for u, v in rows] + [["total", total]],
                  "".join(f"{v}\t{u}\n" for u, v in rows) + f"{total}\ttotal\n")
    else:
        rows2, total = du_rows(store, root, args.depth, blocks)
        t = Table(["path", "bytes"], [[p, v] for p, v in rows2] + [["total", total]],
                  "".join(f"{v}\t{p}\n" for p, v in rows2) + f"{total}\ttotal\n")
    _out(args, t)
    return EXIT_OK


def cmd_triggers(args) -> int:
    from metahood.engine.triggers import TriggerConfigError, check_triggers

    cfg = _config(args)
    store = _open(args, create=False)
    fs = _load_sim(args.sim, required=False)
    try:
        statuses = check_triggers(cfg, store, fs, args.policy)
    except TriggerConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rows = [[s.policy, s.trigger.kind, "" if s.target is None else str(s.target), round(s.observed, 4),
             s.trigger.high, s.trigger.low, s.firing] for s in statuses]
    _out(args, Table(["policy", "kind", "target", "observed", "high", "low", "firing"], rows,
                     "".join(s.describe() + "\n" for s in statuses)))
    return EXIT_OK


def cmd_run(args) -> int:
    from metahood.engine.policy import run_policy
    from metahood.engine.triggers import TriggerConfigError, check_triggers

    cfg = _config(args)
    if args.policy not in cfg.policies:
        raise UsageError(f"no policy named {args.policy!r}")
    pol = cfg.policies[args.policy]
    store = _open(args, create=False)
    fs = _load_sim(args.sim)
    now = _now(args, fs)
    triggers: list = [None]
    if pol.triggers and not args.force:
        try:
            firing = [s for s in check_triggers(cfg, store, fs, pol.name) if s.firing]
        except TriggerConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if not firing:
            print(f"policy {pol.name}: no trigger firing, nothing to do")
            return EXIT_OK
        triggers = firing
    code = EXIT_OK
    for trig in triggers:
        run = run_policy(pol, store, fs, trigger=trig, dry_run=args.dry_run, now=now, audit_path=args.audit,
                         max_actions=args.max_actions,
                         max_volume=parse_size(args.max_volume) if args.max_volume else None)
        print(run.summary())
        if args.dry_run:
            paths = PathCache(store)
            for o in run.outcomes:
                e = store.get(o.fid)
                print(f"  would {o.action} {o.fid} {paths.path(e) if e else o.path} ({o.result})")
        code = max(code, run.exit_code)
    if not args.dry_run:
        fs.save(args.sim)
    return code


def cmd_alerts(args) -> int:
    from metahood.engine.alerts import AlertSinkError, alert_sweep

    cfg = _config(args)
    store = _open(args, create=False)
    try:
        hits = alert_sweep(cfg, store, _now(args), args.sink)
    except AlertSinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"{len(hits)} alert line(s) written")
    return EXIT_OK


def cmd_undelete(args) -> int:
    from metahood.store.undelete import undelete

    store = _open(args, create=False)
    fs = _load_sim(args.sim)
    rep = undelete(store, fs.backend, args.selector, fs=fs)
    for fid in rep.restored:
        print(f"restored {fid}")
    for fid, why in rep.refused:
        print(f"refused {fid}: {why}", file=sys.stderr)
    fs.save(args.sim)
    if not rep.restored and not rep.refused:
        print("nothing matched", file=sys.stderr)
    return EXIT_PARTIAL if rep.refused else EXIT_OK


def cmd_dump(args) -> int:
    store = _open(args, create=False)
    text = store.dump_snapshot(include_softrm=not args.no_softrm)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_restore(args) -> int:
    store = _open(args)
    with open(args.snapshot, encoding="utf-8") as fh:
        store.restore_snapshot(fh.read())
    return EXIT_OK


def cmd_verify(args) -> int:
    store = _open(args, create=False)
    problems = aggregates.verify(store)
    for p in problems:
        print(p)
    if problems:
        return EXIT_PARTIAL
    print("ledger and rollups consistent")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _partition(text: str) -> tuple[int, int]:
    try:
        i, k = (int(x) for x in text.split("/"))
    except ValueError:
        raise argparse.ArgumentTypeError("partition must look like I/K") from None
    if not (k >= 1 and 0 <= i < k):
        raise argparse.ArgumentTypeError("partition needs 0 <= I < K")
    return i, k


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metahood", description="Filesystem metadata mirror and policy engine.")
    p.add_argument("--db", default=os.environ.get("METAHOOD_DB"), help="store path (default $METAHOOD_DB)")
    p.add_argument("--config", help="policy configuration file")
    p.add_argument("--shards", type=_positive, help="shard count when creating a store")
    p.add_argument("--rollup-depth", type=int, default=None, help="directory rollup depth when creating a store")
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", dest="format", action="store_const", const="json", help="JSON output")
    fmt.add_argument("--csv", dest="format", action="store_const", const="csv", help="CSV output")
    p.set_defaults(format="text")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a simulated filesystem and changelog")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--entries", type=_positive, default=1000)
    s.add_argument("--ops", type=int, default=0)
    s.add_argument("--out", required=True, help="changelog file to write")
    s.add_argument("--state", help="write the final filesystem state here")
    s.add_argument("--initial-state", help="write the state before the workload here")
    s.add_argument("--osts", type=_positive, default=8)
    s.add_argument("--ost-capacity", help="capacity per OST, e.g. 64GB")
    s.add_argument("--stripe", type=_positive, default=2)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("scan", help="scan a source into the store")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--sim", help="simulated filesystem state file")
    src.add_argument("--posix", help="local directory to scan")
    s.add_argument("--threads", type=_positive, default=4)
    s.add_argument("--partition", type=_partition, default=(0, 1), metavar="I/K")
    s.add_argument("--batch", type=_positive, default=1000)
    s.add_argument("--no-finalize", dest="finalize", action="store_false",
                   help="keep entries the scan did not see")
    s.set_defaults(fn=cmd_scan)

    s = sub.add_parser("finalize", help="evict entries missed by the latest scan generation")
    s.add_argument("--generation", type=int)
    s.add_argument("--now", type=int)
    s.set_defaults(fn=cmd_finalize)

    s = sub.add_parser("ingest", help="apply a changelog file")
    s.add_argument("changelog")
    s.add_argument("--sim", help="simulated filesystem used for stat calls")
    s.add_argument("--mode", choices=("sync", "dirty-tag"), default="sync")
    s.add_argument("--limits", type=_positive, default=4, help="concurrency limit for every stage")
    for stage in ("parse", "store-lookup", "fs-enrich", "apply-commit"):
        s.add_argument(f"--{stage}", type=_positive, help=f"concurrency limit for the {stage} stage")
    s.add_argument("--reject", help="append malformed or out-of-order lines here")
    s.add_argument("--follow", action="store_true", help="keep tailing the file")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("update", help="refresh entries tagged dirty by dirty-tag ingest")
    s.add_argument("--sim", required=True)
    s.add_argument("--max", type=_positive)
    s.set_defaults(fn=cmd_update)

    s = sub.add_parser("report", help="usage reports from pre-computed aggregates")
    s.add_argument("--user")
    s.add_argument("--group")
    s.add_argument("--size-profile", action="store_true")
    s.add_argument("--top-users", type=_positive, metavar="N")
    s.add_argument("--by", default="volume", help="count, volume, avg or 'range LO:HI'")
    s.add_argument("--activity", action="store_true")
    s.add_argument("--status", action="store_true")
    s.add_argument("--plot", metavar="FILE", help="also render the report as an image")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("find", help="search the mirror")
    s.add_argument("root", nargs="?", default="/")
    s.add_argument("--filter", help="condition expression")
    s.add_argument("--ost", type=int)
    s.add_argument("--size", help="+N, -N or N with a size unit")
    s.add_argument("--user")
    s.add_argument("--mtime", help="+D, -D or D with a duration unit")
    s.add_argument("--type", choices=[t.value for t in EntryType])
    s.add_argument("--print", choices=("path", "long"), default="path")
    s.add_argument("--sort", choices=SORT_KEYS, default="fid")
    s.add_argument("--now", type=int, help="reference time for age comparisons")
    s.set_defaults(fn=cmd_find)

    s = sub.add_parser("du", help="disk usage per subtree")
    s.add_argument("root", nargs="?", default="/")
    s.add_argument("--depth", type=int, default=1)
    s.add_argument("--by-user", action="store_true")
    kind = s.add_mutually_exclusive_group()
    kind.add_argument("--apparent", dest="blocks", action="store_false", help="sum sizes (default)")
    kind.add_argument("--blocks", dest="blocks", action="store_true", help="sum allocated blocks")
    s.set_defaults(fn=cmd_du, blocks=False)

    s = sub.add_parser("run", help="run a policy")
    s.add_argument("policy")
    s.add_argument("--sim", required=True)
    s.add_argument("--dry-run", action="store_true")
    s.add_argument("--force", action="store_true", help="run even when no trigger fires")
    s.add_argument("--max-actions", type=int)
    s.add_argument("--max-volume")
    s.add_argument("--audit", help="append audit lines here")
    s.add_argument("--now", type=int)
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("triggers", help="evaluate policy triggers")
    s.add_argument("--check", action="store_true", help="(default action)")
    s.add_argument("--policy")
    s.add_argument("--sim")
    s.set_defaults(fn=cmd_triggers)

    s = sub.add_parser("alerts", help="sweep alert conditions into their sinks")
    s.add_argument("--sink", help="override every alert's sink")
    s.add_argument("--now", type=int)
    s.set_defaults(fn=cmd_alerts)

    s = sub.add_parser("undelete", help="bring back archived soft-deleted files")
    s.add_argument("selector", help="fid or path glob")
    s.add_argument("--sim", required=True)
    s.set_defaults(fn=cmd_undelete)

    s = sub.add_parser("dump", help="write the canonical snapshot")
    s.add_argument("-o", "--output")
    s.add_argument("--no-softrm", action="store_true")
    s.set_defaults(fn=cmd_dump)

    s = sub.add_parser("restore", help="load a snapshot into an empty store")
    s.add_argument("snapshot")
    s.set_defaults(fn=cmd_restore)

    s = sub.add_parser("verify", help="check aggregates against the entries")
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BrokenPipeError:
        return EXIT_OK
    except (StoreError, MetahoodError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
