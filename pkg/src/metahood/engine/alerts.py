"""Alert sweeps: one line per matching entry, appended to the alert's sink."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Optional

from metahood.core import MetahoodError, encode_name, format_human
from metahood.engine.policy import iso8601
from metahood.policyspec.config import AlertSpec, PolicyConfig
from metahood.store.model import QuerySpec
from metahood.store.query import PathCache
from metahood.store.sqlite import Store


class AlertSinkError(MetahoodError):
    pass


@dataclass(frozen=True)
class AlertHit:
    alert: str
    line: str


def summarize(e) -> str:
    parts = [f"type={e.etype.value}", f"size={format_human(e.size).replace(' ', '')}", f"owner={encode_name(e.owner)}",
             f"group={encode_name(e.group)}"]
    if e.dircount or e.etype.value == "dir":
        parts.append(f"dircount={e.dircount}")
    if e.hsm.value != "none":
        parts.append(f"hsm={e.hsm.value}")
    return " ".join(parts)


def sweep_one(alert: AlertSpec, store: Store, now: int, paths: Optional[PathCache] = None) -> list[str]:
    """Lines for one alert, in fid order (no deduplication across sweeps)."""
    paths = paths or PathCache(store)
    stamp = iso8601(now)
    hits = store.query(QuerySpec(filter=alert.condition), now)
    return [f"ALERT {alert.name} {stamp} {e.id} {encode_name(paths.path(e))} {summarize(e)}" for e in hits]


def alert_sweep(cfg: PolicyConfig, store: Store, now: Optional[int] = None,
                sink_override: Optional[str | os.PathLike] = None) -> list[AlertHit]:
    """Evaluate every alert and append its lines to its sink file."""
    now = int(time.time()) if now is None else now
    paths = PathCache(store)
    out: list[AlertHit] = []
    for alert in cfg.alerts.values():
        lines = sweep_one(alert, store, now, paths)
        sink = sink_override or alert.sink
        try:
            with open(sink, "a", encoding="utf-8") as fh:
                for line in lines:
                    fh.write(line + "\n")
        except OSError as exc:
            raise AlertSinkError(f"alert {alert.name}: cannot write sink {sink}: {exc}") from exc
        out.extend(AlertHit(alert.name, line) for line in lines)
    return out
