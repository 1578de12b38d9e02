"""Watermark trigger evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from metahood.core import MetahoodError
from metahood.policyspec.config import PolicyConfig, Trigger
from metahood.simfs.source import OstStat
from metahood.store.sqlite import Store


class TriggerConfigError(MetahoodError):
    """A trigger cannot be evaluated as configured (exit code 64 in the CLI)."""


@dataclass(frozen=True)
class TriggerStatus:
    policy: str
    trigger: Trigger
    firing: bool
    # percent for usage kinds, bytes or entries for user kinds
    observed: float
    # concrete target after expansion: OST index, pool name, user name or None
    target: object = None
    used: int = 0
    capacity: int = 0
    osts: tuple[int, ...] = ()

    def low_mark(self) -> float:
        """The low watermark in the same unit as ``used``."""
        if self.trigger.is_usage:
            return self.trigger.low / 100.0 * self.capacity
        return self.trigger.low

    def describe(self) -> str:
        unit = "%" if self.trigger.is_usage else ""
        where = "" if self.target is None else f" target={self.target}"
        return (f"{self.policy} {self.trigger.kind}{where} observed={self.observed:.2f}{unit} "
                f"high={self.trigger.high:g}{unit} low={self.trigger.low:g}{unit} "
                f"{'FIRING' if self.firing else 'ok'}")


def _usage(policy: str, trig: Trigger, target, sel: list[OstStat]) -> TriggerStatus:
    used = sum(o.used for o in sel)
    cap = sum(o.capacity for o in sel)
    pct = 100.0 * used / cap if cap else 0.0
    return TriggerStatus(policy, trig, pct >= trig.high, pct, target, used, cap, tuple(o.index for o in sel))


def evaluate_trigger(policy: str, trig: Trigger, store: Store, src) -> list[TriggerStatus]:
    if trig.is_usage:
        ost_usage = getattr(src, "ost_usage", None)
        osts = list(ost_usage()) if src is not None and ost_usage is not None else []
        if not osts or not any(o.capacity for o in osts):
            raise TriggerConfigError(f"trigger {trig.kind} in policy {policy!r} needs a source with capacity data")
        t = trig.target
        if trig.kind == "global_usage" or t == "global":
            return [_usage(policy, trig, None, osts)]
        if trig.kind == "ost_usage":
            if t is None:
                return [_usage(policy, trig, o.index, [o]) for o in osts]
            n = t[1]
            sel = [o for o in osts if o.index == n]
            if not sel:
                raise TriggerConfigError(f"trigger in policy {policy!r} targets unknown OST {n}")
            return [_usage(policy, trig, n, sel)]
        if t is None:
            pools = sorted({o.pool for o in osts if o.pool})
            return [_usage(policy, trig, p, [o for o in osts if o.pool == p]) for p in pools]
        sel = [o for o in osts if o.pool == t[1]]
        if not sel:
            raise TriggerConfigError(f"trigger in policy {policy!r} targets unknown pool {t[1]!r}")
        return [_usage(policy, trig, t[1], sel)]
    # user kinds read the aggregate ledger only
    cells = store.agg_cells("owner")
    if trig.target is not None:
        users = [trig.target[1]]
    else:
        users = sorted(key for (_dim, key) in cells)
    out = []
    for u in users:
        cell = cells.get(("owner", u))
        value = 0 if cell is None else cell.volume if trig.kind == "user_volume" else cell.count
        out.append(TriggerStatus(policy, trig, value >= trig.high, float(value), u, int(value)))
    return out


def check_triggers(cfg: PolicyConfig, store: Store, src, policy: Optional[str] = None) -> list[TriggerStatus]:
    """Evaluate every trigger of every policy (or of ``policy``)."""
    out: list[TriggerStatus] = []
    for name, pol in cfg.policies.items():
        if policy is not None and name != policy:
            continue
        for trig in pol.triggers:
            out.extend(evaluate_trigger(name, trig, store, src))
    return out
