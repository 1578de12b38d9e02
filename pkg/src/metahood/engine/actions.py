"""Action plugins and their registry.

A plugin has a pure ``precheck`` (run against the mirrored entry, used by
dry runs too) and an ``apply`` that changes the filesystem. Filesystem
changes come back as changelog records, which are applied to the mirror
straight away so the next candidate sees the new state.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Callable, ClassVar, Iterable, Literal, Optional

from metahood.core import EntryRecord, EntryType, HsmEvent, HsmState, MetahoodError
from metahood.ingest.apply import apply_record
from metahood.ingest.records import ChangelogRecord
from metahood.simfs.backend import HsmBackend
from metahood.store.sqlite import Store

log = logging.getLogger(__name__)

Status = Literal["done", "skipped", "failed"]


@dataclass(frozen=True)
class ActionResult:
    status: Status
    reason: str = ""
    output: str = ""

    def __str__(self) -> str:
        return self.status if not self.reason else f"{self.status}:{self.reason}"


DONE = ActionResult("done")


def skipped(reason: str) -> ActionResult:
    return ActionResult("skipped", reason)


def failed(reason: str) -> ActionResult:
    return ActionResult("failed", reason)


@dataclass
class ActionContext:
    store: Store
    fs: object  # a SimFs, or any source offering the mutating calls a plugin needs
    backend: Optional[HsmBackend] = None
    params: dict[str, str] = field(default_factory=dict)
    path: str = ""


class ActionPlugin:
    """Base class; subclasses set ``name`` and implement ``apply``."""

    name: ClassVar[str] = ""
    # whether a successful run frees the entry's OST allocation
    frees_space: ClassVar[bool] = False

    def precheck(self, entry: EntryRecord, ctx: ActionContext) -> Optional[str]:
        """Reason the action cannot apply to ``entry``, or None."""
        return None

    def apply(self, entry: EntryRecord, ctx: ActionContext) -> ActionResult:
        raise NotImplementedError


_REGISTRY: dict[str, ActionPlugin] = {}
_reg_lock = threading.Lock()


def register(plugin: ActionPlugin) -> ActionPlugin:
    if not plugin.name:
        raise ValueError("plugin needs a name")
    with _reg_lock:
        _REGISTRY[plugin.name] = plugin
    return plugin


def unregister(name: str) -> None:
    with _reg_lock:
        _REGISTRY.pop(name, None)


def registered_actions() -> frozenset[str]:
    with _reg_lock:
        return frozenset(_REGISTRY)


def get_action(name: str) -> ActionPlugin:
    with _reg_lock:
        try:
            return _REGISTRY[name]
        except KeyError:
            raise MetahoodError(f"no action plugin named {name!r}") from None


def mirror(store: Store, fs, records: Iterable[ChangelogRecord]) -> None:
    """Apply records produced by an engine operation directly to the mirror."""
    for rec in records:
        apply_record(store, fs, rec, count_activity=False)


def _fs_call(ctx: ActionContext, method: str) -> Callable:
    fn = getattr(ctx.fs, method, None)
    if fn is None:
        raise MetahoodError(f"source does not support {method}")
    return fn


class Archive(ActionPlugin):
    name = "archive"

    def precheck(self, entry, ctx):
        if entry.etype is not EntryType.FILE:
            return "not a file"
        if entry.hsm not in (HsmState.NONE, HsmState.NEW, HsmState.DIRTY):
            return f"state is {entry.hsm.value}"
        return None

    def apply(self, entry, ctx):
        from metahood.engine.hsm import hsm_transition

        hsm_transition(ctx.store, ctx.fs, ctx.backend, entry, HsmEvent.ARCHIVE_START)
        cur = ctx.store.get(entry.id) or entry
        hsm_transition(ctx.store, ctx.fs, ctx.backend, cur, HsmEvent.ARCHIVE_DONE)
        return DONE


class Release(ActionPlugin):
    name = "release"
    frees_space = True

    def precheck(self, entry, ctx):
        if entry.etype is not EntryType.FILE:
            return "not a file"
        if entry.hsm is not HsmState.ARCHIVED:
            return f"state is {entry.hsm.value}"
        return None

    def apply(self, entry, ctx):
        from metahood.engine.hsm import hsm_transition

        hsm_transition(ctx.store, ctx.fs, ctx.backend, entry, HsmEvent.RELEASE)
        return DONE


class Delete(ActionPlugin):
    name = "delete"
    frees_space = True

    def precheck(self, entry, ctx):
        return "is a directory" if entry.etype is EntryType.DIR else None

    def apply(self, entry, ctx):
        mirror(ctx.store, ctx.fs, _fs_call(ctx, "unlink")(entry.id))
        return DONE


class Rmdir(ActionPlugin):
    name = "rmdir"

    def precheck(self, entry, ctx):
        if entry.etype is not EntryType.DIR:
            return "not a directory"
        if entry.parent.is_null:
            return "is the root"
        if entry.dircount:
            return "directory not empty"
        return None

    def apply(self, entry, ctx):
        mirror(ctx.store, ctx.fs, _fs_call(ctx, "rmdir")(entry.id))
        return DONE


class LogOnly(ActionPlugin):
    name = "log"

    def apply(self, entry, ctx):
        level = getattr(logging, ctx.params.get("level", "info").upper(), logging.INFO)
        log.log(level, "policy match %s %s size=%d owner=%s", entry.id, ctx.path, entry.size, entry.owner)
        return DONE


class Shell(ActionPlugin):
    """Run a command template; ``{path}``, ``{fid}``, ``{size}`` and ``{owner}`` are filled in.

    The template is split into words before substitution, so values cannot
    inject extra arguments or shell syntax.
    """

    name = "shell"
    timeout = 60.0

    def precheck(self, entry, ctx):
        return None if ctx.params.get("cmd") else "no cmd parameter"

    def render(self, entry: EntryRecord, template: str, path: str) -> list[str]:
        values = {"path": path, "fid": str(entry.id), "size": str(entry.size), "owner": entry.owner}
        return [word.format(**values) for word in shlex.split(template)]

    def apply(self, entry, ctx):
        argv = self.render(entry, ctx.params["cmd"], ctx.path)
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as exc:
            return failed(str(exc))
        if proc.returncode != 0:
            return ActionResult("failed", f"exit {proc.returncode}", proc.stdout)
        return ActionResult("done", "", proc.stdout)


for _p in (Archive(), Release(), Delete(), Rmdir(), LogOnly(), Shell()):
    register(_p)
