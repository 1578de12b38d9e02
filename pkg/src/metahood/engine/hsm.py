"""The HSM state machine as seen from the engine."""

from __future__ import annotations

import logging
from typing import Optional

from metahood.core import (
    ARCHIVED_STATES,
    EntryRecord,
    EntryType,
    HsmEvent,
    HsmState,
    IllegalTransition,
    MetahoodError,
    next_hsm_state,
)
from metahood.simfs.backend import HsmBackend
from metahood.store.sqlite import Store

log = logging.getLogger(__name__)


class HsmRefused(MetahoodError):
    pass


def check_transition(entry: EntryRecord, event: HsmEvent) -> HsmState:
    """The state ``event`` would lead to; raises IllegalTransition naming the current state."""
    if entry.etype is not EntryType.FILE:
        raise HsmRefused(f"{entry.id} is not a file")
    if event is HsmEvent.UNLINK:
        return entry.hsm
    return next_hsm_state(entry.hsm, event)


def hsm_transition(store: Store, fs, backend: Optional[HsmBackend], entry: EntryRecord,
                   event: HsmEvent) -> HsmState:
    """Drive one HSM event through the filesystem and mirror the result.

    ``backend`` may be a separate archive from the filesystem's own copytool
    store; archived objects are then copied into it as well.
    """
    target = check_transition(entry, event)
    fn = getattr(fs, "hsm_event", None)
    if fn is None:
        raise HsmRefused("source does not drive HSM events")
    key = str(entry.id)
    own = getattr(fs, "backend", None)
    if event is HsmEvent.RESTORE and backend is not None and own is not None and backend is not own:
        own.store(key, backend.fetch(key))
    records = fn(entry.id, event)
    if event is HsmEvent.ARCHIVE_DONE and backend is not None and own is not None and backend is not own:
        backend.store(key, own.fetch(key))
    from metahood.engine.actions import mirror

    mirror(store, fs, records)
    after = store.get(entry.id)
    if event is HsmEvent.UNLINK:
        row = store.softrm_get(entry.id)
        if entry.hsm in ARCHIVED_STATES and (row is None or not row.archived):
            log.warning("unlink of archived %s left no archived soft-rm row", entry.id)
        return entry.hsm
    return after.hsm if after is not None else target


__all__ = ["HsmRefused", "IllegalTransition", "check_transition", "hsm_transition"]
