"""Bit-exact snapshot text format shared by the mirror and the simulator."""

from __future__ import annotations

from typing import Iterable

from metahood.core import (
    EntryRecord,
    EntryType,
    HsmState,
    ParseError,
    decode_name,
    encode_name,
    parse_entry_id,
)
from metahood.store.model import SoftRmRecord

HEADER = "# metahood snapshot v1"
ENTRIES_MARK = "# section entries"
SOFTRM_MARK = "# section softrm"


def _name_token(name: str) -> str:
    # the root's empty name is written as "/", which no component can contain
    return encode_name(name) if name else "/"


def format_entry_line(e: EntryRecord) -> str:
    osts = ",".join(str(i) for i in e.ost_set) or "-"
    return (
        f"E {e.id} {e.parent} {e.etype.value} {_name_token(e.name)} {e.size} {e.blocks} "
        f"{encode_name(e.owner)} {encode_name(e.group)} {e.mode:04o} {e.atime} {e.mtime} {e.ctime} "
        f"{osts} {encode_name(e.pool) or '-'} {e.hsm.value} {e.dircount}"
    )


def format_softrm_line(r: SoftRmRecord) -> str:
    return (
        f"R {r.id} {encode_name(r.last_known_path)} {r.size} {encode_name(r.owner)} "
        f"{r.rm_time} {int(r.archived)}"
    )


def render(entries: Iterable[EntryRecord], softrm: Iterable[SoftRmRecord] = (), *,
           include_softrm: bool = True) -> str:
    """Render a snapshot; both iterables must already be sorted by fid text."""
    lines = [HEADER, ENTRIES_MARK]
    lines.extend(format_entry_line(e) for e in entries)
    if include_softrm:
        lines.append(SOFTRM_MARK)
        lines.extend(format_softrm_line(r) for r in softrm)
    return "\n".join(lines) + "\n"


def parse_entry_line(line: str) -> EntryRecord:
    t = line.split(" ")
    if len(t) != 17 or t[0] != "E":
        raise ParseError("malformed entry line", line)
    return EntryRecord(
        id=parse_entry_id(t[1]),
        parent=parse_entry_id(t[2]),
        etype=EntryType.parse(t[3]),
        name="" if t[4] == "/" else decode_name(t[4]),
        size=int(t[5]),
        blocks=int(t[6]),
        owner=decode_name(t[7]),
        group=decode_name(t[8]),
        mode=int(t[9], 8),
        atime=int(t[10]),
        mtime=int(t[11]),
        ctime=int(t[12]),
        ost_set=() if t[13] == "-" else tuple(int(x) for x in t[13].split(",")),
        pool="" if t[14] == "-" else decode_name(t[14]),
        hsm=HsmState.parse(t[15]),
        dircount=int(t[16]),
    )


def parse_softrm_line(line: str) -> SoftRmRecord:
    t = line.split(" ")
    if len(t) != 7 or t[0] != "R":
        raise ParseError("malformed soft-rm line", line)
    return SoftRmRecord(
        id=parse_entry_id(t[1]),
        last_known_path=decode_name(t[2]),
        size=int(t[3]),
        owner=decode_name(t[4]),
        rm_time=int(t[5]),
        archived=t[6] == "1",
    )


def parse(text: str) -> tuple[list[EntryRecord], list[SoftRmRecord]]:
    entries: list[EntryRecord] = []
    softrm: list[SoftRmRecord] = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("E "):
            entries.append(parse_entry_line(line))
        elif line.startswith("R "):
            softrm.append(parse_softrm_line(line))
        else:
            raise ParseError("unknown snapshot line", line)
    return entries, softrm


def entries_section(text: str) -> str:
    """The snapshot without its soft-rm section."""
    head, _, _ = text.partition(SOFTRM_MARK + "\n")
    return head
