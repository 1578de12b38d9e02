"""Changelog record type and its line-oriented wire format.

One record per line::

    <index> <rtype> <ts> <fid> p=<pfid> n=<name> [P=<pfid> N=<name>] [s=<size>]
        [m=<mode>] [u=<owner>] [g=<group>] [h=<hsm_state>] [j=<jobid>]

Names, owners, groups and jobids are percent-encoded for space, ``%`` and
newline.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from metahood.core import (
    NULL_ID,
    EntryId,
    HsmState,
    ParseError,
    decode_name,
    encode_name,
    parse_entry_id,
)


class RecordType(str, enum.Enum):
    MKDIR = "MKDIR"
    CREAT = "CREAT"
    SLINK = "SLINK"
    RMDIR = "RMDIR"
    UNLNK = "UNLNK"
    RENME = "RENME"
    SATTR = "SATTR"
    TRUNC = "TRUNC"
    CLOSE = "CLOSE"
    HSM = "HSM"

    def __str__(self) -> str:
        return self.value


CREATES = frozenset({RecordType.MKDIR, RecordType.CREAT, RecordType.SLINK})

# Optional fields each record type must carry on top of the base fields.
_REQUIRED: dict[RecordType, tuple[str, ...]] = {
    RecordType.MKDIR: ("u", "g", "m"),
    RecordType.CREAT: ("u", "g", "m"),
    RecordType.SLINK: ("u", "g", "m"),
    RecordType.RMDIR: (),
    RecordType.UNLNK: (),
    RecordType.RENME: ("P", "N"),
    RecordType.SATTR: (),
    RecordType.TRUNC: ("s",),
    RecordType.CLOSE: ("s",),
    RecordType.HSM: ("h",),
}


class RecordParseError(ParseError):
    pass


@dataclass(frozen=True, slots=True)
class ChangelogRecord:
    index: int
    rtype: RecordType
    ts: int
    fid: EntryId
    pfid: EntryId
    name: str
    new_pfid: Optional[EntryId] = None
    new_name: Optional[str] = None
    size: Optional[int] = None
    mode: Optional[int] = None
    owner: Optional[str] = None
    group: Optional[str] = None
    hsm_state: Optional[HsmState] = None
    jobid: str = ""

    def keys(self) -> frozenset[EntryId]:
        """Entry ids whose mirror rows this record may touch."""
        ids = {self.fid, self.pfid}
        if self.new_pfid is not None:
            ids.add(self.new_pfid)
        ids.discard(NULL_ID)
        return frozenset(ids)

    def format(self) -> str:
        parts = [str(self.index), self.rtype.value, str(self.ts), str(self.fid),
                 f"p={self.pfid}", f"n={encode_name(self.name)}"]
        if self.new_pfid is not None:
            parts.append(f"P={self.new_pfid}")
        if self.new_name is not None:
            parts.append(f"N={encode_name(self.new_name)}")
        if self.size is not None:
            parts.append(f"s={self.size}")
        if self.mode is not None:
            parts.append(f"m={self.mode:04o}")
        if self.owner is not None:
            parts.append(f"u={encode_name(self.owner)}")
        if self.group is not None:
            parts.append(f"g={encode_name(self.group)}")
        if self.hsm_state is not None:
            parts.append(f"h={self.hsm_state.value}")
        if self.jobid:
            parts.append(f"j={encode_name(self.jobid)}")
        return " ".join(parts)


def _int(text: str, what: str, base: int = 10) -> int:
    try:
        value = int(text, base)
    except ValueError:
        raise RecordParseError(f"malformed {what}", text) from None
    if value < 0:
        raise RecordParseError(f"negative {what}", text)
    return value


def parse_record(line: str) -> ChangelogRecord:
    tokens = line.rstrip("\n").split(" ")
    if len(tokens) < 4:
        raise RecordParseError("truncated record", line.strip())
    index = _int(tokens[0], "index")
    try:
        rtype = RecordType(tokens[1])
    except ValueError:
        raise RecordParseError("unknown record type", tokens[1]) from None
    ts = _int(tokens[2], "timestamp")
    fid = parse_entry_id(tokens[3])
    fields: dict[str, str] = {}
    for tok in tokens[4:]:
        key, sep, value = tok.partition("=")
        if not sep or key not in "pnPNsmughj" or len(key) != 1:
            raise RecordParseError("unknown field", tok)
        if key in fields:
            raise RecordParseError("duplicate field", tok)
        fields[key] = value
    missing = [k for k in ("p", "n") + _REQUIRED[rtype] if k not in fields]
    if missing:
        raise RecordParseError(f"{rtype.value} record missing field(s) {'/'.join(k + '=' for k in missing)}", line.strip())
    hsm = None
    if "h" in fields:
        try:
            hsm = HsmState(fields["h"])
        except ValueError:
            raise RecordParseError("unknown hsm state", fields["h"]) from None
    return ChangelogRecord(
        index=index,
        rtype=rtype,
        ts=ts,
        fid=fid,
        pfid=parse_entry_id(fields["p"]),
        name=decode_name(fields["n"]),
        new_pfid=parse_entry_id(fields["P"]) if "P" in fields else None,
        new_name=decode_name(fields["N"]) if "N" in fields else None,
        size=_int(fields["s"], "size") if "s" in fields else None,
        mode=_int(fields["m"], "mode", 8) if "m" in fields else None,
        owner=decode_name(fields["u"]) if "u" in fields else None,
        group=decode_name(fields["g"]) if "g" in fields else None,
        hsm_state=hsm,
        jobid=decode_name(fields.get("j", "")),
    )
