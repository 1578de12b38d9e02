from __future__ import annotations

import grp
import os
import pwd
import stat as statmod
import threading
import time
from functools import lru_cache

from metahood.core import NULL_ID, EntryId, EntryRecord, EntryType
from metahood.simfs.source import EntryVanished, OstStat, SourceError


@lru_cache(maxsize=None)
def _user(uid: int) -> str:
    try:
        return pwd.getpwuid(uid).pw_name
    except KeyError:
        return str(uid)


@lru_cache(maxsize=None)
def _group(gid: int) -> str:
    try:
        return grp.getgrgid(gid).gr_name
    except KeyError:
        return str(gid)


class PosixSource:
    """Scan-only source over a local directory tree.

    Ids are derived from ``(st_ino, st_dev)``. No OST, pool or HSM data is
    available, and no changelog is produced.
    """

    def __init__(self, root_path: str | os.PathLike):
        self.root_path = os.path.abspath(os.fspath(root_path))
        st = os.lstat(self.root_path)
        if not statmod.S_ISDIR(st.st_mode):
            raise SourceError(f"not a directory: {self.root_path}")
        self._root = self._fid(st)
        self._lock = threading.Lock()
        # id -> (path, parent id, name)
        self._paths: dict[EntryId, tuple[str, EntryId, str]] = {self._root: (self.root_path, NULL_ID, "")}
        self.stat_calls = 0

    @staticmethod
    def _fid(st: os.stat_result) -> EntryId:
        return EntryId(st.st_ino & 0xFFFFFFFFFFFFFFFF, st.st_dev & 0xFFFFFFFF, 0)

    def root(self) -> EntryId:
        return self._root

    def readdir(self, dir_id: EntryId) -> list[tuple[str, EntryId]]:
        with self._lock:
            try:
                path = self._paths[dir_id][0]
            except KeyError:
                raise EntryVanished(dir_id) from None
        out = []
        try:
            with os.scandir(path) as it:
                for de in it:
                    try:
                        st = de.stat(follow_symlinks=False)
                    except FileNotFoundError:
                        continue
                    fid = self._fid(st)
                    out.append((de.name, fid))
                    with self._lock:
                        self._paths[fid] = (de.path, dir_id, de.name)
        except FileNotFoundError:
            raise EntryVanished(dir_id) from None
        except OSError as exc:
            raise SourceError(f"cannot read {path}: {exc}") from exc
        return out

    def stat(self, entry_id: EntryId) -> EntryRecord:
        with self._lock:
            self.stat_calls += 1
            try:
                path, parent, name = self._paths[entry_id]
            except KeyError:
                raise EntryVanished(entry_id) from None
        try:
            st = os.lstat(path)
        except FileNotFoundError:
            raise EntryVanished(entry_id) from None
        if statmod.S_ISDIR(st.st_mode):
            etype = EntryType.DIR
            try:
                dircount = len(os.listdir(path))
            except OSError:
                dircount = 0
        elif statmod.S_ISLNK(st.st_mode):
            etype, dircount = EntryType.SYMLINK, 0
        else:
            etype, dircount = EntryType.FILE, 0
        return EntryRecord(
            id=entry_id, parent=parent, name=name, etype=etype, size=st.st_size,
            blocks=getattr(st, "st_blocks", -(-st.st_size // 512)),
            owner=_user(st.st_uid), group=_group(st.st_gid), mode=statmod.S_IMODE(st.st_mode),
            atime=int(st.st_atime), mtime=int(st.st_mtime), ctime=int(st.st_ctime),
            dircount=dircount,
        )

    def ost_usage(self) -> list[OstStat]:
        return []

    def now(self) -> int:
        return int(time.time())
