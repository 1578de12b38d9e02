"""Filesystem set-ups shared by the engine tests and the acceptance run."""

from __future__ import annotations

import random

from metahood.core import GB, MB, HsmEvent
from metahood.simfs import ROOT_FID, SimConfig, SimFs

RELEASE_POLICY = """
policy free0 {
    scope { type == file }
    rule archived_only { condition { hsm_state == archived } action release; }
    trigger ost_usage { high 80%; low 70%; target ost 0; }
}
"""


def filled_ost(fill: float = 0.85, seed: int = 4, capacity: int = GB) -> SimFs:
    """Two single-OST pools; OST 0 holds exactly ``fill`` of its capacity.

    Most OST 0 files are archived (releasable); every fifth stays new. A few
    access times collide so the id tiebreak matters. OST 1 gets some archived
    files as decoys.
    """
    fs = SimFs(SimConfig(ost_count=2, ost_capacity=capacity, stripe_count=1,
                         pools={"zero": (0,), "one": (1,)}))
    rng = random.Random(seed)
    data = fs.mkdir(ROOT_FID, "data")[0].fid
    target = int(fill * capacity)
    i = 0
    while True:
        left = target - fs.ost_usage()[0].used
        if left == 0:
            break
        size = min(rng.randrange(5 * MB, 30 * MB), left)
        if 0 < left - size < MB:
            size = left
        fid = fs.create(data, f"f{i}.dat", size=size, pool="zero", owner=rng.choice(["foo", "bar"]))[0].fid
        if i % 5:
            fs.hsm_event(fid, HsmEvent.ARCHIVE_START)
            fs.hsm_event(fid, HsmEvent.ARCHIVE_DONE)
        fs.set_atime(fid, 1_600_000_000 + rng.randrange(40) * 1000)
        i += 1
    for j in range(8):
        fid = fs.create(data, f"o{j}.dat", size=10 * MB, pool="one")[0].fid
        fs.hsm_event(fid, HsmEvent.ARCHIVE_START)
        fs.hsm_event(fid, HsmEvent.ARCHIVE_DONE)
        fs.set_atime(fid, 1_500_000_000 + j)
    return fs
