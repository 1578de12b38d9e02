from __future__ import annotations

import sys

import pytest

from metahood import aggregates
from metahood.core import GB, MB, EntryType, HsmEvent, HsmState, IllegalTransition
from metahood.engine import (
    EXIT_ABORTED,
    EXIT_COMPLETE,
    EXIT_FAILURES,
    ActionPlugin,
    ActionResult,
    HsmRefused,
    TriggerConfigError,
    alert_sweep,
    check_triggers,
    hsm_transition,
    register,
    run_policy,
    unregister,
)
from metahood.engine.actions import mirror
from metahood.engine.policy import audit_lines
from metahood.policyspec.config import parse_config
from metahood.scanner import scan
from metahood.simfs import ROOT_FID, HsmBackend, SimConfig, SimFs
from metahood.store import open_store
from metahood.store.undelete import undelete

from scenarios import RELEASE_POLICY, filled_ost


def _mirror(fs, k=1):
    st = open_store(shards=k)
    scan(fs, st, 2)
    return st


def _lru(store, ost):
    cands = [e for e in store.iter_entries()
             if e.etype is EntryType.FILE and ost in e.ost_set and e.hsm is HsmState.ARCHIVED]
    return [e.id for e in sorted(cands, key=lambda e: (e.atime, str(e.id)))]


# -- HSM -------------------------------------------------------------------


def _one_file(size=3 * MB):
    fs = SimFs(SimConfig())
    st = _mirror(fs)
    recs = fs.create(ROOT_FID, "precious", size=size)
    mirror(st, fs, recs)
    return fs, st, recs[0].fid


def test_hsm_round_trip_keeps_content():
    fs, st, fid = _one_file()
    h0 = fs.content_hash(fid)
    with pytest.raises(IllegalTransition):
        hsm_transition(st, fs, None, st.get(fid), HsmEvent.MODIFY)
    states = [hsm_transition(st, fs, None, st.get(fid), ev)
              for ev in (HsmEvent.ARCHIVE_START, HsmEvent.ARCHIVE_DONE, HsmEvent.RELEASE, HsmEvent.RESTORE)]
    assert states == [HsmState.ARCHIVING, HsmState.ARCHIVED, HsmState.RELEASED, HsmState.ARCHIVED]
    assert fs.content_hash(fid) == h0
    assert st.get(fid) == fs.stat(fid).evolve(md_gen=st.get(fid).md_gen)
    assert aggregates.verify(st) == []


def test_release_needs_archive():
    fs, st, fid = _one_file()
    with pytest.raises(IllegalTransition):
        hsm_transition(st, fs, None, st.get(fid), HsmEvent.RELEASE)
    assert st.get(fid).hsm is HsmState.NEW


def test_hsm_refuses_directories():
    fs = SimFs(SimConfig())
    st = _mirror(fs)
    with pytest.raises(HsmRefused):
        hsm_transition(st, fs, None, st.get(ROOT_FID), HsmEvent.ARCHIVE_START)


def test_separate_backend_gets_copies():
    fs, st, fid = _one_file()
    archive = HsmBackend()
    for ev in (HsmEvent.ARCHIVE_START, HsmEvent.ARCHIVE_DONE):
        hsm_transition(st, fs, archive, st.get(fid), ev)
    assert str(fid) in archive


def test_unlink_then_undelete_restores_content():
    fs, st, fid = _one_file()
    h0 = fs.content_hash(fid)
    for ev in (HsmEvent.ARCHIVE_START, HsmEvent.ARCHIVE_DONE, HsmEvent.UNLINK):
        hsm_transition(st, fs, None, st.get(fid), ev)
    assert st.get(fid) is None and st.softrm_get(fid).archived
    rep = undelete(st, fs.backend, fid, fs=fs)
    assert rep.restored == [fid]
    assert st.get(fid).hsm is HsmState.RELEASED
    hsm_transition(st, fs, None, st.get(fid), HsmEvent.RESTORE)
    assert fs.content_hash(fid) == h0
    assert aggregates.verify(st) == []


# -- triggers ------------------------------------------------------------------


def test_ost_trigger_fires_at_high_watermark():
    fs = filled_ost()
    st = _mirror(fs)
    cfg = parse_config(RELEASE_POLICY)
    (status,) = check_triggers(cfg, st, fs)
    assert status.firing and status.target == 0 and abs(status.observed - 85.0) < 1e-6
    assert status.low_mark() == 0.70 * GB


def test_untargeted_triggers_expand():
    fs = filled_ost()
    st = _mirror(fs)
    cfg = parse_config("policy p { rule r { condition { size > 0 } action log; }\n"
                       "trigger ost_usage { high 50%; low 40%; }\n"
                       "trigger pool_usage { high 50%; low 40%; }\n"
                       "trigger global_usage { high 50%; low 40%; }\n"
                       "trigger user_count { high 1; low 0; } }")
    got = check_triggers(cfg, st, fs)
    kinds = [(s.trigger.kind, s.target, s.firing) for s in got]
    assert ("ost_usage", 0, True) in kinds and ("ost_usage", 1, False) in kinds
    assert ("pool_usage", "one", False) in kinds and ("pool_usage", "zero", True) in kinds
    assert ("global_usage", None, False) in kinds
    users = {s.target for s in got if s.trigger.kind == "user_count"}
    assert {"foo", "bar"} <= users


def test_usage_trigger_without_capacity_is_config_error():
    st = open_store()
    cfg = parse_config(RELEASE_POLICY)
    with pytest.raises(TriggerConfigError):
        check_triggers(cfg, st, None)


# -- policy runs -----------------------------------------------------------------


def test_watermark_run_releases_lru_prefix(tmp_path):
    fs = filled_ost()
    st = _mirror(fs)
    cfg = parse_config(RELEASE_POLICY)
    (status,) = check_triggers(cfg, st, fs)
    eligible = _lru(st, 0)
    dry = run_policy(cfg.policies["free0"], st, fs, trigger=status, dry_run=True)
    assert fs.ost_usage()[0].usage == pytest.approx(0.85)
    run = run_policy(cfg.policies["free0"], st, fs, trigger=status, audit_path=tmp_path / "audit.log")
    assert run.exit_code == EXIT_COMPLETE and run.stop_reason == "low watermark reached"
    assert fs.ost_usage()[0].usage <= 0.70
    assert run.actioned == dry.actioned == eligible[:len(run.actioned)]
    assert run.eligible[:len(run.actioned)] == run.actioned
    assert all(0 in st.get(f).ost_set and st.get(f).hsm is HsmState.RELEASED for f in run.actioned)
    # stopping one action earlier would have left usage above the low mark
    last = st.get(run.actioned[-1])
    assert fs.ost_usage()[0].used + last.size > status.low_mark()
    lines = (tmp_path / "audit.log").read_text().splitlines()
    assert len(lines) == len(run.outcomes)
    assert lines[0].split(" ")[1:4] == ["free0", "archived_only", "release"] and lines[0].endswith(" done")
    assert aggregates.verify(st) == []


def test_dry_run_has_no_side_effects(tmp_path):
    fs = filled_ost()
    st = _mirror(fs)
    before_fs, before_st = fs.dump(), st.dump_snapshot()
    cfg = parse_config(RELEASE_POLICY)
    (status,) = check_triggers(cfg, st, fs)
    dry = run_policy(cfg.policies["free0"], st, fs, trigger=status, dry_run=True, audit_path=tmp_path / "a")
    assert dry.done > 0
    assert fs.dump() == before_fs and st.dump_snapshot() == before_st
    assert not (tmp_path / "a").exists()


@pytest.mark.parametrize("cap", [1, 3, 7])
def test_max_actions_gives_a_prefix(cap):
    fs = filled_ost()
    st = _mirror(fs)
    cfg = parse_config(RELEASE_POLICY)
    (status,) = check_triggers(cfg, st, fs)
    run = run_policy(cfg.policies["free0"], st, fs, trigger=status, max_actions=cap)
    assert run.actioned == _lru(_mirror(filled_ost()), 0)[:cap]
    assert run.stop_reason == "max_actions reached"


def test_max_volume_stops_before_exceeding():
    fs = filled_ost()
    st = _mirror(fs)
    cfg = parse_config(RELEASE_POLICY)
    (status,) = check_triggers(cfg, st, fs)
    run = run_policy(cfg.policies["free0"], st, fs, trigger=status, max_volume=60 * MB)
    assert run.volume <= 60 * MB and run.stop_reason == "max_volume reached"


def test_worker_count_does_not_change_actioned_set():
    results = []
    for workers in (1, 6):
        fs = filled_ost()
        st = _mirror(fs)
        cfg = parse_config(RELEASE_POLICY)
        (status,) = check_triggers(cfg, st, fs)
        results.append(run_policy(cfg.policies["free0"], st, fs, trigger=status, workers=workers).actioned)
    assert results[0] == results[1]


def test_rule_order_and_ignore():
    fs = filled_ost()
    st = _mirror(fs)
    cfg = parse_config("""
        policy tidy {
            scope { type == file }
            rule big { condition { size > 20MB } action log; }
            rule default { action log(level=debug); }
            ignore { owner == 'bar' }
        }""")
    run = run_policy(cfg.policies["tidy"], st, fs)
    seen = {o.fid: o.rule for o in run.outcomes}
    for e in st.iter_entries():
        if e.etype is not EntryType.FILE:
            continue
        if e.owner == "bar":
            assert e.id not in seen
        else:
            assert seen[e.id] == ("big" if e.size > 20 * MB else "default")


class _Flaky(ActionPlugin):
    name = "flaky"

    def apply(self, entry, ctx):
        if entry.size % 2:
            return ActionResult("failed", "odd size")
        if entry.name.startswith("o"):
            raise RuntimeError("plugin bug")
        return ActionResult("done")


def test_failures_give_partial_exit_code():
    register(_Flaky())
    try:
        fs = filled_ost()
        st = _mirror(fs)
        cfg = parse_config("policy p { rule r { condition { type == file } action flaky; } }")
        run = run_policy(cfg.policies["p"], st, fs)
        assert run.failed > 0 and run.done > 0
        assert run.exit_code == EXIT_FAILURES
        assert any(o.result.reason.startswith("RuntimeError") for o in run.outcomes)
    finally:
        unregister("flaky")


def test_unavailable_store_aborts():
    fs = filled_ost()
    st = _mirror(fs, k=2)
    cfg = parse_config(RELEASE_POLICY)
    (status,) = check_triggers(cfg, st, fs)
    st.shards[1].available = False
    run = run_policy(cfg.policies["free0"], st, fs, trigger=status)
    assert run.aborted and run.exit_code == EXIT_ABORTED


def test_precheck_skips_are_audited():
    fs = filled_ost()
    st = _mirror(fs)
    cfg = parse_config("policy p { rule r { condition { type == file } action release; } }")
    run = run_policy(cfg.policies["p"], st, fs, now=1_700_000_000)
    assert run.skipped > 0
    lines = audit_lines(run, 1_700_000_000)
    assert any(line.endswith("skipped:state%20is%20new") for line in lines)
    assert all(line.startswith("2023-11-14T22:13:20Z p r release ") for line in lines)


def test_delete_and_rmdir_actions():
    fs = SimFs(SimConfig())
    d = fs.mkdir(ROOT_FID, "empty")[0].fid
    f = fs.create(ROOT_FID, "junk.tmp", size=10)[0].fid
    st = _mirror(fs)
    cfg = parse_config("""
        policy clean {
            rule tmp { condition { name == *.tmp } action delete; }
            rule dirs { condition { type == dir and dircount == 0 } action rmdir; }
        }""")
    run = run_policy(cfg.policies["clean"], st, fs)
    assert run.done == 2
    assert f not in fs and d not in fs
    assert st.get(f) is None and st.get(d) is None
    assert aggregates.verify(st) == []


def test_shell_action_runs_without_a_shell(tmp_path):
    fs, st, fid = _one_file()
    out = tmp_path / "seen.txt"
    script = tmp_path / "note.py"
    script.write_text("import sys\nopen(sys.argv[1], 'a').write(sys.argv[2])\n")
    cmd = f"{sys.executable} {script} {out} {{path}}"
    cfg = parse_config(f'policy p {{ rule r {{ condition {{ name == precious }} action shell(cmd="{cmd}"); }} }}')
    run = run_policy(cfg.policies["p"], st, fs)
    assert run.done == 1, run.outcomes
    assert out.read_text() == "/precious"
    bad = parse_config('policy p { rule r { condition { name == precious } action shell(cmd="false"); } }')
    run = run_policy(bad.policies["p"], st, fs)
    assert run.failed == 1 and run.outcomes[0].result.reason == "exit 1"


# -- alerts ------------------------------------------------------------------------


def test_alert_sweep_writes_sink(tmp_path):
    fs = filled_ost()
    st = _mirror(fs)
    sink = tmp_path / "alerts.log"
    cfg = parse_config(f"alert bigfile {{ condition {{ size > 25MB }} sink {sink}; }}")
    hits = alert_sweep(cfg, st, now=1_700_000_000)
    want = sum(1 for e in st.iter_entries() if e.size > 25 * MB)
    assert len(hits) == want > 0
    lines = sink.read_text().splitlines()
    assert len(lines) == want
    assert lines[0].startswith("ALERT bigfile 2023-11-14T22:13:20Z 0x")
    alert_sweep(cfg, st, now=1_700_000_000)
    assert len(sink.read_text().splitlines()) == 2 * want
