from __future__ import annotations

import random

from hypothesis import HealthCheck, given, settings

from metahood.core import EntryType
from metahood.policyspec.expr import evaluate, parse_expression
from metahood.scanner import scan
from metahood.simfs import SimConfig, create_namespace, random_workload
from metahood.store import QuerySpec, open_store
from metahood.store.query import PathCache, to_sql

from exprgen import expressions, random_expression

_FS = create_namespace(SimConfig(seed=21, pools={"fast": (0, 1)}), 400)
random_workload(_FS, 3, 150)
_STORE = open_store(shards=3)
scan(_FS, _STORE, 2)
NOW = _FS.now() + 10


def brute(store, e, now):
    paths = PathCache(store)
    return {x.id for x in store.iter_entries() if evaluate(e, x, now, paths.path(x))}


def test_pushdown_of_plain_comparison():
    sql, params, exact = to_sql(parse_expression("size > 1KB and owner == 'foo'"), 0)
    assert exact and params == [1024, "foo"]
    assert to_sql(parse_expression("name == *.tar"), 0) is None


def test_store_and_entry_evaluation_agree_on_random_filters():
    rng = random.Random(5)
    for _ in range(60):
        e = random_expression(rng)
        got = {x.id for x in _STORE.query(QuerySpec(filter=e), NOW)}
        assert got == brute(_STORE, e, NOW), e


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(expressions)
def test_store_and_entry_evaluation_agree(e):
    got = {x.id for x in _STORE.query(QuerySpec(filter=e), NOW)}
    assert got == brute(_STORE, e, NOW)


def test_path_filters():
    hits = _STORE.query(QuerySpec(filter=parse_expression("path == /d*/* and type == file"), sort="path"), NOW)
    assert hits
    paths = [_STORE.resolve_path(h.id) for h in hits]
    assert paths == sorted(paths)
    assert all(p.count("/") == 2 and p.startswith("/d") for p in paths)


def test_query_under_directory():
    d = next(e for e in _STORE.iter_entries() if e.etype is EntryType.DIR and e.dircount > 2 and not e.is_root)
    base = _STORE.resolve_path(d.id)
    got = _STORE.query(QuerySpec(under=d.id))
    assert got and all(_STORE.resolve_path(x.id).startswith(base + "/") for x in got)
