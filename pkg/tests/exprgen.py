"""Random expressions for property tests, both as hypothesis strategies and plain RNG draws."""

from __future__ import annotations

import random

from hypothesis import strategies as st

from metahood.core import GB, KB, MB, EntryType, HsmState
from metahood.policyspec.expr import And, Compare, Glob, Not, Or

DAY = 86400
NUM_OPS = ("==", "!=", "<", "<=", ">", ">=")
EQ_OPS = ("==", "!=")
OWNERS = ("foo", "bar", "baz", "root")
GLOBS = ("*.tar", "f1*", "*.log", "d?", "*", "w*", "[fl]*")
PATH_GLOBS = ("/d*/*", "/*", "/*/*.tar", "/d*/f*", "/*/*/*")

_sizes = st.one_of(st.integers(0, 2**40), st.sampled_from([0, KB, MB, 64 * MB, GB]))
_ages = st.one_of(st.integers(0, 400 * DAY), st.sampled_from([DAY, 30 * DAY, 7 * DAY]))
_word = st.text(alphabet="abcdefgh0123456789_.-", min_size=1, max_size=6)
_glob = st.builds(lambda a, b: a + "*" + b, st.text(alphabet="abc.", max_size=3), st.text(alphabet="xyz", max_size=3))


def _cmp(attr, ops, values):
    return st.builds(Compare, st.just(attr), st.sampled_from(ops), values)


compares = st.one_of(
    _cmp("size", NUM_OPS, _sizes),
    _cmp("last_access", NUM_OPS, _ages),
    _cmp("last_mod", NUM_OPS, _ages),
    _cmp("depth", NUM_OPS, st.integers(0, 12)),
    _cmp("dircount", NUM_OPS, st.integers(0, 50)),
    _cmp("ost_index", NUM_OPS, st.integers(0, 9)),
    _cmp("type", EQ_OPS, st.sampled_from([t.value for t in EntryType])),
    _cmp("hsm_state", EQ_OPS, st.sampled_from([s.value for s in HsmState])),
    _cmp("owner", EQ_OPS, st.one_of(_word, st.sampled_from(OWNERS), st.text(max_size=5))),
    _cmp("name", EQ_OPS, st.one_of(_word, _glob.map(Glob))),
    _cmp("path", EQ_OPS, st.one_of(st.sampled_from(PATH_GLOBS).map(Glob), _word)),
    _cmp("pool", EQ_OPS, _word),
    _cmp("xattr.tier", EQ_OPS, _word),
)


def _extend(children):
    many = st.lists(children, min_size=2, max_size=4).map(tuple)
    return st.one_of(children.map(Not), many.map(And), many.map(Or))


expressions = st.recursive(compares, _extend, max_leaves=10)


def random_compare(rng: random.Random):
    kind = rng.randrange(11)
    if kind == 0:
        return Compare("size", rng.choice(NUM_OPS), rng.choice([0, 1, KB, 100 * KB, MB, 8 * MB]))
    if kind == 1:
        return Compare("last_access", rng.choice(NUM_OPS), rng.choice([DAY, 30 * DAY, 90 * DAY, 200 * DAY]))
    if kind == 2:
        return Compare("last_mod", rng.choice(NUM_OPS), rng.choice([7 * DAY, 60 * DAY, 300 * DAY]))
    if kind == 3:
        return Compare("depth", rng.choice(NUM_OPS), rng.randrange(0, 5))
    if kind == 4:
        return Compare("dircount", rng.choice(NUM_OPS), rng.randrange(0, 10))
    if kind == 5:
        return Compare("ost_index", rng.choice(NUM_OPS), rng.randrange(0, 8))
    if kind == 6:
        return Compare("type", rng.choice(EQ_OPS), rng.choice([t.value for t in EntryType]))
    if kind == 7:
        return Compare("hsm_state", rng.choice(EQ_OPS), rng.choice([s.value for s in HsmState]))
    if kind == 8:
        return Compare("owner", rng.choice(EQ_OPS), rng.choice(OWNERS))
    if kind == 9:
        return Compare("name", rng.choice(EQ_OPS), Glob(rng.choice(GLOBS)))
    return Compare("path", rng.choice(EQ_OPS), Glob(rng.choice(PATH_GLOBS)))


def random_expression(rng: random.Random, depth: int = 3):
    if depth == 0 or rng.random() < 0.3:
        return random_compare(rng)
    r = rng.random()
    if r < 0.2:
        return Not(random_expression(rng, depth - 1))
    kids = tuple(random_expression(rng, depth - 1) for _ in range(rng.randrange(2, 4)))
    return And(kids) if r < 0.6 else Or(kids)
