from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metahood.core import GB, EntryId, EntryRecord, EntryType
from metahood.policyspec.expr import (
    And,
    Compare,
    ExpressionError,
    ExpressionTypeError,
    Glob,
    Not,
    Or,
    evaluate,
    glob_match,
    parse_expression,
    to_text,
)

from exprgen import compares, expressions

DAY = 86400
ROOT = EntryId(0x200000007, 1)


def _entry(**kw):
    base = dict(id=EntryId(0x200000400, 9), parent=ROOT, name="x.tar", etype=EntryType.FILE, owner="bar")
    base.update(kw)
    return EntryRecord(**base)


def test_example_expression_ast():
    e = parse_expression("(size > 1GB or owner == 'foo')\nand path == /my/fs/*.tar")
    assert e == And((Or((Compare("size", ">", GB), Compare("owner", "==", "foo"))),
                     Compare("path", "==", Glob("/my/fs/*.tar"))))


def test_not_binds_tighter_than_or():
    assert parse_expression("not size == 0 or type == file") == \
        Or((Not(Compare("size", "==", 0)), Compare("type", "==", "file")))


def test_keywords_case_insensitive():
    assert parse_expression("NOT size == 0 AND type == dir") == \
        And((Not(Compare("size", "==", 0)), Compare("type", "==", "dir")))


@pytest.mark.parametrize("text", ["size > 'foo'", "last_access > 5KB", "owner < 'x'", "type == blob",
                                  "ost_index == a", "hsm_state == frozen"])
def test_type_errors(text):
    with pytest.raises(ExpressionTypeError):
        parse_expression(text)


def test_syntax_error_position():
    with pytest.raises(ExpressionError) as info:
        parse_expression("size > 1GB and\n  (owner == 'x'")
    err = info.value
    assert (err.line, err.column) == (2, 16)
    assert ")" in err.expected
    with pytest.raises(ExpressionError) as info:
        parse_expression("colour == 'red'")
    assert info.value.column == 1


@pytest.mark.parametrize("text", ["", "size >", "size = 1", "(size > 1", "size > 1 size < 2", "owner == 'x"])
def test_syntax_errors(text):
    with pytest.raises(ExpressionError):
        parse_expression(text)


def test_example_entry_matches():
    e = parse_expression("(size > 1GB or owner == 'foo') and path == /my/fs/*.tar")
    assert evaluate(e, _entry(size=2 * GB), 0, "/my/fs/x.tar")
    assert not evaluate(e, _entry(size=2 * GB), 0, "/my/fs/sub/x.tar")
    assert not evaluate(e, _entry(size=10), 0, "/my/fs/x.tar")


def test_age_semantics():
    now = 1_700_000_000
    e = parse_expression("last_access > 30d")
    assert evaluate(e, _entry(atime=now - 31 * DAY), now)
    assert not evaluate(e, _entry(atime=now - 29 * DAY), now)


def test_ost_membership():
    f = _entry(ost_set=(1, 3))
    assert not evaluate(parse_expression("ost_index == 2"), f, 0)
    assert evaluate(parse_expression("ost_index == 3"), f, 0)
    assert evaluate(parse_expression("ost_index != 2"), f, 0)


def test_depth_counts_components():
    e = parse_expression("depth == 2")
    assert evaluate(e, _entry(), 0, "/a/b/c")
    assert not evaluate(e, _entry(), 0, "/a/b")


def test_xattr_absent_is_false():
    e = parse_expression("xattr.tier == 'hot'")
    assert not evaluate(e, _entry(), 0)
    assert not evaluate(parse_expression("xattr.tier != 'hot'"), _entry(), 0)
    assert evaluate(e, _entry(), 0, xattrs={"tier": "hot"})


def test_short_circuit_left_to_right():
    counter: dict = {}
    e = parse_expression("size > 1GB and owner == 'bar' and name == x.tar")
    evaluate(e, _entry(size=1), 0, counter=counter)
    assert counter["compare"] == 1


def test_globs_do_not_cross_slashes():
    assert glob_match("/a/*", "/a/b")
    assert not glob_match("/a/*", "/a/b/c")
    assert glob_match("f?.[tl]og", "f1.log")
    assert not glob_match("[!f]*", "foo")


@settings(max_examples=500)
@given(expressions)
def test_print_parse_roundtrip(e):
    assert parse_expression(to_text(e)) == e


def _atom_text(c):
    return to_text(c)


@settings(max_examples=500)
@given(st.lists(st.tuples(st.integers(0, 2), compares), min_size=1, max_size=6),
       st.lists(st.sampled_from(["and", "or"]), min_size=5, max_size=5))
def test_precedence_against_reference_grouping(factors, ops):
    # flat text: [not]* atom (op [not]* atom)*, no parentheses
    words = []
    for i, (nots, atom) in enumerate(factors):
        if i:
            words.append(ops[i - 1])
        words += ["not"] * nots + [_atom_text(atom)]
    text = " ".join(words)
    # reference: split on 'or', then 'and'; leading nots wrap the atom
    groups: list[list] = [[]]
    for i, (nots, atom) in enumerate(factors):
        if i and ops[i - 1] == "or":
            groups.append([])
        node = atom
        for _ in range(nots):
            node = Not(node)
        groups[-1].append(node)
    terms = [g[0] if len(g) == 1 else And(tuple(g)) for g in groups]
    want = terms[0] if len(terms) == 1 else Or(tuple(terms))
    assert parse_expression(text) == want


@settings(max_examples=200, deadline=None)
@given(expressions, st.integers(0, 2**34), st.sampled_from(["foo", "bar"]))
def test_not_is_complement(e, size, owner):
    ent = _entry(size=size, owner=owner, atime=5, mtime=3, ost_set=(0, 2))
    now = 1_000_000
    assert evaluate(Not(e), ent, now, "/d/x.tar") is (not evaluate(e, ent, now, "/d/x.tar"))


def test_random_programs_parse_or_fail_cleanly():
    rng = random.Random(0)
    alphabet = ["size", ">", "1GB", "and", "or", "not", "(", ")", "owner", "==", "'foo'", "type", "file", "<"]
    for _ in range(500):
        text = " ".join(rng.choice(alphabet) for _ in range(rng.randrange(1, 9)))
        try:
            parse_expression(text)
        except ExpressionError as exc:
            assert exc.line == 1 and exc.column >= 1
