"""Condition expressions over entry attributes.

Grammar (keywords are case-insensitive)::

    or  := and ('or' and)*
    and := not ('and' not)*
    not := 'not' not | '(' or ')' | cmp
    cmp := attr op value

Values are sizes (``1GB``), durations (``30d``), integers, single-quoted
strings, or unquoted words; an unquoted word containing ``*`` or ``?`` is a
glob. ``==`` against a glob means "matches".
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator, Mapping, Optional, Union

from metahood.core import (
    EntryRecord,
    EntryType,
    HsmState,
    ParseError,
    format_duration,
    format_size,
    parse_duration,
    parse_size,
    path_depth,
)

# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Glob:
    pattern: str

    def __str__(self) -> str:
        return self.pattern


Value = Union[int, str, Glob]


@dataclass(frozen=True, slots=True)
class Compare:
    attr: str
    op: str
    value: Value


@dataclass(frozen=True, slots=True)
class Not:
    child: "Expression"


@dataclass(frozen=True, slots=True)
class And:
    children: tuple["Expression", ...]

    def __post_init__(self) -> None:
        if len(self.children) < 2:
            raise ValueError("And needs at least two children")


@dataclass(frozen=True, slots=True)
class Or:
    children: tuple["Expression", ...]

    def __post_init__(self) -> None:
        if len(self.children) < 2:
            raise ValueError("Or needs at least two children")


Expression = Union[Or, And, Not, Compare]

OPS = ("==", "!=", "<=", ">=", "<", ">")
SIZE_ATTRS = frozenset({"size"})
AGE_ATTRS = frozenset({"last_access", "last_mod"})
INT_ATTRS = frozenset({"depth", "dircount", "ost_index"})
STRING_ATTRS = frozenset({"name", "path", "owner", "group", "pool"})
ENUM_ATTRS = {"type": {t.value for t in EntryType}, "hsm_state": {s.value for s in HsmState}}
ATTRS = SIZE_ATTRS | AGE_ATTRS | INT_ATTRS | STRING_ATTRS | frozenset(ENUM_ATTRS)
KEYWORDS = ("and", "or", "not")


class ExpressionError(ParseError):
    """Syntax or type error, positioned at (line, column), both 1-based."""

    def __init__(self, message: str, line: int, column: int, expected: tuple[str, ...] = ()):
        self.line = line
        self.column = column
        self.expected = expected
        self.message = message
        self.token = None
        text = f"{line}:{column}: {message}"
        if expected:
            text += f" (expected one of: {', '.join(expected)})"
        Exception.__init__(self, text)


class ExpressionTypeError(ExpressionError):
    pass


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Token:
    kind: str  # WORD STRING OP LPAREN RPAREN EOF
    text: str
    line: int
    col: int
    value: str = ""


_STOP = set(" \t\r\n()'<>=")


def tokenize(text: str, line: int = 1, col: int = 1) -> list[Token]:
    toks: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line, col, i = line + 1, 1, i + 1
            continue
        if ch in " \t\r":
            i, col = i + 1, col + 1
            continue
        start_col = col
        if ch == "(" or ch == ")":
            toks.append(Token("LPAREN" if ch == "(" else "RPAREN", ch, line, start_col))
            i, col = i + 1, col + 1
            continue
        two = text[i:i + 2]
        if two in ("==", "!=", "<=", ">="):
            toks.append(Token("OP", two, line, start_col))
            i, col = i + 2, col + 2
            continue
        if ch in "<>":
            toks.append(Token("OP", ch, line, start_col))
            i, col = i + 1, col + 1
            continue
        if ch == "=":
            raise ExpressionError("single '=' is not an operator", line, start_col, ("==",))
        if ch == "'":
            j = i + 1
            buf = []
            while j < n and text[j] != "'":
                if text[j] == "\\" and j + 1 < n and text[j + 1] in "\\'":
                    buf.append(text[j + 1])
                    j += 2
                    continue
                if text[j] == "\n":
                    break
                buf.append(text[j])
                j += 1
            if j >= n or text[j] != "'":
                raise ExpressionError("unterminated string", line, start_col, ("'",))
            raw = text[i:j + 1]
            toks.append(Token("STRING", raw, line, start_col, "".join(buf)))
            col += j + 1 - i
            i = j + 1
            continue
        j = i
        while j < n and text[j] not in _STOP and not (text[j] == "!" and text[j + 1:j + 2] == "="):
            j += 1
        word = text[i:j]
        toks.append(Token("WORD", word, line, start_col, word))
        col += j - i
        i = j
    toks.append(Token("EOF", "", line, col))
    return toks


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, toks: list[Token]):
        self.toks = toks
        self.pos = 0

    def peek(self) -> Token:
        return self.toks[self.pos]

    def advance(self) -> Token:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def is_kw(self, tok: Token, kw: str) -> bool:
        return tok.kind == "WORD" and tok.text.lower() == kw

    def parse(self) -> Expression:
        e = self.or_()
        tok = self.peek()
        if tok.kind != "EOF":
            raise ExpressionError(f"unexpected {tok.text!r}", tok.line, tok.col, ("and", "or", "end of input"))
        return e

    def or_(self) -> Expression:
        items = [self.and_()]
        while self.is_kw(self.peek(), "or"):
            self.advance()
            items.append(self.and_())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def and_(self) -> Expression:
        items = [self.not_()]
        while self.is_kw(self.peek(), "and"):
            self.advance()
            items.append(self.not_())
        return items[0] if len(items) == 1 else And(tuple(items))

    def not_(self) -> Expression:
        tok = self.peek()
        if self.is_kw(tok, "not"):
            self.advance()
            return Not(self.not_())
        if tok.kind == "LPAREN":
            self.advance()
            e = self.or_()
            close = self.peek()
            if close.kind != "RPAREN":
                raise ExpressionError(f"unexpected {close.text or 'end of input'!r}", close.line, close.col,
                                      (")", "and", "or"))
            self.advance()
            return e
        return self.cmp()

    def cmp(self) -> Expression:
        tok = self.advance()
        if tok.kind != "WORD" or tok.text.lower() in KEYWORDS:
            raise ExpressionError(f"unexpected {tok.text or 'end of input'!r}", tok.line, tok.col,
                                  ("attribute", "not", "("))
        attr = tok.text
        if attr not in ATTRS and not (attr.startswith("xattr.") and len(attr) > 6):
            raise ExpressionError(f"unknown attribute {attr!r}", tok.line, tok.col, tuple(sorted(ATTRS)) + ("xattr.<key>",))
        op_tok = self.advance()
        if op_tok.kind != "OP":
            raise ExpressionError(f"unexpected {op_tok.text or 'end of input'!r}", op_tok.line, op_tok.col, OPS)
        val_tok = self.advance()
        if val_tok.kind not in ("WORD", "STRING") or (val_tok.kind == "WORD" and val_tok.text.lower() in KEYWORDS):
            raise ExpressionError(f"unexpected {val_tok.text or 'end of input'!r}", val_tok.line, val_tok.col,
                                  ("value",))
        return Compare(attr, op_tok.text, _typed_value(attr, op_tok, val_tok))


def _typed_value(attr: str, op_tok: Token, tok: Token) -> Value:
    op = op_tok.text

    def fail(msg: str) -> ExpressionTypeError:
        return ExpressionTypeError(msg, tok.line, tok.col)

    if attr in SIZE_ATTRS or attr in AGE_ATTRS or attr in INT_ATTRS:
        if tok.kind == "STRING":
            raise fail(f"{attr} compares with a number, not a string")
        try:
            if attr in SIZE_ATTRS:
                return parse_size(tok.text)
            if attr in AGE_ATTRS:
                return parse_duration(tok.text)
            if not tok.text.isdigit():
                raise ValueError
            return int(tok.text)
        except ValueError:
            kind = "size" if attr in SIZE_ATTRS else "duration" if attr in AGE_ATTRS else "integer"
            raise fail(f"{attr} expects a {kind}, got {tok.text!r}") from None
    if op not in ("==", "!="):
        raise ExpressionTypeError(f"{attr} only supports == and !=", op_tok.line, op_tok.col, ("==", "!="))
    if attr in ENUM_ATTRS:
        text = tok.value
        if text not in ENUM_ATTRS[attr]:
            raise fail(f"unknown {attr} value {text!r}")
        return text
    if tok.kind == "STRING":
        return tok.value
    if "*" in tok.text or "?" in tok.text:
        return Glob(tok.text)
    return tok.text


def parse_expression(text: str, *, line: int = 1, col: int = 1) -> Expression:
    return _Parser(tokenize(text, line, col)).parse()


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------


def _format_value(attr: str, value: Value) -> str:
    if isinstance(value, Glob):
        return value.pattern
    if isinstance(value, str):
        return "'" + value.replace("\\", "\\\\").replace("'", "\\'") + "'"
    if attr in SIZE_ATTRS:
        return format_size(value)
    if attr in AGE_ATTRS:
        return format_duration(value)
    return str(value)


def to_text(e: Expression) -> str:
    """Fully parenthesized canonical form; ``parse_expression`` inverts it."""
    if isinstance(e, Compare):
        return f"{e.attr} {e.op} {_format_value(e.attr, e.value)}"
    if isinstance(e, Not):
        return f"(not {to_text(e.child)})"
    sep = " and " if isinstance(e, And) else " or "
    return "(" + sep.join(to_text(c) for c in e.children) + ")"


def walk(e: Expression) -> Iterator[Expression]:
    yield e
    if isinstance(e, Not):
        yield from walk(e.child)
    elif isinstance(e, (And, Or)):
        for c in e.children:
            yield from walk(c)


def uses_xattr(e: Expression) -> bool:
    return any(isinstance(n, Compare) and n.attr.startswith("xattr.") for n in walk(e))


def needs_path(e: Expression) -> bool:
    return any(isinstance(n, Compare) and n.attr in ("path", "depth") for n in walk(e))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4096)
def _glob_regex(pattern: str) -> re.Pattern[str]:
    out = []
    i, n = 0, len(pattern)
    while i < n:
        ch = pattern[i]
        i += 1
        if ch == "*":
            out.append("[^/]*")
        elif ch == "?":
            out.append("[^/]")
        elif ch == "[":
            j = i
            if j < n and pattern[j] in "!^":
                j += 1
            if j < n and pattern[j] == "]":
                j += 1
            while j < n and pattern[j] != "]":
                j += 1
            if j >= n:
                out.append("\\[")
            else:
                body = pattern[i:j]
                i = j + 1
                neg = body[:1] in ("!", "^")
                if neg:
                    body = body[1:]
                body = body.replace("\\", "\\\\")
                out.append(f"[^/{body}]" if neg else f"[{body}]")
        else:
            out.append(re.escape(ch))
    return re.compile("".join(out) + r"\Z", re.DOTALL)


def glob_match(pattern: str, text: str) -> bool:
    """fnmatch-style match where ``*``, ``?`` and classes never match ``/``."""
    return _glob_regex(pattern).match(text) is not None


_NUM_OPS: dict[str, Callable[[int, int], bool]] = {
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def _string_test(op: str, value: Value, actual: str) -> bool:
    if isinstance(value, Glob):
        hit = glob_match(value.pattern, actual)
    else:
        hit = actual == value
    return hit if op == "==" else not hit


def evaluate(e: Expression, entry: EntryRecord, now: int, path: str = "",
             xattrs: Optional[Mapping[str, str]] = None, counter: Optional[dict[str, int]] = None) -> bool:
    """Entry-side evaluation; ``path`` must be the entry's resolved path."""
    if isinstance(e, Compare):
        if counter is not None:
            counter["compare"] = counter.get("compare", 0) + 1
        return _compare(e, entry, now, path, xattrs)
    if isinstance(e, Not):
        return not evaluate(e.child, entry, now, path, xattrs, counter)
    if isinstance(e, And):
        return all(evaluate(c, entry, now, path, xattrs, counter) for c in e.children)
    return any(evaluate(c, entry, now, path, xattrs, counter) for c in e.children)


def _compare(c: Compare, entry: EntryRecord, now: int, path: str,
             xattrs: Optional[Mapping[str, str]]) -> bool:
    a, op, v = c.attr, c.op, c.value
    if a == "size":
        return _NUM_OPS[op](entry.size, v)  # type: ignore[arg-type]
    if a == "last_access":
        return _NUM_OPS[op](now - entry.atime, v)  # type: ignore[arg-type]
    if a == "last_mod":
        return _NUM_OPS[op](now - entry.mtime, v)  # type: ignore[arg-type]
    if a == "dircount":
        return _NUM_OPS[op](entry.dircount, v)  # type: ignore[arg-type]
    if a == "depth":
        return _NUM_OPS[op](path_depth(path), v)  # type: ignore[arg-type]
    if a == "ost_index":
        if op == "==":
            return v in entry.ost_set
        if op == "!=":
            return v not in entry.ost_set
        return any(_NUM_OPS[op](i, v) for i in entry.ost_set)  # type: ignore[arg-type]
    if a == "type":
        return (entry.etype.value == v) == (op == "==")
    if a == "hsm_state":
        return (entry.hsm.value == v) == (op == "==")
    if a == "name":
        return _string_test(op, v, entry.name)
    if a == "path":
        return _string_test(op, v, path)
    if a == "owner":
        return _string_test(op, v, entry.owner)
    if a == "group":
        return _string_test(op, v, entry.group)
    if a == "pool":
        return _string_test(op, v, entry.pool)
    if a.startswith("xattr."):
        if xattrs is None or a[6:] not in xattrs:
            return False
        return _string_test(op, v, xattrs[a[6:]])
    raise AssertionError(f"unhandled attribute {a}")
