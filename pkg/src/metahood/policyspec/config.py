"""Brace-block policy configuration.

::

    fileclass big { definition { size > 1GB } }
    policy purge {
        scope { type == file }
        max_actions 100;
        rule old_big {
            target_fileclass big;
            condition { last_access > 30d }
            action release;
        }
        rule default { action log(level=info); }
        ignore { owner == 'root' }
        trigger ost_usage { high 80%; low 70%; target ost 0; }
    }
    alert huge_dir { condition { dircount > 10000 } sink /tmp/alerts.log; }

``#`` starts a comment that runs to the end of the line. Expressions inside
``{ }`` use the condition language and report positions in the whole file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Collection, Optional, Union

from metahood.core import ParseError, parse_size
from metahood.policyspec.expr import (
    And,
    Expression,
    ExpressionError,
    parse_expression,
    to_text,
    uses_xattr,
)
from metahood.store.model import QuerySpec

TRIGGER_KINDS = ("global_usage", "ost_usage", "pool_usage", "user_volume", "user_count")
USAGE_KINDS = frozenset({"global_usage", "ost_usage", "pool_usage"})
DEFAULT_RULE = "default"


class ConfigError(ParseError):
    """Configuration problem, positioned at (line, column) when known."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        self.message = message
        self.token = None
        Exception.__init__(self, f"{line}:{column}: {message}" if line else message)


@dataclass(frozen=True)
class Action:
    name: str
    params: tuple[tuple[str, str], ...] = ()

    def param(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return dict(self.params).get(key, default)

    def __str__(self) -> str:
        if not self.params:
            return self.name
        return f"{self.name}({','.join(f'{k}={v}' for k, v in self.params)})"


@dataclass(frozen=True)
class Rule:
    name: str
    condition: Optional[Expression]
    action: Action
    target_fileclass: Optional[str] = None
    # fileclass definition and condition combined; None matches everything
    effective: Optional[Expression] = None

    @property
    def is_default(self) -> bool:
        return self.name == DEFAULT_RULE


@dataclass(frozen=True)
class Trigger:
    kind: str
    high: float
    low: float
    # "global", ("ost", n), ("pool", name) or ("user", name); None means all users
    target: Union[str, tuple[str, Union[int, str]], None] = None

    def __post_init__(self) -> None:
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if not self.low < self.high:
            raise ValueError(f"low watermark {self.low} must be below high {self.high}")

    @property
    def is_usage(self) -> bool:
        return self.kind in USAGE_KINDS

    def describe(self) -> str:
        t = self.target
        where = "" if t is None else f" {t}" if isinstance(t, str) else f" {t[0]} {t[1]}"
        unit = "%" if self.is_usage else ""
        return f"{self.kind}{where} high={self.high:g}{unit} low={self.low:g}{unit}"


@dataclass(frozen=True)
class Policy:
    name: str
    scope: Optional[Expression]
    rules: tuple[Rule, ...]
    ignore: tuple[Expression, ...] = ()
    triggers: tuple[Trigger, ...] = ()
    max_actions: Optional[int] = None
    max_volume: Optional[int] = None
    max_concurrent_actions: int = 4

    def rule(self, name: str) -> Rule:
        for r in self.rules:
            if r.name == name:
                return r
        raise KeyError(name)


@dataclass(frozen=True)
class AlertSpec:
    name: str
    condition: Expression
    sink: str


@dataclass
class PolicyConfig:
    fileclasses: dict[str, Expression] = field(default_factory=dict)
    policies: dict[str, Policy] = field(default_factory=dict)
    alerts: dict[str, AlertSpec] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Lexer: words, punctuation and raw expression bodies
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class _Tok:
    kind: str  # WORD, PUNCT, EOF
    text: str
    line: int
    col: int


_PUNCT = set("{};(),=")


class _Lexer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1
        self._peeked: Optional[_Tok] = None

    def _advance(self, n: int = 1) -> None:
        for _ in range(n):
            if self.text[self.pos] == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
            self.pos += 1

    def _skip(self) -> None:
        while self.pos < len(self.text):
            c = self.text[self.pos]
            if c == "#":
                while self.pos < len(self.text) and self.text[self.pos] != "\n":
                    self._advance()
            elif c.isspace():
                self._advance()
            else:
                return

    def peek(self) -> _Tok:
        if self._peeked is None:
            self._peeked = self._next()
        return self._peeked

    def next(self) -> _Tok:
        tok = self.peek()
        self._peeked = None
        return tok

    def _next(self) -> _Tok:
        self._skip()
        line, col = self.line, self.col
        if self.pos >= len(self.text):
            return _Tok("EOF", "", line, col)
        c = self.text[self.pos]
        if c in _PUNCT:
            self._advance()
            return _Tok("PUNCT", c, line, col)
        start = self.pos
        while self.pos < len(self.text):
            c = self.text[self.pos]
            if c.isspace() or c in _PUNCT or c == "#":
                break
            self._advance()
        return _Tok("WORD", self.text[start:self.pos], line, col)

    def raw_block(self) -> tuple[str, int, int]:
        """Consume ``{ ... }`` verbatim and return its body with the body's position."""
        assert self._peeked is None
        self._skip()
        if self.pos >= len(self.text) or self.text[self.pos] != "{":
            raise ConfigError("expected '{'", self.line, self.col)
        self._advance()
        line, col = self.line, self.col
        start = self.pos
        quoted = False
        while self.pos < len(self.text):
            c = self.text[self.pos]
            if quoted:
                if c == "\\":
                    self._advance()
                elif c == "'":
                    quoted = False
            elif c == "'":
                quoted = True
            elif c == "#":
                # comments never belong to expressions; blank them out
                end = self.text.find("\n", self.pos)
                end = len(self.text) if end < 0 else end
                self.text = self.text[:self.pos] + " " * (end - self.pos) + self.text[end:]
                continue
            elif c == "}":
                body = self.text[start:self.pos]
                self._advance()
                return body, line, col
            self._advance()
        raise ConfigError("unterminated '{' block", line, col)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _ConfigParser:
    def __init__(self, text: str, actions: Optional[Collection[str]]):
        self.lx = _Lexer(text)
        self.actions = actions
        self.cfg = PolicyConfig()
        self.pending_refs: list[tuple[str, _Tok]] = []

    def expect(self, text: str) -> _Tok:
        tok = self.lx.next()
        if tok.text != text or (tok.kind == "WORD" and text in _PUNCT):
            raise ConfigError(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.line, tok.col)
        return tok

    def word(self, what: str) -> _Tok:
        tok = self.lx.next()
        if tok.kind != "WORD":
            raise ConfigError(f"expected {what}, found {tok.text or 'end of input'!r}", tok.line, tok.col)
        return tok

    def expr_block(self) -> Expression:
        body, line, col = self.lx.raw_block()
        try:
            return parse_expression(body, line=line, col=col)
        except ExpressionError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1] if exc.line else str(exc), exc.line, exc.column) from None

    def parse(self) -> PolicyConfig:
        while True:
            tok = self.lx.next()
            if tok.kind == "EOF":
                break
            kw = tok.text.lower()
            if kw == "fileclass":
                self.fileclass()
            elif kw == "policy":
                self.policy()
            elif kw == "alert":
                self.alert()
            else:
                raise ConfigError(f"unknown block {tok.text!r} (expected fileclass, policy or alert)",
                                  tok.line, tok.col)
        self.resolve()
        return self.cfg

    def _new_name(self, table: dict, what: str) -> _Tok:
        tok = self.word(f"{what} name")
        if tok.text in table:
            raise ConfigError(f"duplicate {what} {tok.text!r}", tok.line, tok.col)
        return tok

    def fileclass(self) -> None:
        name = self._new_name(self.cfg.fileclasses, "fileclass")
        self.expect("{")
        kw = self.word("'definition'")
        if kw.text.lower() != "definition":
            raise ConfigError(f"unknown keyword {kw.text!r} in fileclass (expected definition)", kw.line, kw.col)
        definition = self.expr_block()
        self.expect("}")
        self.cfg.fileclasses[name.text] = definition

    def policy(self) -> None:
        name = self._new_name(self.cfg.policies, "policy")
        self.expect("{")
        scope: Optional[Expression] = None
        rules: list[Rule] = []
        ignore: list[Expression] = []
        triggers: list[Trigger] = []
        limits: dict[str, int] = {}
        while True:
            tok = self.lx.next()
            if tok.text == "}" and tok.kind == "PUNCT":
                break
            if tok.kind != "WORD":
                raise ConfigError(f"unexpected {tok.text or 'end of input'!r} in policy", tok.line, tok.col)
            kw = tok.text.lower()
            if kw == "scope":
                if scope is not None:
                    raise ConfigError("duplicate scope", tok.line, tok.col)
                scope = self.expr_block()
            elif kw == "rule":
                rule = self.rule(rules)
                rules.append(rule)
            elif kw == "ignore":
                ignore.append(self.expr_block())
            elif kw == "trigger":
                triggers.append(self.trigger())
            elif kw in ("max_actions", "max_volume", "max_concurrent_actions"):
                if kw in limits:
                    raise ConfigError(f"duplicate {kw}", tok.line, tok.col)
                val = self.word(f"{kw} value")
                try:
                    limits[kw] = parse_size(val.text) if kw == "max_volume" else int(val.text)
                except ValueError:
                    raise ConfigError(f"bad {kw} value {val.text!r}", val.line, val.col) from None
                if limits[kw] < (1 if kw == "max_concurrent_actions" else 0):
                    raise ConfigError(f"{kw} out of range", val.line, val.col)
                self.expect(";")
            else:
                raise ConfigError(f"unknown keyword {tok.text!r} in policy", tok.line, tok.col)
        if not rules:
            raise ConfigError(f"policy {name.text!r} has no rules", name.line, name.col)
        # the default rule only applies when nothing else matched
        ordered = [r for r in rules if not r.is_default] + [r for r in rules if r.is_default]
        self.cfg.policies[name.text] = Policy(
            name=name.text, scope=scope, rules=tuple(ordered), ignore=tuple(ignore), triggers=tuple(triggers),
            max_actions=limits.get("max_actions"), max_volume=limits.get("max_volume"),
            max_concurrent_actions=limits.get("max_concurrent_actions", 4),
        )

    def rule(self, earlier: list[Rule]) -> Rule:
        name = self.word("rule name")
        if any(r.name == name.text for r in earlier):
            what = "default rule" if name.text == DEFAULT_RULE else f"rule {name.text!r}"
            raise ConfigError(f"duplicate {what}", name.line, name.col)
        self.expect("{")
        target: Optional[str] = None
        condition: Optional[Expression] = None
        action: Optional[Action] = None
        while True:
            tok = self.lx.next()
            if tok.text == "}" and tok.kind == "PUNCT":
                break
            kw = tok.text.lower()
            if kw == "target_fileclass":
                ref = self.word("fileclass name")
                self.expect(";")
                target = ref.text
                self.pending_refs.append((ref.text, ref))
            elif kw == "condition":
                condition = self.expr_block()
            elif kw == "action":
                action = self.action()
            else:
                raise ConfigError(f"unknown keyword {tok.text!r} in rule", tok.line, tok.col)
        if action is None:
            raise ConfigError(f"rule {name.text!r} has no action", name.line, name.col)
        if condition is None and target is None and name.text != DEFAULT_RULE:
            raise ConfigError(f"rule {name.text!r} needs a condition or target_fileclass", name.line, name.col)
        return Rule(name=name.text, condition=condition, action=action, target_fileclass=target)

    def action(self) -> Action:
        name = self.word("action name")
        if self.actions is not None and name.text not in self.actions:
            raise ConfigError(f"unknown action {name.text!r} (known: {', '.join(sorted(self.actions))})",
                              name.line, name.col)
        params: list[tuple[str, str]] = []
        if self.lx.peek().text == "(":
            self.lx.next()
            while True:
                key = self.word("parameter name")
                self.expect("=")
                val = self._param_value()
                params.append((key.text, val))
                sep = self.lx.next()
                if sep.text == ")":
                    break
                if sep.text != ",":
                    raise ConfigError("expected ',' or ')'", sep.line, sep.col)
        self.expect(";")
        return Action(name.text, tuple(params))

    def _param_value(self) -> str:
        # values run to the next ',' or ')' at nesting level 0, so templates keep their spaces
        lx = self.lx
        assert lx._peeked is None
        lx._skip()
        start = lx.pos
        line, col = lx.line, lx.col
        quoted = False
        while lx.pos < len(lx.text):
            c = lx.text[lx.pos]
            if quoted:
                if c == '"':
                    quoted = False
            elif c == '"':
                quoted = True
            elif c in ",)":
                break
            lx._advance()
        else:
            raise ConfigError("unterminated parameter list", line, col)
        raw = lx.text[start:lx.pos].strip()
        if len(raw) >= 2 and raw[0] == raw[-1] == '"':
            raw = raw[1:-1]
        return raw

    def trigger(self) -> Trigger:
        kind = self.word("trigger kind")
        if kind.text not in TRIGGER_KINDS:
            raise ConfigError(f"unknown trigger kind {kind.text!r}", kind.line, kind.col)
        self.expect("{")
        vals: dict[str, float] = {}
        target = None
        while True:
            tok = self.lx.next()
            if tok.text == "}" and tok.kind == "PUNCT":
                break
            kw = tok.text.lower()
            if kw in ("high", "low"):
                v = self.word(f"{kw} watermark")
                vals[kw] = self._watermark(kind.text, v)
                self.expect(";")
            elif kw == "target":
                target = self._target(kind.text)
            else:
                raise ConfigError(f"unknown keyword {tok.text!r} in trigger", tok.line, tok.col)
        for k in ("high", "low"):
            if k not in vals:
                raise ConfigError(f"trigger {kind.text} needs a {k} watermark", kind.line, kind.col)
        try:
            return Trigger(kind.text, vals["high"], vals["low"], target)
        except ValueError as exc:
            raise ConfigError(str(exc), kind.line, kind.col) from None

    def _watermark(self, kind: str, tok: _Tok) -> float:
        text = tok.text
        try:
            if kind in USAGE_KINDS:
                if not text.endswith("%"):
                    raise ValueError
                v = float(text[:-1])
                if not 0 <= v <= 100:
                    raise ValueError
                return v
            if kind == "user_volume":
                return float(parse_size(text))
            return float(int(text))
        except ValueError:
            want = "a percentage" if kind in USAGE_KINDS else "a size" if kind == "user_volume" else "a count"
            raise ConfigError(f"watermark {text!r} is not {want}", tok.line, tok.col) from None

    def _target(self, kind: str):
        what = self.word("target")
        w = what.text.lower()
        if w == "global":
            self.expect(";")
            return "global"
        arg = self.word(f"{w} target")
        self.expect(";")
        allowed = {"ost_usage": "ost", "pool_usage": "pool", "user_volume": "user", "user_count": "user"}
        if allowed.get(kind) != w:
            raise ConfigError(f"target {w!r} does not fit trigger {kind}", what.line, what.col)
        if w == "ost":
            try:
                return ("ost", int(arg.text))
            except ValueError:
                raise ConfigError(f"bad ost index {arg.text!r}", arg.line, arg.col) from None
        return (w, arg.text)

    def alert(self) -> None:
        name = self._new_name(self.cfg.alerts, "alert")
        self.expect("{")
        condition: Optional[Expression] = None
        sink: Optional[str] = None
        while True:
            tok = self.lx.next()
            if tok.text == "}" and tok.kind == "PUNCT":
                break
            kw = tok.text.lower()
            if kw == "condition":
                condition = self.expr_block()
            elif kw == "sink":
                sink = self.word("sink path").text
                self.expect(";")
            else:
                raise ConfigError(f"unknown keyword {tok.text!r} in alert", tok.line, tok.col)
        if condition is None or sink is None:
            raise ConfigError(f"alert {name.text!r} needs a condition and a sink", name.line, name.col)
        self.cfg.alerts[name.text] = AlertSpec(name.text, condition, sink)

    def resolve(self) -> None:
        for ref, tok in self.pending_refs:
            if ref not in self.cfg.fileclasses:
                raise ConfigError(f"dangling reference to fileclass {ref!r}", tok.line, tok.col)
        for pname, pol in list(self.cfg.policies.items()):
            rules = []
            for r in pol.rules:
                parts = []
                if r.target_fileclass is not None:
                    parts.append(self.cfg.fileclasses[r.target_fileclass])
                if r.condition is not None:
                    parts.append(r.condition)
                eff = None if not parts else parts[0] if len(parts) == 1 else And(tuple(parts))
                rules.append(Rule(r.name, r.condition, r.action, r.target_fileclass, eff))
            self.cfg.policies[pname] = Policy(
                pol.name, pol.scope, tuple(rules), pol.ignore, pol.triggers,
                pol.max_actions, pol.max_volume, pol.max_concurrent_actions,
            )


def parse_config(text: str, actions: Optional[Collection[str]] = None) -> PolicyConfig:
    """Parse a configuration; ``actions`` defaults to the engine's registered plugins."""
    if actions is None:
        from metahood.engine.actions import registered_actions

        actions = registered_actions()
    return _ConfigParser(text, actions).parse()


def load_config(path, actions: Optional[Collection[str]] = None) -> PolicyConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), actions)


def to_query(e: Expression, **kw) -> QuerySpec:
    """Wrap ``e`` as a store query; the store evaluates the same language natively.

    xattr comparisons are kept (they are false on stores without extended
    attributes); ``query_flags`` reports them.
    """
    return QuerySpec(filter=e, **kw)


def query_flags(e: Expression) -> list[str]:
    return ["xattr comparisons evaluate false without extended attributes"] if uses_xattr(e) else []


def describe(cfg: PolicyConfig) -> str:
    """Canonical text for a parsed configuration (used by tests and --json output)."""
    out = []
    for n, e in cfg.fileclasses.items():
        out.append(f"fileclass {n} {{ definition {{ {to_text(e)} }} }}")
    for p in cfg.policies.values():
        out.append(f"policy {p.name}: scope={to_text(p.scope) if p.scope else '*'} "
                   f"rules={[f'{r.name}->{r.action}' for r in p.rules]} triggers={[t.describe() for t in p.triggers]}")
    for a in cfg.alerts.values():
        out.append(f"alert {a.name}: {to_text(a.condition)} -> {a.sink}")
    return "\n".join(out)
