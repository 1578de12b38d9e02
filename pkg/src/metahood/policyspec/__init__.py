"""Condition expressions and the policy configuration format."""

from metahood.policyspec.expr import (
    And,
    Compare,
    Expression,
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

__all__ = [
    "And", "Compare", "Expression", "ExpressionError", "ExpressionTypeError", "Glob", "Not", "Or",
    "evaluate", "glob_match", "parse_expression", "to_text",
]
