"""Typed AI-stack specs, atomic edits, a regression gate and gated search."""

from .edit_engine import Edit, FieldOp, apply, enumerate_catalog
from .gate import gate_ok, score
from .search import run_evolutionary, run_greedy, run_single_component
from .spec_model import Spec, default_spec, parse_spec, serialize_spec

__all__ = [
    "Edit",
    "FieldOp",
    "Spec",
    "apply",
    "default_spec",
    "enumerate_catalog",
    "gate_ok",
    "parse_spec",
    "run_evolutionary",
    "run_greedy",
    "run_single_component",
    "score",
    "serialize_spec",
]
