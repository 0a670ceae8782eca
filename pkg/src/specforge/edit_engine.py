"""Field-level edits over the four editable slots and the edit catalog."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import random
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from math import fsum, prod
from typing import Any, Callable

from .spec_model import (
    EDITABLE_PRIMITIVES,
    LOOP_TYPES,
    MAX_EXEMPLARS,
    MEMORY_BACKENDS,
    QUANTIZATIONS,
    Spec,
    SpecValidationError,
    spec_from_dict,
    spec_to_dict,
)

OP_KINDS = ("set", "list_append", "list_remove", "map_put", "map_remove")

FIELD_KINDS: dict[str, str] = {
    "intelligence.model_id": "str",
    "intelligence.temperature": "float",
    "intelligence.top_p": "float",
    "intelligence.max_tokens": "int",
    "intelligence.quantization": "str",
    "intelligence.training_marker": "str",
    "engine.backend": "str",
    "engine.batch_size": "int",
    "engine.kv_cache_enabled": "bool",
    "engine.extra": "map",
    "agent.loop_type": "str",
    "agent.system_prompt": "str",
    "agent.exemplars": "exemplars",
    "agent.max_turns": "int",
    "agent.tool_strategy": "str",
    "tools.enabled_tools": "strlist",
    "tools.tool_descriptions": "map",
    "tools.memory_backend": "str",
    "tools.cloud_as_tool": "bool",
}

_OPS_FOR_KIND = {
    "strlist": {"set", "list_append", "list_remove"},
    "exemplars": {"set", "list_append", "list_remove"},
    "map": {"set", "map_put", "map_remove"},
}


class EditError(ValueError):
    """An edit could not be validated or applied."""


class PathNotFoundError(EditError):
    pass


class TypeMismatchError(EditError):
    pass


class InvariantViolationError(EditError):
    pass


def _is_str(v: Any) -> bool:
    return isinstance(v, str)


def _normalize_exemplar(path: str, v: Any) -> dict[str, str]:
    if isinstance(v, Mapping) and set(v) == {"input", "output"}:
        pair = (v["input"], v["output"])
    elif isinstance(v, (list, tuple)) and len(v) == 2:
        pair = (v[0], v[1])
    else:
        raise TypeMismatchError(f"{path}: expected an (input, output) pair, got {v!r}")
    if not all(map(_is_str, pair)):
        raise TypeMismatchError(f"{path}: exemplar input and output must be strings")
    return {"input": pair[0], "output": pair[1]}


def _normalize_value(path: str, kind: str, op: str, v: Any) -> Any:
    def mismatch(expected: str) -> TypeMismatchError:
        return TypeMismatchError(f"{path}: {op} expects {expected}, got {type(v).__name__}")

    if op == "map_remove":
        if not _is_str(v):
            raise mismatch("a key string")
        return v
    if op == "map_put":
        if isinstance(v, Mapping) and set(v) == {"key", "value"}:
            key, value = v["key"], v["value"]
        elif isinstance(v, (list, tuple)) and len(v) == 2:
            key, value = v
        else:
            raise mismatch("{key, value}")
        if not (_is_str(key) and _is_str(value)):
            raise mismatch("string key and value")
        return {"key": key, "value": value}
    if op in ("list_append", "list_remove"):
        if kind == "strlist":
            if not _is_str(v):
                raise mismatch("a string")
            return v
        return _normalize_exemplar(path, v)
    # set
    if kind == "str":
        if not _is_str(v):
            raise mismatch("a string")
        return v
    if kind == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise mismatch("an integer")
        return v
    if kind == "float":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise mismatch("a number")
        return float(v)
    if kind == "bool":
        if not isinstance(v, bool):
            raise mismatch("a boolean")
        return v
    if kind == "strlist":
        if not isinstance(v, (list, tuple)) or not all(map(_is_str, v)):
            raise mismatch("a list of strings")
        return list(v)
    if kind == "exemplars":
        if not isinstance(v, (list, tuple)):
            raise mismatch("a list of exemplars")
        return [_normalize_exemplar(path, x) for x in v]
    if kind == "map":
        if not isinstance(v, Mapping) or not all(_is_str(k) and _is_str(x) for k, x in v.items()):
            raise mismatch("a string-to-string map")
        return {k: v[k] for k in sorted(v)}
    raise AssertionError(kind)


@dataclass(frozen=True)
class FieldOp:
    path: str
    op: str
    value: Any = None

    def __post_init__(self) -> None:
        slot = self.path.split(".", 1)[0]
        if slot == "learning":
            raise PathNotFoundError(f"{self.path}: learning fields are not editable")
        kind = FIELD_KINDS.get(self.path)
        if kind is None:
            raise PathNotFoundError(f"{self.path}: no such editable field")
        if self.op not in OP_KINDS:
            raise TypeMismatchError(f"{self.path}: unknown op {self.op!r}")
        if self.op != "set" and self.op not in _OPS_FOR_KIND.get(kind, ()):
            raise TypeMismatchError(f"{self.path}: op {self.op!r} not applicable to a {kind} field")
        object.__setattr__(self, "value", _normalize_value(self.path, kind, self.op, self.value))

    @property
    def primitive(self) -> str:
        return self.path.split(".", 1)[0]

    def to_dict(self) -> dict[str, Any]:
        return {"path": self.path, "op": self.op, "value": self.value}


@dataclass(frozen=True)
class Provenance:
    proposer_id: str = ""
    session_id: str = ""
    seq: int = 0


@dataclass(frozen=True)
class Edit:
    ops: tuple[FieldOp, ...]
    target_cluster: str | None = None
    rationale: str = ""
    provenance: Provenance = field(default_factory=Provenance)
    edit_id: str = ""

    def __post_init__(self) -> None:
        ops = tuple(self.ops)
        if not ops:
            raise EditError("an edit needs at least one field op")
        object.__setattr__(self, "ops", ops)
        if not self.edit_id:
            blob = json.dumps([o.to_dict() for o in ops], sort_keys=True).encode()
            object.__setattr__(self, "edit_id", "e-" + hashlib.sha256(blob).hexdigest()[:12])

    @property
    def primitives(self) -> tuple[str, ...]:
        touched = {op.primitive for op in self.ops}
        return tuple(p for p in EDITABLE_PRIMITIVES if p in touched)

    @property
    def paths(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(op.path for op in self.ops))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "edit_id": self.edit_id,
            "ops": [o.to_dict() for o in self.ops],
            "target_cluster": self.target_cluster,
            "rationale": self.rationale,
        }
        p = self.provenance
        if p != Provenance():
            out["provenance"] = {"proposer_id": p.proposer_id, "session_id": p.session_id, "seq": p.seq}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Edit:
        if not isinstance(data, Mapping) or "ops" not in data:
            raise EditError("edit must be an object with an 'ops' array")
        raw_ops = data["ops"]
        if not isinstance(raw_ops, list):
            raise EditError("'ops' must be an array")
        ops = []
        for raw in raw_ops:
            if not isinstance(raw, Mapping) or "path" not in raw or "op" not in raw:
                raise EditError(f"malformed op {raw!r}")
            ops.append(FieldOp(str(raw["path"]), str(raw["op"]), raw.get("value")))
        prov = data.get("provenance") or {}
        target = data.get("target_cluster")
        return cls(
            ops=tuple(ops),
            target_cluster=None if target is None else str(target),
            rationale=str(data.get("rationale", "")),
            provenance=Provenance(
                str(prov.get("proposer_id", "")), str(prov.get("session_id", "")), int(prov.get("seq", 0))
            ),
            edit_id=str(data.get("edit_id", "")),
        )

    def with_meta(self, **changes: Any) -> Edit:
        values = {
            "ops": self.ops,
            "target_cluster": self.target_cluster,
            "rationale": self.rationale,
            "provenance": self.provenance,
            "edit_id": self.edit_id,
        }
        values.update(changes)
        return Edit(**values)


def compose(*edits: Edit, target_cluster: str | None = None, rationale: str = "") -> Edit:
    """Concatenate the ops of several edits into one compound edit."""
    ops = tuple(op for e in edits for op in e.ops)
    target = target_cluster if target_cluster is not None else next(
        (e.target_cluster for e in edits if e.target_cluster), None
    )
    return Edit(ops=ops, target_cluster=target, rationale=rationale or " + ".join(e.rationale for e in edits if e.rationale))


# ---------------------------------------------------------------------------
# application


def _get(data: dict[str, Any], path: str) -> Any:
    slot, key = path.split(".", 1)
    return data[slot][key]


def _apply_op(data: dict[str, Any], op: FieldOp) -> None:
    slot, key = op.path.split(".", 1)
    table = data[slot]
    if op.op == "set":
        table[key] = copy.deepcopy(op.value)
    elif op.op == "list_append":
        table[key].append(copy.deepcopy(op.value))
    elif op.op == "list_remove":
        try:
            table[key].remove(op.value)
        except ValueError:
            raise InvariantViolationError(f"{op.path}: {op.value!r} is not present") from None
    elif op.op == "map_put":
        table[key][op.value["key"]] = op.value["value"]
    elif op.op == "map_remove":
        if op.value not in table[key]:
            raise InvariantViolationError(f"{op.path}: no entry for key {op.value!r}")
        del table[key][op.value]


def apply(spec: Spec, edit: Edit) -> Spec:
    """Return a new version of ``spec`` with every op of ``edit`` applied.

    All-or-nothing: on any failure an EditError is raised and no new spec
    exists; ``spec`` itself is immutable and never touched.
    """
    data = spec_to_dict(spec)
    for op in edit.ops:
        _apply_op(data, op)
    data["version"] = spec.version + 1
    try:
        return spec_from_dict(data)
    except SpecValidationError as exc:
        raise InvariantViolationError(str(exc)) from exc


def undo_ops(spec: Spec, edit: Edit) -> tuple[FieldOp, ...]:
    """(path, old value) pairs, as ``set`` ops, that restore ``spec`` after ``edit``."""
    data = spec_to_dict(spec)
    return tuple(FieldOp(path, "set", _get(data, path)) for path in edit.paths)


def revert(spec: Spec, undo: Iterable[FieldOp]) -> Spec:
    return apply(spec, Edit(ops=tuple(undo), rationale="revert"))


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class Vocabulary:
    """Static catalogs the templates draw parameter values from."""

    models: tuple[str, ...] = (
        "gemma4:4b-it",
        "qwen3.5:9b",
        "qwen3.5:27b",
        "qwen3.5:122b",
        "llama3.3:70b",
        "cloud:frontier",
    )
    temperatures: tuple[float, ...] = (0.0, 0.2, 0.4, 0.7, 1.0, 1.3)
    top_ps: tuple[float, ...] = (0.5, 0.8, 0.9, 0.95, 1.0)
    max_tokens: tuple[int, ...] = (1024, 2048, 4096, 8192, 16384)
    training_markers: tuple[str, ...] = ("sft", "lora", "grpo")
    backends: tuple[str, ...] = ("ollama", "vllm", "llamacpp", "mlx", "sglang")
    batch_sizes: tuple[int, ...] = (1, 2, 4, 8, 16)
    engine_flags: tuple[tuple[str, str], ...] = (
        ("flash_attention", "on"),
        ("flash_attention", "off"),
        ("num_ctx", "8192"),
        ("num_ctx", "32768"),
        ("prefix_caching", "on"),
    )
    prompts: tuple[str, ...] = (
        "You are a helpful assistant. Always cite sources for factual claims.",
        "You are a helpful assistant. Think step by step before answering.",
        "You are a helpful assistant. Double-check arithmetic with the calculator.",
        "You are a helpful assistant. Consult the calendar before proposing times.",
        "You are a helpful assistant. Answer concisely in one paragraph.",
        "You are a helpful assistant. Ask a clarifying question when a request is ambiguous.",
    )
    # each keyword appears in exactly one prompt above
    prompt_keywords: tuple[str, ...] = (
        "cite sources",
        "step by step",
        "Double-check arithmetic",
        "calendar before",
        "concisely",
        "clarifying question",
    )
    exemplars: tuple[tuple[str, str], ...] = (
        ("What is 17 * 23?", "391"),
        ("Schedule lunch with Ana on Friday.", "calendar.create(title='Lunch with Ana', day='Fri')"),
        ("Summarize the README.", "file_read('README.md') then summarize"),
        ("Who wrote Dune?", "Frank Herbert"),
    )
    max_turns: tuple[int, ...] = (1, 5, 10, 20, 50)
    tool_strategies: tuple[str, ...] = ("auto", "required", "none", "parallel")
    tools: tuple[str, ...] = (
        "think",
        "calculator",
        "web_search",
        "code_interpreter",
        "file_read",
        "git_tool",
        "calendar",
        "email",
    )
    description_styles: tuple[str, ...] = (
        "Use {tool} only when the answer cannot be produced directly.",
        "Prefer {tool} for any sub-task it can solve.",
        "{tool}: returns structured JSON; quote the relevant field in the answer.",
    )


DEFAULT_VOCAB = Vocabulary()


@dataclass(frozen=True)
class EditTemplate:
    template_id: str
    primitive: str
    params: tuple[tuple[str, tuple[Any, ...]], ...]
    build: Callable[[Mapping[str, Any]], tuple[FieldOp, ...]] = field(compare=False, repr=False)

    def size(self) -> int:
        return prod(len(values) for _, values in self.params)

    def assignments(self) -> Iterator[dict[str, Any]]:
        names = [n for n, _ in self.params]
        for combo in itertools.product(*(values for _, values in self.params)):
            yield dict(zip(names, combo))

    def sample(self, rng: random.Random) -> dict[str, Any]:
        return {name: rng.choice(values) for name, values in self.params}

    def instantiate(self, assignment: Mapping[str, Any], **meta: Any) -> Edit:
        meta.setdefault("rationale", f"{self.template_id} {json.dumps(dict(assignment), sort_keys=True)}")
        return Edit(ops=self.build(assignment), **meta)

    def describe(self) -> dict[str, Any]:
        return {
            "template_id": self.template_id,
            "primitive": self.primitive,
            "params": {n: [list(v) if isinstance(v, tuple) else v for v in values] for n, values in self.params},
        }


def _others(options: Iterable[Any], current: Any) -> tuple[Any, ...]:
    return tuple(o for o in options if o != current)


def _set(path: str, name: str) -> Callable[[Mapping[str, Any]], tuple[FieldOp, ...]]:
    return lambda a: (FieldOp(path, "set", a[name]),)


def _intelligence_templates(spec: Spec, v: Vocabulary) -> list[EditTemplate]:
    i = spec.intelligence
    return [
        EditTemplate("intelligence.model_swap", "intelligence", (("model_id", _others(v.models, i.model_id)),),
                     _set("intelligence.model_id", "model_id")),
        EditTemplate("intelligence.temperature", "intelligence",
                     (("temperature", _others(v.temperatures, i.temperature)),),
                     _set("intelligence.temperature", "temperature")),
        EditTemplate("intelligence.top_p", "intelligence", (("top_p", _others(v.top_ps, i.top_p)),),
                     _set("intelligence.top_p", "top_p")),
        EditTemplate("intelligence.max_tokens", "intelligence",
                     (("max_tokens", _others(v.max_tokens, i.max_tokens)),),
                     _set("intelligence.max_tokens", "max_tokens")),
        EditTemplate("intelligence.quantization", "intelligence",
                     (("quantization", _others(QUANTIZATIONS, i.quantization)),),
                     _set("intelligence.quantization", "quantization")),
        EditTemplate("intelligence.training_trigger", "intelligence",
                     (("marker", _others(v.training_markers, i.training_marker)),),
                     _set("intelligence.training_marker", "marker")),
    ]


def _engine_templates(spec: Spec, v: Vocabulary) -> list[EditTemplate]:
    e = spec.engine
    current_flags = set(e.extra)
    return [
        EditTemplate("engine.backend_swap", "engine", (("backend", _others(v.backends, e.backend)),),
                     _set("engine.backend", "backend")),
        EditTemplate("engine.batch_size", "engine", (("batch_size", _others(v.batch_sizes, e.batch_size)),),
                     _set("engine.batch_size", "batch_size")),
        EditTemplate("engine.kv_cache_toggle", "engine", (("enabled", (not e.kv_cache_enabled,)),),
                     _set("engine.kv_cache_enabled", "enabled")),
        EditTemplate("engine.extra_flag", "engine",
                     (("flag", tuple(f for f in v.engine_flags if f not in current_flags)),),
                     lambda a: (FieldOp("engine.extra", "map_put", {"key": a["flag"][0], "value": a["flag"][1]}),)),
    ]


def _agent_templates(spec: Spec, v: Vocabulary) -> list[EditTemplate]:
    a = spec.agent
    present = set(a.exemplars)
    addable = tuple(x for x in v.exemplars if x not in present) if len(a.exemplars) < MAX_EXEMPLARS else ()
    return [
        EditTemplate("agent.system_prompt", "agent", (("prompt", _others(v.prompts, a.system_prompt)),),
                     _set("agent.system_prompt", "prompt")),
        EditTemplate("agent.exemplar_append", "agent", (("exemplar", addable),),
                     lambda p: (FieldOp("agent.exemplars", "list_append", p["exemplar"]),)),
        EditTemplate("agent.exemplar_remove", "agent", (("exemplar", tuple(dict.fromkeys(a.exemplars))),),
                     lambda p: (FieldOp("agent.exemplars", "list_remove", p["exemplar"]),)),
        EditTemplate("agent.loop_type", "agent", (("loop_type", _others(LOOP_TYPES, a.loop_type)),),
                     _set("agent.loop_type", "loop_type")),
        EditTemplate("agent.max_turns", "agent", (("max_turns", _others(v.max_turns, a.max_turns)),),
                     _set("agent.max_turns", "max_turns")),
        EditTemplate("agent.tool_strategy", "agent",
                     (("tool_strategy", _others(v.tool_strategies, a.tool_strategy)),),
                     _set("agent.tool_strategy", "tool_strategy")),
    ]


def _tools_templates(spec: Spec, v: Vocabulary) -> list[EditTemplate]:
    t = spec.tools
    described = dict(t.tool_descriptions)

    def remove(p: Mapping[str, Any]) -> tuple[FieldOp, ...]:
        ops = []
        if p["tool"] in described:
            ops.append(FieldOp("tools.tool_descriptions", "map_remove", p["tool"]))
        ops.append(FieldOp("tools.enabled_tools", "list_remove", p["tool"]))
        return tuple(ops)

    def describe(p: Mapping[str, Any]) -> tuple[FieldOp, ...]:
        text = p["style"].format(tool=p["tool"])
        return (FieldOp("tools.tool_descriptions", "map_put", {"key": p["tool"], "value": text}),)

    return [
        EditTemplate("tools.tool_add", "tools", (("tool", tuple(x for x in v.tools if x not in t.enabled_tools)),),
                     lambda p: (FieldOp("tools.enabled_tools", "list_append", p["tool"]),)),
        EditTemplate("tools.tool_remove", "tools", (("tool", t.enabled_tools),), remove),
        EditTemplate("tools.description_rewrite", "tools",
                     (("tool", t.enabled_tools), ("style", v.description_styles)), describe),
        EditTemplate("tools.memory_backend", "tools", (("backend", _others(MEMORY_BACKENDS, t.memory_backend)),),
                     _set("tools.memory_backend", "backend")),
        EditTemplate("tools.cloud_as_tool", "tools", (("enabled", (not t.cloud_as_tool,)),),
                     _set("tools.cloud_as_tool", "enabled")),
    ]


_BUILDERS = {
    "intelligence": _intelligence_templates,
    "engine": _engine_templates,
    "agent": _agent_templates,
    "tools": _tools_templates,
}


def enumerate_catalog(
    spec: Spec, move_space: Iterable[str], vocab: Vocabulary = DEFAULT_VOCAB
) -> list[EditTemplate]:
    """Every template applicable to ``spec`` whose primitive is in ``move_space``.

    Templates whose admissible parameter set is empty for this spec are
    left out, so any assignment of a returned template yields an edit
    that applies cleanly to ``spec``.
    """
    space = set(move_space)
    if not space:
        raise ValueError("move space must name at least one primitive")
    unknown = space - set(EDITABLE_PRIMITIVES)
    if unknown:
        raise ValueError(f"not an editable primitive: {', '.join(sorted(unknown))}")
    out: list[EditTemplate] = []
    for primitive in EDITABLE_PRIMITIVES:
        if primitive in space:
            out.extend(t for t in _BUILDERS[primitive](spec, vocab) if t.size() > 0)
    return out


def edit_stats(history: Iterable[tuple[Edit, bool]]) -> dict[str, float]:
    """Share of accepted edits per primitive; compound edits split evenly."""
    shares: dict[str, list[float]] = {p: [] for p in EDITABLE_PRIMITIVES}
    n_accepted = 0
    for edit, accepted in history:
        if not accepted:
            continue
        n_accepted += 1
        touched = edit.primitives
        for p in touched:
            shares[p].append(1.0 / len(touched))
    if not n_accepted:
        return {p: 0.0 for p in EDITABLE_PRIMITIVES}
    return {p: fsum(s) / n_accepted for p, s in shares.items()}
