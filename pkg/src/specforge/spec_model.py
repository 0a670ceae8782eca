"""Typed five-slot stack configuration with canonical TOML/JSON forms."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping

import tomli

QUANTIZATIONS = ("fp16", "fp8", "q8", "q4")
LOOP_TYPES = ("simple", "react", "codeact", "orchestrator")
MEMORY_BACKENDS = ("sqlite_fts", "bm25", "faiss_like", "hybrid")
POLICIES = ("none", "spec_search", "evolutionary", "single_component")

SLOT_NAMES = ("intelligence", "engine", "agent", "tools", "learning")
EDITABLE_PRIMITIVES = ("intelligence", "engine", "agent", "tools")

MAX_EXEMPLARS = 16

# Values seen in hand-written deployment files, folded onto the enums above.
ENUM_ALIASES = {
    "agent.loop_type": {"native_openhands": "codeact", "openhands": "codeact"},
    "tools.memory_backend": {"sqlite": "sqlite_fts", "faiss": "faiss_like"},
    "learning.policy": {"spec_distillation": "spec_search"},
}


class SpecError(ValueError):
    """Base class for spec parsing and validation failures."""


class SpecSyntaxError(SpecError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"syntax error{where}: {message}")


class SpecValidationError(SpecError):
    def __init__(self, field_path: str, message: str):
        self.field = field_path
        self.message = message
        super().__init__(f"{field_path}: {message}")


def _finite(path: str, value: float) -> float:
    if not math.isfinite(value):
        raise SpecValidationError(path, f"must be finite, got {value!r}")
    return value + 0.0  # folds -0.0 onto 0.0 so equal values serialize equally


def _sorted_pairs(value: Any, field: str) -> tuple[tuple[str, str], ...]:
    items = value.items() if isinstance(value, Mapping) else value
    pairs = tuple(sorted((str(k), str(v)) for k, v in items))
    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        dupes = sorted({k for k in keys if keys.count(k) > 1})
        raise SpecValidationError(field, f"duplicate keys: {', '.join(dupes)}")
    return pairs


@dataclass(frozen=True)
class IntelligenceSlot:
    model_id: str
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 4096
    quantization: str = "fp16"
    # marker for a requested training round; nothing trains here
    training_marker: str = ""

    def __post_init__(self) -> None:
        p = "intelligence"
        if not self.model_id:
            raise SpecValidationError(f"{p}.model_id", "must be non-empty")
        t = _finite(f"{p}.temperature", float(self.temperature))
        if not 0.0 <= t <= 2.0:
            raise SpecValidationError(f"{p}.temperature", f"must lie in [0, 2], got {t}")
        tp = _finite(f"{p}.top_p", float(self.top_p))
        if not 0.0 < tp <= 1.0:
            raise SpecValidationError(f"{p}.top_p", f"must lie in (0, 1], got {tp}")
        if self.max_tokens < 1:
            raise SpecValidationError(f"{p}.max_tokens", "must be >= 1")
        if self.quantization not in QUANTIZATIONS:
            raise SpecValidationError(
                f"{p}.quantization",
                f"unknown value {self.quantization!r} (expected one of {', '.join(QUANTIZATIONS)})",
            )
        object.__setattr__(self, "temperature", t)
        object.__setattr__(self, "top_p", tp)


@dataclass(frozen=True)
class EngineSlot:
    backend: str
    batch_size: int = 1
    kv_cache_enabled: bool = True
    extra: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.backend:
            raise SpecValidationError("engine.backend", "must be non-empty")
        if self.batch_size < 1:
            raise SpecValidationError("engine.batch_size", "must be >= 1")
        object.__setattr__(self, "extra", _sorted_pairs(self.extra, "engine.extra"))


@dataclass(frozen=True)
class AgentSlot:
    loop_type: str = "simple"
    system_prompt: str = ""
    exemplars: tuple[tuple[str, str], ...] = ()
    max_turns: int = 10
    tool_strategy: str = "auto"

    def __post_init__(self) -> None:
        if self.loop_type not in LOOP_TYPES:
            raise SpecValidationError(
                "agent.loop_type",
                f"unknown value {self.loop_type!r} (expected one of {', '.join(LOOP_TYPES)})",
            )
        if self.max_turns < 1:
            raise SpecValidationError("agent.max_turns", "must be >= 1")
        exemplars = tuple((str(i), str(o)) for i, o in self.exemplars)
        if len(exemplars) > MAX_EXEMPLARS:
            raise SpecValidationError(
                "agent.exemplars", f"at most {MAX_EXEMPLARS} exemplars allowed, got {len(exemplars)}"
            )
        object.__setattr__(self, "exemplars", exemplars)


@dataclass(frozen=True)
class ToolsMemorySlot:
    enabled_tools: tuple[str, ...] = ()
    tool_descriptions: tuple[tuple[str, str], ...] = ()
    memory_backend: str = "sqlite_fts"
    cloud_as_tool: bool = False

    def __post_init__(self) -> None:
        tools = tuple(self.enabled_tools)
        if len(set(tools)) != len(tools):
            dupes = sorted({t for t in tools if tools.count(t) > 1})
            raise SpecValidationError("tools.enabled_tools", f"duplicate tools: {', '.join(dupes)}")
        if any(not t for t in tools):
            raise SpecValidationError("tools.enabled_tools", "tool names must be non-empty")
        descriptions = _sorted_pairs(self.tool_descriptions, "tools.tool_descriptions")
        orphans = [name for name, _ in descriptions if name not in tools]
        if orphans:
            raise SpecValidationError(
                "tools.tool_descriptions", f"description for tool not enabled: {', '.join(orphans)}"
            )
        if self.memory_backend not in MEMORY_BACKENDS:
            raise SpecValidationError(
                "tools.memory_backend",
                f"unknown value {self.memory_backend!r} (expected one of {', '.join(MEMORY_BACKENDS)})",
            )
        object.__setattr__(self, "enabled_tools", tools)
        object.__setattr__(self, "tool_descriptions", descriptions)


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 0.5
    beta: float = 0.1
    gamma: float = 0.1
    delta: float = 0.3

    def __post_init__(self) -> None:
        values = []
        for name in ("alpha", "beta", "gamma", "delta"):
            v = _finite(f"learning.reward_weights.{name}", float(getattr(self, name)))
            if v < 0:
                raise SpecValidationError(f"learning.reward_weights.{name}", "must be >= 0")
            object.__setattr__(self, name, v)
            values.append(v)
        if not any(values):
            raise SpecValidationError("learning.reward_weights", "weights must not all be zero")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.delta)


@dataclass(frozen=True)
class GateConfig:
    epsilon: float = 0.01
    stagnation_k: int = 5

    def __post_init__(self) -> None:
        eps = _finite("learning.gate.epsilon", float(self.epsilon))
        if not 0.0 <= eps <= 1.0:
            raise SpecValidationError("learning.gate.epsilon", f"must lie in [0, 1], got {eps}")
        if self.stagnation_k < 1:
            raise SpecValidationError("learning.gate.stagnation_k", "must be >= 1")
        object.__setattr__(self, "epsilon", eps)


@dataclass(frozen=True)
class Budget:
    max_proposals: int = 200
    max_task_executions: int = 100_000

    def __post_init__(self) -> None:
        if self.max_proposals < 0:
            raise SpecValidationError("learning.budget.max_proposals", "must be >= 0")
        if self.max_task_executions < 0:
            raise SpecValidationError("learning.budget.max_task_executions", "must be >= 0")


@dataclass(frozen=True)
class LearningSlot:
    enabled: bool = False
    policy: str = "none"
    reward_weights: RewardWeights = field(default_factory=RewardWeights)
    gate_config: GateConfig = field(default_factory=GateConfig)
    budget: Budget = field(default_factory=Budget)

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise SpecValidationError(
                "learning.policy",
                f"unknown value {self.policy!r} (expected one of {', '.join(POLICIES)})",
            )
        if not self.enabled and self.policy != "none":
            raise SpecValidationError("learning.policy", "must be 'none' when learning is disabled")


@dataclass(frozen=True)
class Spec:
    """One complete stack configuration.

    ``content_hash`` covers the five slots only, so re-versioning or
    renaming a spec does not change its identity.
    """

    intelligence: IntelligenceSlot
    engine: EngineSlot
    agent: AgentSlot = field(default_factory=AgentSlot)
    tools: ToolsMemorySlot = field(default_factory=ToolsMemorySlot)
    learning: LearningSlot = field(default_factory=LearningSlot)
    spec_id: str = ""
    version: int = 1
    content_hash: str = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.version < 1:
            raise SpecValidationError("version", "must be >= 1")
        digest = hashlib.sha256(_slots_toml(self).encode("utf-8")).hexdigest()
        object.__setattr__(self, "content_hash", digest)
        if not self.spec_id:
            object.__setattr__(self, "spec_id", f"spec-{digest[:12]}")

    def slot(self, name: str) -> Any:
        if name not in SLOT_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def with_version(self, version: int) -> Spec:
        return replace(self, version=version)


def default_spec() -> Spec:
    """A small local deployment used as a starting point and in fixtures."""
    return Spec(
        intelligence=IntelligenceSlot(model_id="qwen3.5:9b"),
        engine=EngineSlot(backend="ollama"),
        agent=AgentSlot(system_prompt="You are a helpful assistant."),
        tools=ToolsMemorySlot(enabled_tools=("think",)),
        learning=LearningSlot(enabled=True, policy="spec_search"),
        spec_id="default",
    )


# ---------------------------------------------------------------------------
# dict form (shared by TOML and JSON)


def slots_to_dict(spec: Spec) -> dict[str, Any]:
    i, e, a, t, l = spec.intelligence, spec.engine, spec.agent, spec.tools, spec.learning
    return {
        "intelligence": {
            "model_id": i.model_id,
            "temperature": i.temperature,
            "top_p": i.top_p,
            "max_tokens": i.max_tokens,
            "quantization": i.quantization,
            "training_marker": i.training_marker,
        },
        "engine": {
            "backend": e.backend,
            "batch_size": e.batch_size,
            "kv_cache_enabled": e.kv_cache_enabled,
            "extra": dict(e.extra),
        },
        "agent": {
            "loop_type": a.loop_type,
            "system_prompt": a.system_prompt,
            "exemplars": [{"input": x, "output": y} for x, y in a.exemplars],
            "max_turns": a.max_turns,
            "tool_strategy": a.tool_strategy,
        },
        "tools": {
            "enabled_tools": list(t.enabled_tools),
            "tool_descriptions": dict(t.tool_descriptions),
            "memory_backend": t.memory_backend,
            "cloud_as_tool": t.cloud_as_tool,
        },
        "learning": {
            "enabled": l.enabled,
            "policy": l.policy,
            "reward_weights": list(l.reward_weights.as_tuple()),
            "gate": {"epsilon": l.gate_config.epsilon, "stagnation_k": l.gate_config.stagnation_k},
            "budget": {
                "max_proposals": l.budget.max_proposals,
                "max_task_executions": l.budget.max_task_executions,
            },
        },
    }


def spec_to_dict(spec: Spec) -> dict[str, Any]:
    return {"spec_id": spec.spec_id, "version": spec.version, **slots_to_dict(spec)}


_SCHEMA: dict[str, dict[str, str]] = {
    "intelligence": {
        "model_id": "str",
        "temperature": "float",
        "top_p": "float",
        "max_tokens": "int",
        "quantization": "str",
        "training_marker": "str",
    },
    "engine": {"backend": "str", "batch_size": "int", "kv_cache_enabled": "bool", "extra": "map"},
    "agent": {
        "loop_type": "str",
        "system_prompt": "str",
        "exemplars": "exemplars",
        "max_turns": "int",
        "tool_strategy": "str",
    },
    "tools": {
        "enabled_tools": "strlist",
        "tool_descriptions": "map",
        "memory_backend": "str",
        "cloud_as_tool": "bool",
    },
    "learning": {
        "enabled": "bool",
        "policy": "str",
        "reward_weights": "weights",
        "gate": "table",
        "budget": "table",
    },
}
_SUBTABLES = {
    "learning.gate": {"epsilon": "float", "stagnation_k": "int"},
    "learning.budget": {"max_proposals": "int", "max_task_executions": "int"},
}


def _check_type(path: str, kind: str, value: Any) -> Any:
    def fail(expected: str) -> SpecValidationError:
        return SpecValidationError(path, f"expected {expected}, got {type(value).__name__}")

    if kind == "str":
        if not isinstance(value, str):
            raise fail("string")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise fail("integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise fail("number")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise fail("boolean")
        return value
    if kind == "map":
        if not isinstance(value, Mapping) or not all(isinstance(v, str) for v in value.values()):
            raise fail("table of strings")
        return dict(value)
    if kind == "strlist":
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise fail("array of strings")
        return list(value)
    if kind == "exemplars":
        if not isinstance(value, list):
            raise fail("array of {input, output} tables")
        out = []
        for n, item in enumerate(value):
            if isinstance(item, Mapping) and set(item) == {"input", "output"}:
                pair = (item["input"], item["output"])
            elif isinstance(item, list) and len(item) == 2:
                pair = (item[0], item[1])
            else:
                raise SpecValidationError(f"{path}[{n}]", "expected {input, output} table")
            if not all(isinstance(x, str) for x in pair):
                raise SpecValidationError(f"{path}[{n}]", "input and output must be strings")
            out.append(pair)
        return out
    if kind == "weights":
        names = ("alpha", "beta", "gamma", "delta")
        if isinstance(value, Mapping):
            unknown = set(value) - set(names)
            if unknown:
                raise SpecValidationError(path, f"unknown key {sorted(unknown)[0]!r}")
            value = [value.get(n, d) for n, d in zip(names, RewardWeights().as_tuple())]
        if not isinstance(value, list) or len(value) != 4:
            raise fail("array of four numbers")
        return [_check_type(f"{path}.{n}", "float", v) for n, v in zip(names, value)]
    if kind == "table":
        if not isinstance(value, Mapping):
            raise fail("table")
        return value
    raise AssertionError(kind)


def _fold_deployment_aliases(data: dict[str, Any]) -> dict[str, Any]:
    """Rewrite the short-hand keys used in hand-written deployment files.

    ``default_model``, ``[engine] default``, ``default_agent``, a comma
    string of tools under ``[agent]`` and ``[tools.storage] default_backend``
    all map onto canonical fields.
    """
    data = {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in data.items()}

    def move(table: str, alias: str, dest_table: str, dest_key: str) -> None:
        src = data.get(table)
        if not isinstance(src, dict) or alias not in src:
            return
        dest = data.setdefault(dest_table, {})
        if not isinstance(dest, dict):
            return
        if dest_key in dest:
            raise SpecValidationError(
                f"{dest_table}.{dest_key}", f"given both as {table}.{alias} and {dest_table}.{dest_key}"
            )
        dest[dest_key] = src.pop(alias)

    move("intelligence", "default_model", "intelligence", "model_id")
    move("engine", "default", "engine", "backend")
    move("agent", "default_agent", "agent", "loop_type")
    move("agent", "tools", "tools", "enabled_tools")
    tools = data.get("tools")
    if isinstance(tools, dict) and isinstance(tools.get("storage"), Mapping):
        storage = dict(tools.pop("storage"))
        if "default_backend" in storage:
            if "memory_backend" in tools:
                raise SpecValidationError(
                    "tools.memory_backend", "given both as tools.storage.default_backend and tools.memory_backend"
                )
            tools["memory_backend"] = storage.pop("default_backend")
        for key in storage:
            raise SpecValidationError(f"tools.storage.{key}", "unknown key")
    return data


def spec_from_dict(data: Mapping[str, Any]) -> Spec:
    """Build a Spec from a parsed TOML or JSON document (strict keys)."""
    if not isinstance(data, Mapping):
        raise SpecValidationError("<root>", "expected a table")
    data = _fold_deployment_aliases(dict(data))
    for key in data:
        if key not in SLOT_NAMES and key not in ("spec_id", "version"):
            raise SpecValidationError(key, "unknown key")

    tables: dict[str, dict[str, Any]] = {}
    for slot in SLOT_NAMES:
        raw = data.get(slot, {})
        if not isinstance(raw, Mapping):
            raise SpecValidationError(slot, "expected a table")
        table: dict[str, Any] = {}
        for key, value in raw.items():
            path = f"{slot}.{key}"
            kind = _SCHEMA[slot].get(key)
            if kind is None:
                raise SpecValidationError(path, "unknown key")
            value = _check_type(path, kind, value)
            if kind == "table":
                sub: dict[str, Any] = {}
                for skey, svalue in value.items():
                    skind = _SUBTABLES[path].get(skey)
                    if skind is None:
                        raise SpecValidationError(f"{path}.{skey}", "unknown key")
                    sub[skey] = _check_type(f"{path}.{skey}", skind, svalue)
                value = sub
            aliases = ENUM_ALIASES.get(path)
            if aliases and isinstance(value, str):
                value = aliases.get(value, value)
            table[key] = value
        tables[slot] = table

    for required in ("intelligence.model_id", "engine.backend"):
        slot, key = required.split(".")
        if key not in tables[slot]:
            raise SpecValidationError(required, "required field missing")

    intel = tables["intelligence"]
    eng = tables["engine"]
    agent = tables["agent"]
    tools = tables["tools"]
    learn = tables["learning"]
    if "extra" in eng:
        eng["extra"] = _sorted_pairs(eng["extra"], "engine.extra")
    if "exemplars" in agent:
        agent["exemplars"] = tuple(agent["exemplars"])
    if "enabled_tools" in tools:
        tools["enabled_tools"] = tuple(tools["enabled_tools"])
    if "tool_descriptions" in tools:
        tools["tool_descriptions"] = _sorted_pairs(tools["tool_descriptions"], "tools.tool_descriptions")
    learning_kwargs: dict[str, Any] = {}
    if "enabled" in learn:
        learning_kwargs["enabled"] = learn["enabled"]
    if "policy" in learn:
        learning_kwargs["policy"] = learn["policy"]
    if "reward_weights" in learn:
        learning_kwargs["reward_weights"] = RewardWeights(*learn["reward_weights"])
    if "gate" in learn:
        learning_kwargs["gate_config"] = GateConfig(**learn["gate"])
    if "budget" in learn:
        learning_kwargs["budget"] = Budget(**learn["budget"])

    spec_id = data.get("spec_id", "")
    version = data.get("version", 1)
    if not isinstance(spec_id, str):
        raise SpecValidationError("spec_id", "expected string")
    if isinstance(version, bool) or not isinstance(version, int):
        raise SpecValidationError("version", "expected integer")
    return Spec(
        intelligence=IntelligenceSlot(**intel),
        engine=EngineSlot(**eng),
        agent=AgentSlot(**agent),
        tools=ToolsMemorySlot(**tools),
        learning=LearningSlot(**learning_kwargs),
        spec_id=spec_id,
        version=version,
    )


# ---------------------------------------------------------------------------
# TOML

_BARE_KEY = re.compile(r"^[A-Za-z0-9_-]+$")


def _toml_str(s: str) -> str:
    # JSON escapes are a subset of TOML basic-string escapes, except DEL
    return json.dumps(s, ensure_ascii=False).replace("\x7f", "\\u007f")


def _toml_key(k: str) -> str:
    return k if _BARE_KEY.match(k) else _toml_str(k)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return _toml_str(v)
    if isinstance(v, Mapping):
        if not v:
            return "{}"
        inner = ", ".join(f"{_toml_key(k)} = {_toml_value(v[k])}" for k in sorted(v))
        return "{ " + inner + " }"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _emit_table(name: str, table: Mapping[str, Any], lines: list[str]) -> None:
    lines.append(f"[{name}]")
    nested = []
    for key in sorted(table):
        value = table[key]
        if name == "learning" and key in ("gate", "budget"):
            nested.append(key)
            continue
        lines.append(f"{_toml_key(key)} = {_toml_value(value)}")
    for key in nested:
        lines.append("")
        _emit_table(f"{name}.{key}", table[key], lines)


def _slots_toml(spec: Spec) -> str:
    data = slots_to_dict(spec)
    lines: list[str] = []
    for n, slot in enumerate(SLOT_NAMES):
        if n:
            lines.append("")
        _emit_table(slot, data[slot], lines)
    return "\n".join(lines) + "\n"


def serialize_spec(spec: Spec) -> str:
    """Canonical TOML: fixed table order, sorted keys, sorted inline maps."""
    header = f"spec_id = {_toml_str(spec.spec_id)}\nversion = {spec.version}\n\n"
    return header + _slots_toml(spec)


def parse_spec(text: str) -> Spec:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"\(at line (\d+), column (\d+)\)", str(exc))
        msg = re.sub(r"\s*\(at line \d+, column \d+\)", "", str(exc))
        if m:
            raise SpecSyntaxError(msg, int(m.group(1)), int(m.group(2))) from exc
        raise SpecSyntaxError(msg) from exc
    return spec_from_dict(data)


# ---------------------------------------------------------------------------
# JSON mirror


def spec_to_json(spec: Spec) -> str:
    return json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def parse_spec_json(text: str) -> Spec:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecSyntaxError(exc.msg, exc.lineno, exc.colno) from exc
    return spec_from_dict(data)


def load_spec(text: str, fmt: str = "toml") -> Spec:
    if fmt == "toml":
        return parse_spec(text)
    if fmt == "json":
        return parse_spec_json(text)
    raise ValueError(f"unknown spec format {fmt!r}")


def hash_spec(spec: Spec) -> str:
    return spec.content_hash


# ---------------------------------------------------------------------------
# diff


def _flatten(spec: Spec) -> list[tuple[str, Any]]:
    out: list[tuple[str, Any]] = []

    def walk(prefix: str, table: Mapping[str, Any], nested: Iterable[str] = ()) -> None:
        for key, value in table.items():
            if key in nested:
                continue
            out.append((f"{prefix}.{key}", value))

    data = slots_to_dict(spec)
    for slot in SLOT_NAMES:
        walk(slot, data[slot], nested=("gate", "budget") if slot == "learning" else ())
    walk("learning.gate", data["learning"]["gate"])
    walk("learning.budget", data["learning"]["budget"])
    return out


def diff_specs(a: Spec, b: Spec) -> list[tuple[str, Any, Any]]:
    """Field-level differences as ``(dotted path, value in a, value in b)``."""
    right = dict(_flatten(b))
    return [(path, va, right[path]) for path, va in _flatten(a) if va != right[path]]
