"""Synthetic benchmark suites with planted failure clusters.

Every task succeeds under a spec iff its cluster's requirement clauses all
hold for that spec, so search outcomes can be checked by enumerating the
edit catalog.
"""

from __future__ import annotations

import json
import random
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from .edit_engine import (
    DEFAULT_VOCAB,
    Edit,
    EditError,
    FieldOp,
    Vocabulary,
    apply,
    compose,
    enumerate_catalog,
)
from .gate import FailureCluster, TaskOutcome, TaskRecord
from .spec_model import EDITABLE_PRIMITIVES, LOOP_TYPES, MEMORY_BACKENDS, QUANTIZATIONS, Spec, default_spec, slots_to_dict
from .telemetry import MeterReading, TelemetryStore, record


class HarnessError(ValueError):
    pass


def _field(spec: Spec, path: str) -> Any:
    slot, key = path.split(".", 1)
    return slots_to_dict(spec)[slot][key]


def _leaf(path: str) -> str:
    return path.rsplit(".", 1)[-1]


@dataclass(frozen=True)
class HasTool:
    tool: str
    kind = "has_tool"
    path = "tools.enabled_tools"

    def holds(self, spec: Spec) -> bool:
        return self.tool in spec.tools.enabled_tools

    @property
    def signature(self) -> str:
        return f"missing_tool:{self.tool}"

    def fix_ops(self, vocab: Vocabulary) -> tuple[FieldOp, ...]:
        return (FieldOp(self.path, "list_append", self.tool),)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "tool": self.tool}


@dataclass(frozen=True)
class PromptKeyword:
    keyword: str
    kind = "prompt_keyword"
    path = "agent.system_prompt"

    def holds(self, spec: Spec) -> bool:
        return self.keyword in spec.agent.system_prompt

    @property
    def signature(self) -> str:
        return f"missing_keyword:{self.keyword}"

    def fix_ops(self, vocab: Vocabulary) -> tuple[FieldOp, ...]:
        for prompt in vocab.prompts:
            if self.keyword in prompt:
                return (FieldOp(self.path, "set", prompt),)
        raise HarnessError(f"no catalog prompt contains {self.keyword!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "keyword": self.keyword}


@dataclass(frozen=True)
class ParamRange:
    path: str
    lo: float
    hi: float
    kind = "param_range"

    def holds(self, spec: Spec) -> bool:
        return self.lo <= _field(spec, self.path) <= self.hi

    @property
    def signature(self) -> str:
        return f"param_out_of_range:{_leaf(self.path)}"

    def fix_ops(self, vocab: Vocabulary) -> tuple[FieldOp, ...]:
        grid = {
            "intelligence.temperature": vocab.temperatures,
            "intelligence.top_p": vocab.top_ps,
            "intelligence.max_tokens": vocab.max_tokens,
            "engine.batch_size": vocab.batch_sizes,
            "agent.max_turns": vocab.max_turns,
        }[self.path]
        for value in grid:
            if self.lo <= value <= self.hi:
                return (FieldOp(self.path, "set", value),)
        raise HarnessError(f"no catalog value of {self.path} lies in [{self.lo}, {self.hi}]")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "path": self.path, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class FieldEquals:
    path: str
    value: Any
    kind = "field_equals"

    def holds(self, spec: Spec) -> bool:
        return _field(spec, self.path) == self.value

    @property
    def signature(self) -> str:
        return f"wrong_value:{_leaf(self.path)}"

    def fix_ops(self, vocab: Vocabulary) -> tuple[FieldOp, ...]:
        return (FieldOp(self.path, "set", self.value),)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "path": self.path, "value": self.value}


Clause = HasTool | PromptKeyword | ParamRange | FieldEquals


def clause_from_dict(data: Mapping[str, Any]) -> Clause:
    kind = data.get("kind")
    try:
        if kind == "has_tool":
            return HasTool(str(data["tool"]))
        if kind == "prompt_keyword":
            return PromptKeyword(str(data["keyword"]))
        if kind == "param_range":
            return ParamRange(str(data["path"]), data["lo"], data["hi"])
        if kind == "field_equals":
            return FieldEquals(str(data["path"]), data["value"])
    except KeyError as exc:
        raise HarnessError(f"clause {data!r} lacks {exc.args[0]!r}") from None
    raise HarnessError(f"unknown clause kind {kind!r}")


def clause_primitive(clause: Clause) -> str:
    return clause.path.split(".", 1)[0]


@dataclass(frozen=True)
class Blueprint:
    cluster_id: str
    description: str
    clauses: tuple[Clause, ...]

    def __post_init__(self) -> None:
        if not self.clauses:
            raise HarnessError(f"blueprint {self.cluster_id!r} has no clauses")

    def holds(self, spec: Spec) -> bool:
        return all(c.holds(spec) for c in self.clauses)

    def unmet(self, spec: Spec) -> list[Clause]:
        return [c for c in self.clauses if not c.holds(spec)]

    @property
    def primitives(self) -> tuple[str, ...]:
        touched = {clause_primitive(c) for c in self.clauses}
        return tuple(p for p in EDITABLE_PRIMITIVES if p in touched)


def _default_size_factors() -> dict[str, float]:
    return {
        "gemma4:4b-it": 0.5,
        "qwen3.5:9b": 1.0,
        "qwen3.5:27b": 1.8,
        "qwen3.5:122b": 4.0,
        "llama3.3:70b": 3.0,
        "cloud:frontier": 1.2,
    }


def _default_throughput() -> dict[str, float]:
    return {"ollama": 1.0, "vllm": 2.5, "llamacpp": 0.8, "mlx": 1.2, "sglang": 2.2}


@dataclass(frozen=True)
class SimMeterModel:
    base_latency: float = 2.0
    energy_per_second: float = 15.0
    model_size_factor: Mapping[str, float] = field(default_factory=_default_size_factors)
    engine_throughput_factor: Mapping[str, float] = field(default_factory=_default_throughput)
    # only cloud-served models appear here; everything else is local
    cost_per_1k_tokens: Mapping[str, float] = field(default_factory=lambda: {"cloud:frontier": 0.015})

    def __post_init__(self) -> None:
        factors = [self.base_latency, self.energy_per_second]
        factors += list(self.model_size_factor.values()) + list(self.engine_throughput_factor.values())
        if any(not f > 0 for f in factors):
            raise HarnessError("meter factors must be positive")

    def is_local(self, model_id: str) -> bool:
        return model_id not in self.cost_per_1k_tokens

    def to_dict(self) -> dict[str, Any]:
        return {
            "base_latency": self.base_latency,
            "energy_per_second": self.energy_per_second,
            "model_size_factor": dict(self.model_size_factor),
            "engine_throughput_factor": dict(self.engine_throughput_factor),
            "cost_per_1k_tokens": dict(self.cost_per_1k_tokens),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SimMeterModel:
        return cls(**{k: (dict(v) if isinstance(v, Mapping) else float(v)) for k, v in data.items()})


@dataclass(frozen=True)
class SuiteConfig:
    seed: int
    n_tasks: int
    blueprints: tuple[Blueprint, ...]
    meters: SimMeterModel = field(default_factory=SimMeterModel)


@dataclass(frozen=True)
class OracleEntry:
    """Smallest known fix for one cluster: one catalog edit per clause."""

    cluster_id: str
    edit: Edit
    n_edits: int
    primitives: tuple[str, ...]


@dataclass(frozen=True)
class Suite:
    config: SuiteConfig
    tasks: tuple[TaskRecord, ...]
    clusters: tuple[FailureCluster, ...]
    oracle: tuple[OracleEntry, ...]

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def meters(self) -> SimMeterModel:
        return self.config.meters

    def blueprint(self, cluster_id: str) -> Blueprint:
        for b in self.config.blueprints:
            if b.cluster_id == cluster_id:
                return b
        raise HarnessError(f"no blueprint for cluster {cluster_id!r}")

    def cluster_tasks(self, cluster_id: str) -> list[TaskRecord]:
        return [t for t in self.tasks if t.cluster_id == cluster_id]

    def coordinated_clusters(self) -> list[str]:
        return [b.cluster_id for b in self.config.blueprints if len(b.primitives) > 1]

    def executor(self, store: TelemetryStore | None = None) -> SimExecutor:
        return SimExecutor(self, store)

    def to_dict(self) -> dict[str, Any]:
        clusters = []
        for c in self.clusters:
            bp = self.blueprint(c.cluster_id)
            clusters.append(
                {
                    "id": c.cluster_id,
                    "description": c.description,
                    "requires": [cl.to_dict() for cl in bp.clauses],
                    "student_success_rate": c.student_success_rate,
                    "teacher_success_rate": c.teacher_success_rate,
                    "tasks": [
                        {k: v for k, v in t.to_dict().items() if k != "cluster_id"}
                        for t in self.cluster_tasks(c.cluster_id)
                    ],
                }
            )
        return {
            "seed": self.config.seed,
            "n_tasks": self.config.n_tasks,
            "meters": self.config.meters.to_dict(),
            "clusters": clusters,
            "oracle": [
                {"cluster_id": o.cluster_id, "n_edits": o.n_edits, "edit": o.edit.to_dict()} for o in self.oracle
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# generation


def _task_rng(seed: int, cluster_id: str) -> random.Random:
    return random.Random(f"suite:{seed}:{cluster_id}")


def _build_oracle(blueprints: Sequence[Blueprint], vocab: Vocabulary) -> tuple[OracleEntry, ...]:
    entries = []
    for bp in blueprints:
        parts = [Edit(ops=c.fix_ops(vocab), rationale=c.signature) for c in bp.clauses]
        edit = compose(*parts, target_cluster=bp.cluster_id, rationale=f"fix {bp.cluster_id}: " + ", ".join(
            c.signature for c in bp.clauses))
        entries.append(OracleEntry(bp.cluster_id, edit, len(bp.clauses), bp.primitives))
    return tuple(entries)


def gen_suite(
    cfg: SuiteConfig,
    *,
    base: Spec | None = None,
    vocab: Vocabulary = DEFAULT_VOCAB,
    tasks: Mapping[str, Sequence[TaskRecord]] | None = None,
    annotations: Mapping[str, tuple[str, float, float]] | None = None,
) -> Suite:
    """Materialize tasks, clusters and oracle fixes for a config.

    ``tasks`` and ``annotations`` are only passed when reloading a suite
    file; otherwise tasks are drawn from the config seed.
    """
    if cfg.n_tasks < 1:
        raise HarnessError("n_tasks must be >= 1")
    ids = [b.cluster_id for b in cfg.blueprints]
    if len(set(ids)) != len(ids):
        raise HarnessError("duplicate cluster ids")
    base = base if base is not None else default_spec()
    all_tasks: list[TaskRecord] = []
    clusters: list[FailureCluster] = []
    for bp in cfg.blueprints:
        if tasks is not None:
            members = list(tasks[bp.cluster_id])
        else:
            rng = _task_rng(cfg.seed, bp.cluster_id)
            members = [
                TaskRecord(
                    task_id=f"{bp.cluster_id}-t{n:02d}",
                    cluster_id=bp.cluster_id,
                    query={
                        "prompt": f"synthetic task {n} for {bp.cluster_id}",
                        "base_latency": round(cfg.meters.base_latency * rng.uniform(0.5, 1.5), 3),
                        "input_tokens": rng.randint(50, 400),
                        "output_tokens": rng.randint(20, 300),
                    },
                    expected={"checker": "predicate", "cluster": bp.cluster_id},
                    tags=tuple(bp.primitives),
                )
                for n in range(cfg.n_tasks)
            ]
        all_tasks.extend(members)
        if annotations is not None and bp.cluster_id in annotations:
            desc, student, teacher = annotations[bp.cluster_id]
        else:
            desc = bp.description
            student = 1.0 if bp.holds(base) else 0.0
            teacher = 1.0
        clusters.append(FailureCluster(bp.cluster_id, desc, tuple(t.task_id for t in members), student, teacher))
    return Suite(cfg, tuple(all_tasks), tuple(clusters), _build_oracle(cfg.blueprints, vocab))


def _clause_generators(base: Spec, vocab: Vocabulary) -> dict[str, list]:
    i, e, a, t = base.intelligence, base.engine, base.agent, base.tools

    def rng_range(path: str, grid: Sequence[float], current: float, integer: bool):
        def make(rng: random.Random) -> Clause:
            g = rng.choice([x for x in grid if x != current])
            if integer:
                return ParamRange(path, g, g)
            return ParamRange(path, round(g - 0.02, 4), round(g + 0.02, 4))
        return make

    def equals(path: str, options: Sequence[Any], current: Any):
        return lambda rng: FieldEquals(path, rng.choice([x for x in options if x != current]))

    return {
        "intelligence": [
            ("intelligence.temperature", rng_range("intelligence.temperature", vocab.temperatures, i.temperature, False)),
            ("intelligence.top_p", rng_range("intelligence.top_p", vocab.top_ps, i.top_p, False)),
            ("intelligence.max_tokens", rng_range("intelligence.max_tokens", vocab.max_tokens, i.max_tokens, True)),
            ("intelligence.model_id", equals("intelligence.model_id", vocab.models[:-1], i.model_id)),
            ("intelligence.quantization", equals("intelligence.quantization", QUANTIZATIONS, i.quantization)),
        ],
        "engine": [
            ("engine.backend", equals("engine.backend", vocab.backends, e.backend)),
            ("engine.batch_size", rng_range("engine.batch_size", vocab.batch_sizes, e.batch_size, True)),
            ("engine.kv_cache_enabled", lambda rng: FieldEquals("engine.kv_cache_enabled", not e.kv_cache_enabled)),
        ],
        "agent": [
            ("agent.system_prompt", lambda rng: PromptKeyword(
                rng.choice([k for k in vocab.prompt_keywords if k not in a.system_prompt]))),
            ("agent.loop_type", equals("agent.loop_type", LOOP_TYPES, a.loop_type)),
            ("agent.max_turns", rng_range("agent.max_turns", vocab.max_turns, a.max_turns, True)),
            ("agent.tool_strategy", equals("agent.tool_strategy", vocab.tool_strategies, a.tool_strategy)),
        ],
        "tools": [
            ("tools.enabled_tools", lambda rng: HasTool(
                rng.choice([x for x in vocab.tools if x not in t.enabled_tools]))),
            ("tools.memory_backend", equals("tools.memory_backend", MEMORY_BACKENDS, t.memory_backend)),
        ],
    }


def planted_config(
    seed: int,
    *,
    n_single: int = 3,
    n_tasks: int = 5,
    coordinated: bool = True,
    pair: tuple[str, str] | None = None,
    base: Spec | None = None,
    vocab: Vocabulary = DEFAULT_VOCAB,
    meters: SimMeterModel | None = None,
) -> SuiteConfig:
    """Random blueprints that all fail on ``base`` and never share a field.

    With ``coordinated`` one cluster requires a conjunction of clauses from
    two different primitives, so only a compound edit can improve it.
    Clauses on distinct fields keep every cluster's fix compatible with
    every other's. ``pair`` fixes the two primitives of the conjunction.
    """
    rng = random.Random(f"planted:{seed}")
    base = base if base is not None else default_spec()
    gens = _clause_generators(base, vocab)
    used: set[str] = set()

    def draw(primitive: str) -> Clause:
        options = [(p, g) for p, g in gens[primitive] if p not in used]
        if not options:
            raise HarnessError(f"ran out of distinct {primitive} fields")
        path, make = rng.choice(options)
        used.add(path)
        return make(rng)

    groups: list[tuple[Clause, ...]] = []
    if coordinated:
        chosen = list(pair) if pair is not None else rng.sample(list(EDITABLE_PRIMITIVES), 2)
        if len(set(chosen)) != 2 or not set(chosen) <= set(EDITABLE_PRIMITIVES):
            raise HarnessError(f"a conjunction needs two distinct editable primitives, got {chosen}")
        chosen.sort(key=EDITABLE_PRIMITIVES.index)
        groups.append(tuple(draw(p) for p in chosen))
    for _ in range(n_single):
        available = [p for p in EDITABLE_PRIMITIVES if any(path not in used for path, _ in gens[p])]
        groups.append((draw(rng.choice(available)),))
    rng.shuffle(groups)
    blueprints = tuple(
        Blueprint(f"c{n + 1}", " and ".join(c.signature for c in clauses), clauses)
        for n, clauses in enumerate(groups)
    )
    return SuiteConfig(seed, n_tasks, blueprints, meters or SimMeterModel())


def planted_suite(seed: int, **kwargs: Any) -> Suite:
    return gen_suite(planted_config(seed, **kwargs), base=kwargs.get("base"), vocab=kwargs.get("vocab", DEFAULT_VOCAB))


# ---------------------------------------------------------------------------
# execution


def execute(spec: Spec, task: TaskRecord, meters: SimMeterModel, blueprint: Blueprint) -> tuple[float, MeterReading]:
    model = spec.intelligence.model_id
    backend = spec.engine.backend
    if model not in meters.model_size_factor:
        raise HarnessError(f"no size factor for model_id {model!r}")
    if backend not in meters.engine_throughput_factor:
        raise HarnessError(f"no throughput factor for backend {backend!r}")
    base = float(task.query.get("base_latency", meters.base_latency))
    latency = base * meters.model_size_factor[model] / meters.engine_throughput_factor[backend]
    n_in = int(task.query.get("input_tokens", 0))
    n_out = int(task.query.get("output_tokens", 0))
    cost = 0.0 if meters.is_local(model) else (n_in + n_out) / 1000 * meters.cost_per_1k_tokens[model]
    reading = MeterReading(
        energy=latency * meters.energy_per_second,
        latency=latency,
        cost=cost,
        input_tokens=n_in,
        output_tokens=n_out,
    )
    return (1.0 if blueprint.holds(spec) else 0.0), reading


def failure_signature(spec: Spec, task: TaskRecord, blueprint: Blueprint) -> str:
    """The first unmet clause of the task's blueprint, in declaration order."""
    unmet = blueprint.unmet(spec)
    if not unmet:
        raise HarnessError(f"task {task.task_id} succeeds under this spec")
    return unmet[0].signature


class SimExecutor:
    """Gate executor backed by a suite's blueprints and simulated meters."""

    def __init__(self, suite: Suite, store: TelemetryStore | None = None, *, timestamps: bool = True):
        self.suite = suite
        self.store = store
        self.timestamps = timestamps
        self._blueprints = {b.cluster_id: b for b in suite.config.blueprints}

    def __call__(self, spec: Spec, task: TaskRecord) -> TaskOutcome:
        bp = self._blueprints.get(task.cluster_id)
        if bp is None:
            raise HarnessError(f"no blueprint for cluster {task.cluster_id!r}")
        success, reading = execute(spec, task, self.suite.meters, bp)
        local = self.suite.meters.is_local(spec.intelligence.model_id)
        rec = record(
            self.store, task.task_id, spec.content_hash, success, reading,
            local=local, timestamp=None if self.timestamps else 0.0,
        )
        signature = "" if success else failure_signature(spec, task, bp)
        unmet = ", ".join(c.signature for c in bp.unmet(spec))
        trace = f"{task.task_id}: {'ok' if success else 'FAIL ' + signature}" + (f" (unmet: {unmet})" if unmet else "")
        return TaskOutcome(
            task.task_id,
            task.cluster_id,
            success,
            signature=signature,
            trace=trace,
            telemetry={
                "energy": rec.energy,
                "latency": rec.latency,
                "power": rec.power,
                "cost": rec.cost,
            },
        )


# ---------------------------------------------------------------------------
# files


def load_suite(text: str, *, vocab: Vocabulary = DEFAULT_VOCAB) -> Suite:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HarnessError(f"suite file is not valid JSON: {exc}") from exc
    if not isinstance(data, Mapping) or not isinstance(data.get("clusters"), list):
        raise HarnessError("suite file needs a 'clusters' array")
    seed = int(data.get("seed", 0))
    meters = SimMeterModel.from_dict(data["meters"]) if "meters" in data else SimMeterModel()
    blueprints = []
    tasks: dict[str, list[TaskRecord]] = {}
    annotations: dict[str, tuple[str, float, float]] = {}
    for raw in data["clusters"]:
        cid = str(raw["id"])
        clauses = tuple(clause_from_dict(c) for c in raw.get("requires", ()))
        blueprints.append(Blueprint(cid, str(raw.get("description", "")), clauses))
        if "tasks" in raw:
            tasks[cid] = [TaskRecord.from_dict(t, cluster_id=cid) for t in raw["tasks"]]
        annotations[cid] = (
            str(raw.get("description", "")),
            float(raw.get("student_success_rate", 0.0)),
            float(raw.get("teacher_success_rate", 1.0)),
        )
    n_tasks = int(data.get("n_tasks", max((len(v) for v in tasks.values()), default=5)))
    cfg = SuiteConfig(seed, n_tasks, tuple(blueprints), meters)
    if tasks and set(tasks) != {b.cluster_id for b in blueprints}:
        raise HarnessError("either every cluster lists its tasks or none does")
    return gen_suite(cfg, vocab=vocab, tasks=tasks or None, annotations=annotations)


# ---------------------------------------------------------------------------
# brute force over the catalog


def catalog_edits(spec: Spec, move_space: Iterable[str], vocab: Vocabulary = DEFAULT_VOCAB) -> list[Edit]:
    """Every single edit the catalog can produce from ``spec``."""
    return [
        t.instantiate(a)
        for t in enumerate_catalog(spec, move_space, vocab)
        for a in t.assignments()
    ]


def reachable(
    spec: Spec, move_space: Iterable[str], depth: int, vocab: Vocabulary = DEFAULT_VOCAB
) -> list[list[Spec]]:
    """Specs reachable by exactly 1..depth successive catalog edits, per depth."""
    space = tuple(move_space)
    levels: list[list[Spec]] = []
    frontier = [spec]
    seen = {spec.content_hash}
    for _ in range(depth):
        nxt = []
        for s in frontier:
            for e in catalog_edits(s, space, vocab):
                try:
                    child = apply(s, e)
                except EditError:
                    continue
                if child.content_hash not in seen:
                    seen.add(child.content_hash)
                    nxt.append(child)
        levels.append(nxt)
        frontier = nxt
    return levels


def brute_force_min_edits(
    suite: Suite,
    spec: Spec,
    cluster_id: str,
    move_space: Iterable[str] = EDITABLE_PRIMITIVES,
    max_depth: int = 2,
    vocab: Vocabulary = DEFAULT_VOCAB,
) -> int | None:
    """Fewest successive catalog edits making every task of the cluster pass.

    Decided by running the simulated executor on each reachable spec, not
    by inspecting the blueprint; ``None`` if nothing within ``max_depth``
    works.
    """
    tasks = suite.cluster_tasks(cluster_id)
    run = suite.executor()

    def passes(s: Spec) -> bool:
        return all(run(s, t).success == 1.0 for t in tasks)

    if passes(spec):
        return 0
    for depth, level in enumerate(reachable(spec, move_space, max_depth, vocab), start=1):
        if any(passes(s) for s in level):
            return depth
    return None
