"""Edit proposers behind one diagnose-then-propose contract."""

from __future__ import annotations

import json
import logging
import os
import random
import urllib.error
import urllib.request
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Protocol

from .edit_engine import DEFAULT_VOCAB, Edit, EditError, EditTemplate, Provenance, Vocabulary, apply, enumerate_catalog
from .gate import FailureCluster, GateScores, TaskRecord, cluster_by_signature
from .spec_model import EDITABLE_PRIMITIVES, Spec, spec_to_dict

log = logging.getLogger(__name__)

MAX_EXCERPTS = 5
EXCERPT_CHARS = 2000
DEFAULT_TIMEOUT_S = 60.0


class ProposerError(RuntimeError):
    pass


class ProposerExhausted(Exception):
    """The proposer has nothing further to offer."""


@dataclass(frozen=True)
class ClusterDiagnosis:
    cluster_id: str
    description: str
    student_success_rate: float
    teacher_success_rate: float
    n_tasks: int
    signatures: tuple[str, ...] = ()
    excerpts: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "cluster_id": self.cluster_id,
            "description": self.description,
            "student_success_rate": self.student_success_rate,
            "teacher_success_rate": self.teacher_success_rate,
            "n_tasks": self.n_tasks,
            "signatures": list(self.signatures),
            "excerpts": list(self.excerpts),
        }


@dataclass(frozen=True)
class Diagnosis:
    spec_hash: str
    clusters: tuple[ClusterDiagnosis, ...] = ()

    @property
    def primary(self) -> str | None:
        return self.clusters[0].cluster_id if self.clusters else None

    def to_dict(self) -> dict[str, Any]:
        return {"spec_hash": self.spec_hash, "clusters": [c.to_dict() for c in self.clusters]}


def diagnose(
    spec: Spec,
    scores: GateScores,
    clusters: Sequence[FailureCluster] | None = None,
    *,
    max_excerpts: int = MAX_EXCERPTS,
    excerpt_chars: int = EXCERPT_CHARS,
    scrubber: Callable[[str], str] | None = None,
) -> Diagnosis:
    """Failing clusters, worst first, with bounded trace excerpts.

    Labeled clusters are used when given; otherwise failures are grouped
    by signature. ``scrubber`` runs on every excerpt before truncation.
    """
    outcomes = {o.task_id: o for o in scores.outcomes}
    if clusters is None:
        # no labels: regroup by signature
        clusters = cluster_by_signature(
            (TaskRecord(o.task_id, o.cluster_id), o.signature, o.success) for o in scores.outcomes
        )
    entries = []
    for c in clusters:
        members = [outcomes[t] for t in c.task_ids if t in outcomes]
        if not members:
            continue
        rate = sum(o.success for o in members) / len(members)
        if rate >= 1.0:
            continue
        failing = [o for o in members if o.success < 1.0]
        excerpts = []
        for o in failing[:max_excerpts]:
            text = o.trace or o.signature
            if scrubber is not None:
                text = scrubber(text)
            excerpts.append(text[:excerpt_chars])
        entries.append(
            ClusterDiagnosis(
                cluster_id=c.cluster_id,
                description=c.description,
                student_success_rate=rate,
                teacher_success_rate=c.teacher_success_rate,
                n_tasks=len(members),
                signatures=tuple(dict.fromkeys(o.signature for o in failing if o.signature)),
                excerpts=tuple(excerpts),
            )
        )
    entries.sort(key=lambda d: (d.student_success_rate, d.cluster_id))
    return Diagnosis(spec.content_hash, tuple(entries))


@dataclass(frozen=True)
class Proposal:
    edit: Edit
    confidence: float = 1.0
    diagnosis_ref: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ProposerError(f"confidence must lie in [0, 1], got {self.confidence}")


class Proposer(Protocol):
    proposer_id: str

    def propose(self, spec: Spec, diagnosis: Diagnosis) -> Proposal | None:
        """Next proposal, ``None`` for an empty round, or raise ProposerExhausted."""
        ...


class ScriptableProposer:
    """Replays a fixed list of edits, one per call."""

    def __init__(self, edits: Iterable[Edit], proposer_id: str = "script"):
        self.edits = list(edits)
        self.proposer_id = proposer_id
        self.cursor = 0

    @classmethod
    def from_json(cls, text: str, proposer_id: str = "script") -> ScriptableProposer:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ProposerError(f"script is not valid JSON: {exc}") from exc
        if not isinstance(data, list):
            raise ProposerError("script must be a JSON array of edits")
        edits = []
        for n, raw in enumerate(data):
            try:
                edits.append(Edit.from_dict(raw))
            except EditError as exc:
                raise ProposerError(f"script entry {n}: {exc}") from exc
        return cls(edits, proposer_id)

    def propose(self, spec: Spec, diagnosis: Diagnosis) -> Proposal:
        if self.cursor >= len(self.edits):
            raise ProposerExhausted
        edit = self.edits[self.cursor]
        self.cursor += 1
        return Proposal(edit, 1.0, diagnosis.primary)


def oracle_proposer(oracle: Iterable[Any], move_space: Iterable[str] = EDITABLE_PRIMITIVES) -> ScriptableProposer:
    """Script the known per-cluster fixes, keeping only ops inside ``move_space``.

    Stand-in for a teacher that reads traces and plans coordinated edits.
    """
    space = set(move_space)
    edits = []
    for entry in oracle:
        ops = tuple(op for op in entry.edit.ops if op.primitive in space)
        if ops:
            edits.append(entry.edit.with_meta(ops=ops, edit_id=""))
    return ScriptableProposer(edits, proposer_id="oracle")


CatalogFn = Callable[[Spec], Sequence[EditTemplate]]


class TemplateRandomProposer:
    """Uniform template, then uniform parameters; blind to the diagnosis.

    Call ``n`` draws from its own stream seeded by ``(seed, n)``, so the
    proposal sequence depends only on the catalog, the move space and the
    call index.
    """

    def __init__(
        self,
        move_space: Iterable[str] = EDITABLE_PRIMITIVES,
        seed: int = 0,
        *,
        vocab: Vocabulary = DEFAULT_VOCAB,
        catalog: CatalogFn | None = None,
    ):
        self.move_space = tuple(p for p in EDITABLE_PRIMITIVES if p in set(move_space))
        if not self.move_space:
            raise ProposerError("move space must name at least one primitive")
        self.seed = seed
        self.vocab = vocab
        self.catalog = catalog
        self.calls = 0
        self.proposer_id = f"template_random:{seed}"

    def templates(self, spec: Spec) -> list[EditTemplate]:
        if self.catalog is None:
            return enumerate_catalog(spec, self.move_space, self.vocab)
        return [t for t in self.catalog(spec) if t.primitive in self.move_space and t.size() > 0]

    def propose(self, spec: Spec, diagnosis: Diagnosis | None = None) -> Proposal:
        templates = self.templates(spec)
        if not templates:
            raise ProposerError(f"empty catalog for move space {self.move_space}")
        rng = random.Random(f"{self.seed}:{self.calls}")
        self.calls += 1
        template = rng.choice(templates)
        edit = template.instantiate(template.sample(rng))
        return Proposal(edit, 0.0, None)


def request_payload(spec: Spec, diagnosis: Diagnosis, catalog: Sequence[EditTemplate]) -> bytes:
    body = {
        "spec": spec_to_dict(spec),
        "diagnosis": diagnosis.to_dict(),
        "catalog": [t.describe() for t in catalog],
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


Transport = Callable[[str, bytes, float], bytes]


def http_transport(url: str, body: bytes, timeout: float) -> bytes:
    req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"}, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read()


def parse_response(raw: bytes, spec: Spec, diagnosis: Diagnosis) -> list[Proposal]:
    """Proposals from a response body; invalid edits are dropped with a warning."""
    data = json.loads(raw.decode("utf-8"))
    if not isinstance(data, Mapping) or not isinstance(data.get("edits"), list):
        raise ProposerError("response must be an object with an 'edits' array")
    out = []
    for n, raw_edit in enumerate(data["edits"]):
        try:
            edit = Edit.from_dict(raw_edit)
            apply(spec, edit)  # dry run against the current spec
            confidence = float(raw_edit.get("confidence", 1.0))
            out.append(Proposal(edit, min(max(confidence, 0.0), 1.0), diagnosis.primary))
        except (EditError, ProposerError, TypeError, ValueError) as exc:
            log.warning("discarding remote edit %d: %s", n, exc)
    return out


def remote_propose(
    endpoint: str,
    spec: Spec,
    diagnosis: Diagnosis,
    catalog: Sequence[EditTemplate],
    *,
    timeout: float = DEFAULT_TIMEOUT_S,
    retries: int = 0,
    transport: Transport = http_transport,
) -> list[Proposal]:
    """One request/response round with a hosted proposer.

    Transport failures and unparseable responses yield an empty list.
    """
    body = request_payload(spec, diagnosis, catalog)
    for attempt in range(retries + 1):
        try:
            raw = transport(endpoint, body, timeout)
        except (OSError, urllib.error.URLError) as exc:
            log.warning("proposer request failed (attempt %d): %s", attempt + 1, exc)
            continue
        try:
            return parse_response(raw, spec, diagnosis)
        except (ProposerError, ValueError, UnicodeDecodeError) as exc:
            log.warning("unparseable proposer response: %s", exc)
            return []
    return []


@dataclass
class RemoteProposer:
    """Queues the edits of each remote round and hands them out one by one."""

    endpoint: str
    move_space: tuple[str, ...] = EDITABLE_PRIMITIVES
    timeout: float = DEFAULT_TIMEOUT_S
    retries: int = 0
    vocab: Vocabulary = DEFAULT_VOCAB
    transport: Transport = http_transport
    proposer_id: str = "remote"
    _queue: list[Proposal] = field(default_factory=list, repr=False)

    @classmethod
    def from_env(cls, **kwargs: Any) -> RemoteProposer:
        url = os.environ.get("SPECFORGE_PROPOSER_URL")
        if not url:
            raise ProposerError("SPECFORGE_PROPOSER_URL is not set")
        timeout = float(os.environ.get("SPECFORGE_PROPOSER_TIMEOUT_S", DEFAULT_TIMEOUT_S))
        return cls(url, timeout=timeout, **kwargs)

    def propose(self, spec: Spec, diagnosis: Diagnosis) -> Proposal | None:
        # queued edits were validated against an earlier spec; re-check
        while self._queue:
            p = self._queue.pop(0)
            try:
                apply(spec, p.edit)
                return p
            except EditError as exc:
                log.warning("dropping stale remote edit %s: %s", p.edit.edit_id, exc)
        catalog = enumerate_catalog(spec, self.move_space, self.vocab)
        proposals = remote_propose(
            self.endpoint, spec, diagnosis, catalog,
            timeout=self.timeout, retries=self.retries, transport=self.transport,
        )
        proposals = [p for p in proposals if set(p.edit.primitives) <= set(self.move_space)]
        if not proposals:
            return None
        self._queue = proposals[1:]
        return proposals[0]


def stamp(proposal: Proposal, proposer_id: str, session_id: str, seq: int) -> Proposal:
    edit = proposal.edit.with_meta(provenance=Provenance(proposer_id, session_id, seq))
    return Proposal(edit, proposal.confidence, proposal.diagnosis_ref)
