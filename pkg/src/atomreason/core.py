"""Domain types for Markov reasoning chains and pure algorithms over the DAG scaffold.

Every type here is an immutable value object. Chains round-trip through plain
dicts (``chain_to_dict`` / ``chain_from_dict``) which is the JSON trace format
consumed by the analytics side.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence


class Domain(str, enum.Enum):
    MATH = "math"
    CODE = "code"
    MULTIHOP_QA = "multihop_qa"


class Origin(str, enum.Enum):
    """Which member of the candidate triplet a solution came from."""

    CURRENT_STATE = "current_state"
    DAG_EXECUTION = "dag_execution"
    NEXT_STATE = "next_state"


class Ablation(str, enum.Enum):
    NONE = "none"
    NO_DECOMPOSITION = "no_decomposition"
    NO_DAG_CONTRACTION = "no_dag_contraction"


class StructuralError(ValueError):
    """Raised when a graph operation receives a DAG that fails validation."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid DAG: " + "; ".join(self.violations))


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    invocations: int = 0

    def __post_init__(self) -> None:
        if min(self.prompt_tokens, self.completion_tokens, self.invocations) < 0:
            raise ValueError(f"negative token usage: {self}")

    def __add__(self, other: TokenUsage) -> TokenUsage:
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.invocations + other.invocations,
        )

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def to_dict(self) -> dict[str, int]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "invocations": self.invocations,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TokenUsage:
        return cls(int(d["prompt_tokens"]), int(d["completion_tokens"]), int(d["invocations"]))


ZERO_USAGE = TokenUsage()


def sum_usage(parts: Iterable[TokenUsage]) -> TokenUsage:
    total = ZERO_USAGE
    for part in parts:
        total = total + part
    return total


@dataclass(frozen=True)
class Question:
    """A Markov state: a self-contained problem plus its domain context."""

    text: str
    domain: Domain = Domain.MATH
    contexts: str | None = None
    chain_index: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValueError("question text must be non-empty")
        if self.chain_index < 0:
            raise ValueError("chain_index must be >= 0")
        if not isinstance(self.domain, Domain):
            object.__setattr__(self, "domain", Domain(self.domain))

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "domain": self.domain.value,
            "contexts": self.contexts,
            "chain_index": self.chain_index,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Question:
        return cls(d["text"], Domain(d["domain"]), d.get("contexts"), int(d.get("chain_index", 0)))


@dataclass(frozen=True)
class DagNode:
    id: int
    description: str
    answer: str | None = None
    depends: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.depends, tuple):
            object.__setattr__(self, "depends", tuple(self.depends))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "description": self.description,
            "answer": self.answer,
            "depends": list(self.depends),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DagNode:
        return cls(int(d["id"]), d["description"], d.get("answer"), tuple(d.get("depends", ())))


@dataclass(frozen=True)
class ReasoningDag:
    nodes: tuple[DagNode, ...] = ()
    source_state: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.nodes, tuple):
            object.__setattr__(self, "nodes", tuple(self.nodes))

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Edge set (j, k): node j provides information for node k."""
        return [(j, n.id) for n in self.nodes for j in n.depends]

    def to_dict(self) -> dict[str, Any]:
        return {"source_state": self.source_state, "nodes": [n.to_dict() for n in self.nodes]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ReasoningDag:
        return cls(tuple(DagNode.from_dict(n) for n in d.get("nodes", ())), int(d.get("source_state", 0)))


def dag_from_depends(depends: Sequence[Sequence[int]], source_state: int = 0) -> ReasoningDag:
    """Shorthand used by tests and fixtures: one description per node is synthesized."""
    return ReasoningDag(
        tuple(DagNode(i, f"node {i}", None, tuple(d)) for i, d in enumerate(depends)),
        source_state,
    )


# -- graph algorithms -----------------------------------------------------------


def validate_dag(dag: ReasoningDag) -> list[str]:
    """Return violation descriptions; an empty list means the DAG is valid."""
    violations: list[str] = []
    n = len(dag.nodes)
    for pos, node in enumerate(dag.nodes):
        if node.id != pos:
            violations.append(f"id gap: position {pos} holds node {node.id}")
        if not str(node.description).strip():
            violations.append(f"empty description at node {node.id}")
        seen: set[int] = set()
        for dep in node.depends:
            if dep in seen:
                violations.append(f"duplicate dependency {dep} at node {node.id}")
            seen.add(dep)
            if dep < 0 or dep >= n:
                violations.append(f"unknown dependency {dep} at node {node.id}")
            elif dep >= node.id:
                violations.append(f"backward edge at node {node.id} (depends on {dep})")
    if not violations and _has_cycle(dag):
        # Unreachable given the forward-edge check; kept as a belt-and-braces guard.
        violations.append("cycle detected")
    return violations


def _has_cycle(dag: ReasoningDag) -> bool:
    state: dict[int, int] = {}
    preds = {node.id: node.depends for node in dag.nodes}

    def visit(u: int) -> bool:
        state[u] = 1
        for v in preds.get(u, ()):
            mark = state.get(v, 0)
            if mark == 1 or (mark == 0 and visit(v)):
                return True
        state[u] = 2
        return False

    return any(state.get(u, 0) == 0 and visit(u) for u in preds)


def _require_valid(dag: ReasoningDag) -> None:
    violations = validate_dag(dag)
    if violations:
        raise StructuralError(violations)


def independent_nodes(dag: ReasoningDag) -> set[int]:
    _require_valid(dag)
    return {node.id for node in dag.nodes if not node.depends}


def _levels(dag: ReasoningDag) -> list[int]:
    # ids are 0..n-1 and dependencies point backwards, so one forward pass suffices
    level: list[int] = []
    for node in dag.nodes:
        level.append(1 + max((level[d] for d in node.depends), default=-1))
    return level


def dag_depth(dag: ReasoningDag) -> int:
    """Number of nodes on the longest dependency path (0 for an empty DAG)."""
    _require_valid(dag)
    return 1 + max(_levels(dag), default=-1)


def topological_layers(dag: ReasoningDag) -> list[set[int]]:
    _require_valid(dag)
    levels = _levels(dag)
    layers: list[set[int]] = [set() for _ in range(1 + max(levels, default=-1))]
    for node_id, lvl in enumerate(levels):
        layers[lvl].add(node_id)
    return layers


DEFAULT_MAX_TRANSITIONS = 3


def suggested_max_transitions(dag: ReasoningDag, default: int = DEFAULT_MAX_TRANSITIONS) -> int:
    """Adaptive transition budget: the depth of the initial decomposition."""
    depth = dag_depth(dag)
    return depth if depth > 0 else default


# -- candidates, verdicts, records ---------------------------------------------


@dataclass(frozen=True)
class CandidateSolution:
    origin: Origin
    answer: str
    trajectory: str
    usage: TokenUsage = ZERO_USAGE
    parse_ok: bool = True
    partial: bool = False
    completed_layers: int | None = None
    # True when the completion was produced by the previous step's NEXT_STATE solve
    reused: bool = False

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "origin": self.origin.value,
            "answer": self.answer,
            "trajectory": self.trajectory,
            "usage": self.usage.to_dict(),
            "parse_ok": self.parse_ok,
            "partial": self.partial,
            "reused": self.reused,
        }
        if self.completed_layers is not None:
            d["completed_layers"] = self.completed_layers
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CandidateSolution:
        return cls(
            Origin(d["origin"]),
            d["answer"],
            d["trajectory"],
            TokenUsage.from_dict(d["usage"]),
            bool(d.get("parse_ok", True)),
            bool(d.get("partial", False)),
            d.get("completed_layers"),
            bool(d.get("reused", False)),
        )


@dataclass(frozen=True)
class JudgeVerdict:
    selected: Origin
    rationale: str = ""
    usage: TokenUsage = ZERO_USAGE
    fallback: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "selected": self.selected.value,
            "rationale": self.rationale,
            "usage": self.usage.to_dict(),
            "fallback": self.fallback,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> JudgeVerdict:
        return cls(
            Origin(d["selected"]),
            d.get("rationale", ""),
            TokenUsage.from_dict(d["usage"]),
            bool(d.get("fallback", False)),
        )


@dataclass(frozen=True)
class CallRecord:
    """One gateway call issued while processing a step."""

    tag: str
    usage: TokenUsage

    def to_dict(self) -> dict[str, Any]:
        return {"tag": self.tag, "usage": self.usage.to_dict()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CallRecord:
        return cls(d["tag"], TokenUsage.from_dict(d["usage"]))


@dataclass(frozen=True)
class TransitionRecord:
    from_state: Question
    dag: ReasoningDag
    contracted: Question | None
    candidates: tuple[CandidateSolution, ...]
    verdict: JudgeVerdict
    terminated: bool
    calls: tuple[CallRecord, ...] = ()
    folded: tuple[int, ...] = ()
    forced_stop: bool = False
    refined: bool = False
    note: str | None = None

    @property
    def usage(self) -> TokenUsage:
        return sum_usage(c.usage for c in self.calls)

    def candidate(self, origin: Origin) -> CandidateSolution | None:
        for cand in self.candidates:
            if cand.origin is origin:
                return cand
        return None

    @property
    def selected_candidate(self) -> CandidateSolution:
        cand = self.candidate(self.verdict.selected)
        if cand is None:
            raise ValueError(f"verdict selects absent candidate {self.verdict.selected.value}")
        return cand

    def to_dict(self) -> dict[str, Any]:
        return {
            "from_state": self.from_state.to_dict(),
            "dag": self.dag.to_dict(),
            "contracted": self.contracted.to_dict() if self.contracted else None,
            "candidates": [c.to_dict() for c in self.candidates],
            "verdict": self.verdict.to_dict(),
            "terminated": self.terminated,
            "forced_stop": self.forced_stop,
            "refined": self.refined,
            "folded": list(self.folded),
            "note": self.note,
            "calls": [c.to_dict() for c in self.calls],
            "usage": self.usage.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TransitionRecord:
        return cls(
            Question.from_dict(d["from_state"]),
            ReasoningDag.from_dict(d["dag"]),
            Question.from_dict(d["contracted"]) if d.get("contracted") else None,
            tuple(CandidateSolution.from_dict(c) for c in d["candidates"]),
            JudgeVerdict.from_dict(d["verdict"]),
            bool(d["terminated"]),
            tuple(CallRecord.from_dict(c) for c in d.get("calls", ())),
            tuple(d.get("folded", ())),
            bool(d.get("forced_stop", False)),
            bool(d.get("refined", False)),
            d.get("note"),
        )


@dataclass(frozen=True)
class ReasoningChain:
    original: Question
    steps: tuple[TransitionRecord, ...]
    final_answer: str
    total_usage: TokenUsage
    config_snapshot: dict[str, Any] = field(default_factory=dict)

    @property
    def initial_dag(self) -> ReasoningDag | None:
        return self.steps[0].dag if self.steps else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "original": self.original.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
            "final_answer": self.final_answer,
            "total_usage": self.total_usage.to_dict(),
            "config_snapshot": self.config_snapshot,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ReasoningChain:
        return cls(
            Question.from_dict(d["original"]),
            tuple(TransitionRecord.from_dict(s) for s in d["steps"]),
            d["final_answer"],
            TokenUsage.from_dict(d["total_usage"]),
            dict(d.get("config_snapshot", {})),
        )


def build_chain(
    original: Question, steps: Sequence[TransitionRecord], config_snapshot: dict[str, Any]
) -> ReasoningChain:
    steps = tuple(steps)
    final = steps[-1].selected_candidate.answer if steps else ""
    return ReasoningChain(
        original, steps, final, sum_usage(s.usage for s in steps), dict(config_snapshot)
    )


def force_stop(record: TransitionRecord) -> TransitionRecord:
    """Mark a non-terminal step as the last one because the budget ran out."""
    if record.terminated:
        return record
    return replace(record, terminated=True, forced_stop=True)


def chain_to_json(chain: ReasoningChain) -> str:
    return json.dumps(chain.to_dict(), indent=2, ensure_ascii=False) + "\n"


def chain_from_json(text: str) -> ReasoningChain:
    return ReasoningChain.from_dict(json.loads(text))


def check_chain(chain: ReasoningChain, max_transitions: int | None = None) -> list[str]:
    """Invariant audit of a chain; returns a list of problems found."""
    problems: list[str] = []
    if chain.original.chain_index != 0:
        problems.append("original question must have chain_index 0")
    if max_transitions is not None and len(chain.steps) > max_transitions:
        problems.append(f"{len(chain.steps)} steps exceed budget {max_transitions}")
    for i, step in enumerate(chain.steps):
        if step.from_state.chain_index != i:
            problems.append(f"step {i} starts from chain_index {step.from_state.chain_index}")
        if step.contracted is not None and step.contracted.chain_index != step.from_state.chain_index + 1:
            problems.append(f"step {i} contracted index is not from_state + 1")
        if i < len(chain.steps) - 1 and step.terminated:
            problems.append(f"step {i} terminated before the last step")
        natural = step.verdict.selected is not Origin.NEXT_STATE or step.contracted is None
        if step.terminated != (natural or step.forced_stop):
            problems.append(f"step {i} terminated flag disagrees with verdict")
        if step.candidate(step.verdict.selected) is None:
            problems.append(f"step {i} verdict selects an absent candidate")
        origins = [c.origin for c in step.candidates]
        if len(origins) != len(set(origins)):
            problems.append(f"step {i} has duplicate candidate origins")
        if i > 0 and chain.steps[i - 1].contracted != step.from_state:
            problems.append(f"step {i} does not start from the previous contraction")
    if chain.steps and not chain.steps[-1].terminated:
        problems.append("last step is not terminal")
    if chain.total_usage != sum_usage(s.usage for s in chain.steps):
        problems.append("total_usage differs from the sum of step usages")
    return problems
