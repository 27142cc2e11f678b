"""Integrations built on the Markov chain: entry states, beam tree search,
reflective refinement and the atomicity profile of final states."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

from .core import (
    CallRecord,
    CandidateSolution,
    Origin,
    Question,
    ReasoningChain,
    TransitionRecord,
    build_chain,
    force_stop,
    TokenUsage,
)
from .engine import ContractionFailed, MarkovEngine
from .gateway import BackendError
from .prompts import MissingTag, PromptError, parse_tagged, render_reflect, render_judge


def entry_state(chain: ReasoningChain, k: int) -> Question:
    """State Q_k of ``chain`` re-indexed as an original question."""
    states = [chain.original] + [s.contracted for s in chain.steps if s.contracted is not None]
    if not 0 <= k < len(states):
        raise IndexError(f"entry state {k} outside 0..{len(states) - 1}")
    return replace(states[k], chain_index=0)


# -- reflective refinement ----------------------------------------------------------


class Reflection(str, enum.Enum):
    ACCEPT = "accept"
    DEGRADED = "degraded"


@dataclass(frozen=True)
class ReflectionResult:
    status: Reflection
    rationale: str = ""
    usage: TokenUsage = TokenUsage()


def reflective_check(
    step: TransitionRecord,
    engine: MarkovEngine,
    original: Question | None = None,
    calls: list[CallRecord] | None = None,
) -> ReflectionResult:
    """Ask the judge whether Q_i -> Q_{i+1} degraded the state."""
    current = step.candidate(Origin.CURRENT_STATE)
    nxt = step.candidate(Origin.NEXT_STATE)
    if step.contracted is None or current is None or nxt is None:
        return ReflectionResult(Reflection.ACCEPT, "no contraction to review")
    calls = [] if calls is None else calls
    prompt = render_reflect(
        original or step.from_state, step.from_state, current.trajectory, step.contracted, nxt.trajectory
    )
    try:
        response = engine._call(prompt, "reflect", step.from_state.chain_index, calls)
    except BackendError:
        return ReflectionResult(Reflection.ACCEPT, "reflection judge unavailable")
    try:
        verdict = parse_tagged(response.text, "answer").strip().lower()
    except MissingTag:
        return ReflectionResult(Reflection.ACCEPT, "unparseable reflection", response.usage)
    status = Reflection.DEGRADED if verdict.startswith("degrad") else Reflection.ACCEPT
    rationale = response.text[: response.text.rfind("<answer>")].strip() or response.text
    return ReflectionResult(status, rationale, response.usage)


def refine_transition(
    step: TransitionRecord,
    feedback: ReflectionResult,
    engine: MarkovEngine,
    calls: list[CallRecord] | None = None,
) -> TransitionRecord:
    """Re-contract a degraded step with the reviewer's rationale; two calls at most."""
    if feedback.status is not Reflection.DEGRADED:
        raise ValueError("refine_transition needs a DEGRADED reflection")
    current = step.candidate(Origin.CURRENT_STATE)
    if current is None:
        raise ValueError("step has no current-state candidate")
    calls = [] if calls is None else calls
    q = step.from_state
    dag = step.dag if step.dag.nodes else None
    known = list(step.folded) if dag is not None else None
    try:
        nq = engine.contract_state(
            q, dag, calls, trajectory=current.trajectory, known=known,
            feedback=feedback.rationale, retries=0,
        )
    except ContractionFailed:
        return replace(step, note="refinement failed")
    nxt = engine.solve_direct(nq, Origin.NEXT_STATE, calls)
    candidates = tuple(nxt if c.origin is Origin.NEXT_STATE else c for c in step.candidates)
    return replace(step, contracted=nq, candidates=candidates, refined=True)


def reflect_step(
    step: TransitionRecord, engine: MarkovEngine, original: Question
) -> TransitionRecord:
    """Check a non-terminal step and refine it at most once.

    Every call made here is appended to the returned record's call log, so
    chain totals stay exact whichever version of the step is kept.
    """
    if step.terminated or step.contracted is None:
        return step
    extra: list[CallRecord] = []
    check = reflective_check(step, engine, original, extra)
    if check.status is Reflection.ACCEPT:
        return replace(step, calls=step.calls + tuple(extra))
    refined = refine_transition(step, check, engine, extra)
    if not refined.refined:
        return replace(step, calls=step.calls + tuple(extra), note="unrefined: refinement failed")
    recheck = reflective_check(refined, engine, original, extra)
    if recheck.status is Reflection.DEGRADED:
        return replace(step, calls=step.calls + tuple(extra), note="unrefined: refinement degraded")
    return replace(refined, calls=step.calls + tuple(extra))


def run_reflective_chain(q0: Question, engine: MarkovEngine) -> ReasoningChain:
    """``run_chain`` with a reflective check after every non-terminal transition."""
    budget = engine.config.max_transitions
    steps: list[TransitionRecord] = []
    q: Question | None = q0
    current: CandidateSolution | None = None
    while q is not None:
        record = reflect_step(engine.transition_step(q, q0, current), engine, q0)
        steps.append(record)
        if record.terminated:
            break
        if len(steps) >= budget:
            steps[-1] = force_stop(record)
            break
        q, current = record.contracted, record.candidate(Origin.NEXT_STATE)
    return build_chain(q0, steps, engine.snapshot())


# -- tree search ----------------------------------------------------------------------


@dataclass(frozen=True)
class TreeConfig:
    branching: int = 3
    max_depth: int = 3
    beam_width: int = 1
    seed: int = 0
    reflective: bool = False

    def __post_init__(self) -> None:
        for name in ("branching", "max_depth", "beam_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "branching": self.branching,
            "max_depth": self.max_depth,
            "beam_width": self.beam_width,
            "seed": self.seed,
            "reflective": self.reflective,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TreeConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class _Expansion:
    key: tuple[int, int]
    parent: tuple[int, int] | None
    path: tuple[TransitionRecord, ...]

    @property
    def record(self) -> TransitionRecord:
        return self.path[-1]


@dataclass
class TreeSearchResult:
    chain: ReasoningChain
    tree_config: TreeConfig
    nodes: list[dict[str, Any]] = field(default_factory=list)
    prunes: list[dict[str, Any]] = field(default_factory=list)
    best_leaf: tuple[int, int] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "tree",
            "tree_config": self.tree_config.to_dict(),
            "engine_config": self.chain.config_snapshot,
            "nodes": self.nodes,
            "prunes": self.prunes,
            "best_leaf": list(self.best_leaf) if self.best_leaf else None,
            "best_chain": self.chain.to_dict(),
        }


def _prune_rank(
    q0: Question, live: Sequence[_Expansion], engine: MarkovEngine, depth: int
) -> tuple[list[_Expansion], dict[str, Any]]:
    """One judge call over same-depth NEXT_STATE solutions; the pick goes first."""
    solutions = [e.record.candidate(Origin.NEXT_STATE) for e in live]
    calls: list[CallRecord] = []
    prompt = render_judge(q0, [s.trajectory for s in solutions if s is not None])
    response = engine._call(prompt, "prune", depth, calls)
    best = 0
    try:
        best = engine._judged_index(response.text, solutions, q0.domain)  # type: ignore[arg-type]
        fallback = False
    except PromptError:
        fallback = True
    ranked = [live[best]] + [e for i, e in enumerate(live) if i != best]
    info = {
        "depth": depth,
        "selected": list(live[best].key),
        "fallback": fallback,
        "rationale": response.text,
        "usage": calls[0].usage.to_dict(),
    }
    return ranked, info


def tree_search(q0: Question, cfg: TreeConfig, engine: MarkovEngine) -> TreeSearchResult:
    """Beam search over Markov states.

    Every beam state spawns ``branching`` independent transitions; states at the
    same depth are answer-equivalent to Q_0, so a judge can compare their
    NEXT_STATE solutions directly and keep the best ``beam_width``.
    """
    snapshot = dict(engine.snapshot(), max_transitions=cfg.max_depth, adaptive_budget=False)
    beam: list[tuple[Question, CandidateSolution | None, _Expansion | None]] = [(q0, None, None)]
    nodes: list[dict[str, Any]] = []
    prunes: list[dict[str, Any]] = []
    best: _Expansion | None = None

    for depth in range(cfg.max_depth):
        jobs = [(state, b) for state in beam for b in range(cfg.branching)]

        def expand(job: tuple[tuple[Question, CandidateSolution | None, _Expansion | None], int]):
            (q, current, _parent), _b = job
            record = engine.transition_step(q, q0, current)
            if cfg.reflective:
                record = reflect_step(record, engine, q0)
            return record

        if engine.config.parallel and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
                records = list(pool.map(expand, jobs))
        else:
            records = [expand(job) for job in jobs]

        expansions: list[_Expansion] = []
        for idx, (((_, _, parent), _b), record) in enumerate(zip(jobs, records)):
            exp = _Expansion(
                (depth, idx), parent.key if parent else None,
                (parent.path if parent else ()) + (record,),
            )
            expansions.append(exp)
            nodes.append({
                "depth": depth,
                "branch": idx,
                "parent": list(exp.parent) if exp.parent else None,
                "record": record.to_dict(),
            })

        live = [e for e in expansions if not e.record.terminated]
        if len(live) > cfg.beam_width:
            ranked, info = _prune_rank(q0, live, engine, depth)
            info["kept"] = [list(e.key) for e in ranked[: cfg.beam_width]]
            info["dropped"] = [list(e.key) for e in ranked[cfg.beam_width:]]
            prunes.append(info)
        else:
            ranked = live
        kept = ranked[: cfg.beam_width]
        best = (ranked or expansions)[0]
        if not kept:
            break
        beam = [
            (e.record.contracted, e.record.candidate(Origin.NEXT_STATE), e)  # type: ignore[misc]
            for e in kept
        ]

    assert best is not None
    path = list(best.path)
    if not path[-1].terminated:
        path[-1] = force_stop(path[-1])
    chain = build_chain(q0, path, snapshot)
    return TreeSearchResult(chain, cfg, nodes, prunes, best.key)


def markov_tree_search(q0: Question, cfg: TreeConfig, engine: MarkovEngine) -> ReasoningChain:
    return tree_search(q0, cfg, engine).chain


def tree_call_count(beam_sizes: Sequence[int], branching: int, calls_per_step: int,
                    prune_calls: int = 0) -> int:
    """Closed-form call count of a scripted tree search.

    Depth 0 spends one extra call per branch solving Q_0; deeper branches reuse
    their parent's NEXT_STATE solve.
    """
    return sum(
        beam * branching * (calls_per_step + (1 if depth == 0 else 0))
        for depth, beam in enumerate(beam_sizes)
    ) + prune_calls


# -- atomicity ----------------------------------------------------------------------


@dataclass(frozen=True)
class AtomicityProfile:
    depths: tuple[int, ...] = ()
    counts: tuple[int, ...] = ()
    mean_completion_tokens: tuple[float | None, ...] = ()
    converged: bool = False
    threshold: float = 0.1

    def to_dict(self) -> dict[str, Any]:
        return {
            "depths": list(self.depths),
            "counts": list(self.counts),
            "mean_completion_tokens": list(self.mean_completion_tokens),
            "converged": self.converged,
            "threshold": self.threshold,
        }


def final_state_solve(chain: ReasoningChain) -> tuple[int, CandidateSolution] | None:
    """Depth and solve of the deepest state a chain reached."""
    if not chain.steps:
        return None
    last = chain.steps[-1]
    nxt = last.candidate(Origin.NEXT_STATE)
    if last.contracted is not None and nxt is not None:
        return last.contracted.chain_index, nxt
    # a reused CURRENT_STATE candidate keeps the usage of the solve that produced it
    current = last.candidate(Origin.CURRENT_STATE)
    if current is None:
        return None
    return last.from_state.chain_index, current


def atomicity_profile(chains: Sequence[ReasoningChain], threshold: float = 0.1) -> AtomicityProfile:
    """Mean completion tokens of final-state solves, grouped by depth.

    ``converged`` is set when the two deepest populated depths differ by less
    than ``threshold`` relative to the shallower of the two.
    """
    by_depth: dict[int, list[int]] = {}
    for chain in chains:
        found = final_state_solve(chain)
        if found is None:
            continue
        depth, cand = found
        by_depth.setdefault(depth, []).append(cand.usage.completion_tokens)
    if not by_depth:
        return AtomicityProfile(threshold=threshold)
    depths = tuple(range(max(by_depth) + 1))
    counts = tuple(len(by_depth.get(d, ())) for d in depths)
    means = tuple(
        (sum(by_depth[d]) / len(by_depth[d])) if by_depth.get(d) else None for d in depths
    )
    populated = [m for m in means if m is not None]
    converged = False
    if len(populated) >= 2:
        prev, last = populated[-2], populated[-1]
        converged = prev > 0 and math.fabs(last - prev) / prev < threshold
    return AtomicityProfile(depths, counts, means, converged, threshold)
