"""Trace analytics: structural histograms of initial DAGs and judge-rated transition quality."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Sequence

from .core import Origin, ReasoningChain, dag_depth
from .gateway import BackendError, CompletionRequest, Gateway
from .prompts import MissingTag, parse_tagged, render_complexity, render_equivalence

logger = logging.getLogger(__name__)

QUALITY_TAG = "quality"


# -- structure ------------------------------------------------------------------------


@dataclass(frozen=True)
class StructuralStats:
    depth_histogram: dict[int, int] = field(default_factory=dict)
    count_histogram: dict[int, int] = field(default_factory=dict)
    accuracy_by_depth: dict[int, float] = field(default_factory=dict)
    accuracy_by_count: dict[int, float] = field(default_factory=dict)
    included: int = 0
    excluded: int = 0

    @property
    def mode_depth(self) -> int | None:
        if not self.depth_histogram:
            return None
        # ties go to the shallower depth
        return max(sorted(self.depth_histogram), key=lambda d: self.depth_histogram[d])

    def to_dict(self) -> dict[str, Any]:
        def keyed(d: dict[int, Any]) -> dict[str, Any]:
            return {str(k): d[k] for k in sorted(d)}

        return {
            "included": self.included,
            "excluded": self.excluded,
            "mode_depth": self.mode_depth,
            "depth_histogram": keyed(self.depth_histogram),
            "count_histogram": keyed(self.count_histogram),
            "accuracy_by_depth": keyed(self.accuracy_by_depth),
            "accuracy_by_count": keyed(self.accuracy_by_count),
        }


def _mean_by(keys: list[int], scores: list[float | None]) -> dict[int, float]:
    groups: dict[int, list[float]] = {}
    for k, s in zip(keys, scores):
        if s is not None:
            groups.setdefault(k, []).append(s)
    return {k: sum(v) / len(v) for k, v in sorted(groups.items())}


def structural_analysis(
    chains: Sequence[ReasoningChain], scores: Sequence[float | None] | None = None
) -> StructuralStats:
    """Depth and node-count histograms of each chain's first DAG.

    ``scores`` (aligned with ``chains``) adds accuracy cross-tabs. Chains with no
    initial DAG (no decomposition, or an atomic first state) are excluded.
    """
    if scores is not None and len(scores) != len(chains):
        raise ValueError("scores must align with chains")
    depths: list[int] = []
    counts: list[int] = []
    kept_scores: list[float | None] = []
    excluded = 0
    for i, chain in enumerate(chains):
        dag = chain.initial_dag
        if dag is None or not dag.nodes:
            excluded += 1
            continue
        depths.append(dag_depth(dag))
        counts.append(len(dag.nodes))
        kept_scores.append(scores[i] if scores is not None else None)
    return StructuralStats(
        depth_histogram=dict(sorted(Counter(depths).items())),
        count_histogram=dict(sorted(Counter(counts).items())),
        accuracy_by_depth=_mean_by(depths, kept_scores) if scores is not None else {},
        accuracy_by_count=_mean_by(counts, kept_scores) if scores is not None else {},
        included=len(depths),
        excluded=excluded,
    )


# -- judged quality -------------------------------------------------------------------


@dataclass(frozen=True)
class Rate:
    successes: int = 0
    attempts: int = 0
    excluded: int = 0

    @property
    def rate(self) -> float | None:
        return self.successes / self.attempts if self.attempts else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "rate": self.rate,
            "successes": self.successes,
            "attempts": self.attempts,
            "excluded": self.excluded,
        }


@dataclass(frozen=True)
class QualityMetrics:
    equivalence: Rate
    complexity_reduction: Rate
    selection: Rate

    def to_dict(self) -> dict[str, Any]:
        return {
            "answer_equivalence": self.equivalence.to_dict(),
            "complexity_reduction": self.complexity_reduction.to_dict(),
            "judge_selection": self.selection.to_dict(),
        }


def _yes(gateway: Gateway, prompt: str, state_index: int, temperature: float) -> bool | None:
    """One yes/no judge call; ``None`` when the item has to be excluded."""
    try:
        response = gateway.complete(
            CompletionRequest(prompt, temperature, None, QUALITY_TAG, state_index)
        )
        verdict = parse_tagged(response.text, "answer").strip().lower()
    except (BackendError, MissingTag) as exc:
        logger.info("quality item excluded: %s", exc)
        return None
    if verdict.startswith("yes"):
        return True
    if verdict.startswith("no"):
        return False
    return None


def selection_rate(chains: Sequence[ReasoningChain]) -> Rate:
    """Share of judged transitions whose verdict kept the contracted state.

    Synthetic verdicts (atomic stops, judge fallbacks) are not judgments and are skipped.
    """
    hits = attempts = skipped = 0
    for chain in chains:
        for step in chain.steps:
            if step.verdict.fallback or len(step.candidates) < 2:
                skipped += 1
                continue
            attempts += 1
            hits += step.verdict.selected is Origin.NEXT_STATE
    return Rate(hits, attempts, skipped)


def quality_assessment(
    chains: Sequence[ReasoningChain], gateway: Gateway, temperature: float = 0.0
) -> QualityMetrics:
    """Two judge calls per contracted transition plus the recorded selection rate."""
    eq = [0, 0, 0]
    cx = [0, 0, 0]
    for chain in chains:
        if not chain.steps:
            continue
        first = chain.steps[0].candidate(Origin.CURRENT_STATE)
        original_solution = first.trajectory if first else ""
        for step in chain.steps:
            nxt = step.candidate(Origin.NEXT_STATE)
            cur = step.candidate(Origin.CURRENT_STATE)
            if step.contracted is None or nxt is None or cur is None:
                continue
            index = step.from_state.chain_index
            checks = (
                (eq, render_equivalence(chain.original, original_solution, step.contracted, nxt.trajectory)),
                (cx, render_complexity(step.from_state, cur.trajectory, step.contracted, nxt.trajectory)),
            )
            for tally, prompt in checks:
                ok = _yes(gateway, prompt, index, temperature)
                if ok is None:
                    tally[2] += 1
                else:
                    tally[0] += ok
                    tally[1] += 1
    return QualityMetrics(Rate(*eq), Rate(*cx), selection_rate(chains))
