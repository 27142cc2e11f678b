"""The Markov reasoning loop.

One transition at state Q_i:

    solve(Q_i) -> decompose into a DAG -> { execute the DAG | contract to Q_{i+1} -> solve(Q_{i+1}) }
               -> judge over the candidates against Q_0 -> continue only if solve(Q_{i+1}) wins

Prompts issued while processing Q_i are rendered only from Q_i (and, for the
decompose/contract prompts, Q_i's own trajectory); the judge additionally sees
the original question text, never earlier trajectories.
"""

from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Callable, Sequence, TypeVar

from .core import (
    DEFAULT_MAX_TRANSITIONS,
    Ablation,
    CallRecord,
    CandidateSolution,
    Domain,
    JudgeVerdict,
    Origin,
    Question,
    ReasoningChain,
    ReasoningDag,
    TransitionRecord,
    build_chain,
    force_stop,
    independent_nodes,
    sum_usage,
    suggested_max_transitions,
    topological_layers,
    ZERO_USAGE,
)
from .gateway import BackendError, CompletionRequest, CompletionResponse, Gateway
from .prompts import (
    DagViolation,
    EmptyTrajectory,
    InvalidChoice,
    MissingTag,
    ParseError,
    PromptError,
    node_question,
    parse_answer,
    parse_decomposition,
    parse_judge_choice,
    parse_tagged,
    render_contract,
    render_decompose,
    render_direct,
    render_judge,
    with_reprompt,
)
from .scoring import answers_match

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# preference when several candidates carry the judged answer
_TIE_ORDER = (Origin.NEXT_STATE, Origin.CURRENT_STATE, Origin.DAG_EXECUTION)


class DecompositionFailed(RuntimeError):
    pass


class ContractionFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    max_transitions: int = DEFAULT_MAX_TRANSITIONS
    temperature: float = 1.0
    ablation: Ablation = Ablation.NONE
    adaptive_budget: bool = False
    max_output_tokens: int | None = None
    shuffle_judge: bool = False
    seed: int = 0
    parallel: bool = True

    def __post_init__(self) -> None:
        if self.max_transitions < 1:
            raise ValueError("max_transitions must be >= 1")
        if not isinstance(self.ablation, Ablation):
            object.__setattr__(self, "ablation", Ablation(self.ablation))

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_transitions": self.max_transitions,
            "temperature": self.temperature,
            "ablation": self.ablation.value,
            "adaptive_budget": self.adaptive_budget,
            "max_output_tokens": self.max_output_tokens,
            "shuffle_judge": self.shuffle_judge,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EngineConfig:
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "ablation" in known:
            known["ablation"] = Ablation(str(known["ablation"]).replace("-", "_"))
        return cls(**known)


class MarkovEngine:
    def __init__(self, gateway: Gateway, config: EngineConfig | None = None):
        self.gateway = gateway
        self.config = config or EngineConfig()

    # -- plumbing ---------------------------------------------------------------------

    def _call(self, prompt: str, tag: str, state_index: int, calls: list[CallRecord]) -> CompletionResponse:
        request = CompletionRequest(
            prompt, self.config.temperature, self.config.max_output_tokens, tag, state_index
        )
        response = self.gateway.complete(request)
        calls.append(CallRecord(tag, response.usage))
        return response

    def _map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        if self.config.parallel and len(items) > 1:
            with ThreadPoolExecutor(max_workers=len(items)) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def snapshot(self) -> dict[str, Any]:
        return self.config.to_dict()

    # -- the four roles -----------------------------------------------------------------

    def solve_direct(
        self,
        q: Question,
        origin: Origin = Origin.CURRENT_STATE,
        calls: list[CallRecord] | None = None,
        tag: str = "direct",
    ) -> CandidateSolution:
        calls = [] if calls is None else calls
        response = self._call(render_direct(q), tag, q.chain_index, calls)
        try:
            answer = parse_answer(response.text, q.domain)
        except PromptError:
            answer = ""
        return CandidateSolution(origin, answer, response.text, response.usage, parse_ok=bool(answer))

    def decompose_state(
        self, q: Question, trajectory: str, answer: str, calls: list[CallRecord] | None = None
    ) -> ReasoningDag:
        calls = [] if calls is None else calls
        prompt = render_decompose(q, trajectory, answer)
        error: PromptError | None = None
        for attempt in range(2):
            text = prompt if error is None else with_reprompt(prompt, error)
            response = self._call(text, "decompose", q.chain_index, calls)
            try:
                return parse_decomposition(response.text, q.chain_index)
            except (ParseError, DagViolation) as exc:
                error = exc
        raise DecompositionFailed(str(error))

    def execute_dag(
        self, q: Question, dag: ReasoningDag, calls: list[CallRecord] | None = None
    ) -> CandidateSolution:
        """Solve every node layer by layer; dependencies become known conditions."""
        calls = [] if calls is None else calls
        layers = [sorted(layer) for layer in topological_layers(dag)]
        if not layers:
            raise ValueError("cannot execute an empty DAG")
        solved: dict[int, tuple[str, str]] = {}
        outputs: dict[int, CandidateSolution] = {}
        completed = 0

        def solve_node(node_id: int) -> tuple[CandidateSolution, list[CallRecord]]:
            node_calls: list[CallRecord] = []
            nq = node_question(q, dag.nodes[node_id], solved)
            return self.solve_direct(nq, Origin.DAG_EXECUTION, node_calls, tag="dag_node"), node_calls

        for layer in layers:
            results = self._map(solve_node, layer)
            for node_id, (cand, node_calls) in zip(layer, results):
                calls.extend(node_calls)
                outputs[node_id] = cand
                if cand.parse_ok:
                    solved[node_id] = (dag.nodes[node_id].description, cand.answer)
            if any(not outputs[i].parse_ok for i in layer):
                break
            completed += 1

        trajectory = "\n\n".join(
            f"Sub-question {i}: {dag.nodes[i].description}\n{outputs[i].trajectory}" for i in sorted(outputs)
        )
        usage = sum_usage(c.usage for c in outputs.values())
        if completed < len(layers):
            return CandidateSolution(
                Origin.DAG_EXECUTION, "", trajectory, usage,
                parse_ok=False, partial=True, completed_layers=completed,
            )
        sinks = layers[-1]
        answer = " | ".join(outputs[i].answer for i in sinks)
        return CandidateSolution(
            Origin.DAG_EXECUTION, answer, trajectory, usage, completed_layers=completed
        )

    def contract_state(
        self,
        q: Question,
        dag: ReasoningDag | None,
        calls: list[CallRecord] | None = None,
        trajectory: str = "",
        known: Sequence[int] | None = None,
        feedback: str | None = None,
        retries: int = 1,
    ) -> Question:
        calls = [] if calls is None else calls
        prompt = render_contract(q, dag, trajectory, known, feedback)
        error: PromptError | None = None
        for attempt in range(retries + 1):
            text = prompt if error is None else with_reprompt(prompt, error)
            response = self._call(text, "contract", q.chain_index, calls)
            try:
                return self._read_contraction(q, response.text)
            except (MissingTag, ValueError) as exc:
                error = exc if isinstance(exc, PromptError) else MissingTag(str(exc))
        raise ContractionFailed(str(error))

    @staticmethod
    def _read_contraction(q: Question, text: str) -> Question:
        new_text = parse_tagged(text, "question")
        if not new_text:
            raise MissingTag("empty <question> tag")
        contexts = q.contexts
        if q.domain is Domain.CODE:
            raw = parse_tagged(text, "test").replace("\\n", "\n")
            tests = [ln.strip() for ln in raw.splitlines() if ln.strip()]
            if not tests:
                raise MissingTag("empty <test> tag")
            contexts = "\n".join(tests)
        return Question(new_text, q.domain, contexts, q.chain_index + 1)

    def judge_candidates(
        self,
        q0: Question,
        candidates: Sequence[CandidateSolution],
        calls: list[CallRecord] | None = None,
        state_index: int = 0,
        tag: str = "judge",
    ) -> JudgeVerdict:
        calls = [] if calls is None else calls
        order = list(candidates)
        if self.config.shuffle_judge:
            random.Random(f"{self.config.seed}:{state_index}").shuffle(order)
        prompt = render_judge(q0, [c.trajectory for c in order])
        usage = ZERO_USAGE
        error: PromptError | None = None
        for attempt in range(2):
            text = prompt if error is None else with_reprompt(prompt, error)
            response = self._call(text, tag, state_index, calls)
            usage = usage + response.usage
            try:
                idx = self._judged_index(response.text, order, q0.domain)
            except PromptError as exc:
                error = exc
                continue
            return JudgeVerdict(order[idx].origin, response.text, usage)
        return JudgeVerdict(Origin.CURRENT_STATE, f"fallback after judge failure: {error}", usage, True)

    @staticmethod
    def _judged_index(text: str, order: Sequence[CandidateSolution], domain: Domain) -> int:
        if domain is Domain.CODE:
            return parse_judge_choice(text, len(order))
        judged = parse_tagged(text, "answer")
        matches = [
            i for i, c in enumerate(order)
            if c.parse_ok and answers_match(c.answer, judged, domain.value)
        ]
        if not matches:
            raise InvalidChoice(f"judged answer {judged!r} matches no candidate")
        return min(matches, key=lambda i: _TIE_ORDER.index(order[i].origin))

    # -- transitions ----------------------------------------------------------------------

    def _terminal(
        self,
        q: Question,
        q0: Question,
        dag: ReasoningDag,
        candidates: Sequence[CandidateSolution],
        calls: list[CallRecord],
        note: str,
        contracted: Question | None = None,
    ) -> TransitionRecord:
        if len(candidates) >= 2:
            verdict = self.judge_candidates(q0, candidates, calls, q.chain_index)
        else:
            verdict = JudgeVerdict(Origin.CURRENT_STATE, note)
        return TransitionRecord(
            q, dag, contracted, tuple(candidates), verdict, True, tuple(calls), note=note
        )

    def transition_step(
        self, q: Question, q0: Question | None = None, current: CandidateSolution | None = None
    ) -> TransitionRecord:
        """One decompose/contract/judge transition from state ``q``.

        ``current`` is the already-computed solve of ``q`` (the previous step's
        NEXT_STATE candidate); when absent, ``q`` is solved here.
        """
        q0 = q0 or q
        calls: list[CallRecord] = []
        if current is None:
            current = self.solve_direct(q, Origin.CURRENT_STATE, calls)
        else:
            current = replace(current, origin=Origin.CURRENT_STATE, reused=True)
        empty = ReasoningDag((), q.chain_index)

        if self.config.ablation is Ablation.NO_DECOMPOSITION:
            try:
                nq = self.contract_state(q, None, calls, trajectory=current.trajectory)
            except (ContractionFailed, EmptyTrajectory) as exc:
                return self._terminal(q, q0, empty, [current], calls, f"contraction failed: {exc}")
            nxt = self.solve_direct(nq, Origin.NEXT_STATE, calls)
            candidates = (current, nxt)
            verdict = self.judge_candidates(q0, candidates, calls, q.chain_index)
            return TransitionRecord(
                q, empty, nq, candidates, verdict, verdict.selected is not Origin.NEXT_STATE, tuple(calls)
            )

        try:
            dag = self.decompose_state(q, current.trajectory, current.answer, calls)
        except (DecompositionFailed, EmptyTrajectory) as exc:
            return self._terminal(q, q0, empty, [current], calls, f"decomposition failed: {exc}")
        if not dag.nodes:
            return self._terminal(q, q0, dag, [current], calls, "atomic: empty decomposition")

        independent = sorted(independent_nodes(dag))
        known = independent if self.config.ablation is Ablation.NONE else independent[:1]
        dag_calls: list[CallRecord] = []
        next_calls: list[CallRecord] = []

        def contract_and_solve() -> tuple[Question, CandidateSolution]:
            nq = self.contract_state(q, dag, next_calls, trajectory=current.trajectory, known=known)
            return nq, self.solve_direct(nq, Origin.NEXT_STATE, next_calls)

        contraction_error: ContractionFailed | None = None
        nq = nxt = None
        if self.config.parallel:
            with ThreadPoolExecutor(max_workers=1) as pool:
                future = pool.submit(self.execute_dag, q, dag, dag_calls)
                try:
                    nq, nxt = contract_and_solve()
                except ContractionFailed as exc:
                    contraction_error = exc
                dag_candidate = future.result()
        else:
            dag_candidate = self.execute_dag(q, dag, dag_calls)
            try:
                nq, nxt = contract_and_solve()
            except ContractionFailed as exc:
                contraction_error = exc
        calls.extend(dag_calls)
        calls.extend(next_calls)

        if contraction_error is not None or nq is None or nxt is None:
            record = self._terminal(
                q, q0, dag, [current, dag_candidate], calls, f"contraction failed: {contraction_error}"
            )
            return replace(record, folded=tuple(known))
        candidates = (current, dag_candidate, nxt)
        verdict = self.judge_candidates(q0, candidates, calls, q.chain_index)
        return TransitionRecord(
            q, dag, nq, candidates, verdict,
            verdict.selected is not Origin.NEXT_STATE, tuple(calls), folded=tuple(known),
        )

    def run_chain(self, q0: Question) -> ReasoningChain:
        if q0.chain_index != 0:
            raise ValueError("a chain starts from chain_index 0")
        budget = self.config.max_transitions
        steps: list[TransitionRecord] = []
        q: Question | None = q0
        current: CandidateSolution | None = None
        try:
            while q is not None:
                record = self.transition_step(q, q0, current)
                steps.append(record)
                if len(steps) == 1 and self.config.adaptive_budget:
                    budget = suggested_max_transitions(record.dag, self.config.max_transitions)
                if record.terminated:
                    break
                if len(steps) >= budget:
                    steps[-1] = force_stop(record)
                    break
                q, current = record.contracted, record.candidate(Origin.NEXT_STATE)
        except (BackendError, KeyboardInterrupt) as exc:
            exc.partial_chain = build_chain(q0, steps, self.snapshot())  # type: ignore[attr-defined]
            raise
        return build_chain(q0, steps, self.snapshot())


def run_chain(q0: Question, cfg: EngineConfig, gateway: Gateway) -> ReasoningChain:
    return MarkovEngine(gateway, cfg).run_chain(q0)
