"""Prompt rendering for the four roles (direct, decompose, contract, judge) and output parsers.

Templates live under ``templates/<domain>/<role>.txt`` and use ``str.format``
placeholders. Every render function is a pure function of its arguments.
"""

from __future__ import annotations

import functools
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .core import DagNode, Domain, Question, ReasoningDag, independent_nodes, validate_dag

TEMPLATE_DIR = Path(__file__).parent / "templates"
ROLES = ("direct", "decompose", "contract", "judge")


class PromptError(ValueError):
    pass


class MissingContext(PromptError):
    pass


class EmptyTrajectory(PromptError):
    pass


class NotEnoughCandidates(PromptError):
    pass


class MissingTag(PromptError):
    pass


class ParseError(PromptError):
    def __init__(self, message: str, fragment: str = ""):
        self.fragment = fragment
        super().__init__(f"{message}: {fragment[:200]!r}" if fragment else message)


class DagViolation(PromptError):
    def __init__(self, violations: Sequence[str], fragment: str = ""):
        self.violations = list(violations)
        self.fragment = fragment
        super().__init__("invalid dependencies: " + "; ".join(self.violations))


class InvalidChoice(PromptError):
    pass


@functools.lru_cache(maxsize=None)
def load_template(name: str) -> str:
    """``name`` is ``<domain>/<role>`` or ``shared/<name>``."""
    return (TEMPLATE_DIR / f"{name}.txt").read_text(encoding="utf-8")


def template_hashes() -> dict[str, str]:
    return {
        str(p.relative_to(TEMPLATE_DIR).with_suffix("")): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(TEMPLATE_DIR.glob("*/*.txt"))
    }


@dataclass(frozen=True)
class PromptBundle:
    domain: Domain
    templates: dict[str, str]

    @classmethod
    def for_domain(cls, domain: Domain) -> PromptBundle:
        return cls(domain, {role: load_template(f"{domain.value}/{role}") for role in ROLES})


@dataclass(frozen=True)
class DecompositionDoc:
    thought: str
    sub_questions: tuple[tuple[str, str | None, tuple[int, ...]], ...]
    answer: str | None = None


# -- rendering -----------------------------------------------------------------------


def _require_contexts(q: Question) -> None:
    if q.domain in (Domain.CODE, Domain.MULTIHOP_QA) and not q.contexts:
        raise MissingContext(f"{q.domain.value} questions need contexts")


def render_direct(q: Question) -> str:
    _require_contexts(q)
    return load_template(f"{q.domain.value}/direct").format(
        question=q.text, contexts=q.contexts or ""
    )


def render_decompose(q: Question, trajectory: str, answer: str) -> str:
    if not trajectory or not trajectory.strip():
        raise EmptyTrajectory("cannot decompose an empty trajectory")
    body = load_template(f"{q.domain.value}/decompose").format(
        question=q.text, trajectory=trajectory
    )
    return body + load_template("shared/decompose_format").format(answer=answer)


def _node_payload(nodes: Sequence[DagNode]) -> str:
    return json.dumps(
        [{"description": n.description, "answer": n.answer} for n in nodes], ensure_ascii=False
    )


def assertion_lines(contexts: str | None) -> list[str]:
    """Assertion lines embedded in a code question's contexts."""
    return [ln.strip() for ln in (contexts or "").splitlines() if ln.strip().startswith("assert")]


def render_contract(
    q: Question,
    dag: ReasoningDag | None,
    trajectory: str = "",
    known: Sequence[int] | None = None,
    feedback: str | None = None,
) -> str:
    """Contraction prompt.

    ``known`` selects which nodes are presented as known conditions (default:
    every independent node). ``dag=None`` contracts straight from the
    trajectory, used by the no-decomposition ablation.
    """
    if dag is not None:
        violations = validate_dag(dag)
        if violations:
            raise DagViolation(violations)
        known_ids = sorted(independent_nodes(dag) if known is None else set(known))
        known_nodes = [dag.nodes[i] for i in known_ids]
        other_nodes = [n for n in dag.nodes if n.id not in set(known_ids)]
        sub_questions = load_template("shared/sub_questions").format(
            independent=_node_payload(known_nodes), dependent=_node_payload(other_nodes)
        )
    else:
        if not trajectory.strip():
            raise EmptyTrajectory("contraction without a DAG needs the trajectory")
        sub_questions = ""

    if q.domain is Domain.MATH:
        if dag is None:
            sub_questions = load_template("shared/trajectory_only").format(trajectory=trajectory)
        prompt = load_template("math/contract").format(question=q.text, sub_questions=sub_questions)
    elif q.domain is Domain.CODE:
        _require_contexts(q)
        dag_text = json.dumps(dag.to_dict(), ensure_ascii=False) if dag is not None else trajectory
        prompt = load_template("code/contract").format(
            question=q.text, dag=dag_text, test_cases="\n".join(assertion_lines(q.contexts))
        )
    else:
        prompt = load_template("multihop_qa/contract").format(
            question=q.text, response=trajectory, sub_questions=sub_questions
        )
    if feedback:
        prompt += load_template("shared/refine").format(feedback=feedback)
    return prompt


def render_judge(q0: Question, solutions: Sequence[str]) -> str:
    if len(solutions) < 2:
        raise NotEnoughCandidates(f"judge needs at least 2 solutions, got {len(solutions)}")
    listing = "".join(f"solution {i}: {s}\n" for i, s in enumerate(solutions))
    return load_template(f"{q0.domain.value}/judge").format(question=q0.text, solutions=listing)


def node_question(q: Question, node: DagNode, solved: dict[int, tuple[str, str]]) -> Question:
    """The state a single DAG node is solved as: its description plus solved dependencies."""
    if node.depends:
        conditions = "\n".join(
            f"- {solved[d][0]}: {solved[d][1]}" for d in node.depends
        )
        text = load_template("shared/node").format(conditions=conditions, description=node.description)
    else:
        text = node.description
    return Question(text, q.domain, q.contexts, q.chain_index)


def with_reprompt(prompt: str, error: Exception | str) -> str:
    return prompt + load_template("shared/reprompt").format(error=str(error))


def render_reflect(original: Question, current: Question, current_solution: str,
                   nxt: Question, next_solution: str) -> str:
    return load_template("shared/reflect").format(
        original=original.text,
        current_question=current.text,
        current_solution=current_solution,
        next_question=nxt.text,
        next_solution=next_solution,
    )


def render_equivalence(original: Question, original_solution: str,
                       candidate: Question, candidate_solution: str) -> str:
    return load_template("shared/equivalence").format(
        original=original.text,
        original_solution=original_solution,
        candidate=candidate.text,
        candidate_solution=candidate_solution,
    )


def render_complexity(current: Question, current_solution: str,
                      candidate: Question, candidate_solution: str) -> str:
    return load_template("shared/complexity").format(
        current=current.text,
        current_solution=current_solution,
        candidate=candidate.text,
        candidate_solution=candidate_solution,
    )


# -- parsing ------------------------------------------------------------------------


def parse_tagged(text: str, tag: str) -> str:
    """Contents of the last well-formed ``<tag>...</tag>`` pair, stripped."""
    close = f"</{tag}>"
    end = text.rfind(close)
    if end < 0:
        raise MissingTag(f"no <{tag}> tag found")
    start = text.rfind(f"<{tag}>", 0, end)
    if start < 0:
        raise MissingTag(f"no opening <{tag}> before the last </{tag}>")
    return text[start + len(tag) + 2:end].strip()


_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)


def parse_code_fence(text: str) -> str:
    blocks = _FENCE.findall(text)
    if not blocks:
        raise MissingTag("no fenced code block found")
    return blocks[-1].strip("\n")


def parse_judge_choice(text: str, n: int) -> int:
    if n < 2:
        raise ValueError("a judge choice needs n >= 2")
    raw = parse_tagged(text, "answer")
    match = re.fullmatch(r"\s*(?:solution\s*)?(-?\d+)\s*\.?\s*", raw, re.IGNORECASE)
    if not match:
        raise InvalidChoice(f"judge answer {raw!r} is not an index")
    idx = int(match.group(1))
    if not 0 <= idx < n:
        raise InvalidChoice(f"judge index {idx} outside 0..{n - 1}")
    return idx


def _balanced_objects(text: str) -> list[tuple[int, int]]:
    """Spans of top-level balanced ``{...}`` regions, honouring JSON string quoting."""
    spans: list[tuple[int, int]] = []
    depth = 0
    start = -1
    in_str = False
    escape = False
    for i, ch in enumerate(text):
        if in_str:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"' and depth > 0:
            in_str = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                spans.append((start, i + 1))
    return spans


def extract_json_object(text: str) -> dict[str, Any]:
    spans = _balanced_objects(text)
    if not spans:
        raise ParseError("no JSON object found", text)
    start, end = max(spans, key=lambda s: (s[1] - s[0], -s[0]))
    fragment = text[start:end]
    try:
        obj = json.loads(fragment)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg})", fragment) from None
    if not isinstance(obj, dict):
        raise ParseError("JSON value is not an object", fragment)
    return obj


def _as_text(value: Any) -> str | None:
    if value is None:
        return None
    if isinstance(value, str):
        return value
    return json.dumps(value, ensure_ascii=False)


def parse_decomposition_doc(text: str) -> DecompositionDoc:
    obj = extract_json_object(text)
    subs = obj.get("sub-questions", obj.get("sub_questions"))
    if subs is None:
        raise ParseError('missing "sub-questions" list', json.dumps(obj)[:200])
    if not isinstance(subs, list):
        raise ParseError('"sub-questions" is not a list', json.dumps(obj)[:200])
    entries = []
    for i, sub in enumerate(subs):
        if not isinstance(sub, dict) or not isinstance(sub.get("description"), str):
            raise ParseError(f"sub-question {i} lacks a description", json.dumps(sub)[:200])
        deps = sub.get("depend", sub.get("depends", []))
        if deps is None:
            deps = []
        if not isinstance(deps, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) for d in deps
        ):
            raise ParseError(f"sub-question {i} has non-integer dependencies", json.dumps(sub)[:200])
        entries.append((sub["description"], _as_text(sub.get("answer")), tuple(deps)))
    return DecompositionDoc(str(obj.get("thought", "")), tuple(entries), _as_text(obj.get("answer")))


def dag_from_doc(doc: DecompositionDoc, source_state: int = 0) -> ReasoningDag:
    dag = ReasoningDag(
        tuple(DagNode(i, desc, ans, deps) for i, (desc, ans, deps) in enumerate(doc.sub_questions)),
        source_state,
    )
    violations = validate_dag(dag)
    if violations:
        raise DagViolation(violations, json.dumps(dag.to_dict())[:200])
    return dag


def parse_decomposition(text: str, source_state: int = 0) -> ReasoningDag:
    return dag_from_doc(parse_decomposition_doc(text), source_state)


def serialize_decomposition(dag: ReasoningDag, thought: str = "", answer: str | None = None) -> str:
    doc = {
        "thought": thought,
        "sub-questions": [
            {"description": n.description, "answer": n.answer, "depend": list(n.depends)}
            for n in dag.nodes
        ],
        "answer": answer,
    }
    return json.dumps(doc, ensure_ascii=False, indent=2)


def parse_answer(text: str, domain: Domain) -> str:
    """Domain-specific answer extraction from a direct-solve completion."""
    if domain is Domain.CODE:
        return parse_code_fence(text)
    if domain is Domain.MULTIHOP_QA:
        try:
            obj = extract_json_object(text)
        except ParseError:
            return parse_tagged(text, "answer")
        if "answer" not in obj:
            raise MissingTag("JSON response has no answer field")
        return (_as_text(obj["answer"]) or "").strip()
    return parse_tagged(text, "answer")
