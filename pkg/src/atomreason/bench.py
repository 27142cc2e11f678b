"""Dataset ingestion, per-problem scoring, reports and scaling-curve points."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .core import (
    Domain,
    Origin,
    Question,
    ReasoningChain,
    TokenUsage,
    ZERO_USAGE,
    chain_to_json,
    sum_usage,
)
from .engine import EngineConfig, MarkovEngine
from .gateway import Gateway
from .prompts import MissingTag, assertion_lines, parse_code_fence
from .scaling import TreeConfig, tree_search
from .scoring import VerifierUnavailable, score_f1, score_numeric, verify_code_external

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class DuplicateId(DatasetError):
    pass


class Mode(str, enum.Enum):
    CHAIN = "chain"
    TREE = "tree"


@dataclass(frozen=True)
class ProblemRecord:
    id: str
    domain: Domain
    question: str
    gold: str | tuple[str, ...]
    contexts: str | None = None

    def to_question(self) -> Question:
        return Question(self.question, self.domain, self.contexts, 0)


def _gold(raw: Any, domain: Domain, lineno: int) -> str | tuple[str, ...]:
    if domain is Domain.CODE:
        if isinstance(raw, str):
            raw = [ln for ln in raw.splitlines() if ln.strip()]
        if not isinstance(raw, list) or not all(isinstance(a, str) for a in raw):
            raise DatasetError(f"line {lineno}: code gold must be a list of assertions")
        return tuple(raw)
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return str(raw)
    if not isinstance(raw, str):
        raise DatasetError(f"line {lineno}: gold must be a string")
    return raw


def load_problems(
    path: str | Path,
    domain: Domain | str = Domain.MATH,
    numeric_only: bool = False,
) -> list[ProblemRecord]:
    """Read a JSONL dataset: one object per line with id, question, gold (+contexts, domain).

    ``numeric_only`` drops math problems whose gold is not an integer or decimal.
    """
    default_domain = Domain(domain)
    records: list[ProblemRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"line {lineno}: expected a JSON object")
            missing = [k for k in ("id", "question", "gold") if k not in obj]
            if missing:
                raise DatasetError(f"line {lineno}: missing {', '.join(missing)}")
            pid = str(obj["id"])
            if pid in seen:
                raise DuplicateId(f"line {lineno}: duplicate id {pid!r}")
            seen.add(pid)
            dom = Domain(obj.get("domain", default_domain))
            gold = _gold(obj["gold"], dom, lineno)
            if dom is Domain.CODE and not obj.get("contexts"):
                raise DatasetError(f"line {lineno}: code problems need contexts")
            if numeric_only and dom is Domain.MATH and not _is_plain_number(str(gold)):
                continue
            records.append(ProblemRecord(pid, dom, obj["question"], gold, obj.get("contexts")))
    return records


def _is_plain_number(s: str) -> bool:
    try:
        float(s.replace(",", ""))
    except ValueError:
        return False
    return True


# -- scoring -------------------------------------------------------------------------


def score_answer(
    problem: ProblemRecord, answer: str, verifier_cmd: str | None = None
) -> float | None:
    """Score one answer; ``None`` means unscored (no code verifier available)."""
    if problem.domain is Domain.MATH:
        return 1.0 if score_numeric(answer, str(problem.gold), 1e-6) else 0.0
    if problem.domain is Domain.MULTIHOP_QA:
        return score_f1(answer, str(problem.gold))
    code = answer
    if "```" in answer:
        try:
            code = parse_code_fence(answer)
        except MissingTag:
            pass
    try:
        return 1.0 if verify_code_external(code, list(problem.gold), verifier_cmd) else 0.0
    except VerifierUnavailable:
        return None


def truncated(chain: ReasoningChain, k: int) -> tuple[str, TokenUsage]:
    """Answer and cost had the chain stopped after ``k`` transitions (k = 0: direct solve)."""
    if not chain.steps:
        return "", ZERO_USAGE
    if k == 0:
        cand = chain.steps[0].candidate(Origin.CURRENT_STATE)
        return (cand.answer, cand.usage) if cand else ("", ZERO_USAGE)
    n = min(k, len(chain.steps))
    answer = chain.steps[n - 1].selected_candidate.answer
    return answer, sum_usage(s.usage for s in chain.steps[:n])


# -- reports -------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    iteration: int
    cumulative_prompt_tokens: int
    cumulative_completion_tokens: int
    score: float


@dataclass
class BenchRow:
    id: str
    score: float | None
    final_answer: str
    steps: int
    usage: TokenUsage
    trace: str | None = None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "score": self.score,
            "final_answer": self.final_answer,
            "steps": self.steps,
            "usage": self.usage.to_dict(),
            "trace": self.trace,
            "error": self.error,
        }


@dataclass
class BenchReport:
    rows: list[BenchRow]
    curve: list[CurvePoint]
    config: dict[str, Any]
    chains: dict[str, ReasoningChain] = field(default_factory=dict, repr=False)
    trees: dict[str, dict[str, Any]] = field(default_factory=dict, repr=False)

    @property
    def scored_rows(self) -> list[BenchRow]:
        return [r for r in self.rows if r.score is not None]

    @property
    def accuracy(self) -> float:
        scored = self.scored_rows
        return sum(r.score for r in scored) / len(scored) if scored else 0.0  # type: ignore[misc]

    @property
    def total_usage(self) -> TokenUsage:
        return sum_usage(r.usage for r in self.rows)

    @property
    def failures(self) -> int:
        return sum(1 for r in self.rows if r.error)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "aggregate": {
                "accuracy": self.accuracy,
                "problems": len(self.rows),
                "scored": len(self.scored_rows),
                "failures": self.failures,
                "total_usage": self.total_usage.to_dict(),
            },
            "rows": [r.to_dict() for r in self.rows],
            "curve": [vars(p) for p in self.curve],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def curve_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["iteration", "cumulative_prompt_tokens", "cumulative_completion_tokens", "score"]
        )
        for p in self.curve:
            writer.writerow(
                [p.iteration, p.cumulative_prompt_tokens, p.cumulative_completion_tokens, repr(p.score)]
            )
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        traces = out / "traces"
        traces.mkdir(parents=True, exist_ok=True)
        for pid, chain in self.chains.items():
            if pid in self.trees:
                text = json.dumps(self.trees[pid], indent=2, ensure_ascii=False) + "\n"
            else:
                text = chain_to_json(chain)
            (traces / f"{_safe(pid)}.json").write_text(text, encoding="utf-8")
        report, curve = out / "report.json", out / "curve.csv"
        report.write_text(self.to_json(), encoding="utf-8")
        curve.write_text(self.curve_csv(), encoding="utf-8")
        return {"report": report, "curve": curve, "traces": traces}


def _safe(pid: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in pid)


def load_report(path: str | Path) -> dict[str, Any]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or "aggregate" not in data or "rows" not in data:
        raise DatasetError(f"{path} is not a benchmark report")
    return data


def curve_points(
    problems: Sequence[ProblemRecord],
    chains: dict[str, ReasoningChain],
    verifier_cmd: str | None = None,
) -> list[CurvePoint]:
    """Score and cost when every chain is truncated at min(k, its length), for each k."""
    if not chains:
        return []
    k_max = max(len(c.steps) for c in chains.values())
    points = []
    for k in range(k_max + 1):
        scores: list[float] = []
        usage = ZERO_USAGE
        for problem in problems:
            chain = chains.get(problem.id)
            if chain is None:
                continue
            answer, cost = truncated(chain, k)
            usage = usage + cost
            s = score_answer(problem, answer, verifier_cmd)
            if s is not None:
                scores.append(s)
        points.append(CurvePoint(
            k, usage.prompt_tokens, usage.completion_tokens,
            sum(scores) / len(scores) if scores else 0.0,
        ))
    return points


def run_benchmark(
    problems: Sequence[ProblemRecord],
    engine_cfg: EngineConfig,
    gateway: Gateway,
    mode: Mode | str = Mode.CHAIN,
    concurrency: int = 32,
    tree_cfg: TreeConfig | None = None,
    verifier_cmd: str | None = None,
) -> BenchReport:
    mode = Mode(mode)
    engine = MarkovEngine(gateway, engine_cfg)
    tree_cfg = tree_cfg or TreeConfig(max_depth=engine_cfg.max_transitions)

    def solve(problem: ProblemRecord):
        try:
            if mode is Mode.TREE:
                result = tree_search(problem.to_question(), tree_cfg, engine)
                return result.chain, result.to_dict(), None
            return engine.run_chain(problem.to_question()), None, None
        except Exception as exc:  # one bad problem must not sink the run
            logger.warning("problem %s failed: %s", problem.id, exc)
            return getattr(exc, "partial_chain", None), None, f"{type(exc).__name__}: {exc}"

    if concurrency > 1 and len(problems) > 1:
        with ThreadPoolExecutor(max_workers=min(concurrency, len(problems))) as pool:
            outcomes = list(pool.map(solve, problems))
    else:
        outcomes = [solve(p) for p in problems]

    rows: list[BenchRow] = []
    chains: dict[str, ReasoningChain] = {}
    trees: dict[str, dict[str, Any]] = {}
    for problem, (chain, tree, error) in sorted(zip(problems, outcomes), key=lambda t: t[0].id):
        if chain is not None and error is None:
            chains[problem.id] = chain
            if tree is not None:
                trees[problem.id] = tree
            score = score_answer(problem, chain.final_answer, verifier_cmd)
            rows.append(BenchRow(
                problem.id, score, chain.final_answer, len(chain.steps), chain.total_usage,
                f"traces/{_safe(problem.id)}.json",
            ))
        else:
            usage = chain.total_usage if chain is not None else ZERO_USAGE
            rows.append(BenchRow(problem.id, 0.0, "", len(chain.steps) if chain else 0, usage, None, error))

    scored_problems = [p for p in sorted(problems, key=lambda p: p.id) if p.id in chains]
    config = {
        "mode": mode.value,
        "engine": engine_cfg.to_dict(),
        "tree": tree_cfg.to_dict() if mode is Mode.TREE else None,
        "concurrency": concurrency,
        "backend": getattr(gateway.backend, "backend_id", "unknown"),
    }
    return BenchReport(rows, curve_points(scored_problems, chains, verifier_cmd), config, chains, trees)


__all__ = [
    "BenchReport", "BenchRow", "CurvePoint", "DatasetError", "DuplicateId", "Mode", "ProblemRecord",
    "curve_points", "load_problems", "load_report", "run_benchmark", "score_answer", "truncated",
    "assertion_lines",
]
