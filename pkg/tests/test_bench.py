import csv
import io
import json
import sys

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from atomreason.analysis import quality_assessment, selection_rate, structural_analysis
from atomreason.bench import (
    DatasetError,
    DuplicateId,
    Mode,
    ProblemRecord,
    load_problems,
    load_report,
    run_benchmark,
    score_answer,
    truncated,
)
from atomreason.core import (
    Ablation,
    CandidateSolution,
    Domain,
    JudgeVerdict,
    Origin,
    Question,
    TransitionRecord,
    build_chain,
    dag_depth,
    dag_from_depends,
)
from atomreason.engine import EngineConfig, MarkovEngine
from atomreason.gateway import scripted_gateway
from atomreason.scaling import TreeConfig

from chainkit import ChainPlan, current_answer


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def fixture_set(n=10, fixed=()):
    """n problems; problem i is right at once unless i is in ``fixed``, then right after one step."""
    plans, problems = [], []
    for i in range(n):
        key = f"p{i:03d}-"
        if i in fixed:
            plan = ChainPlan([[[]]] * 3, stop_at=1, key=key)
            gold = current_answer(1)
        else:
            plan = ChainPlan([[[]]] * 3, stop_at=0, key=key)
            gold = current_answer(0)
        plans.append(plan)
        problems.append(ProblemRecord(f"p{i:03d}", Domain.MATH, plan.state_text(0), gold))
    rules = [r for p in plans for r in p.rules()]
    return problems, scripted_gateway(rules)


# -- loading ---------------------------------------------------------------------------


def test_load_two_valid_lines(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [
        {"id": "a", "question": "1+1?", "gold": "2"},
        {"id": "b", "question": "2+2?", "gold": 4},
    ])
    records = load_problems(path)
    assert [r.id for r in records] == ["a", "b"]
    assert records[1].gold == "4"


def test_truncated_line_names_line_number(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"id": "a", "question": "q", "gold": "1"}\n{"id": "b", "question": "q", "gold": "1"}\n{"id": "c", "quest\n')
    with pytest.raises(DatasetError, match="line 3"):
        load_problems(path)


def test_duplicate_id_rejected(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [{"id": "q1", "question": "q", "gold": "1"}] * 2)
    with pytest.raises(DuplicateId):
        load_problems(path)


def test_gold_kind_must_match_domain(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [{"id": "c", "domain": "code", "question": "q", "gold": 3,
                                               "contexts": "assert f()"}])
    with pytest.raises(DatasetError, match="line 1"):
        load_problems(path)
    path = write_jsonl(tmp_path / "e.jsonl", [{"id": "c", "domain": "code", "question": "q", "gold": ["assert f()"]}])
    with pytest.raises(DatasetError, match="contexts"):
        load_problems(path)


def test_numeric_only_filter(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [
        {"id": "a", "question": "q", "gold": "12"},
        {"id": "b", "question": "q", "gold": "\\frac{1}{2}"},
    ])
    assert len(load_problems(path)) == 2
    assert [r.id for r in load_problems(path, numeric_only=True)] == ["a"]


# -- scoring rows ------------------------------------------------------------------------


def test_score_answer_per_domain():
    assert score_answer(ProblemRecord("m", Domain.MATH, "q", "0.5"), "1/2") == 1.0
    assert score_answer(ProblemRecord("t", Domain.MULTIHOP_QA, "q", "big cat"), "cat") == pytest.approx(2 / 3)
    code = ProblemRecord("c", Domain.CODE, "q", ("assert f() == 1",), "assert f() == 1")
    assert score_answer(code, "def f(): return 1") is None
    cmd = f"{sys.executable} {{file}}"
    assert score_answer(code, "```python\ndef f():\n    return 1\n```", cmd) == 1.0
    assert score_answer(code, "def f():\n    return 2", cmd) == 0.0


# -- runs ------------------------------------------------------------------------------------


def test_all_correct_run():
    problems, gw = fixture_set(10)
    report = run_benchmark(problems, EngineConfig(), gw, concurrency=4)
    assert len(report.rows) == 10 and report.accuracy == 1.0
    assert report.curve[0].score == 1.0


def test_curve_rises_when_second_step_fixes_two():
    problems, gw = fixture_set(10, fixed={3, 7})
    report = run_benchmark(problems, EngineConfig(), gw, concurrency=8)
    scores = [p.score for p in report.curve]
    assert scores[0] == pytest.approx(0.8)
    assert scores[1] == pytest.approx(1.0)
    assert scores[-1] == pytest.approx(1.0)
    assert report.accuracy == 1.0


def test_curve_zero_is_direct_solve_accuracy():
    problems, gw = fixture_set(6, fixed={0, 1, 2})
    report = run_benchmark(problems, EngineConfig(), gw)
    direct = [score_answer(p, report.chains[p.id].steps[0].candidate(Origin.CURRENT_STATE).answer) for p in problems]
    assert report.curve[0].score == pytest.approx(sum(direct) / len(direct))
    first = sum((report.chains[p.id].steps[0].candidate(Origin.CURRENT_STATE).usage for p in problems),
                start=type(report.total_usage)())
    assert report.curve[0].cumulative_prompt_tokens == first.prompt_tokens


def test_rows_sorted_and_independent_of_concurrency():
    problems, gw = fixture_set(7, fixed={2})
    shuffled = list(reversed(problems))
    a = run_benchmark(shuffled, EngineConfig(), gw, concurrency=1)
    problems2, gw2 = fixture_set(7, fixed={2})
    b = run_benchmark(problems2, EngineConfig(), gw2, concurrency=16)
    assert [r.id for r in a.rows] == sorted(p.id for p in problems)
    assert a.to_json() == b.to_json().replace('"concurrency": 16', '"concurrency": 1')


def test_failures_are_recorded_per_row():
    problems, gw = fixture_set(3)
    problems.append(ProblemRecord("zzz", Domain.MATH, "No rule matches this one.", "1"))
    report = run_benchmark(problems, EngineConfig(), gw)
    bad = report.rows[-1]
    assert bad.id == "zzz" and bad.error and "ScriptMiss" in bad.error
    assert report.failures == 1 and len(report.rows) == 4


def test_tree_mode_runs():
    problems, gw = fixture_set(3, fixed={1})
    report = run_benchmark(problems, EngineConfig(), gw, Mode.TREE, tree_cfg=TreeConfig(branching=2, max_depth=2))
    assert report.accuracy == 1.0 and set(report.trees) == {p.id for p in problems}


def test_report_files(tmp_path):
    problems, gw = fixture_set(4, fixed={0})
    report = run_benchmark(problems, EngineConfig(), gw)
    paths = report.write(tmp_path)
    data = load_report(paths["report"])
    assert data["aggregate"]["accuracy"] == pytest.approx(
        sum(r["score"] for r in data["rows"]) / len(data["rows"]))
    rows = list(csv.DictReader(io.StringIO(paths["curve"].read_text())))
    assert list(rows[0]) == ["iteration", "cumulative_prompt_tokens", "cumulative_completion_tokens", "score"]
    assert len(list((tmp_path / "traces").glob("*.json"))) == 4
    with pytest.raises(DatasetError):
        load_report(next((tmp_path / "traces").glob("*.json")))


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.lists(st.booleans(), min_size=1, max_size=6), st.integers(1, 4))
def test_report_invariants(fix_flags, budget):
    problems, gw = fixture_set(len(fix_flags), fixed={i for i, f in enumerate(fix_flags) if f})
    report = run_benchmark(problems, EngineConfig(max_transitions=budget), gw)
    scored = [r.score for r in report.rows if r.score is not None]
    assert report.accuracy == pytest.approx(sum(scored) / len(scored))
    for a, b in zip(report.curve, report.curve[1:]):
        assert b.cumulative_prompt_tokens >= a.cumulative_prompt_tokens
        assert b.cumulative_completion_tokens >= a.cumulative_completion_tokens
    assert report.total_usage == gw.total_usage()


def test_truncation_clamps_at_chain_length():
    problems, gw = fixture_set(1, fixed={0})
    chain = run_benchmark(problems, EngineConfig(), gw).chains[problems[0].id]
    assert truncated(chain, 10) == truncated(chain, len(chain.steps))


# -- structure ---------------------------------------------------------------------------


def _chain_with_dag(depends, selected=Origin.CURRENT_STATE, fallback=False, candidates=3):
    q = Question("q")
    origins = [Origin.CURRENT_STATE, Origin.DAG_EXECUTION, Origin.NEXT_STATE][:candidates]
    if candidates == 2:
        origins = [Origin.CURRENT_STATE, Origin.NEXT_STATE]
    cands = tuple(CandidateSolution(o, "1", f"traj {o.value}") for o in origins)
    nq = Question("q1", chain_index=1) if Origin.NEXT_STATE in origins else None
    step = TransitionRecord(q, dag_from_depends(depends), nq, cands, JudgeVerdict(selected, fallback=fallback),
                            True, forced_stop=selected is Origin.NEXT_STATE)
    return build_chain(q, [step], {})




def test_structure_mode_depth_three():
    shapes = [[[], [0], [1]], [[], [0], [1], []], [[], [0]], [[], [0], [1], [2]]]
    chains = [_chain_with_dag(d) for d in shapes]
    assert [dag_depth(c.initial_dag) for c in chains] == [3, 3, 2, 4]
    stats = structural_analysis(chains)
    assert stats.mode_depth == 3
    assert stats.depth_histogram == {2: 1, 3: 2, 4: 1}
    assert stats.count_histogram == {2: 1, 3: 1, 4: 2}


def test_structure_empty_and_excluded():
    stats = structural_analysis([])
    assert stats.depth_histogram == {} and stats.mode_depth is None and stats.included == 0
    stats = structural_analysis([_chain_with_dag([]), _chain_with_dag([[]])])
    assert stats.excluded == 1 and stats.included == 1


depth_lists = st.lists(st.integers(0, 5).flatmap(
    lambda n: st.tuples(*[st.lists(st.integers(0, k - 1), unique=True).map(sorted) if k else st.just([])
                          for k in range(n)]).map(list)), max_size=12)


@given(depth_lists, st.data())
def test_structure_matches_recount(shapes, data):
    scores = data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=len(shapes), max_size=len(shapes)))
    chains = [_chain_with_dag(d) for d in shapes]
    stats = structural_analysis(chains, scores)
    kept = [(d, s) for d, s in zip(shapes, scores) if d]
    assert sum(stats.depth_histogram.values()) == len(kept) == stats.included
    assert sum(stats.count_histogram.values()) == len(kept)
    assert stats.excluded == len(shapes) - len(kept)
    for n in stats.count_histogram:
        group = [s for d, s in kept if len(d) == n]
        assert stats.count_histogram[n] == len(group)
        assert stats.accuracy_by_count[n] == pytest.approx(sum(group) / len(group))


# -- quality ---------------------------------------------------------------------------


def test_quality_all_approve():
    plan = ChainPlan([[[]]] * 4)
    engine = MarkovEngine(scripted_gateway(plan.rules()), EngineConfig())
    chains = [engine.run_chain(plan.question())]
    judge = scripted_gateway([{"tag": "quality", "response": "Yes.\n<answer>yes</answer>"}])
    metrics = quality_assessment(chains, judge)
    assert (metrics.equivalence.rate, metrics.complexity_reduction.rate) == (1.0, 1.0)
    assert metrics.equivalence.attempts == metrics.complexity_reduction.attempts == 3
    assert len(judge.log) == 6 and {e.tag for e in judge.log} == {"quality"}


def test_quality_exclusions_are_counted():
    plan = ChainPlan([[[]]] * 4)
    engine = MarkovEngine(scripted_gateway(plan.rules()), EngineConfig())
    chains = [engine.run_chain(plan.question())]
    judge = scripted_gateway([
        {"tag": "quality", "contains": "same derivation goal", "response": "<answer>no</answer>"},
        {"tag": "quality", "response": "unsure"},
    ])
    metrics = quality_assessment(chains, judge)
    assert metrics.equivalence.rate == 0.0 and metrics.equivalence.attempts == 3
    assert metrics.complexity_reduction.attempts == 0 and metrics.complexity_reduction.excluded == 3
    assert metrics.complexity_reduction.rate is None


def test_selection_rate_counts_recorded_verdicts():
    chains = [_chain_with_dag([[]], Origin.NEXT_STATE) for _ in range(9)]
    chains.append(_chain_with_dag([[]], Origin.CURRENT_STATE))
    chains.append(_chain_with_dag([[]], Origin.CURRENT_STATE, fallback=True))
    rate = selection_rate(chains)
    assert rate.rate == pytest.approx(0.9) and rate.attempts == 10 and rate.excluded == 1
