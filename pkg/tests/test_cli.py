import json

import pytest

from atomreason import cli
from atomreason.core import ReasoningChain

from chainkit import ChainPlan, current_answer


def write_script(path, rules, name="fixture"):
    path.write_text(json.dumps({"name": name, "rules": rules}))
    return str(path)


def bench_fixture(tmp_path, n=10, fixed=(), broken=()):
    """JSONL dataset plus script: problem i is solved directly, after one step, or not at all."""
    rules, lines = [], []
    for i in range(n):
        plan = ChainPlan([[[]]] * 3, stop_at=1 if i in fixed else 0, key=f"p{i:02d}-")
        if i not in broken:
            rules += plan.rules()
        gold = current_answer(1 if i in fixed else 0)
        lines.append(json.dumps({"id": f"p{i:02d}", "question": plan.state_text(0), "gold": gold}))
    data = tmp_path / "data.jsonl"
    data.write_text("\n".join(lines) + "\n")
    return str(data), write_script(tmp_path / "script.json", rules)


def test_run_builtin_arithmetic(tmp_path, capsys):
    code = cli.main(["run", "--backend", "arithmetic", "--domain", "math", "--out", str(tmp_path), "2+2?"])
    out = capsys.readouterr().out
    assert code == 0
    assert out.splitlines()[0] == "4"
    assert "steps: 1" in out
    assert len(list(tmp_path.glob("trace-*.json"))) == 1


def test_run_json_twin(tmp_path, capsys):
    cli.main(["run", "--backend", "arithmetic", "--out", str(tmp_path), "--json", "2+2?"])
    payload = json.loads(capsys.readouterr().out)
    assert payload["final_answer"] == "4" and payload["usage"]["invocations"] == 2


def test_run_no_decomposition_trace(tmp_path, capsys):
    plan = ChainPlan([[[], [0]], [[]], [[]], [[]]])
    script = write_script(tmp_path / "s.json", plan.rules())
    code = cli.main(["run", "--backend", f"scripted:{script}", "--ablation", "no-decomposition",
                     "--out", str(tmp_path), plan.state_text(0)])
    assert code == 0
    trace = json.loads(next(tmp_path.glob("trace-*.json")).read_text())
    assert all(step["dag"]["nodes"] == [] for step in trace["steps"])
    capsys.readouterr()


def test_run_question_from_file_and_yaml_config(tmp_path, capsys):
    plan = ChainPlan([[[]]] * 3, stop_at=1)
    write_script(tmp_path / "s.json", plan.rules())
    (tmp_path / "cfg.yaml").write_text(
        "backend:\n  kind: scripted\n  script: s.json\nengine:\n  max_transitions: 2\n")
    (tmp_path / "q.txt").write_text(plan.state_text(0))
    code = cli.main(["run", "--config", str(tmp_path / "cfg.yaml"), "--out", str(tmp_path), str(tmp_path / "q.txt")])
    assert code == 0
    assert capsys.readouterr().out.splitlines()[0] == current_answer(1)


def test_flags_override_file(tmp_path, capsys):
    plan = ChainPlan([[[]]] * 5)
    write_script(tmp_path / "s.json", plan.rules())
    (tmp_path / "cfg.yaml").write_text("backend:\n  kind: scripted\n  script: s.json\nengine:\n  max_transitions: 2\n")
    base = ["run", "--config", str(tmp_path / "cfg.yaml"), "--out", str(tmp_path), "--json", plan.state_text(0)]
    cli.main(base)
    from_file = json.loads(capsys.readouterr().out)
    cli.main(base + ["--max-transitions", "4"])
    from_flag = json.loads(capsys.readouterr().out)
    assert (from_file["steps"], from_flag["steps"]) == (2, 4)


def test_more_transitions_cost_more(tmp_path, capsys):
    plan = ChainPlan([[[]]] * 4)
    script = write_script(tmp_path / "s.json", plan.rules())
    usage = {}
    for k in (1, 3):
        cli.main(["run", "--backend", f"scripted:{script}", "--max-transitions", str(k), "--json",
                  "--out", str(tmp_path / str(k)), plan.state_text(0)])
        u = json.loads(capsys.readouterr().out)["usage"]
        usage[k] = u["prompt_tokens"] + u["completion_tokens"]
    assert usage[3] > usage[1]


@pytest.mark.parametrize("argv", [
    ["run", "question?"],
    ["run", "--config", "/nonexistent/cfg.yaml", "question?"],
    ["run", "--backend", "scripted:/nonexistent.json", "question?"],
    ["run", "--backend", "arithmetic", "--max-transitions", "0", "question?"],
    ["bench", "/nonexistent/data.jsonl", "--backend", "arithmetic"],
    ["frobnicate"],
])
def test_config_errors_exit_one(argv, capsys):
    assert cli.main(argv) == 1
    capsys.readouterr()


def test_invalid_yaml_exits_one(tmp_path, capsys):
    (tmp_path / "cfg.yaml").write_text("backend: [unclosed\n")
    assert cli.main(["run", "--config", str(tmp_path / "cfg.yaml"), "q"]) == 1
    assert "invalid YAML" in capsys.readouterr().err


def test_backend_failure_exits_two_with_partial_trace(tmp_path, capsys):
    plan = ChainPlan([[[]]] * 3)
    rules = [r for r in plan.rules() if not (r["tag"] == "dag_node" and "node-1-0" in r["contains"][0])]
    script = write_script(tmp_path / "s.json", rules)
    code = cli.main(["run", "--backend", f"scripted:{script}", "--out", str(tmp_path), plan.state_text(0)])
    assert code == 2
    partial = list(tmp_path.glob("trace-*.partial.json"))
    assert len(partial) == 1
    chain = ReasoningChain.from_dict(json.loads(partial[0].read_text()))
    assert len(chain.steps) == 1
    assert "backend error" in capsys.readouterr().err


def test_tree_run(tmp_path, capsys):
    plan = ChainPlan([[[]]] * 3, stop_at=2)
    script = write_script(tmp_path / "s.json", plan.rules())
    code = cli.main(["run", "--backend", f"scripted:{script}", "--tree", "--branching", "2", "--depth", "3",
                     "--out", str(tmp_path), plan.state_text(0)])
    assert code == 0
    doc = json.loads(next(tmp_path.glob("trace-*.json")).read_text())
    assert doc["kind"] == "tree"
    capsys.readouterr()


# -- bench -----------------------------------------------------------------------------


def test_bench_writes_report(tmp_path, capsys):
    data, script = bench_fixture(tmp_path, fixed={4, 5})
    out = tmp_path / "out"
    code = cli.main(["bench", data, "--backend", f"scripted:{script}", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["rows"]) == 10
    assert report["aggregate"]["accuracy"] == 1.0
    curve = (out / "curve.csv").read_text().splitlines()
    assert curve[1].split(",")[-1] == "0.8"
    assert "accuracy: 1.0000" in capsys.readouterr().out


def test_bench_outputs_are_byte_identical(tmp_path, capsys):
    data, script = bench_fixture(tmp_path, fixed={1})
    outs = []
    for name in ("a", "b"):
        cli.main(["bench", data, "--backend", f"scripted:{script}", "--concurrency", "8", "--out", str(tmp_path / name)])
        outs.append(tmp_path / name)
    for rel in ("report.json", "curve.csv", "traces/p01.json"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()
    capsys.readouterr()


def test_bench_partial_failures_exit_zero(tmp_path, capsys):
    data, script = bench_fixture(tmp_path, n=3, broken={1})
    code = cli.main(["bench", data, "--backend", f"scripted:{script}", "--out", str(tmp_path / "o")])
    assert code == 0
    assert "failures: 1" in capsys.readouterr().out


def test_bench_all_failed_exits_three(tmp_path, capsys):
    data, script = bench_fixture(tmp_path, n=3, broken={0, 1, 2})
    assert cli.main(["bench", data, "--backend", f"scripted:{script}", "--out", str(tmp_path / "o")]) == 3
    capsys.readouterr()


def test_bench_malformed_dataset_exits_one(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    data.write_text('{"id": "a", "question": "q", "gold": "1"}\n{"id": \n')
    assert cli.main(["bench", str(data), "--backend", "arithmetic"]) == 1
    assert "line 2" in capsys.readouterr().err


# -- analyze / compare -------------------------------------------------------------------


def _traces_with_depths(tmp_path, capsys, shapes):
    for n, dag in enumerate(shapes):
        plan = ChainPlan([dag, []], key=f"t{n}-")
        script = write_script(tmp_path / f"s{n}.json", plan.rules())
        assert cli.main(["run", "--backend", f"scripted:{script}", "--out", str(tmp_path / "traces"),
                         plan.state_text(0)]) == 0
    capsys.readouterr()
    return tmp_path / "traces"


def test_analyze_reports_mode_depth(tmp_path, capsys):
    traces = _traces_with_depths(tmp_path, capsys, [
        [[], [0], [1]], [[], [0], [1], []], [[], [0]], [[], [0], [1], [2]],
    ])
    (traces / "notes.json").write_text('{"something": "else"}')
    assert cli.main(["analyze", str(traces), "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["chains"] == 4 and payload["skipped_files"] == 1
    assert payload["structure"]["mode_depth"] == 3
    assert payload["structure"]["depth_histogram"] == {"2": 1, "3": 2, "4": 1}
    assert cli.main(["analyze", str(traces)]) == 0
    assert "mode depth: 3" in capsys.readouterr().out


def test_analyze_empty_directory(tmp_path, capsys):
    assert cli.main(["analyze", str(tmp_path)]) == 0
    assert "chains: 0" in capsys.readouterr().out
    assert cli.main(["analyze", str(tmp_path / "missing")]) == 1


def test_analyze_quality(tmp_path, capsys):
    traces = _traces_with_depths(tmp_path, capsys, [[[]]])
    script = write_script(tmp_path / "judge.json", [{"tag": "quality", "response": "<answer>yes</answer>"}])
    assert cli.main(["analyze", str(traces), "--quality", "--backend", f"scripted:{script}", "--json"]) == 0
    quality = json.loads(capsys.readouterr().out)["quality"]
    assert quality["answer_equivalence"]["rate"] == 1.0


def test_compare_same_report_has_zero_deltas(tmp_path, capsys):
    data, script = bench_fixture(tmp_path, n=4, fixed={0})
    cli.main(["bench", data, "--backend", f"scripted:{script}", "--out", str(tmp_path / "o")])
    capsys.readouterr()
    report = str(tmp_path / "o" / "report.json")
    assert cli.main(["compare", report, report, "--json"]) == 0
    diff = json.loads(capsys.readouterr().out)
    assert diff["accuracy_delta"] == 0 and diff["token_delta"] == 0
    assert all(r["score_delta"] == 0 for r in diff["per_problem"])
    assert all(c["score_delta"] == 0 for c in diff["curve"])


def test_compare_budget_deltas(tmp_path, capsys):
    data, script = bench_fixture(tmp_path, n=4, fixed={0, 1})
    for k in ("1", "3"):
        cli.main(["bench", data, "--backend", f"scripted:{script}", "--max-transitions", k,
                  "--out", str(tmp_path / k)])
    capsys.readouterr()
    assert cli.main(["compare", str(tmp_path / "1" / "report.json"), str(tmp_path / "3" / "report.json")]) == 0
    assert "accuracy delta: +0.0000" in capsys.readouterr().out
    assert cli.main(["compare", str(tmp_path / "1" / "curve.csv"), str(tmp_path / "3" / "report.json")]) == 1
