"""Command-line entry points: run, bench, analyze, compare.

Exit codes: 0 success, 1 config or usage error, 2 backend failure,
3 every benchmark problem failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .analysis import quality_assessment, structural_analysis
from .bench import DatasetError, load_problems, load_report, run_benchmark
from .config import ConfigError, RunConfig, load_run_config
from .core import Domain, Question, ReasoningChain, chain_to_json
from .engine import MarkovEngine
from .gateway import BackendError, Gateway, make_backend
from .scaling import atomicity_profile, run_reflective_chain, tree_search

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_ALL_FAILED = 0, 1, 2, 3

logger = logging.getLogger("atomreason")


# -- argument handling ----------------------------------------------------------------


def _backend_override(value: str | None, model: str | None) -> dict[str, Any]:
    if value is None:
        return {"model_name": model} if model else {}
    if value == "http":
        return {"kind": "http_chat", "model_name": model}
    source = value.split(":", 1)[1] if value.startswith("scripted:") else value
    return {"kind": "scripted", "script": source, "model_name": model}


def overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    ablation = get("ablation")
    return {
        "backend": _backend_override(get("backend"), get("model")),
        "engine": {
            "max_transitions": get("max_transitions"),
            "temperature": get("temperature"),
            "ablation": ablation.replace("-", "_") if ablation else None,
            "adaptive_budget": True if get("adaptive") else None,
            "seed": get("seed"),
        },
        "tree": {
            "branching": get("branching"),
            "max_depth": get("depth"),
            "beam_width": get("beam"),
            "seed": get("seed"),
        },
        "bench": {
            "dataset": get("dataset"),
            "concurrency": get("concurrency"),
            "verifier_cmd": get("verifier_cmd"),
            "domain": get("domain"),
            "mode": "tree" if get("tree") else None,
        },
        "_tree_enabled": bool(get("tree")),
    }


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config, overrides_from_args(args))
    if cfg.backend is None:
        raise ConfigError("no backend configured: pass --backend or a --config with a backend section")
    return cfg


def make_gateway(cfg: RunConfig) -> Gateway:
    assert cfg.backend is not None
    return Gateway(make_backend(cfg.backend), cfg.backend.max_in_flight)


def _read_text_arg(value: str) -> str:
    path = Path(value)
    if len(value) < 4096 and path.is_file():
        return path.read_text(encoding="utf-8").strip()
    return value


def trace_name(question: Question, cfg: RunConfig) -> str:
    """Deterministic trace file name derived from the question and the run config."""
    key = json.dumps({"q": question.to_dict(), "cfg": cfg.to_dict()}, sort_keys=True)
    return f"trace-{hashlib.sha256(key.encode()).hexdigest()[:12]}.json"


def _emit(args: argparse.Namespace, text: str, payload: dict[str, Any]) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, ensure_ascii=False))
    else:
        print(text)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


# -- commands -------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    question = Question(
        _read_text_arg(args.question),
        Domain(args.domain or cfg.bench.domain),
        _read_text_arg(args.contexts) if args.contexts else None,
    )
    engine = MarkovEngine(make_gateway(cfg), cfg.engine)
    out = Path(args.out or ".") / trace_name(question, cfg)
    tree_doc: dict[str, Any] | None = None
    try:
        if cfg.tree is not None:
            result = tree_search(question, cfg.tree, engine)
            chain, tree_doc = result.chain, result.to_dict()
        elif args.reflective:
            chain = run_reflective_chain(question, engine)
        else:
            chain = engine.run_chain(question)
    except (BackendError, KeyboardInterrupt) as exc:
        partial = getattr(exc, "partial_chain", None)
        if partial is not None:
            _write(out.with_name(out.stem + ".partial.json"), chain_to_json(partial))
            print(f"partial trace: {out.with_name(out.stem + '.partial.json')}", file=sys.stderr)
        if isinstance(exc, KeyboardInterrupt):
            return 130
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    text = json.dumps(tree_doc, indent=2, ensure_ascii=False) + "\n" if tree_doc else chain_to_json(chain)
    _write(out, text)
    usage = chain.total_usage
    summary = (
        f"{chain.final_answer}\n"
        f"steps: {len(chain.steps)}  tokens: prompt={usage.prompt_tokens} "
        f"completion={usage.completion_tokens} calls={usage.invocations}\n"
        f"trace: {out}"
    )
    _emit(args, summary, {
        "final_answer": chain.final_answer,
        "steps": len(chain.steps),
        "usage": usage.to_dict(),
        "trace": str(out),
    })
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not cfg.bench.dataset:
        raise ConfigError("no dataset given")
    problems = load_problems(cfg.bench.dataset, cfg.bench.domain, cfg.bench.numeric_only)
    report = run_benchmark(
        problems, cfg.engine, make_gateway(cfg), cfg.bench.mode, cfg.bench.concurrency,
        cfg.tree, cfg.bench.verifier_cmd,
    )
    paths = report.write(args.out or "bench-out")
    usage = report.total_usage
    summary = (
        f"problems: {len(report.rows)}  scored: {len(report.scored_rows)}  "
        f"failures: {report.failures}\n"
        f"accuracy: {report.accuracy:.4f}  tokens: {usage.total_tokens}\n"
        f"report: {paths['report']}\ncurve: {paths['curve']}"
    )
    _emit(args, summary, {
        "aggregate": report.to_dict()["aggregate"],
        "report": str(paths["report"]),
        "curve": str(paths["curve"]),
    })
    if report.rows and report.failures == len(report.rows):
        return EXIT_ALL_FAILED
    return EXIT_OK


def load_traces(trace_dir: str | Path) -> tuple[list[ReasoningChain], int]:
    """Every chain trace under ``trace_dir``; files of another schema are skipped and counted."""
    chains: list[ReasoningChain] = []
    skipped = 0
    for path in sorted(Path(trace_dir).rglob("*.json")):
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            if isinstance(doc, dict) and doc.get("kind") == "tree":
                doc = doc["best_chain"]
            chains.append(ReasoningChain.from_dict(doc))
        except (ValueError, KeyError, TypeError, AttributeError):
            skipped += 1
    return chains, skipped


def _table(title: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [list(map(str, header))] + [["-" if v is None else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = [title]
    for r in cells:
        lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)


def cmd_analyze(args: argparse.Namespace) -> int:
    if not Path(args.traces).is_dir():
        raise ConfigError(f"trace directory not found: {args.traces}")
    chains, skipped = load_traces(args.traces)
    stats = structural_analysis(chains)
    profile = atomicity_profile(chains)
    payload: dict[str, Any] = {
        "chains": len(chains),
        "skipped_files": skipped,
        "structure": stats.to_dict(),
        "atomicity": profile.to_dict(),
    }
    parts = [
        f"chains: {len(chains)}  skipped files: {skipped}  excluded chains: {stats.excluded}",
        _table("depth histogram", ["depth", "chains"], sorted(stats.depth_histogram.items())),
        _table("sub-question count histogram", ["nodes", "chains"], sorted(stats.count_histogram.items())),
        f"mode depth: {stats.mode_depth if stats.mode_depth is not None else '-'}",
        _table(
            "final-state atomicity", ["depth", "chains", "mean completion tokens"],
            [(d, c, None if m is None else f"{m:.1f}")
             for d, c, m in zip(profile.depths, profile.counts, profile.mean_completion_tokens)],
        ),
        f"converged: {profile.converged}",
    ]
    if args.quality:
        cfg = resolve_config(args)
        metrics = quality_assessment(chains, make_gateway(cfg))
        payload["quality"] = metrics.to_dict()
        rows = [
            (name, "-" if r.rate is None else f"{r.rate:.4f}", r.successes, r.attempts, r.excluded)
            for name, r in (
                ("answer equivalence", metrics.equivalence),
                ("complexity reduction", metrics.complexity_reduction),
                ("judge selection", metrics.selection),
            )
        ]
        parts.append(_table("quality", ["metric", "rate", "successes", "attempts", "excluded"], rows))
    _emit(args, "\n\n".join(parts), payload)
    return EXIT_OK


def compare_reports(a: dict[str, Any], b: dict[str, Any]) -> dict[str, Any]:
    """Deltas B - A over aggregates, shared per-problem scores and shared curve iterations."""
    agg_a, agg_b = a["aggregate"], b["aggregate"]
    tokens = lambda agg: agg["total_usage"]["prompt_tokens"] + agg["total_usage"]["completion_tokens"]  # noqa: E731
    rows_a = {r["id"]: r for r in a["rows"]}
    rows_b = {r["id"]: r for r in b["rows"]}
    shared = sorted(set(rows_a) & set(rows_b))
    per_problem = []
    for pid in shared:
        sa, sb = rows_a[pid]["score"], rows_b[pid]["score"]
        per_problem.append({
            "id": pid,
            "score_delta": None if sa is None or sb is None else sb - sa,
            "token_delta": (rows_b[pid]["usage"]["prompt_tokens"] + rows_b[pid]["usage"]["completion_tokens"])
            - (rows_a[pid]["usage"]["prompt_tokens"] + rows_a[pid]["usage"]["completion_tokens"]),
        })
    curve_a = {p["iteration"]: p for p in a.get("curve", [])}
    curve_b = {p["iteration"]: p for p in b.get("curve", [])}
    curve = [
        {
            "iteration": k,
            "score_delta": curve_b[k]["score"] - curve_a[k]["score"],
            "prompt_token_delta": curve_b[k]["cumulative_prompt_tokens"] - curve_a[k]["cumulative_prompt_tokens"],
            "completion_token_delta": curve_b[k]["cumulative_completion_tokens"]
            - curve_a[k]["cumulative_completion_tokens"],
        }
        for k in sorted(set(curve_a) & set(curve_b))
    ]
    return {
        "accuracy_delta": agg_b["accuracy"] - agg_a["accuracy"],
        "token_delta": tokens(agg_b) - tokens(agg_a),
        "failure_delta": agg_b["failures"] - agg_a["failures"],
        "shared_problems": len(shared),
        "only_in_a": sorted(set(rows_a) - set(rows_b)),
        "only_in_b": sorted(set(rows_b) - set(rows_a)),
        "per_problem": per_problem,
        "curve": curve,
    }


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        a, b = load_report(args.report_a), load_report(args.report_b)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc)) from None
    diff = compare_reports(a, b)
    changed = [r for r in diff["per_problem"] if r["score_delta"] not in (0, 0.0, None)]
    parts = [
        f"accuracy delta: {diff['accuracy_delta']:+.4f}",
        f"token delta: {diff['token_delta']:+d}",
        f"failure delta: {diff['failure_delta']:+d}",
        f"shared problems: {diff['shared_problems']}  only in A: {len(diff['only_in_a'])}  "
        f"only in B: {len(diff['only_in_b'])}",
        _table("changed problems", ["id", "score delta", "token delta"],
               [(r["id"], f"{r['score_delta']:+.4f}", f"{r['token_delta']:+d}") for r in changed]),
        _table("curve deltas", ["iteration", "score", "prompt tokens", "completion tokens"],
               [(c["iteration"], f"{c['score_delta']:+.4f}", f"{c['prompt_token_delta']:+d}",
                 f"{c['completion_token_delta']:+d}") for c in diff["curve"]]),
    ]
    _emit(args, "\n".join(parts), diff)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def _engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--backend", help="'http', 'scripted:PATH' or the name of a shipped script")
    p.add_argument("--model", help="model name for the http backend")
    p.add_argument("--domain", choices=[d.value for d in Domain])
    p.add_argument("--max-transitions", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--ablation", choices=["none", "no-decomposition", "no-dag-contraction"])
    p.add_argument("--adaptive", action="store_true", help="cap transitions at the first DAG's depth")
    p.add_argument("--tree", action="store_true", help="beam tree search instead of a single chain")
    p.add_argument("--branching", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--beam", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--verifier-cmd", help="external code verifier, '{file}' is the candidate path")
    p.add_argument("--json", action="store_true", help="print the machine-readable twin")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atomreason", description="Markov-chain question contraction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve one question")
    run.add_argument("question", help="question text or a file containing it")
    run.add_argument("--contexts", help="contexts text or file (test assertions for code)")
    run.add_argument("--reflective", action="store_true", help="re-contract degraded transitions")
    _engine_flags(run)
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="benchmark a JSONL dataset")
    bench.add_argument("dataset")
    _engine_flags(bench)
    bench.set_defaults(func=cmd_bench)

    analyze = sub.add_parser("analyze", help="structure and atomicity of saved traces")
    analyze.add_argument("traces", help="directory of trace JSON files")
    analyze.add_argument("--quality", action="store_true", help="also run judge-rated quality metrics")
    _engine_flags(analyze)
    analyze.set_defaults(func=cmd_analyze)

    compare = sub.add_parser("compare", help="deltas between two bench reports")
    compare.add_argument("report_a")
    compare.add_argument("report_b")
    compare.add_argument("--json", action="store_true")
    compare.set_defaults(func=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
