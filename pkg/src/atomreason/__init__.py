"""Question contraction along a memoryless chain of answer-equivalent states."""

from .core import (
    Ablation,
    CandidateSolution,
    DagNode,
    Domain,
    JudgeVerdict,
    Origin,
    Question,
    ReasoningChain,
    ReasoningDag,
    StructuralError,
    TokenUsage,
    TransitionRecord,
    chain_from_json,
    chain_to_json,
    dag_depth,
    dag_from_depends,
    independent_nodes,
    topological_layers,
    validate_dag,
)
from .engine import EngineConfig, MarkovEngine, run_chain
from .gateway import BackendConfig, CompletionRequest, Gateway, Script, ScriptedBackend, make_backend
from .scaling import TreeConfig, atomicity_profile, markov_tree_search, run_reflective_chain, tree_search
from .bench import load_problems, run_benchmark
from .analysis import quality_assessment, structural_analysis
from .scoring import score_f1, score_numeric

__version__ = "0.1.0"

__all__ = [
    "Ablation", "BackendConfig", "CandidateSolution", "CompletionRequest", "DagNode", "Domain",
    "EngineConfig", "Gateway", "JudgeVerdict", "MarkovEngine", "Origin", "Question",
    "ReasoningChain", "ReasoningDag", "Script", "ScriptedBackend", "StructuralError",
    "TokenUsage", "TransitionRecord", "TreeConfig", "atomicity_profile", "chain_from_json",
    "chain_to_json", "dag_depth", "dag_from_depends", "independent_nodes", "load_problems",
    "make_backend", "markov_tree_search", "quality_assessment", "run_benchmark", "run_chain",
    "run_reflective_chain", "score_f1", "score_numeric", "structural_analysis",
    "topological_layers", "tree_search", "validate_dag",
]
