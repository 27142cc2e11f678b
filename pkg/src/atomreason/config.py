"""Run configuration: one YAML document with backend/engine/tree/bench sections.

Precedence is flags over file over defaults; the CLI builds an override mapping
and merges it with :func:`merge`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .bench import Mode
from .core import Domain
from .engine import EngineConfig
from .gateway import BUILTIN_SCRIPTS, BackendConfig, BackendKind
from .scaling import TreeConfig


DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchSection:
    dataset: str | None = None
    mode: Mode = Mode.CHAIN
    concurrency: int = 32
    verifier_cmd: str | None = None
    domain: Domain = Domain.MATH
    numeric_only: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "mode": self.mode.value,
            "concurrency": self.concurrency,
            "verifier_cmd": self.verifier_cmd,
            "domain": self.domain.value,
            "numeric_only": self.numeric_only,
        }


@dataclass(frozen=True)
class RunConfig:
    backend: BackendConfig | None = None
    engine: EngineConfig = field(default_factory=EngineConfig)
    tree: TreeConfig | None = None
    bench: BenchSection = field(default_factory=BenchSection)

    def to_dict(self) -> dict[str, Any]:
        return {
            "backend": self.backend.to_dict() if self.backend else None,
            "engine": self.engine.to_dict(),
            "tree": self.tree.to_dict() if self.tree else None,
            "bench": self.bench.to_dict(),
        }


SECTIONS = ("backend", "engine", "tree", "bench")


def read_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{p}: unknown sections {sorted(unknown)}")
    for name, section in data.items():
        if section is not None and not isinstance(section, dict):
            raise ConfigError(f"{p}: section {name!r} must be a mapping")
    # relative paths inside the file are resolved against the file's directory
    for section, key in (("backend", "script"), ("bench", "dataset")):
        value = (data.get(section) or {}).get(key)
        if isinstance(value, str) and not Path(value).is_absolute() and (p.parent / value).exists():
            data[section][key] = str(p.parent / value)
    return data


def merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Section-wise merge; ``None`` override values leave the base untouched."""
    out = {name: dict(base.get(name) or {}) for name in SECTIONS}
    for name in SECTIONS:
        for key, value in (overrides.get(name) or {}).items():
            if value is not None:
                out[name][key] = value
    out["_tree_enabled"] = bool(base.get("tree")) or bool(overrides.get("_tree_enabled"))
    return out


def _script_exists(source: str) -> bool:
    return Path(source).is_file() or (BUILTIN_SCRIPTS / f"{source}.json").is_file()


def build_run_config(data: dict[str, Any]) -> RunConfig:
    """Validate a merged mapping into a RunConfig; referenced files must exist."""
    try:
        backend = None
        if data.get("backend"):
            b = dict(data["backend"])
            if "backoff" in b:
                b["backoff"] = tuple(float(x) for x in b["backoff"])
            if b.get("kind") == BackendKind.HTTP_CHAT.value:
                b.setdefault("endpoint", DEFAULT_ENDPOINT)
            known = {k: b[k] for k in BackendConfig.__dataclass_fields__ if k in b}
            backend = BackendConfig(**known)
            if backend.kind is BackendKind.SCRIPTED and not _script_exists(backend.script or ""):
                raise ConfigError(f"script not found: {backend.script}")
        engine = EngineConfig.from_dict(data.get("engine") or {})
        tree = None
        if data.get("_tree_enabled") or data.get("tree"):
            tree_data = {"max_depth": engine.max_transitions, "seed": engine.seed}
            tree_data.update(data.get("tree") or {})
            tree = TreeConfig.from_dict(tree_data)
        b = dict(data.get("bench") or {})
        bench = BenchSection(
            dataset=b.get("dataset"),
            mode=Mode(b.get("mode", "tree" if tree else "chain")),
            concurrency=int(b.get("concurrency", 32)),
            verifier_cmd=b.get("verifier_cmd"),
            domain=Domain(b.get("domain", "math")),
            numeric_only=bool(b.get("numeric_only", False)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    if bench.concurrency < 1:
        raise ConfigError("concurrency must be >= 1")
    if bench.dataset is not None and not Path(bench.dataset).is_file():
        raise ConfigError(f"dataset not found: {bench.dataset}")
    return RunConfig(backend, engine, tree, bench)


def load_run_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    base = read_config_file(path) if path else {}
    return build_run_config(merge(base, overrides or {}))
