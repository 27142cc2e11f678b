"""Answer normalization and scorers: numeric pass, token F1, external code verification."""

from __future__ import annotations

import re
import shlex
import string
import subprocess
import tempfile
from collections import Counter
from fractions import Fraction
from pathlib import Path
from typing import Sequence


class VerifierUnavailable(RuntimeError):
    """No usable external verifier; the problem is unscored rather than failed."""


_THOUSANDS = re.compile(r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$")
_LATEX_FRAC = re.compile(r"^([+-]?)\\d?frac\{([^{}]+)\}\{([^{}]+)\}$")
_UNIT_TAIL = re.compile(r"^([+-]?[\d.]+(?:/\d+)?)\s*[a-zA-Z%°]+\.?$")


def parse_number(text: str) -> Fraction | None:
    """Parse an integer, decimal or simple fraction; ``None`` when not numeric."""
    s = text.strip()
    for wrapper in ("\\boxed{", "\\text{"):
        if s.startswith(wrapper) and s.endswith("}"):
            s = s[len(wrapper):-1].strip()
    s = s.strip("$").strip()
    s = s.replace("\\!", "").replace("\\,", "").replace(" ", "")
    if s.endswith("."):
        s = s[:-1]
    if _THOUSANDS.match(s):
        s = s.replace(",", "")
    m = _LATEX_FRAC.match(s)
    if m:
        s = f"{m.group(1)}{m.group(2)}/{m.group(3)}"
    m = _UNIT_TAIL.match(s)
    if m:
        s = m.group(1)
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        return None


def score_numeric(predicted: str, gold: str, tol: float = 1e-6) -> bool:
    p, g = parse_number(predicted), parse_number(gold)
    if p is None or g is None:
        return False
    return abs(p - g) <= Fraction(tol)


def normalize_text(s: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in set(string.punctuation))
    s = re.sub(r"\b(a|an|the)\b", " ", s)
    return " ".join(s.split())


def score_f1(predicted: str, gold: str) -> float:
    pred_tokens = normalize_text(predicted).split()
    gold_tokens = normalize_text(gold).split()
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def answers_match(a: str, b: str, domain_value: str) -> bool:
    """Equivalence used when mapping a judge's answer back onto candidates."""
    if domain_value == "math":
        if score_numeric(a, b, 1e-6):
            return True
        return bool(a.strip()) and a.strip() == b.strip()
    if domain_value == "code":
        return a.strip() == b.strip()
    na, nb = normalize_text(a), normalize_text(b)
    return bool(na) and na == nb


def verify_code_external(
    code: str,
    assertions: Sequence[str],
    command_template: str | None,
    timeout: float = 30.0,
) -> bool:
    """Run ``code`` plus ``assertions`` through a user-supplied command.

    ``command_template`` is split shell-style and ``{file}`` is replaced by the
    path of a temporary Python file. Exit status 0 means pass. There is no
    sandbox here; isolation is the command's job.
    """
    if not command_template or not command_template.strip():
        raise VerifierUnavailable("no verifier command configured")
    with tempfile.TemporaryDirectory(prefix="atomreason-verify-") as tmp:
        path = Path(tmp) / "candidate.py"
        path.write_text(code.rstrip("\n") + "\n\n" + "\n".join(assertions) + "\n", encoding="utf-8")
        argv = [part.replace("{file}", str(path)) for part in shlex.split(command_template)]
        if "{file}" not in command_template:
            argv.append(str(path))
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=timeout, cwd=tmp)
        except FileNotFoundError as exc:
            raise VerifierUnavailable(f"verifier command not found: {argv[0]}") from exc
        except subprocess.TimeoutExpired:
            return False
    return proc.returncode == 0
