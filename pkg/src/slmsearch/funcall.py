"""Function-call prompting, output parsing, and Accuracy / Soft Accuracy scoring.

Model output is a sequence of lines of the form::

    result1 = get_weather(city="Paris", days=3)
    result2 = send_message(to="bob", body=result1)

A bare identifier used as an argument value refers to the result of an
earlier line. Before comparison every reference is replaced by the call it
points to, so naming and ordering of results never affect a score.
"""

from __future__ import annotations

import ast
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from string import Template
from typing import Any, Iterable, Sequence

log = logging.getLogger(__name__)

SYSTEM_PROMPT = "You are an expert in composing functions."
USER_TEMPLATE = Template(
    "Here is a list of functions that you can invoke:\n"
    "$functions\n"
    "Now my query is: $user_query\n"
)
AVERAGING = ("sample", "call")


@dataclass(frozen=True)
class Param:
    name: str
    type: str = "string"
    required: bool = True
    description: str = ""


@dataclass(frozen=True)
class FunctionDef:
    name: str
    params: tuple[Param, ...] = ()
    description: str = ""

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ValueError(f"function name {self.name!r} is not an identifier")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {self.name}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": [
                {"name": p.name, "type": p.type, "required": p.required,
                 "description": p.description}
                for p in self.params
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionDef":
        params = tuple(Param(p["name"], p.get("type", "string"), p.get("required", True),
                             p.get("description", "")) for p in d.get("parameters", []))
        return cls(d["name"], params, d.get("description", ""))


@dataclass(frozen=True)
class Ref:
    """A reference to the result of an earlier call."""

    name: str


@dataclass(frozen=True)
class FunctionCall:
    result_name: str
    function: str
    args: dict = field(default_factory=dict)

    def references(self) -> set[str]:
        found = set()

        def walk(v):
            if isinstance(v, Ref):
                found.add(v.name)
            elif isinstance(v, list):
                for item in v:
                    walk(item)

        for value in self.args.values():
            walk(value)
        return found

    def to_text(self) -> str:
        args = ", ".join(f"{k}={_value_text(v)}" for k, v in self.args.items())
        return f"{self.result_name} = {self.function}({args})"


def _value_text(v) -> str:
    if isinstance(v, Ref):
        return v.name
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return "[" + ", ".join(_value_text(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    return repr(v)


@dataclass(frozen=True)
class EvalSample:
    query: str
    functions: tuple[FunctionDef, ...]
    ground_truth: tuple[FunctionCall, ...]

    def __post_init__(self):
        if not self.ground_truth:
            raise ValueError("a sample needs at least one ground-truth call")
        declared = {f.name for f in self.functions}
        seen: set[str] = set()
        for call in self.ground_truth:
            if call.function not in declared:
                raise ValueError(f"ground truth calls undeclared function {call.function!r}")
            missing = call.references() - seen
            if missing:
                raise ValueError(f"ground truth references undefined results {sorted(missing)}")
            seen.add(call.result_name)


# ---------------------------------------------------------------- prompt


def render_functions(functions: Sequence[FunctionDef]) -> str:
    return "\n".join(json.dumps(f.to_dict(), indent=2, ensure_ascii=False) for f in functions)


def render_prompt(functions: Sequence[FunctionDef], query: str) -> tuple[str, str]:
    """(system text, user text) for a function-calling chat turn."""
    if not functions:
        raise ValueError("at least one function is required")
    user = USER_TEMPLATE.substitute(functions=render_functions(functions), user_query=query)
    return SYSTEM_PROMPT, user


# ---------------------------------------------------------------- parsing


@dataclass
class ParseResult:
    calls: list[FunctionCall]
    skipped: int = 0

    def __iter__(self):
        return iter(self.calls)

    def __len__(self):
        return len(self.calls)


class _Unparseable(Exception):
    pass


_KEYWORDS = {"true": True, "false": False, "True": True, "False": False}


def _literal(node: ast.AST, defined: set[str]):
    if isinstance(node, ast.Constant) and isinstance(node.value, (str, int, float)) \
            and not isinstance(node.value, bool):
        return node.value
    if isinstance(node, ast.Constant) and isinstance(node.value, bool):
        return node.value
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)) \
            and isinstance(node.operand, ast.Constant) \
            and type(node.operand.value) in (int, float):
        v = node.operand.value
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Name):
        if node.id in _KEYWORDS:
            return _KEYWORDS[node.id]
        if node.id not in defined:
            raise _Unparseable(f"reference to undefined result {node.id!r}")
        return Ref(node.id)
    if isinstance(node, ast.List):
        return [_literal(el, defined) for el in node.elts]
    raise _Unparseable(f"unsupported value {ast.dump(node)}")


def _parse_line(line: str, defined: set[str]) -> FunctionCall:
    try:
        tree = ast.parse(line, mode="exec")
    except (SyntaxError, ValueError, RecursionError, MemoryError) as exc:
        raise _Unparseable(type(exc).__name__) from None
    if len(tree.body) != 1 or not isinstance(tree.body[0], ast.Assign):
        raise _Unparseable("not an assignment")
    stmt = tree.body[0]
    if len(stmt.targets) != 1 or not isinstance(stmt.targets[0], ast.Name):
        raise _Unparseable("assignment target is not a single name")
    call = stmt.value
    if not isinstance(call, ast.Call) or not isinstance(call.func, ast.Name) or call.args:
        raise _Unparseable("right-hand side is not name(keyword=value, ...)")
    args = {}
    for kw in call.keywords:
        if kw.arg is None or kw.arg in args:
            raise _Unparseable("bad or repeated keyword")
        args[kw.arg] = _literal(kw.value, defined)
    return FunctionCall(stmt.targets[0].id, call.func.id, args)


def parse_calls(text: str) -> ParseResult:
    """Parse model output into calls; never raises.

    Blank lines and markdown code fences are ignored; every other line that
    does not parse, or that references an undefined result, is skipped and
    counted in ``skipped``.
    """
    calls: list[FunctionCall] = []
    defined: set[str] = set()
    skipped = 0
    for raw in str(text).splitlines():
        line = raw.strip()
        if not line or line.startswith("```"):
            continue
        if line.startswith("$"):
            line = line[1:].lstrip()
        if line.endswith("$"):
            line = line[:-1].rstrip()
        try:
            call = _parse_line(line, defined)
        except (_Unparseable, RecursionError) as exc:
            log.debug("skipping line %r: %s", raw, exc)
            skipped += 1
            continue
        calls.append(call)
        defined.add(call.result_name)
    return ParseResult(calls, skipped)


# ---------------------------------------------------------------- scoring


def _canon_value(v, resolved: dict):
    if isinstance(v, Ref):
        return ("ref", resolved[v.name])
    if isinstance(v, bool):
        return ("bool", v)
    if isinstance(v, (int, float)):
        return ("num", v)
    if isinstance(v, str):
        return ("str", v)
    if isinstance(v, list):
        return ("list", tuple(_canon_value(x, resolved) for x in v))
    return ("other", repr(v))


def canonical_calls(calls: Sequence[FunctionCall]) -> list[tuple[str, dict]]:
    """(function, {arg: canonical value}) per call with references inlined."""
    resolved: dict[str, tuple] = {}
    out = []
    for call in calls:
        args = {k: _canon_value(v, resolved) for k, v in call.args.items()}
        out.append((call.function, args))
        resolved[call.result_name] = (call.function, frozenset(args.items()))
    return out


def _key(canon: tuple[str, dict]) -> tuple:
    return canon[0], frozenset(canon[1].items())


def sample_matched(predicted: Sequence[FunctionCall], truth: Sequence[FunctionCall]) -> bool:
    """True when predicted and ground-truth calls correspond one to one, in any order."""
    return (Counter(_key(c) for c in canonical_calls(predicted))
            == Counter(_key(c) for c in canonical_calls(truth)))


def call_scores(predicted: Sequence[FunctionCall], truth: Sequence[FunctionCall]) -> list[float]:
    """Per ground-truth call: fraction of its parameters the assigned prediction gets right.

    Each truth call, in order, takes the unused predicted call of the same
    name that scores highest, preferring an exact match and then the earliest.
    """
    preds = canonical_calls(predicted)
    used = [False] * len(preds)
    scores = []
    for name, gt_args in canonical_calls(truth):
        best, best_key = None, None
        for j, (pname, pargs) in enumerate(preds):
            if used[j] or pname != name:
                continue
            hits = sum(1 for k, v in gt_args.items() if k in pargs and pargs[k] == v)
            score = hits / len(gt_args) if gt_args else 1.0
            key = (score, pargs == gt_args, -j)
            if best_key is None or key > best_key:
                best, best_key = j, key
        if best is None:
            scores.append(0.0)
        else:
            used[best] = True
            scores.append(best_key[0])
    return scores


def _as_calls(pred) -> list[FunctionCall]:
    if isinstance(pred, str):
        return parse_calls(pred).calls
    return list(pred)


def _check_lengths(predictions, samples):
    if len(predictions) != len(samples):
        raise ValueError(f"{len(predictions)} predictions for {len(samples)} samples")


def accuracy(predictions: Sequence, samples: Sequence[EvalSample]) -> float:
    """Fraction of samples whose calls are all predicted exactly."""
    _check_lengths(predictions, samples)
    if not samples:
        raise ValueError("no samples")
    hits = sum(sample_matched(_as_calls(p), s.ground_truth) for p, s in zip(predictions, samples))
    return hits / len(samples)


def soft_accuracy(predictions: Sequence, samples: Sequence[EvalSample], average: str = "sample") -> float:
    """Mean fraction of correct parameters per ground-truth call.

    ``average="sample"`` takes the mean within each sample and then across
    samples; ``average="call"`` pools every call of every sample. Only the
    former is guaranteed to be at least :func:`accuracy`.
    """
    _check_lengths(predictions, samples)
    if not samples:
        raise ValueError("no samples")
    if average not in AVERAGING:
        raise ValueError(f"average must be one of {AVERAGING}")
    per_sample = [call_scores(_as_calls(p), s.ground_truth) for p, s in zip(predictions, samples)]
    if average == "sample":
        return sum(sum(sc) / len(sc) for sc in per_sample) / len(per_sample)
    flat = [x for sc in per_sample for x in sc]
    return sum(flat) / len(flat)


@dataclass
class SampleResult:
    index: int
    matched: bool
    call_scores: list[float]
    predicted_calls: int
    skipped_lines: int

    @property
    def soft(self) -> float:
        return sum(self.call_scores) / len(self.call_scores)


@dataclass
class EvalReport:
    accuracy: float
    soft_accuracy: float
    samples: list[SampleResult]
    average: str = "sample"

    @property
    def skipped_lines(self) -> int:
        return sum(s.skipped_lines for s in self.samples)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "soft_accuracy": self.soft_accuracy,
            "soft_average": self.average,
            "num_samples": len(self.samples),
            "skipped_lines": self.skipped_lines,
            "samples": [
                {"index": s.index, "matched": s.matched, "soft": s.soft,
                 "call_scores": s.call_scores, "predicted_calls": s.predicted_calls,
                 "skipped_lines": s.skipped_lines}
                for s in self.samples
            ],
        }

    def table(self) -> str:
        lines = [f"{'sample':>6}  {'match':>5}  {'soft':>6}  {'calls':>5}  {'skipped':>7}"]
        for s in self.samples:
            lines.append(f"{s.index:>6}  {'yes' if s.matched else 'no':>5}  {s.soft:6.3f}  "
                         f"{s.predicted_calls:>5}  {s.skipped_lines:>7}")
        lines.append(f"accuracy {self.accuracy:.4f}  soft accuracy {self.soft_accuracy:.4f}  "
                     f"({len(self.samples)} samples, {self.skipped_lines} unparsed lines)")
        return "\n".join(lines) + "\n"


def evaluate(model_outputs: Sequence[str], samples: Sequence[EvalSample],
             average: str = "sample") -> EvalReport:
    """Parse every output and score it against its sample."""
    _check_lengths(model_outputs, samples)
    parsed = [parse_calls(text) for text in model_outputs]
    results = []
    for i, (pr, sample) in enumerate(zip(parsed, samples)):
        results.append(SampleResult(i, sample_matched(pr.calls, sample.ground_truth),
                                    call_scores(pr.calls, sample.ground_truth),
                                    len(pr.calls), pr.skipped))
    preds = [pr.calls for pr in parsed]
    return EvalReport(accuracy(preds, samples), soft_accuracy(preds, samples, average),
                      results, average)


# ---------------------------------------------------------------- file formats


def _json_value(v, names: list[str]):
    if isinstance(v, dict):
        if set(v) != {"$ref"}:
            raise ValueError(f"object argument values must be {{'$ref': name}}, got {v}")
        ref = v["$ref"]
        if ref not in names:
            raise ValueError(f"reference to undefined result {ref!r}")
        return Ref(ref)
    if isinstance(v, list):
        return [_json_value(x, names) for x in v]
    if v is None:
        raise ValueError("null argument values are not supported")
    return v


def sample_from_json(d: dict) -> EvalSample:
    """Build a sample from one JSON-lines record.

    Ground-truth calls are ``{"function": ..., "args": {...}}`` with an
    optional ``result_name`` (default ``resultN``, 1-based); an argument
    ``{"$ref": "result1"}`` refers to an earlier call.
    """
    functions = tuple(FunctionDef.from_dict(f) for f in d.get("functions", []))
    names: list[str] = []
    calls = []
    for i, c in enumerate(d["ground_truth"], start=1):
        name = c.get("result_name", f"result{i}")
        args = {k: _json_value(v, names) for k, v in c.get("args", {}).items()}
        calls.append(FunctionCall(name, c["function"], args))
        names.append(name)
    return EvalSample(d.get("query", ""), functions, tuple(calls))


def _value_json(v):
    if isinstance(v, Ref):
        return {"$ref": v.name}
    if isinstance(v, list):
        return [_value_json(x) for x in v]
    return v


def sample_to_json(s: EvalSample) -> dict:
    return {
        "query": s.query,
        "functions": [f.to_dict() for f in s.functions],
        "ground_truth": [{"result_name": c.result_name, "function": c.function,
                          "args": {k: _value_json(v) for k, v in c.args.items()}}
                         for c in s.ground_truth],
    }


def load_samples(path: str | Path) -> list[EvalSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(sample_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def load_outputs(path: str | Path) -> list[str]:
    """Model outputs, one per sample.

    ``.jsonl`` files hold a JSON string or ``{"output": ...}`` per line. Any
    other file is plain text with one output per line and embedded newlines
    written as the two characters ``\\n``.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if path.suffix == ".jsonl":
        out = []
        for line in lines:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(rec["output"] if isinstance(rec, dict) else str(rec))
        return out
    return [line.replace("\\n", "\n") for line in lines]


def dump_outputs_jsonl(outputs: Iterable[str]) -> str:
    return "".join(json.dumps({"output": o}, ensure_ascii=False) + "\n" for o in outputs)
