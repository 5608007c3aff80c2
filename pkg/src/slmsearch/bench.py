"""Prefill/decode throughput protocol and latency-ranked architecture search.

Protocol per prompt length: ``warmup_runs`` untimed runs, then ``repeats``
timed runs. Each run starts from an empty KV cache, ingests a seeded random
prompt (prefill), then greedily produces ``gen_tokens`` tokens (decode). The
first generated token comes from the prompt's last hidden state and is timed
as decode; each further token costs one cached decode step.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Sequence

import numba
import numpy as np

from slmsearch import engine
from slmsearch.archspace import (
    ArchConfig,
    SearchSpace,
    count_params,
    enumerate_candidates,
)
from slmsearch.engine import KVCache, ModelWeights

log = logging.getLogger(__name__)

DEFAULT_PROMPT_LENGTHS = (32, 64, 128, 256, 512, 1024)
REPORT_COLUMNS = ("hidden", "intermediate", "layers", "q_heads", "kv_heads", "activation",
                  "params", "prefill_tps", "decode_tps")
RANKINGS = ("prefill", "decode", "weighted")


class BenchmarkError(ValueError):
    """Plan cannot run against the model (context overflow, empty prompts...)."""


class EnvironmentMismatch(ValueError):
    """Timings from different hosts or thread counts would be mixed."""


@dataclass(frozen=True)
class BenchmarkPlan:
    prompt_lengths: tuple[int, ...] = DEFAULT_PROMPT_LENGTHS
    gen_tokens: int = 100
    repeats: int = 5
    warmup_runs: int = 1
    threads: int = field(default_factory=engine.default_threads)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "prompt_lengths", tuple(int(n) for n in self.prompt_lengths))

    def validate(self, config: ArchConfig) -> None:
        if not self.prompt_lengths:
            raise BenchmarkError("plan has no prompt lengths")
        if min(self.prompt_lengths) <= 0:
            raise BenchmarkError("prompt lengths must be positive")
        if self.gen_tokens < 1:
            raise BenchmarkError("gen_tokens must be >= 1")
        if self.repeats < 1:
            raise BenchmarkError("repeats must be >= 1")
        if self.warmup_runs < 0:
            raise BenchmarkError("warmup_runs must be >= 0")
        if self.threads < 1:
            raise BenchmarkError("threads must be >= 1")
        limit = config.context_len - self.gen_tokens
        if max(self.prompt_lengths) > limit:
            raise BenchmarkError(
                f"prompt length {max(self.prompt_lengths)} + {self.gen_tokens} generated tokens "
                f"exceeds context_len {config.context_len}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkPlan":
        return cls(**d)


def environment_descriptor(threads_requested: int, threads_effective: int) -> dict:
    return {
        "host": platform.node(),
        "machine": platform.machine(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "cpu_count": os.cpu_count(),
        "threads_requested": threads_requested,
        "threads": threads_effective,
    }


def _same_environment(a: dict, b: dict) -> bool:
    keys = ("host", "machine", "cpu_count", "threads")
    return all(a.get(k) == b.get(k) for k in keys)


@dataclass
class CellTimings:
    """Raw per-repeat timings for one prompt length."""

    prompt_len: int
    gen_tokens: int
    prefill_seconds: list[float]
    decode_seconds: list[float]
    prefill_tokens: int
    decode_tokens: int
    decode_steps: int
    token_digest: str

    @property
    def prefill_tps(self) -> list[float]:
        return [self.prompt_len / s for s in self.prefill_seconds]

    @property
    def decode_tps(self) -> list[float]:
        return [self.gen_tokens / s for s in self.decode_seconds]

    def stats(self) -> dict:
        p, d = self.prefill_tps, self.decode_tps
        return {
            "prompt_len": self.prompt_len,
            "prefill_tps_mean": statistics.fmean(p),
            "prefill_tps_std": statistics.stdev(p) if len(p) > 1 else 0.0,
            "decode_tps_mean": statistics.fmean(d),
            "decode_tps_std": statistics.stdev(d) if len(d) > 1 else 0.0,
            "runs": len(p),
            "prefill_tokens": self.prefill_tokens,
            "decode_tokens": self.decode_tokens,
            "decode_steps": self.decode_steps,
        }


@dataclass
class ThroughputReport:
    config: ArchConfig
    params: int
    precision: str
    plan: BenchmarkPlan
    environment: dict
    cells: list[CellTimings]

    def cell(self, prompt_len: int) -> CellTimings:
        for c in self.cells:
            if c.prompt_len == prompt_len:
                return c
        raise KeyError(f"no measurements for prompt length {prompt_len}")

    def summary(self) -> list[dict]:
        return [c.stats() for c in self.cells]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "params": self.params,
            "precision": self.precision,
            "plan": self.plan.to_dict(),
            "environment": self.environment,
            "cells": [asdict(c) for c in self.cells],
            "summary": self.summary(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThroughputReport":
        return cls(ArchConfig.from_dict(d["config"]), d["params"], d["precision"],
                   BenchmarkPlan.from_dict(d["plan"]), d["environment"],
                   [CellTimings(**c) for c in d["cells"]])


def seeded_prompt(seed: int, prompt_len: int, run: int, vocab_size: int, *,
                  warmup: bool = False) -> np.ndarray:
    """Prompt tokens for one run; warmups draw from a separate stream."""
    rng = np.random.default_rng([seed, prompt_len, int(warmup), run])
    return rng.integers(0, vocab_size, size=prompt_len)


def _one_run(model: ModelWeights, prompt: np.ndarray, gen_tokens: int,
             clock: Callable[[], float]) -> tuple[float, float, list[int], int]:
    """One timed repeat: prefill, then ``gen_tokens`` greedy decode steps.

    Prefill covers the layer stack over the prompt. Sampling the first token
    (tied head plus argmax) is charged to decode, as is every decode step.
    Returns the two wall times, the tokens fed to decode and the step count.
    """
    cache = KVCache(model.config, initial_capacity=len(prompt) + gen_tokens)
    t0 = clock()
    hidden = engine.ingest(model, prompt, cache)
    t1 = clock()
    token = int(np.argmax(engine.lm_head(model, hidden)))
    fed = []
    for _ in range(gen_tokens):
        fed.append(token)
        token = int(np.argmax(engine.decode_step(model, token, cache)))
    t2 = clock()
    return t1 - t0, t2 - t1, fed, len(fed)


def run_benchmark(model: ModelWeights, plan: BenchmarkPlan, *,
                  clock: Callable[[], float] = time.perf_counter) -> ThroughputReport:
    """Measure prefill and decode throughput for every prompt length in ``plan``."""
    cfg = model.config
    plan.validate(cfg)
    effective = engine.set_threads(plan.threads)
    env = environment_descriptor(plan.threads, effective)
    cells = []
    for prompt_len in plan.prompt_lengths:
        for w in range(plan.warmup_runs):
            _one_run(model, seeded_prompt(plan.seed, prompt_len, w, cfg.vocab_size, warmup=True),
                     plan.gen_tokens, clock)
        pre, dec = [], []
        digest = hashlib.sha256()
        prefill_tokens = decode_tokens = decode_steps = 0
        for run in range(plan.repeats):
            prompt = seeded_prompt(plan.seed, prompt_len, run, cfg.vocab_size)
            tp, td, generated, steps = _one_run(model, prompt, plan.gen_tokens, clock)
            if tp <= 0 or td <= 0:
                raise BenchmarkError("clock did not advance during a timed phase")
            pre.append(tp)
            dec.append(td)
            prefill_tokens += len(prompt)
            decode_tokens += len(generated)
            decode_steps += steps
            digest.update(np.asarray(prompt, dtype=np.int64).tobytes())
            digest.update(np.asarray(generated, dtype=np.int64).tobytes())
        cell = CellTimings(prompt_len, plan.gen_tokens, pre, dec, prefill_tokens, decode_tokens,
                           decode_steps, digest.hexdigest())
        s = cell.stats()
        log.info("prompt %d: prefill %.1f tok/s, decode %.1f tok/s", prompt_len,
                 s["prefill_tps_mean"], s["decode_tps_mean"])
        cells.append(cell)
    return ThroughputReport(cfg, count_params(cfg), model.precision, plan, env, cells)


# ---------------------------------------------------------------- search


@dataclass(frozen=True)
class Ranking:
    """Which throughput orders the candidates, read at one prompt length.

    ``weighted`` scores ``weight * prefill + (1 - weight) * decode``.
    """

    kind: str = "prefill"
    weight: float | None = None
    prompt_len: int = 64

    def __post_init__(self):
        if self.kind not in RANKINGS:
            raise ValueError(f"ranking must be one of {RANKINGS}, got {self.kind!r}")
        if self.kind == "weighted":
            if self.weight is None or not 0 <= self.weight <= 1:
                raise ValueError("weighted ranking needs a weight in [0, 1]")
        elif self.weight is not None:
            raise ValueError(f"{self.kind} ranking takes no weight")

    def score(self, prefill_tps: float, decode_tps: float) -> float:
        if self.kind == "prefill":
            return prefill_tps
        if self.kind == "decode":
            return decode_tps
        return self.weight * prefill_tps + (1 - self.weight) * decode_tps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SearchEntry:
    config: ArchConfig
    params: int
    prefill_tps: float
    decode_tps: float
    score: float

    def row(self) -> dict:
        c = self.config
        return {
            "hidden": c.hidden_size,
            "intermediate": c.intermediate_size,
            "layers": c.num_layers,
            "q_heads": c.q_heads,
            "kv_heads": c.kv_heads,
            "activation": c.activation,
            "params": self.params,
            "prefill_tps": self.prefill_tps,
            "decode_tps": self.decode_tps,
        }


@dataclass
class RankedSearchResult:
    entries: list[SearchEntry]
    ranking: Ranking
    environment: dict

    @property
    def best(self) -> SearchEntry:
        return self.entries[0]


@dataclass
class RawSearchTimings:
    """Everything needed to recompute a ranking without re-measuring."""

    environment: dict
    plan: BenchmarkPlan
    precision: str
    reports: list[ThroughputReport]

    def to_dict(self) -> dict:
        return {
            "environment": self.environment,
            "plan": self.plan.to_dict(),
            "precision": self.precision,
            "candidates": [r.to_dict() for r in self.reports],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RawSearchTimings":
        return cls(d["environment"], BenchmarkPlan.from_dict(d["plan"]), d["precision"],
                   [ThroughputReport.from_dict(c) for c in d["candidates"]])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "RawSearchTimings":
        return cls.from_dict(json.loads(text))


def merge_raw(a: RawSearchTimings, b: RawSearchTimings) -> RawSearchTimings:
    """Concatenate two timing sets taken on the same host with the same plan."""
    if not _same_environment(a.environment, b.environment):
        raise EnvironmentMismatch(
            f"refusing to merge timings from {a.environment.get('host')!r} "
            f"and {b.environment.get('host')!r}")
    if a.plan != b.plan or a.precision != b.precision:
        raise EnvironmentMismatch("refusing to merge timings taken with different plans")
    return RawSearchTimings(a.environment, a.plan, a.precision, a.reports + b.reports)


def _tie_key(entry: SearchEntry) -> tuple:
    c = entry.config
    return (-entry.score, entry.params, c.num_layers, c.hidden_size, c.intermediate_size,
            c.q_heads, c.kv_heads, c.activation)


def rank_timings(raw: RawSearchTimings, ranking: Ranking | str = "prefill") -> RankedSearchResult:
    """Order candidates by the chosen metric; ties go to fewer params, then fewer layers."""
    if isinstance(ranking, str):
        ranking = Ranking(ranking, 0.5 if ranking == "weighted" else None)
    if ranking.prompt_len not in raw.plan.prompt_lengths:
        raise BenchmarkError(f"ranking prompt length {ranking.prompt_len} was not measured")
    entries = []
    for report in raw.reports:
        s = report.cell(ranking.prompt_len).stats()
        p, d = s["prefill_tps_mean"], s["decode_tps_mean"]
        entries.append(SearchEntry(report.config, report.params, p, d, ranking.score(p, d)))
    entries.sort(key=_tie_key)
    return RankedSearchResult(entries, ranking, raw.environment)


def measure_candidates(configs: Sequence[ArchConfig], plan: BenchmarkPlan, *,
                       precision: str = "q4",
                       clock: Callable[[], float] = time.perf_counter) -> RawSearchTimings:
    """Benchmark each config in turn (never concurrently) with identical plan and seed."""
    if not configs:
        raise BenchmarkError("no candidates to benchmark")
    reports = []
    for i, cfg in enumerate(configs):
        log.info("candidate %d/%d: %s", i + 1, len(configs), cfg)
        model = engine.init_random_weights(cfg, plan.seed, precision)
        reports.append(run_benchmark(model, plan, clock=clock))
        del model
    env = reports[0].environment
    for r in reports[1:]:
        if not _same_environment(env, r.environment):
            raise EnvironmentMismatch("environment changed during the search")
    return RawSearchTimings(env, plan, precision, reports)


def run_search(space: SearchSpace, plan: BenchmarkPlan, ranking: Ranking | str = "prefill", *,
               precision: str = "q4", solve_intermediate: bool = False,
               clock: Callable[[], float] = time.perf_counter
               ) -> tuple[RankedSearchResult, RawSearchTimings]:
    """Enumerate, benchmark and rank; also returns the raw timings for later re-ranking."""
    candidates = enumerate_candidates(space, solve_intermediate=solve_intermediate)
    if not candidates:
        raise BenchmarkError("search space yields no candidates within the budget window")
    raw = measure_candidates(candidates, plan, precision=precision, clock=clock)
    return rank_timings(raw, ranking), raw


# ---------------------------------------------------------------- reports


def report_schema() -> dict:
    text = resources.files("slmsearch").joinpath("schemas/search_report.schema.json").read_text()
    return json.loads(text)


def result_to_json_doc(result: RankedSearchResult) -> dict:
    rows = []
    for rank, entry in enumerate(result.entries, start=1):
        rows.append({"rank": rank, **entry.row(), "score": entry.score})
    return {"ranking": result.ranking.to_dict(), "environment": result.environment,
            "columns": list(REPORT_COLUMNS), "rows": rows}


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, report_schema())


def _fmt(v) -> str:
    return f"{v:.2f}" if isinstance(v, float) else str(v)


def render_report(result: RankedSearchResult, fmt: str = "csv") -> str:
    """Serialize a ranked result as csv, json or a markdown table."""
    if not result.entries:
        raise BenchmarkError("cannot render an empty result")
    rows = [e.row() for e in result.entries]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows)
        return buf.getvalue()
    if fmt == "json":
        return json.dumps(result_to_json_doc(result), indent=2) + "\n"
    if fmt in ("md", "markdown"):
        lines = ["| " + " | ".join(REPORT_COLUMNS) + " |",
                 "|" + "---|" * len(REPORT_COLUMNS)]
        lines += ["| " + " | ".join(_fmt(r[c]) for c in REPORT_COLUMNS) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        out.append({
            "hidden": int(r["hidden"]), "intermediate": int(r["intermediate"]),
            "layers": int(r["layers"]), "q_heads": int(r["q_heads"]),
            "kv_heads": int(r["kv_heads"]), "activation": r["activation"],
            "params": int(r["params"]), "prefill_tps": float(r["prefill_tps"]),
            "decode_tps": float(r["decode_tps"]),
        })
    return out
