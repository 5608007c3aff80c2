"""Transformer-decoder configurations, exact parameter counts, and budgeted enumeration."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

ACTIVATIONS = ("relu", "silu")


class ConfigError(ValueError):
    """Raised when an ArchConfig or SearchSpace violates its invariants."""


@dataclass(frozen=True)
class ArchConfig:
    """One point in the decoder hyperparameter space.

    Linear layers carry no bias and the output head is tied to the token
    embedding, so the embedding is counted once.
    """

    hidden_size: int
    intermediate_size: int
    num_layers: int
    q_heads: int = 16
    kv_heads: int = 16
    activation: str = "relu"
    vocab_size: int = 49152
    context_len: int = 2048
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("hidden_size", "intermediate_size", "num_layers", "q_heads",
                     "kv_heads", "vocab_size", "context_len"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not (self.rope_theta > 0 and math.isfinite(self.rope_theta)):
            raise ConfigError(f"rope_theta must be a positive real, got {self.rope_theta!r}")
        if self.hidden_size % self.q_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by q_heads {self.q_heads}")
        if self.q_heads % self.kv_heads:
            raise ConfigError(f"q_heads {self.q_heads} not divisible by kv_heads {self.kv_heads}")
        if self.intermediate_size < self.hidden_size:
            raise ConfigError("intermediate_size must be >= hidden_size")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.q_heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.kv_heads

    @property
    def ratio(self) -> float:
        return self.intermediate_size / self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ArchConfig keys: {sorted(unknown)}")
        return cls(**d)


def count_params(config: ArchConfig) -> int:
    """Exact parameter count of a tied-embedding, bias-free gated decoder.

    >>> count_params(ArchConfig(1280, 2096, 3))
    106730240
    """
    h, i = config.hidden_size, config.intermediate_size
    attn = 2 * h * h + 2 * h * config.kv_dim
    ffn = 3 * h * i
    per_layer = attn + ffn + 2 * h
    return config.vocab_size * h + config.num_layers * per_layer + h


@dataclass(frozen=True)
class SearchSpace:
    """Grids and budget window for candidate enumeration.

    The intermediate-size grid is either the explicit ``intermediate_grid``
    or, when that is None, every multiple of ``intermediate_step`` whose ratio
    to hidden falls in ``ratio_range``.
    """

    budget: int
    tolerance: float = 0.10
    layer_range: tuple[int, int] = (15, 25)
    head_options: tuple[tuple[int, int], ...] = ((16, 16), (16, 4))
    activations: tuple[str, ...] = ("relu",)
    ratio_range: tuple[float, float] = (2.0, 5.0)
    hidden_grid: tuple[int, ...] = field(
        default_factory=lambda: tuple(range(256, 4096 + 1, 64)))
    intermediate_step: int = 32
    intermediate_grid: tuple[int, ...] | None = None
    vocab_size: int = 49152
    context_len: int = 2048
    rope_theta: float = 10000.0

    def __post_init__(self):
        # normalize lists coming from JSON into hashable tuples
        object.__setattr__(self, "layer_range", tuple(int(v) for v in self.layer_range))
        object.__setattr__(self, "head_options",
                           tuple((int(q), int(kv)) for q, kv in self.head_options))
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "ratio_range", tuple(float(v) for v in self.ratio_range))
        object.__setattr__(self, "hidden_grid", tuple(int(v) for v in self.hidden_grid))
        if self.intermediate_grid is not None:
            object.__setattr__(self, "intermediate_grid",
                               tuple(sorted({int(v) for v in self.intermediate_grid})))

        lo, hi = self.layer_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"layer_range must be a nonempty interval of positive ints, got {self.layer_range}")
        rlo, rhi = self.ratio_range
        if rlo < 1 or rhi < rlo:
            raise ConfigError(f"ratio_range must satisfy 1 <= low <= high, got {self.ratio_range}")
        if not 0 < self.tolerance < 1:
            raise ConfigError(f"tolerance must lie in (0, 1), got {self.tolerance}")
        if self.budget <= 0:
            raise ConfigError("budget must be positive")
        if self.intermediate_step <= 0:
            raise ConfigError("intermediate_step must be positive")
        if not self.head_options or not self.activations or not self.hidden_grid:
            raise ConfigError("head_options, activations and hidden_grid must be nonempty")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")

    @property
    def window(self) -> tuple[float, float]:
        return self.budget * (1 - self.tolerance), self.budget * (1 + self.tolerance)

    def intermediate_values(self, hidden: int) -> Iterable[int]:
        if self.intermediate_grid is not None:
            return self.intermediate_grid
        step = self.intermediate_step
        lo = max(hidden * self.ratio_range[0], hidden)
        first = math.ceil(lo / step) * step
        last = math.floor(hidden * self.ratio_range[1] / step) * step
        return range(first, last + 1, step)

    @classmethod
    def from_json(cls, doc: dict | str | Path) -> "SearchSpace":
        """Build a space from the JSON config document (dict, text or path)."""
        if isinstance(doc, Path):
            doc = json.loads(doc.read_text())
        elif isinstance(doc, str):
            doc = json.loads(doc)
        keymap = {
            "budget": "budget",
            "tolerance": "tolerance",
            "layers": "layer_range",
            "heads": "head_options",
            "activations": "activations",
            "ratio": "ratio_range",
            "hidden_grid": "hidden_grid",
            "intermediate_step": "intermediate_step",
            "intermediate_grid": "intermediate_grid",
            "vocab_size": "vocab_size",
            "context_len": "context_len",
            "rope_theta": "rope_theta",
        }
        unknown = set(doc) - set(keymap) - {"plan"}
        if unknown:
            raise ConfigError(f"unknown search-space keys: {sorted(unknown)}")
        if "budget" not in doc:
            raise ConfigError("search-space config requires 'budget'")
        kwargs = {keymap[k]: v for k, v in doc.items() if k in keymap}
        kwargs["budget"] = int(float(kwargs["budget"]))
        return cls(**kwargs)


def _within(params: int, window: tuple[float, float]) -> bool:
    return window[0] <= params <= window[1]


def enumerate_candidates(space: SearchSpace, *, solve_intermediate: bool = False) -> list[ArchConfig]:
    """All grid configurations whose parameter count falls in the budget window.

    Results are ordered by (layers, hidden, intermediate) and then by head
    option and activation in the order the space lists them.

    With ``solve_intermediate`` only one intermediate size is kept per
    (hidden, layers, heads, activation): the grid value whose count lands
    closest to the budget.
    """
    window = space.window
    rlo, rhi = space.ratio_range
    out: list[tuple[tuple, ArchConfig]] = []
    seen = set()
    for layers in range(space.layer_range[0], space.layer_range[1] + 1):
        for hidden in sorted(set(space.hidden_grid)):
            for h_idx, (q, kv) in enumerate(space.head_options):
                if hidden % q or q % kv:
                    continue
                # count is affine in intermediate: base + 3*h*L*i
                base = count_params(ArchConfig(hidden, hidden, layers, q, kv, "relu",
                                               space.vocab_size, space.context_len,
                                               space.rope_theta)) - 3 * hidden * layers * hidden
                slope = 3 * hidden * layers
                grid = space.intermediate_values(hidden)
                if solve_intermediate:
                    target = (space.budget - base) / slope
                    picks = [i for i in grid if _within(base + slope * i, window)]
                    picks = sorted(picks, key=lambda i: (abs(i - target), i))[:1]
                else:
                    lo_i = math.ceil((window[0] - base) / slope)
                    hi_i = math.floor((window[1] - base) / slope)
                    picks = [i for i in grid if lo_i <= i <= hi_i]
                for inter in picks:
                    if not rlo <= inter / hidden <= rhi:
                        continue
                    for a_idx, act in enumerate(space.activations):
                        cfg = ArchConfig(hidden, inter, layers, q, kv, act, space.vocab_size,
                                         space.context_len, space.rope_theta)
                        if cfg in seen or not _within(count_params(cfg), window):
                            continue
                        seen.add(cfg)
                        out.append(((layers, hidden, inter, h_idx, a_idx), cfg))
    out.sort(key=lambda item: item[0])
    return [cfg for _, cfg in out]


CANDIDATE_COLUMNS = ("hidden", "intermediate", "layers", "q_heads", "kv_heads", "activation", "params")


def candidate_row(cfg: ArchConfig) -> dict:
    return {
        "hidden": cfg.hidden_size,
        "intermediate": cfg.intermediate_size,
        "layers": cfg.num_layers,
        "q_heads": cfg.q_heads,
        "kv_heads": cfg.kv_heads,
        "activation": cfg.activation,
        "params": count_params(cfg),
    }


def candidates_to_csv(configs: Iterable[ArchConfig]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CANDIDATE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for cfg in configs:
        writer.writerow(candidate_row(cfg))
    return buf.getvalue()


def candidates_from_csv(text: str, space: SearchSpace | None = None) -> list[ArchConfig]:
    """Inverse of :func:`candidates_to_csv`; vocab/context/theta come from ``space``."""
    extra = {}
    if space is not None:
        extra = dict(vocab_size=space.vocab_size, context_len=space.context_len,
                     rope_theta=space.rope_theta)
    rows = csv.DictReader(io.StringIO(text))
    return [ArchConfig(int(r["hidden"]), int(r["intermediate"]), int(r["layers"]),
                       int(r["q_heads"]), int(r["kv_heads"]), r["activation"], **extra)
            for r in rows]

