"""Latency-aware architecture search toolkit for small decoder-only language models."""

from slmsearch.archspace import ArchConfig, ConfigError, SearchSpace, count_params, enumerate_candidates

__version__ = "0.1.0"

__all__ = ["ArchConfig", "ConfigError", "SearchSpace", "count_params", "enumerate_candidates"]
