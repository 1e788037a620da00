"""Top-k overlap statistics and rank-based ensembling of attribution results."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import topk_count, topk_ids
from .diffusion.config import ConfigError
from .scoring import AttributionResult, config_hash


@dataclass(frozen=True)
class OverlapMatrix:
    """Mean pairwise top-k overlap in percent; the diagonal is NaN."""

    labels: tuple[str, ...]
    mean: np.ndarray
    ci: np.ndarray
    k_fraction: float

    def to_record(self) -> dict:
        def clean(a):
            return [[None if math.isnan(v) else float(v) for v in row] for row in a]
        return {"labels": list(self.labels), "k_fraction": self.k_fraction,
                "mean": clean(self.mean), "ci": clean(self.ci)}

    def table(self) -> str:
        w = max(10, *(len(s) for s in self.labels))
        lines = [" " * w + "  " + "  ".join(s.rjust(w) for s in self.labels)]
        for i, name in enumerate(self.labels):
            cells = []
            for j in range(len(self.labels)):
                cells.append("-".rjust(w) if i == j else f"{self.mean[i, j]:.1f}±{self.ci[i, j]:.1f}".rjust(w))
            lines.append(name.ljust(w) + "  " + "  ".join(cells))
        return "\n".join(lines)


def _ids_of(results: Sequence[AttributionResult]) -> set[str]:
    ids = set(results[0].scores)
    for res in results[1:]:
        if set(res.scores) != ids:
            raise ConfigError("results do not score the same dataset")
    return ids


def _overlap(a: Sequence[str], b: Sequence[str]) -> float:
    return 100.0 * len(set(a) & set(b)) / len(a)


def _mean_ci(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), 1.96 * float(arr.std(ddof=1)) / math.sqrt(arr.size)


def topk_overlap_across_items(results: Sequence[AttributionResult], k_fraction: float) -> tuple[float, float]:
    """Mean top-k intersection, in percent of k, over all unordered item pairs
    of one method, with a normal 95% half-width."""
    if len(results) < 2:
        raise ConfigError("need at least two items")
    if len({r.method for r in results}) != 1:
        raise ConfigError("results come from more than one method")
    ids = _ids_of(results)
    count = topk_count(k_fraction, len(ids))
    tops = [topk_ids(r.scores, count) for r in results]
    return _mean_ci([_overlap(a, b) for a, b in itertools.combinations(tops, 2)])


def overlap_rows(results_by_method: Mapping[str, Sequence[AttributionResult]], k_fraction: float) -> dict:
    return {name: topk_overlap_across_items(res, k_fraction) for name, res in results_by_method.items()}


def topk_overlap_across_methods(results_by_method: Mapping[str, Sequence[AttributionResult]],
                                k_fraction: float) -> OverlapMatrix:
    labels = tuple(results_by_method)
    by_item = {}
    for name in labels:
        items = {r.item_id: r for r in results_by_method[name]}
        if len(items) != len(results_by_method[name]):
            raise ConfigError(f"{name}: duplicate item ids")
        by_item[name] = items
    item_ids = set(by_item[labels[0]])
    for name in labels:
        if set(by_item[name]) != item_ids:
            raise ConfigError(f"{name} scored a different set of items")
    ids = _ids_of([r for name in labels for r in by_item[name].values()])
    count = topk_count(k_fraction, len(ids))
    tops = {name: {i: topk_ids(r.scores, count) for i, r in by_item[name].items()} for name in labels}
    n = len(labels)
    mean = np.full((n, n), np.nan)
    ci = np.full((n, n), np.nan)
    for i, j in itertools.combinations(range(n), 2):
        vals = [_overlap(tops[labels[i]][item], tops[labels[j]][item]) for item in sorted(item_ids)]
        mean[i, j], ci[i, j] = mean[j, i], ci[j, i] = _mean_ci(vals)
    return OverlapMatrix(labels, mean, ci, k_fraction)


@dataclass(frozen=True)
class EnsembleSpec:
    methods: tuple[str, ...]
    weights: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "weights", tuple(self.weights))
        if len(self.methods) != len(self.weights):
            raise ConfigError("one weight per method")
        if any(w < 0 or int(w) != w for w in self.weights):
            raise ConfigError("weights must be non-negative integers")
        if not any(self.weights):
            raise ConfigError("at least one weight must be positive")

    @classmethod
    def parse(cls, text: str) -> "EnsembleSpec":
        """``"mucs=10,emb-ae=5,condition=3"``"""
        pairs = [p.split("=") for p in text.split(",") if p.strip()]
        if any(len(p) != 2 for p in pairs):
            raise ConfigError(f"expected name=weight pairs, got {text!r}")
        return cls(tuple(p[0].strip() for p in pairs), tuple(int(p[1]) for p in pairs))


def descending_ranks(scores: np.ndarray) -> np.ndarray:
    """Rank 1 for the highest score, tied scores share their average rank."""
    return rankdata(-np.asarray(scores, dtype=np.float64), method="average")


def rank_ensemble(results_by_method: Mapping[str, AttributionResult], spec: EnsembleSpec) -> AttributionResult:
    """Ensemble score = minus the weighted sum of per-method ranks."""
    missing = [m for m in spec.methods if m not in results_by_method]
    if missing:
        raise ConfigError(f"no results for {missing}")
    chosen = [results_by_method[m] for m in spec.methods]
    ids = sorted(_ids_of(chosen))
    if len({r.item_id for r in chosen}) != 1:
        raise ConfigError("ensemble members attribute different generated items")
    total = np.zeros(len(ids))
    for res, w in zip(chosen, spec.weights):
        if w:
            total += w * descending_ranks(res.vector(ids))
    scores = {k: float(-v) for k, v in zip(ids, total)}
    meta = {"methods": list(spec.methods), "weights": list(spec.weights)}
    return AttributionResult("ensemble", chosen[0].item_id, scores, config_hash(meta), None, meta)
