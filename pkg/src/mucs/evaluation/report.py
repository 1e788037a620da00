"""Evaluation report: paired similarity lists, AUC tables and histograms."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .similarity import ROLES
from .stats import compute_auc, mean_normalized_similarity_difference


@dataclass
class EvalReport:
    methods: list[str]
    reference: str
    metrics: list[str]
    similarities: dict[str, dict[str, list[float]]]
    stats: dict[str, dict[str, dict[str, float]]]
    failures: list[dict] = field(default_factory=list)
    seed_consistency: dict[str, Any] | None = None
    meta: dict[str, Any] = field(default_factory=dict)
    traces: dict[str, list[dict]] = field(default_factory=dict)

    @classmethod
    def build(cls, methods: Sequence[str], reference: str, outcomes, metrics: Sequence[str], meta: dict,
              seed_data: Sequence[dict] = ()) -> "EvalReport":
        failed_repeats = {o.repeat for o in outcomes if o.failed}
        failures = [{"repeat": o.repeat, "method": o.method, "reason": o.failed} for o in outcomes if o.failed]
        sims: dict[str, dict[str, list[float]]] = {}
        traces: dict[str, list[dict]] = {}
        for o in sorted(outcomes, key=lambda o: o.repeat):
            if o.repeat in failed_repeats:
                continue
            for metric in metrics:
                sims.setdefault(o.method, {}).setdefault(metric, []).extend(o.similarities[metric])
            traces.setdefault(o.method, []).extend(o.traces)
        stats = {}
        ref = sims.get(reference, {})
        for name in methods:
            if name not in sims:
                continue
            stats[name] = {}
            for metric in metrics:
                stats[name][metric] = cls._metric_stats(ref[metric], sims[name][metric])
        seed = None
        if seed_data:
            seed = {"same": {}, "different": {}, "stats": {}}
            for metric in metrics:
                same = [v for d in seed_data for v in d["same"][metric]]
                diff = [v for d in seed_data for v in d["different"][metric]]
                seed["same"][metric] = same
                seed["different"][metric] = diff
                # "method" = different-seed: a high AUC means same-seed similarity dominates
                seed["stats"][metric] = compute_auc(same, diff).to_record()
        meta = dict(meta, failed_repeats=sorted(failed_repeats))
        return cls(list(methods), reference, list(metrics), sims, stats, failures, seed, meta, traces)

    @staticmethod
    def _metric_stats(s_rand, s_method) -> dict[str, float]:
        res = compute_auc(s_rand, s_method).to_record()
        try:
            nsd, ci = mean_normalized_similarity_difference(s_method, s_rand)
        except ValueError:
            nsd, ci = float("nan"), float("nan")
        res.update(nsd=nsd, nsd_ci=ci, n=len(s_method))
        return res

    def mean_auc(self, method: str) -> float:
        return float(np.mean([self.stats[method][m]["auc"] for m in self.metrics]))

    def to_dict(self) -> dict:
        return {"methods": self.methods, "reference": self.reference, "metrics": self.metrics,
                "similarities": self.similarities, "stats": self.stats, "failures": self.failures,
                "seed_consistency": self.seed_consistency, "meta": self.meta, "traces": self.traces}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, default=_json_default))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))

    def summary_table(self, relative_to: str | None = None) -> str:
        """Methods as rows, AUC per metric plus the mean; with ``relative_to``
        a last column gives the mean relative AUC change against that row."""
        heads = [f"{m} [{ROLES.get(m, m)}]" for m in self.metrics]
        cols = ["method", *heads, "mean"] + (["delta"] if relative_to else [])
        rows = []
        for name in self.methods:
            if name not in self.stats:
                rows.append([name, *["failed"] * (len(cols) - 1)])
                continue
            st = self.stats[name]
            cells = [name] + [f"{st[m]['auc']:.3f}" + ("*" if st[m]["p"] < 0.01 else "") for m in self.metrics]
            cells.append(f"{self.mean_auc(name):.3f}")
            if relative_to:
                cells.append(self._delta(name, relative_to))
            rows.append(cells)
        widths = [max(len(r[i]) for r in [cols, *rows]) for i in range(len(cols))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        lines.append("* one-tailed Mann-Whitney p < 0.01 against random removal; cosine metrics are "
                     "small-scale stand-ins, not the named learned metrics")
        return "\n".join(lines)

    def _delta(self, name: str, ref: str) -> str:
        if ref not in self.stats or name == ref:
            return ""
        rel = [self.stats[name][m]["auc"] / self.stats[ref][m]["auc"] - 1 for m in self.metrics]
        return f"{100 * float(np.mean(rel)):+.1f}%"

    def histogram_data(self, metric: str, bins: int = 20) -> dict[str, Any]:
        groups = {name: self.similarities[name][metric] for name in [self.reference, *self.methods]
                  if name in self.similarities}
        if self.seed_consistency:
            groups["same-seed"] = self.seed_consistency["same"][metric]
            groups["different-seed"] = self.seed_consistency["different"][metric]
        values = np.concatenate([np.asarray(v, dtype=float) for v in groups.values()]) if groups else np.zeros(1)
        edges = np.histogram_bin_edges(values, bins=bins)
        return {"metric": metric, "edges": edges.tolist(),
                "counts": {k: np.histogram(v, bins=edges)[0].tolist() for k, v in groups.items()}}


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if is_dataclass(obj) and not isinstance(obj, type):
        return asdict(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")
