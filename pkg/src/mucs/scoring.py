"""Attribution scores from an original/unlearned model pair.

The default score averages the normalised loss skew
(L2 - L1) / (|L2| + |L1| + eps) over one fixed set of (sigma, n) pairs,
with sigma taken from the head of the generation schedule. The same pair set
is used for both models and for every training instance.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .data import Dataset, GeneratedItem
from .diffusion.config import ConfigError, LossConfig, build_generation_schedule
from .diffusion.losses import per_sample_loss
from .diffusion.snapshot import ModelSnapshot
from .rng import as_stream

SCORE_MODES = ("mucs", "subtraction", "nonconsistent", "train-sigma", "full-schedule")


@dataclass(frozen=True, eq=False)
class NoisePairSet:
    sigmas: np.ndarray
    noise: np.ndarray
    provenance: Mapping[str, Any]

    def __post_init__(self):
        if len(self.sigmas) != len(self.noise):
            raise ConfigError("sigma and noise counts differ")
        for arr in (self.sigmas, self.noise):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.sigmas)

    def digest(self) -> str:
        h = hashlib.sha256(self.sigmas.tobytes())
        h.update(self.noise.tobytes())
        return h.hexdigest()[:16]

    def describe(self) -> dict:
        return {**dict(self.provenance), "size": len(self), "digest": self.digest()}


def build_noise_pair_set(loss: LossConfig, schedule_params=(0.002, 80.0, 7.0), target_size: int = 100,
                         retention: float = 0.7, stream=0, shape=(3, 16, 16)) -> NoisePairSet:
    """First ``target_size`` sigmas of a floor(target_size / retention)-step
    generation schedule, each paired with its own standard-normal noise."""
    if target_size < 1:
        raise ConfigError("target_size must be >= 1")
    if not 0 < retention <= 1:
        raise ConfigError("retention must lie in (0, 1]")
    stream = as_stream(stream)
    sigma_min, sigma_max, rho = schedule_params
    length = max(math.floor(target_size / retention + 1e-9), 2)
    sched = build_generation_schedule(sigma_min, sigma_max, rho, length)
    sigmas = sched.as_array()[:target_size].astype(np.float32)
    noise = torch.randn((target_size, *shape), generator=stream.torch()).numpy()
    prov = {"sigma_source": "schedule", "sigma_min": sigma_min, "sigma_max": sigma_max, "rho": rho,
            "schedule_length": length, "retention": retention, "stream": stream.key, "loss": loss.to_dict()}
    return NoisePairSet(sigmas, noise, prov)


def training_noise_pair_set(loss: LossConfig, target_size: int = 100, stream=0, shape=(3, 16, 16)) -> NoisePairSet:
    """Consistent pairs whose sigmas come from the training log-normal instead."""
    stream = as_stream(stream)
    gen = stream.torch()
    g = torch.randn(target_size, generator=gen, dtype=torch.float64)
    sigmas = torch.exp(loss.p_mean + loss.p_std * g).float().numpy()
    noise = torch.randn((target_size, *shape), generator=gen).numpy()
    prov = {"sigma_source": "training", "stream": stream.key, "loss": loss.to_dict()}
    return NoisePairSet(sigmas, noise, prov)


@dataclass
class AttributionResult:
    method: str
    item_id: str
    scores: dict[str, float]
    config_hash: str = ""
    noise_set: Mapping[str, Any] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def ranking(self) -> list[str]:
        return sorted(self.scores, key=lambda k: (-self.scores[k], k))

    def vector(self, ids) -> np.ndarray:
        return np.array([self.scores[k] for k in ids], dtype=np.float64)

    def to_lines(self) -> str:
        header = {"type": "header", "method": self.method, "item_id": self.item_id,
                  "config_hash": self.config_hash, "noise_set": self.noise_set, "meta": self.meta}
        lines = [json.dumps(header, sort_keys=True)]
        for k in sorted(self.scores):
            lines.append(json.dumps({"method": self.method, "item_id": self.item_id,
                                     "instance_id": k, "score": self.scores[k]}))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_lines())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "AttributionResult":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        scores = {}
        for line in lines[1:]:
            rec = json.loads(line)
            scores[rec["instance_id"]] = rec["score"]
        return cls(head["method"], head["item_id"], scores, head.get("config_hash", ""),
                   head.get("noise_set"), head.get("meta") or {})


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def normalized_skew(l2, l1, epsilon: float = 1e-3):
    l2 = np.asarray(l2, dtype=np.float64)
    l1 = np.asarray(l1, dtype=np.float64)
    return (l2 - l1) / (np.abs(l2) + np.abs(l1) + epsilon)


def loss_matrix(model: ModelSnapshot, dataset: Dataset, sigmas: np.ndarray, noise: np.ndarray,
                chunk: int = 1000) -> np.ndarray:
    """L(z_i, sigma_j, n_j, F) for every instance i and pair j, shape (|Z|, |N|)."""
    k = len(sigmas)
    net = model.module()
    shape = dataset.x.shape[1:]
    per = max(1, chunk // k)
    sig = torch.tensor(np.asarray(sigmas, dtype=np.float32))
    nz = torch.tensor(np.asarray(noise, dtype=np.float32))
    out = np.empty((len(dataset), k), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(dataset), per):
            idx = np.arange(start, min(start + per, len(dataset)))
            x = dataset.x_batch(idx).repeat_interleave(k, dim=0)
            cond = dataset.cond_batch(idx)
            if cond is not None:
                cond = cond.repeat_interleave(k, dim=0)
            s = sig.repeat(len(idx))
            n = nz.repeat(len(idx), *([1] * len(shape)))
            out[idx] = per_sample_loss(net, x, cond, s, n, model.loss).double().numpy().reshape(len(idx), k)
    return out


class LossCache:
    """Memo for F1 loss matrices, which are shared by every generated item."""

    def __init__(self):
        self._store: dict[tuple[str, str, str], np.ndarray] = {}

    def get(self, model: ModelSnapshot, dataset: Dataset, pairs: NoisePairSet) -> np.ndarray:
        key = (model.digest(), dataset.manifest_hash(), pairs.digest())
        if key not in self._store:
            self._store[key] = loss_matrix(model, dataset, pairs.sigmas, pairs.noise)
        return self._store[key]


def _check_models(f1: ModelSnapshot, f2: ModelSnapshot, pairs: NoisePairSet | None):
    if f1.arch != f2.arch or f1.loss != f2.loss:
        raise ConfigError("F1 and F2 must share arch and loss configuration")
    if pairs is not None and pairs.provenance.get("loss") != f1.loss.to_dict():
        raise ConfigError("noise pair set was built for a different loss configuration")


def _result(method, dataset, z_hat, values, pairs, meta) -> AttributionResult:
    scores = {k: float(v) for k, v in zip(dataset.ids, values)}
    noise = pairs.describe() if pairs is not None else None
    return AttributionResult(method, z_hat.id, scores, config_hash({"method": method, "noise": noise, **meta}),
                             noise, meta)


def score_mucs(dataset: Dataset, z_hat: GeneratedItem, f1: ModelSnapshot, f2: ModelSnapshot,
               pairs: NoisePairSet, epsilon: float = 1e-3, cache: LossCache | None = None,
               method: str = "mucs") -> AttributionResult:
    _check_models(f1, f2, pairs)
    l1 = cache.get(f1, dataset, pairs) if cache else loss_matrix(f1, dataset, pairs.sigmas, pairs.noise)
    l2 = loss_matrix(f2, dataset, pairs.sigmas, pairs.noise)
    a = normalized_skew(l2, l1, epsilon).mean(axis=1)
    return _result(method, dataset, z_hat, a, pairs, {"epsilon": epsilon, "f1": f1.digest(), "f2": f2.digest()})


def _nonconsistent_matrix(model, dataset, sigma_pool: np.ndarray, k: int, gen: torch.Generator) -> np.ndarray:
    # fresh (sigma, n) for every instance and every loss evaluation
    out = np.empty((len(dataset), k))
    shape = dataset.x.shape[1:]
    for i in range(len(dataset)):
        pick = torch.randint(len(sigma_pool), (k,), generator=gen).numpy()
        noise = torch.randn((k, *shape), generator=gen).numpy()
        sub = Dataset((dataset.ids[i],), dataset.x[i:i + 1], None if dataset.c is None else dataset.c[i:i + 1])
        out[i] = loss_matrix(model, sub, sigma_pool[pick], noise)[0]
    return out


def score_variant(dataset: Dataset, z_hat: GeneratedItem, f1: ModelSnapshot, f2: ModelSnapshot, mode: str,
                  stream, pairs: NoisePairSet | None = None, epsilon: float = 1e-3,
                  cache: LossCache | None = None, target_size: int = 100, schedule_params=(0.002, 80.0, 7.0),
                  ) -> AttributionResult:
    """Scoring ablations, each changing exactly one ingredient of the default:

    ``subtraction``   mean of L2 - L1 over the same consistent pairs
    ``nonconsistent`` fresh (sigma, n) per instance and per loss evaluation
    ``train-sigma``   consistent pairs with log-normal training sigmas
    ``full-schedule`` keep the whole schedule (retention 1.0)
    """
    if mode not in SCORE_MODES:
        raise ConfigError(f"unknown scoring mode {mode!r}; expected one of {SCORE_MODES}")
    stream = as_stream(stream)
    shape = f1.arch.input_shape
    if pairs is None and mode in ("mucs", "subtraction", "nonconsistent"):
        pairs = build_noise_pair_set(f1.loss, schedule_params, target_size, 0.7, stream.child("pairs"), shape)
    method = "mucs" if mode == "mucs" else f"mucs[{mode}]"
    if mode == "mucs":
        return score_mucs(dataset, z_hat, f1, f2, pairs, epsilon, cache)
    if mode == "train-sigma":
        tp = training_noise_pair_set(f1.loss, target_size, stream.child("train-pairs"), shape)
        return score_mucs(dataset, z_hat, f1, f2, tp, epsilon, cache, method=method)
    if mode == "full-schedule":
        fp = build_noise_pair_set(f1.loss, schedule_params, target_size, 1.0, stream.child("full-pairs"), shape)
        return score_mucs(dataset, z_hat, f1, f2, fp, epsilon, cache, method=method)
    _check_models(f1, f2, pairs)
    meta = {"epsilon": epsilon, "f1": f1.digest(), "f2": f2.digest(), "mode": mode}
    if mode == "subtraction":
        l1 = cache.get(f1, dataset, pairs) if cache else loss_matrix(f1, dataset, pairs.sigmas, pairs.noise)
        l2 = loss_matrix(f2, dataset, pairs.sigmas, pairs.noise)
        return _result(method, dataset, z_hat, (l2 - l1).mean(axis=1), pairs, meta)
    gen = stream.child("nonconsistent", z_hat.id).torch()
    l1 = _nonconsistent_matrix(f1, dataset, pairs.sigmas, len(pairs), gen)
    l2 = _nonconsistent_matrix(f2, dataset, pairs.sigmas, len(pairs), gen)
    meta["stream"] = stream.key
    return _result(method, dataset, z_hat, normalized_skew(l2, l1, epsilon).mean(axis=1), pairs, meta)
