"""Named attribution methods usable as leave-k-out arms.

Every method is a picklable object called with a per-repeat context and a
generated item. Unlearned models are cached on the context so that scoring
ablations of one unlearning run do not repeat it.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from ..baselines import (AutoencoderEmbedder, FlattenEmbedder, RandomProjectionEmbedder, attribute_condition_cosine,
                         attribute_embedding_cosine, attribute_forward_inf, attribute_random)
from ..data import Dataset, GeneratedItem
from ..diffusion.config import ConfigError, TrainConfig
from ..diffusion.snapshot import ModelSnapshot
from ..null_loss import NullLossEstimate
from ..rng import Stream
from ..scoring import SCORE_MODES, AttributionResult, LossCache, NoisePairSet, score_variant
from ..unlearn import StepCap, UnlearnConfig, UnlearnTrace, parse_mode, unlearn

# short codes for the ablation rows: U-* change unlearning, S-* change scoring
ABLATIONS: dict[str, tuple[str, str]] = {
    "u-c1-0.1": ("lambda=0.1", "mucs"),
    "u-c1-0.3": ("lambda=0.3", "mucs"),
    "u-c2": ("sigma-shift", "mucs"),
    "u-c3": ("fixed-steps=auto", "mucs"),
    "u-c4": ("mask=blocks", "mucs"),
    "s-c1": ("default", "subtraction"),
    "s-c2": ("default", "nonconsistent"),
    "s-c3": ("default", "train-sigma"),
    "s-c3-full": ("default", "full-schedule"),
}
ABLATION_LABELS = {
    "u-c1-0.1": "lambda = 0.1",
    "u-c1-0.3": "lambda = 0.3",
    "u-c2": "shifted sigma distribution",
    "u-c3": "no null loss, fixed mean step count",
    "u-c4": "unlearn full blocks",
    "s-c1": "loss subtraction",
    "s-c2": "non-consistent noise pairs",
    "s-c3": "sigma training distribution",
    "s-c3-full": "full sigma generation schedule",
}
BASELINES = ("random", "condition", "emb-flat", "emb-rp", "emb-ae", "forward-inf")


@dataclass
class RepeatContext:
    repeat: int
    dataset: Dataset
    f1: ModelSnapshot
    l_null: NullLossEstimate
    pairs: NoisePairSet
    stream: Stream
    train_config: TrainConfig
    cache: LossCache = field(default_factory=LossCache)
    unlearned: dict[tuple[str, str], tuple[ModelSnapshot, UnlearnTrace]] = field(default_factory=dict)
    step_cap: StepCap = field(default_factory=StepCap)
    shared: dict[str, Any] = field(default_factory=dict)
    traces: list[dict] = field(default_factory=list)

    def unlearn_item(self, z_hat: GeneratedItem, mode: str, base: UnlearnConfig) -> tuple[ModelSnapshot, UnlearnTrace]:
        key = (z_hat.id, mode)
        if key not in self.unlearned:
            if mode == "fixed-steps=auto":
                mode = f"fixed-steps={self.mean_default_steps(z_hat, base)}"
            cfg = parse_mode(mode, base)
            if cfg.fixed_steps is None:
                cfg = _with_cap(cfg, self.step_cap.value)
            f2, trace = unlearn(self.f1, z_hat, self.dataset, self.l_null, cfg,
                                self.stream.child("unlearn", z_hat.id), self.train_config)
            if mode == "default":
                self.step_cap.record(trace)
            rec = trace.to_record()
            rec.pop("rows")
            self.traces.append({"item": z_hat.id, **rec})
            self.unlearned[key] = (f2, trace)
        return self.unlearned[key]

    def mean_default_steps(self, z_hat: GeneratedItem, base: UnlearnConfig) -> int:
        steps = [t.steps for (item, mode), (_, t) in self.unlearned.items() if mode == "default"]
        if not steps:
            steps = [self.unlearn_item(z_hat, "default", base)[1].steps]
        return max(1, round(statistics.fmean(steps)))


def _with_cap(cfg: UnlearnConfig, cap: int) -> UnlearnConfig:
    return replace(cfg, max_steps=min(cfg.max_steps, cap))


@dataclass(frozen=True)
class Mucs:
    unlearn_mode: str = "default"
    score_mode: str = "mucs"
    name: str = "mucs"
    base: UnlearnConfig = UnlearnConfig()
    epsilon: float = 1e-3

    def __call__(self, ctx: RepeatContext, z_hat: GeneratedItem) -> AttributionResult:
        f2, trace = ctx.unlearn_item(z_hat, self.unlearn_mode, self.base)
        res = score_variant(ctx.dataset, z_hat, ctx.f1, f2, self.score_mode, ctx.stream.child("score", self.name),
                            pairs=ctx.pairs, epsilon=self.epsilon, cache=ctx.cache)
        res.method = self.name
        res.meta.update(unlearn_mode=self.unlearn_mode, unlearn_steps=trace.steps, stop_reason=trace.stop_reason)
        return res


@dataclass(frozen=True)
class RandomMethod:
    name: str = "random"

    def __call__(self, ctx: RepeatContext, z_hat: GeneratedItem) -> AttributionResult:
        res = attribute_random(ctx.dataset, ctx.stream.child(self.name, z_hat.id), z_hat.id)
        res.method = self.name
        return res


@dataclass(frozen=True)
class ConditionMethod:
    name: str = "condition"

    def __call__(self, ctx: RepeatContext, z_hat: GeneratedItem) -> AttributionResult:
        return attribute_condition_cosine(ctx.dataset, z_hat)


@dataclass(frozen=True)
class EmbeddingMethod:
    embedder: str = "flat"
    name: str = "emb-flat"

    def __call__(self, ctx: RepeatContext, z_hat: GeneratedItem) -> AttributionResult:
        key = f"embedder:{self.embedder}"
        if key not in ctx.shared:
            dim = int(np.prod(ctx.dataset.x.shape[1:]))
            seed = ctx.stream.child("embedder").seed % (2 ** 31)
            ctx.shared[key] = {"flat": FlattenEmbedder, "rp": lambda: RandomProjectionEmbedder(dim, 128, seed),
                               "ae": lambda: AutoencoderEmbedder.fit(ctx.dataset, seed=seed)}[self.embedder]()
        res = attribute_embedding_cosine(ctx.dataset, z_hat, ctx.shared[key])
        res.method = self.name
        return res


@dataclass(frozen=True)
class ForwardInfMethod:
    steps: int = 30
    lr: float = 1e-4
    num_draws: int = 100
    name: str = "forward-inf"

    def __call__(self, ctx: RepeatContext, z_hat: GeneratedItem) -> AttributionResult:
        res, trace = attribute_forward_inf(ctx.dataset, z_hat, ctx.f1, self.steps, self.lr,
                                           ctx.stream.child(self.name, z_hat.id), self.num_draws,
                                           l_null=ctx.l_null, train_config=ctx.train_config)
        rec = trace.to_record()
        rec.pop("rows")
        ctx.traces.append({"item": z_hat.id, **rec})
        return res


def make_method(name: str, **options):
    """Resolve a method name: a baseline, ``mucs``, an ablation code, or
    ``mucs:<unlearn mode>:<score mode>``."""
    if name == "mucs":
        return Mucs(**options)
    if name in ABLATIONS:
        u, s = ABLATIONS[name]
        return Mucs(u, s, name, **options)
    if name.startswith("mucs:"):
        parts = name.split(":")
        if len(parts) != 3:
            raise ConfigError(f"expected mucs:<unlearn mode>:<score mode>, got {name!r}")
        if parts[2] not in SCORE_MODES:
            raise ConfigError(f"unknown scoring mode {parts[2]!r}")
        if parts[1] != "fixed-steps=auto":
            parse_mode(parts[1])
        return Mucs(parts[1], parts[2], name, **options)
    if name == "random" or name.startswith("random-"):
        return RandomMethod(name)
    if name == "condition":
        return ConditionMethod()
    if name in ("emb-flat", "emb-rp", "emb-ae"):
        return EmbeddingMethod(name[4:], name)
    if name == "forward-inf":
        return ForwardInfMethod(**options)
    raise ConfigError(f"unknown method {name!r}; expected mucs, an ablation code {sorted(ABLATIONS)} "
                      f"or one of {BASELINES}")
