"""Leave-k-out counterfactual benchmark.

Per repeat: pretrain F1, generate m items from fixed seeds, then for every
arm attribute each item, remove the union of top-k instances, retrain from
scratch with a fixed retrain seed, regenerate from the same seeds and
conditions and record the paired similarities. All arms of a repeat share
F1, the generated items and the retrain seed.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..data import Dataset, DatasetError, GeneratedItem, remove_topk
from ..diffusion.config import ArchConfig, ConfigError, GenerationSchedule, LossConfig, TrainConfig, \
    build_generation_schedule
from ..diffusion.losses import NonFiniteLossError
from ..diffusion.sampling import generate
from ..diffusion.snapshot import ModelSnapshot
from ..diffusion.training import pretrain
from ..null_loss import NullLossEstimate, estimate_null_loss
from ..rng import Stream, as_stream
from ..scoring import AttributionResult, build_noise_pair_set
from .methods import RandomMethod, RepeatContext, make_method
from .report import EvalReport
from .similarity import METRICS, SimilaritySuite

log = logging.getLogger(__name__)

REFERENCE_ARM = "random-ref"


@dataclass(frozen=True)
class EvalConfig:
    k_fraction: float = 0.02
    m: int = 8
    repeats: int = 3
    metrics: tuple[str, ...] = METRICS
    cfg_weight: float | None = 1.5
    schedule: tuple[float, float, float, int] = (0.002, 80.0, 7.0, 32)
    seed_base: int = 0
    seed_consistency: bool = False
    seed_removal_fraction: float = 0.4
    workers: int = 1
    pair_size: int = 100
    retention: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(self, "schedule", tuple(self.schedule))
        if not 0 <= self.k_fraction < 1:
            raise ConfigError("k_fraction must lie in [0, 1)")
        if self.m < 1 or self.repeats < 1:
            raise ConfigError("m and repeats must be >= 1")
        if not 0 < self.seed_removal_fraction < 1:
            raise ConfigError("seed_removal_fraction must lie in (0, 1)")

    def generation_seeds(self, repeat: int) -> list[int]:
        return [self.seed_base + repeat * self.m + i for i in range(self.m)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = list(self.metrics)
        d["schedule"] = list(self.schedule)
        return d


@dataclass
class ArmOutcome:
    method: str
    repeat: int
    similarities: dict[str, list[float]]
    removed: int
    failed: str | None = None
    seconds: float = 0.0
    traces: list[dict] = field(default_factory=list)

    def to_record(self) -> dict:
        return asdict(self)


def _conditions(dataset: Dataset, arch: ArchConfig, count: int, stream: Stream) -> list:
    rng = stream.numpy()
    if not arch.conditional or dataset.c is None:
        return [None] * count
    if dataset.cond_mode == "class":
        return [int(v) for v in rng.integers(0, arch.cond_dim, count)]
    picks = rng.integers(0, len(dataset), count)
    return [np.asarray(dataset.c[i], dtype=np.float32) for i in picks]


def generate_items(f1: ModelSnapshot, seeds: Sequence[int], conditions: Sequence, schedule: GenerationSchedule,
                   cfg_weight: float | None, prefix: str = "gen") -> list[GeneratedItem]:
    cfg = cfg_weight if f1.arch.conditional else None
    return [generate(f1, s, c, schedule, cfg, item_id=f"{prefix}-s{s}") for s, c in zip(seeds, conditions)]


def _similarities(suite: SimilaritySuite, metrics, before: Sequence[GeneratedItem],
                  after: Sequence[GeneratedItem]) -> dict[str, list[float]]:
    return {name: [suite(name, a.x_hat, b.x_hat) for a, b in zip(before, after)] for name in metrics}


def _seed(stream: Stream) -> int:
    return stream.seed % (2 ** 31)


class Benchmark:
    """Shared state for one leave-k-out evaluation; ``workdir`` makes it
    resumable by caching every finished arm and every trained F1."""

    def __init__(self, dataset: Dataset, arch: ArchConfig, loss: LossConfig, train_config: TrainConfig,
                 eval_config: EvalConfig, stream, workdir: str | Path | None = None,
                 l_null: NullLossEstimate | None = None, progress: Callable[[str], None] | None = None):
        self.dataset = dataset
        self.arch = arch
        self.loss = loss
        self.train_config = train_config
        self.eval_config = eval_config
        self.stream = as_stream(stream)
        self.workdir = Path(workdir) if workdir is not None else None
        self.schedule = build_generation_schedule(*eval_config.schedule)
        self._l_null = l_null
        self._suite: SimilaritySuite | None = None
        self.progress = progress or (lambda msg: log.info(msg))

    @property
    def l_null(self) -> NullLossEstimate:
        if self._l_null is None:
            self._l_null = estimate_null_loss(self.dataset, self.arch, self.loss, self.stream.child("null"))
        return self._l_null

    @property
    def suite(self) -> SimilaritySuite:
        if self._suite is None:
            self._suite = SimilaritySuite.for_dataset(self.dataset, seed=_seed(self.stream.child("metrics")))
        return self._suite

    def fingerprint(self) -> dict:
        ec = self.eval_config.to_dict()
        ec.pop("workers")
        return {"eval": ec, "train": self.train_config.to_dict(), "arch": self.arch.to_dict(),
                "loss": self.loss.to_dict(), "dataset": self.dataset.manifest_hash(), "stream": self.stream.key}

    def _claim_workdir(self, methods: dict) -> None:
        # cached arms are only valid for the configuration that produced them
        if self.workdir is None:
            return
        path = self._cache("benchmark.json")
        mine = json.loads(json.dumps(self.fingerprint()))
        if path.exists():
            theirs = json.loads(path.read_text())
            if theirs["fingerprint"] != mine:
                raise ConfigError(f"{self.workdir} holds a benchmark with a different configuration")
            known = theirs["methods"]
        else:
            known = {}
        for name, m in methods.items():
            desc = repr(m)
            if known.get(name, desc) != desc:
                raise ConfigError(f"{self.workdir}: method {name!r} was cached with different options")
            known[name] = desc
        path.write_text(json.dumps({"fingerprint": mine, "methods": known}, indent=1))

    def _cache(self, *parts: str) -> Path | None:
        if self.workdir is None:
            return None
        path = self.workdir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def _train(self, dataset: Dataset, seed: int, tag: str) -> ModelSnapshot:
        path = self._cache(tag + ".pt")
        if path is not None and path.exists():
            snap = ModelSnapshot.load(path)
            if snap.provenance.get("dataset") == dataset.manifest_hash()[:16] and snap.provenance.get("seed") == seed:
                return snap
        t = time.time()
        snap = pretrain(dataset, self.arch, self.loss, replace(self.train_config, seed=seed)).f1
        self.progress(f"trained {tag} on {len(dataset)} instances in {time.time() - t:.0f}s")
        if path is not None:
            snap.save(path)
        return snap

    def repeat_setup(self, r: int) -> tuple[RepeatContext, list[GeneratedItem]]:
        rs = self.stream.child("repeat", r)
        f1 = self._train(self.dataset, _seed(rs.child("pretrain")), f"repeat{r}/f1")
        seeds = self.eval_config.generation_seeds(r)
        conds = _conditions(self.dataset, self.arch, len(seeds), rs.child("conditions"))
        items = generate_items(f1, seeds, conds, self.schedule, self.eval_config.cfg_weight)
        ec = self.eval_config
        pairs = build_noise_pair_set(self.loss, ec.schedule[:3], ec.pair_size, ec.retention, rs.child("pairs"),
                                     self.arch.input_shape)
        ctx = RepeatContext(r, self.dataset, f1, self.l_null, pairs, rs, replace(self.train_config))
        return ctx, items

    def run_arm(self, ctx: RepeatContext, items: list[GeneratedItem], name: str, method) -> ArmOutcome:
        path = self._cache(f"repeat{ctx.repeat}", f"arm-{name}.json")
        if path is not None and path.exists():
            return ArmOutcome(**json.loads(path.read_text()))
        t = time.time()
        k = self.eval_config.k_fraction
        ctx.traces.clear()
        try:
            results = [method(ctx, z) for z in items]
            if self.workdir is not None:
                for res in results:
                    res.save(self.workdir / f"repeat{ctx.repeat}" / "scores" / name / f"{res.item_id}.jsonl")
            if k == 0:
                # identical retrain set, identical model, identical generations
                retrained, removed = ctx.f1, 0
            else:
                reduced, removal = remove_topk(self.dataset, results, k)
                removed = len(removal.ids)
                retrained = self._train(reduced, _seed(ctx.stream.child("retrain")),
                                        f"repeat{ctx.repeat}/retrain-{name}")
            after = generate_items(retrained, [z.seed for z in items], [z.c_hat for z in items], self.schedule,
                                   self.eval_config.cfg_weight)
            sims = _similarities(self.suite, self.eval_config.metrics, items, after)
            outcome = ArmOutcome(name, ctx.repeat, sims, removed, None, time.time() - t, list(ctx.traces))
        except (NonFiniteLossError, DatasetError) as exc:
            log.warning("repeat %d arm %s failed: %s", ctx.repeat, name, exc)
            outcome = ArmOutcome(name, ctx.repeat, {}, 0, f"{type(exc).__name__}: {exc}", time.time() - t)
        if path is not None:
            path.write_text(json.dumps(outcome.to_record()))
        self.progress(f"repeat {ctx.repeat} arm {name}: {outcome.seconds:.0f}s"
                      + (f" FAILED {outcome.failed}" if outcome.failed else ""))
        return outcome

    def seed_consistency(self, ctx: RepeatContext, items: list[GeneratedItem]) -> dict[str, dict[str, list[float]]]:
        """Same-seed similarity across a random removal versus different-seed
        similarity within the full-data model, same conditions throughout."""
        path = self._cache(f"repeat{ctx.repeat}", "seed-consistency.json")
        if path is not None and path.exists():
            return json.loads(path.read_text())
        rng = ctx.stream.child("seed-removal").numpy()
        n_remove = int(round(self.eval_config.seed_removal_fraction * len(self.dataset)))
        drop = rng.choice(len(self.dataset), n_remove, replace=False)
        reduced = self.dataset.without([self.dataset.ids[i] for i in drop])
        f_red = self._train(reduced, _seed(ctx.stream.child("retrain")), f"repeat{ctx.repeat}/retrain-seed40")
        seeds = [z.seed for z in items]
        conds = [z.c_hat for z in items]
        cfg = self.eval_config.cfg_weight
        same = generate_items(f_red, seeds, conds, self.schedule, cfg)
        other_seeds = [s + 1_000_000 for s in seeds]
        other = generate_items(ctx.f1, other_seeds, conds, self.schedule, cfg, prefix="alt")
        out = {"same": _similarities(self.suite, self.eval_config.metrics, items, same),
               "different": _similarities(self.suite, self.eval_config.metrics, items, other)}
        if path is not None:
            path.write_text(json.dumps(out))
        return out

    def run_repeat(self, r: int, methods: dict[str, object]) -> tuple[list[ArmOutcome], dict | None]:
        ctx, items = self.repeat_setup(r)
        outcomes = [self.run_arm(ctx, items, name, m) for name, m in methods.items()]
        sc = self.seed_consistency(ctx, items) if self.eval_config.seed_consistency else None
        return outcomes, sc

    def run(self, method_names: Sequence[str], method_options: dict[str, dict] | None = None) -> EvalReport:
        method_options = method_options or {}
        methods = {REFERENCE_ARM: RandomMethod(REFERENCE_ARM)}
        for name in method_names:
            methods[name] = make_method(name, **method_options.get(name, {}))
        self._claim_workdir(methods)
        self.l_null  # estimate once, before any worker forks
        repeats = range(self.eval_config.repeats)
        if self.eval_config.workers > 1:
            with ProcessPoolExecutor(self.eval_config.workers) as pool:
                per_repeat = list(pool.map(_run_repeat_job, [(self, r, methods) for r in repeats]))
        else:
            per_repeat = [self.run_repeat(r, methods) for r in repeats]
        outcomes = [o for arm_list, _ in per_repeat for o in arm_list]
        seed_data = [sc for _, sc in per_repeat if sc is not None]
        meta = {"eval": self.eval_config.to_dict(), "train": self.train_config.to_dict(), "arch": self.arch.to_dict(),
                "loss": self.loss.to_dict(), "dataset": self.dataset.manifest_hash(), "stream": self.stream.key,
                "l_null": self.l_null.value,
                "generation_seeds": [self.eval_config.generation_seeds(r) for r in repeats],
                "method_options": method_options}
        return EvalReport.build(list(method_names), REFERENCE_ARM, outcomes, self.eval_config.metrics, meta,
                                seed_data)


def _run_repeat_job(args):
    bench, r, methods = args
    return bench.run_repeat(r, methods)


def run_leave_k_out(method: str, dataset: Dataset, arch: ArchConfig, loss: LossConfig, train_config: TrainConfig,
                    eval_config: EvalConfig, stream, workdir=None, method_options: dict | None = None) -> EvalReport:
    """Single-method convenience wrapper; the random arm is always included."""
    bench = Benchmark(dataset, arch, loss, train_config, eval_config, stream, workdir)
    return bench.run([method], {method: method_options or {}})
