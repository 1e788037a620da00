"""Mirrored unlearning: fine-tune on the training set while pushing the
generated item's loss up towards, and never past, the null loss."""

from __future__ import annotations

import dataclasses
import math
import re
import statistics
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset, GeneratedItem
from .diffusion.config import ConfigError, LossConfig, TrainConfig
from .diffusion.losses import NonFiniteLossError, _cond_tensor, draw_noise, per_sample_loss
from .diffusion.network import mask_names
from .diffusion.snapshot import ModelSnapshot
from .diffusion.training import ShuffledIndex, make_optimizer
from .null_loss import NullLossEstimate
from .rng import as_stream


@dataclass(frozen=True)
class UnlearnConfig:
    lam: float = 0.2
    batch_size: int = 100
    stop_fraction: float = 0.95
    lr_factor: float = 0.1
    max_steps: int = 2000
    mask: str = "mlp-only"
    # switches used by ablations and by the gradient-ascent-only baseline
    clamp: bool = True
    stop_rule: bool = True
    fine_tune: bool = True
    fixed_steps: int | None = None
    sigma_shift: float = 0.0
    lr: float | None = None
    mode: str = "default"

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lam}")
        if not 0 < self.stop_fraction < 1:
            raise ConfigError("stop_fraction must lie in (0, 1)")
        if self.max_steps < 1 or self.batch_size < 1:
            raise ConfigError("max_steps and batch_size must be >= 1")
        if self.fixed_steps is not None and self.fixed_steps < 0:
            raise ConfigError("fixed_steps must be >= 0")


class UnlearningError(NonFiniteLossError):
    def __init__(self, message: str, trace: "UnlearnTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class UnlearnTrace:
    mode: str
    l_null: float
    lam: float
    rows: list[tuple[float, float, float]] = field(default_factory=list)
    stop_reason: str = ""
    final_ft: float = float("nan")
    final_ga: float = float("nan")

    @property
    def steps(self) -> int:
        return len(self.rows)

    def ga_terms(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_record(self) -> dict:
        return {"mode": self.mode, "l_null": self.l_null, "lambda": self.lam, "steps": self.steps,
                "stop_reason": self.stop_reason, "final_ft": self.final_ft, "final_ga": self.final_ga,
                "rows": [list(r) for r in self.rows]}


class StepCap:
    """Safety cap: 20x the running median of threshold-stop step counts."""

    def __init__(self, bootstrap: int = 2000, factor: int = 20):
        self.bootstrap = bootstrap
        self.factor = factor
        self.history: list[int] = []

    def record(self, trace: UnlearnTrace) -> None:
        if trace.stop_reason == "threshold":
            self.history.append(trace.steps)

    @property
    def value(self) -> int:
        if not self.history:
            return self.bootstrap
        return max(1, int(self.factor * statistics.median(self.history)))


_MODE = re.compile(r"^(?P<key>[a-z-]+)(?:[=(](?P<val>[^)]*)\)?)?$")


def parse_mode(mode: str, base: UnlearnConfig = UnlearnConfig()) -> UnlearnConfig:
    """Apply ``+``-joined ablation switches, e.g. ``"lambda=0.1"`` or
    ``"ga-only+fixed-steps=50"``."""
    cfg = base
    for part in filter(None, (p.strip() for p in mode.split("+"))):
        m = _MODE.match(part)
        if not m:
            raise ConfigError(f"unknown unlearning mode {part!r}")
        key, val = m.group("key"), m.group("val")
        if key == "default":
            continue
        if key == "lambda" and val:
            cfg = dataclasses.replace(cfg, lam=float(val))
        elif key == "sigma-shift":
            cfg = dataclasses.replace(cfg, sigma_shift=float(val) if val else 0.3)
        elif key == "fixed-steps" and val:
            cfg = dataclasses.replace(cfg, fixed_steps=int(val), clamp=False, stop_rule=False)
        elif key == "mask" and val:
            cfg = dataclasses.replace(cfg, mask=val)
        elif key == "ga-only":
            cfg = dataclasses.replace(cfg, fine_tune=False)
        else:
            raise ConfigError(f"unknown unlearning mode {part!r}")
    return dataclasses.replace(cfg, mode=mode or "default")


def pretrain_config_of(f1: ModelSnapshot) -> TrainConfig:
    train = f1.provenance.get("train")
    if train is None:
        raise ConfigError("F1 snapshot does not record its pretraining configuration")
    return TrainConfig(**train)


def unlearn(f1: ModelSnapshot, z_hat: GeneratedItem, dataset: Dataset, l_null: NullLossEstimate | None,
            config: UnlearnConfig, stream, train_config: TrainConfig | None = None
            ) -> tuple[ModelSnapshot, UnlearnTrace]:
    """Minimise E[L(z)] - lam * E[min(L(z_hat), L_null)] until the clamped
    gradient-ascent term reaches ``stop_fraction * L_null``.

    The stop rule is checked before each update, so an item that already
    sits at null performance costs zero steps.
    """
    if f1.role != "F1":
        raise ConfigError(f"unlearning starts from an F1 snapshot, got {f1.role}")
    if l_null is None and (config.clamp or config.stop_rule):
        raise ConfigError("the clamp and the stop rule need a null-loss estimate")
    if l_null is not None and not l_null.value > 0:
        raise ConfigError("a zero null loss leaves nothing to unlearn towards")
    train_config = train_config or pretrain_config_of(f1)
    stream = as_stream(stream)
    gen = stream.torch()
    loss_cfg: LossConfig = f1.loss
    if config.sigma_shift:
        loss_cfg = dataclasses.replace(loss_cfg, p_mean=loss_cfg.p_mean + config.sigma_shift)

    net = f1.trainable()
    trainable = mask_names(net, config.mask)
    params = []
    for name, p in net.named_parameters():
        p.requires_grad_(name in trainable)
        if name in trainable:
            params.append(p)
    lr = config.lr if config.lr is not None else config.lr_factor * train_config.lr
    opt = make_optimizer(params, train_config, lr)

    b = config.batch_size
    shape = f1.arch.input_shape
    x_hat = torch.as_tensor(np.asarray(z_hat.x_hat, dtype=np.float32))[None].expand(b, *shape)
    c_hat = _cond_tensor(z_hat.c_hat, f1.arch)
    if c_hat is not None:
        c_hat = c_hat.expand(b, *c_hat.shape[1:])
    order = ShuffledIndex(len(dataset), gen)
    null = l_null.value if l_null is not None else float("nan")
    threshold = config.stop_fraction * null
    trace = UnlearnTrace(config.mode, null, config.lam)
    limit = config.fixed_steps if config.fixed_steps is not None else config.max_steps

    while True:
        if config.fine_tune:
            idx = order.take(b)
            sigma, n = draw_noise(b, shape, loss_cfg, gen)
            l_ft = per_sample_loss(net, dataset.x_batch(idx), dataset.cond_batch(idx), sigma, n, loss_cfg).mean()
        else:
            l_ft = torch.zeros(())
        sigma, n = draw_noise(b, shape, loss_cfg, gen)
        ga = per_sample_loss(net, x_hat, c_hat, sigma, n, loss_cfg)
        l_ga = (ga.clamp(max=null) if config.clamp else ga).mean()
        ft_v, ga_v = float(l_ft.detach()), float(l_ga.detach())
        trace.final_ft, trace.final_ga = ft_v, ga_v
        if config.stop_rule and ga_v >= threshold:
            trace.stop_reason = "threshold"
            break
        if trace.steps >= limit:
            trace.stop_reason = "fixed" if config.fixed_steps is not None else "cap"
            break
        objective = l_ft - config.lam * l_ga
        obj_v = float(objective.detach())
        if not math.isfinite(obj_v):
            trace.stop_reason = "diverged"
            raise UnlearningError(f"non-finite unlearning objective at step {trace.steps}", trace)
        opt.zero_grad(set_to_none=True)
        objective.backward()
        opt.step()
        trace.rows.append((ft_v, ga_v, obj_v))

    prov = dict(f1.provenance)
    prov.update(item=z_hat.id, mode=config.mode, unlearn_steps=trace.steps, stop_reason=trace.stop_reason,
                parent=f1.digest())
    f2 = ModelSnapshot.from_module(net, f1.loss, "F2", **prov)
    return f2, trace


def unlearn_variant(f1: ModelSnapshot, z_hat: GeneratedItem, dataset: Dataset, l_null: NullLossEstimate,
                    mode: str, stream, base: UnlearnConfig = UnlearnConfig(),
                    train_config: TrainConfig | None = None) -> tuple[ModelSnapshot, UnlearnTrace]:
    return unlearn(f1, z_hat, dataset, l_null, parse_mode(mode, base), stream, train_config)
