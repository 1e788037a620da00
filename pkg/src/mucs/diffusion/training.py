from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..data import Dataset, DatasetError
from .config import ArchConfig, LossConfig, TrainConfig
from .losses import NonFiniteLossError, draw_noise, per_sample_loss
from .network import Denoiser
from .snapshot import ModelSnapshot

log = logging.getLogger(__name__)


class TrainingDivergedError(NonFiniteLossError):
    def __init__(self, message: str, recent_losses: list[float]):
        super().__init__(message)
        self.recent_losses = recent_losses


class ShuffledIndex:
    """Uniform sampling without replacement; reshuffles once a pass is exhausted."""

    def __init__(self, n: int, gen: torch.Generator):
        if n < 1:
            raise DatasetError("cannot sample from an empty dataset")
        self.n = n
        self.gen = gen
        self._order = torch.empty(0, dtype=torch.long)
        self._pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self._pos >= len(self._order):
                self._order = torch.randperm(self.n, generator=self.gen)
                self._pos = 0
            chunk = self._order[self._pos:self._pos + count]
            self._pos += len(chunk)
            count -= len(chunk)
            out.append(chunk)
        return torch.cat(out).numpy()


def drop_conditions(net: Denoiser, cond, p: float, gen: torch.Generator):
    if cond is None or p <= 0:
        return cond
    mask = torch.rand(cond.shape[0], generator=gen) < p
    if not mask.any():
        return cond
    null = net.null_condition(cond.shape[0])
    if cond.ndim == 1:
        return torch.where(mask, null, cond)
    return torch.where(mask[:, None], null, cond)


def make_optimizer(params, cfg: TrainConfig, lr: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


@dataclass
class PretrainResult:
    f1: ModelSnapshot
    raw: ModelSnapshot
    f0: ModelSnapshot
    losses: list[float] = field(repr=False)

    def running_loss(self, window: int = 50) -> tuple[float, float]:
        """Mean loss over the first and the last ``window`` steps."""
        if not self.losses:
            return float("nan"), float("nan")
        w = min(window, len(self.losses))
        return float(np.mean(self.losses[:w])), float(np.mean(self.losses[-w:]))

    def save(self, directory: str | Path) -> dict[str, str]:
        d = Path(directory)
        paths = {}
        for name, snap in (("f0", self.f0), ("raw", self.raw), ("f1", self.f1)):
            paths[name] = str(snap.save(d / f"{name}.pt"))
        np.save(d / "train_losses.npy", np.asarray(self.losses, dtype=np.float64))
        return paths


def pretrain(dataset: Dataset, arch: ArchConfig, loss: LossConfig, cfg: TrainConfig,
             out_dir: str | Path | None = None) -> PretrainResult:
    """AdamW with linear warmup then constant lr; returns the EMA weights as F1."""
    if len(dataset) == 0:
        raise DatasetError("cannot pretrain on an empty dataset")
    if tuple(dataset.x.shape[1:]) != arch.input_shape:
        raise DatasetError(f"dataset items {dataset.x.shape[1:]} do not match arch {arch.input_shape}")
    f0 = ModelSnapshot.random_init(arch, loss, cfg.seed)
    net = f0.trainable()
    ema = {n: p.detach().clone() for n, p in net.named_parameters()}
    opt = make_optimizer(net.parameters(), cfg, cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    batches = ShuffledIndex(len(dataset), gen)
    recent: deque[float] = deque(maxlen=100)
    losses: list[float] = []
    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = cfg.lr * min(1.0, (step + 1) / cfg.warmup) if cfg.warmup else cfg.lr
        idx = batches.take(cfg.batch_size)
        x = dataset.x_batch(idx)
        cond = drop_conditions(net, dataset.cond_batch(idx), arch.cond_dropout, gen)
        sigma, n = draw_noise(len(idx), arch.input_shape, loss, gen)
        value = per_sample_loss(net, x, cond, sigma, n, loss).mean()
        lv = float(value.detach())
        recent.append(lv)
        if not math.isfinite(lv):
            raise TrainingDivergedError(f"non-finite training loss at step {step}", list(recent))
        losses.append(lv)
        opt.zero_grad(set_to_none=True)
        value.backward()
        opt.step()
        with torch.no_grad():
            for name, p in net.named_parameters():
                ema[name].mul_(cfg.ema).add_(p.detach(), alpha=1 - cfg.ema)
        if step % 500 == 0:
            log.debug("pretrain step %d loss %.4f", step, lv)
    prov = dict(seed=cfg.seed, steps=cfg.steps, dataset=dataset.manifest_hash()[:16], train=cfg.to_dict())
    raw = ModelSnapshot.from_module(net, loss, "raw", ema=False, **prov)
    f1 = ModelSnapshot(ema, arch, loss, "F1", dict(ema=True, ema_momentum=cfg.ema, **prov))
    result = PretrainResult(f1, raw, f0, losses)
    if out_dir is not None:
        result.save(out_dir)
    return result
