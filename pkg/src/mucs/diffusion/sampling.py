"""Deterministic 2nd-order Heun sampling with classifier-free guidance."""

from __future__ import annotations

import numpy as np
import torch

from ..data import GeneratedItem
from .config import ConfigError, GenerationSchedule
from .losses import _cond_tensor, denoise
from .snapshot import ModelSnapshot


def initial_latent(seed: int, shape: tuple[int, ...]) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def _guided(model: ModelSnapshot, x: torch.Tensor, sigma: float, cond, cfg_weight: float | None):
    net = model.module()
    xs = x.float()[None]
    s = torch.tensor([sigma], dtype=torch.float32)
    d_cond = denoise(net, xs, s, cond, model.loss)
    if cfg_weight is not None and cfg_weight != 1.0:
        d_unc = denoise(net, xs, s, net.null_condition(1), model.loss)
        d_cond = d_unc + cfg_weight * (d_cond - d_unc)
    return d_cond[0].double()


@torch.no_grad()
def sample(model: ModelSnapshot, seed: int, condition, schedule: GenerationSchedule,
           cfg_weight: float | None = None) -> np.ndarray:
    arch = model.arch
    if not arch.conditional and cfg_weight is not None:
        raise ConfigError("cfg_weight given for an unconditional model")
    cond = _cond_tensor(condition, arch)
    sigmas = list(schedule.values) + [0.0]
    x = initial_latent(seed, arch.input_shape) * sigmas[0]
    for i, (t_cur, t_next) in enumerate(zip(sigmas[:-1], sigmas[1:])):
        d = (x - _guided(model, x, t_cur, cond, cfg_weight)) / t_cur
        x_next = x + (t_next - t_cur) * d
        if t_next > 0:
            d2 = (x_next - _guided(model, x_next, t_next, cond, cfg_weight)) / t_next
            x_next = x + (t_next - t_cur) * (0.5 * d + 0.5 * d2)
        x = x_next
    return x.clamp(-1, 1).float().numpy()


def generate(model: ModelSnapshot, seed: int, condition, schedule: GenerationSchedule,
             cfg_weight: float | None = None, item_id: str | None = None) -> GeneratedItem:
    if model.role not in ("F1", "F2", "raw"):
        raise ConfigError(f"cannot generate from a {model.role} snapshot")
    x_hat = sample(model, seed, condition, schedule, cfg_weight)
    return GeneratedItem(
        id=item_id or f"gen-s{seed}",
        x_hat=x_hat,
        c_hat=condition,
        seed=int(seed),
        snapshot=model.digest(),
        schedule=(schedule.sigma_min, schedule.sigma_max, schedule.rho, schedule.num_steps),
        cfg_weight=cfg_weight,
    )
