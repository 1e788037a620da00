"""Null (random-performance) loss of a freshly initialised denoiser."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import Dataset, DatasetError
from .diffusion.config import ArchConfig, ConfigError, LossConfig
from .diffusion.losses import NonFiniteLossError, draw_noise, per_sample_loss
from .diffusion.snapshot import ModelSnapshot
from .diffusion.training import ShuffledIndex
from .rng import as_stream


@dataclass(frozen=True)
class NullLossEstimate:
    value: float
    num_realizations: int
    batch_means: tuple[float, ...]
    snapshot: str
    f0_seed: int | None
    stream_key: str

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ConfigError(f"null loss must be finite and non-negative, got {self.value}")

    @property
    def standard_error(self) -> float:
        m = np.asarray(self.batch_means)
        if len(m) < 2:
            return float("nan")
        return float(m.std(ddof=1) / math.sqrt(len(m)))

    def to_record(self) -> dict:
        return {"value": self.value, "num_realizations": self.num_realizations,
                "batch_means": list(self.batch_means), "snapshot": self.snapshot,
                "f0_seed": self.f0_seed, "stream_key": self.stream_key,
                "standard_error": self.standard_error}

    @classmethod
    def from_record(cls, rec: dict) -> "NullLossEstimate":
        return cls(rec["value"], rec["num_realizations"], tuple(rec["batch_means"]), rec["snapshot"],
                   rec["f0_seed"], rec["stream_key"])


def batch_losses(dataset: Dataset, model, loss: LossConfig, stream, batch_size: int,
                 num_batches: int) -> list[np.ndarray]:
    """Per-sample losses over ``num_batches`` batches of fresh (z, sigma, n) draws."""
    gen = stream.torch()
    order = ShuffledIndex(len(dataset), gen)
    shape = tuple(dataset.x.shape[1:])
    out = []
    with torch.no_grad():
        for _ in range(num_batches):
            idx = order.take(batch_size)
            sigma, n = draw_noise(batch_size, shape, loss, gen)
            values = per_sample_loss(model, dataset.x_batch(idx), dataset.cond_batch(idx), sigma, n, loss)
            out.append((values.double().numpy(), sigma.numpy()))
    return out


def estimate_null_loss(dataset: Dataset, arch: ArchConfig, loss: LossConfig, stream, *,
                       batch_size: int = 100, num_batches: int = 20,
                       f0: ModelSnapshot | None = None, denoiser=None) -> NullLossEstimate:
    """Mean loss of a random-init model over ``batch_size * num_batches`` draws.

    ``denoiser`` replaces the network with any clean-data predictor
    ``(x_noisy, sigma, cond) -> x``; it exists for plumbing checks.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot estimate the null loss on an empty dataset")
    if batch_size < 1 or num_batches < 1:
        raise ConfigError("batch_size and num_batches must be >= 1")
    stream = as_stream(stream)
    if f0 is None:
        f0 = ModelSnapshot.random_init(arch, loss, stream.child("f0").seed)
    elif f0.role != "F0":
        raise ConfigError(f"null loss needs a random-init F0 snapshot, got role {f0.role}")
    if f0.arch != arch or f0.loss != loss:
        raise ConfigError("F0 snapshot does not match the requested arch/loss")
    model = denoiser if denoiser is not None else f0.module()
    batches = batch_losses(dataset, model, loss, stream.child("draws"), batch_size, num_batches)
    seed = f0.provenance.get("seed")
    means = []
    total = 0.0
    for values, sigma in batches:
        bad = ~np.isfinite(values)
        if bad.any():
            raise NonFiniteLossError(f"non-finite null loss from F0 seed {seed}", sigma=float(sigma[bad][0]))
        total += float(values.sum())
        means.append(float(values.mean()))
    return NullLossEstimate(total / (batch_size * num_batches), batch_size * num_batches, tuple(means),
                            f0.digest(), seed, stream.key)


def analytic_edm_null_loss(loss: LossConfig, data_second_moment: float | None = None,
                           order: int = 80) -> float:
    """Expected EDM loss of a network whose raw output is identically zero.

    With per-dimension data second moment ``m`` the weighted error at sigma is
    (m sigma^2 + sd^4) / (sd^2 (sigma^2 + sd^2)); it equals 1 when m = sd^2.
    The log-normal expectation is taken by Gauss-Hermite quadrature.
    """
    if loss.variant != "edm":
        raise ConfigError("analytic null loss is only defined for the EDM variant")
    sd2 = loss.sigma_data ** 2
    m = sd2 if data_second_moment is None else data_second_moment
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    s2 = np.exp(2 * (loss.p_mean + loss.p_std * nodes))
    vals = (m * s2 + sd2 ** 2) / (sd2 * (s2 + sd2))
    return float((weights * vals).sum() / weights.sum())
