"""Comparator attribution methods: random, condition and embedding cosine,
and gradient ascent on the generated item scored by loss subtraction."""

from __future__ import annotations

import math
from typing import Protocol

import numpy as np
import torch
from torch import nn

from .data import Dataset, GeneratedItem
from .diffusion.config import ConfigError, TrainConfig
from .diffusion.losses import draw_noise
from .diffusion.snapshot import ModelSnapshot
from .null_loss import NullLossEstimate
from .rng import as_stream
from .scoring import AttributionResult, config_hash, loss_matrix
from .unlearn import UnlearnConfig, UnlearnTrace, unlearn


class Embedder(Protocol):
    name: str

    def embed(self, x: np.ndarray) -> np.ndarray: ...


class FlattenEmbedder:
    name = "flat"

    def embed(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(x.shape[0], -1)


class RandomProjectionEmbedder:
    """Fixed Gaussian projection of the flattened pixels."""

    name = "rp"

    def __init__(self, input_dim: int = 768, dim: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((input_dim, dim)) / math.sqrt(dim)

    def embed(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        if flat.shape[1] != self.matrix.shape[0]:
            raise ConfigError(f"embedder expects {self.matrix.shape[0]} inputs, got {flat.shape[1]}")
        return flat @ self.matrix


class _AE(nn.Module):
    def __init__(self, channels: int, latent: int):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(channels, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Flatten(), nn.LazyLinear(latent))
        self.dec_in = nn.LazyLinear(32 * 4 * 4)
        self.dec = nn.Sequential(
            nn.SiLU(), nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(16, channels, 4, stride=2, padding=1))

    def forward(self, x):
        z = self.enc(x)
        return self.dec(self.dec_in(z).view(-1, 32, 4, 4)), z


class AutoencoderEmbedder:
    """Latent code of a small conv autoencoder fitted to the training images."""

    name = "ae"

    def __init__(self, model: _AE, input_shape):
        self.model = model.eval().requires_grad_(False)
        self.input_shape = tuple(input_shape)

    @classmethod
    def fit(cls, dataset: Dataset, latent: int = 32, steps: int = 800, batch_size: int = 64,
            lr: float = 2e-3, seed: int = 0) -> "AutoencoderEmbedder":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = _AE(dataset.x.shape[1], latent)
            model(dataset.x_batch([0]))
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        gen = torch.Generator().manual_seed(seed)
        for _ in range(steps):
            idx = torch.randint(len(dataset), (batch_size,), generator=gen).numpy()
            x = dataset.x_batch(idx)
            recon, _ = model(x)
            loss = (recon - x).pow(2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        return cls(model, dataset.x.shape[1:])

    def embed(self, x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=np.float32)
        if x.shape[1:] != self.input_shape:
            raise ConfigError(f"embedder expects {self.input_shape}, got {x.shape[1:]}")
        with torch.no_grad():
            _, z = self.model(torch.from_numpy(x))
        return z.double().numpy()


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine between each row of ``a`` and the single vector ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"dimension mismatch: {a.shape[1]} vs {b.shape[0]}")
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b)
    dots = a @ b
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def _wrap(method: str, dataset: Dataset, item_id: str, values, meta) -> AttributionResult:
    scores = {k: float(v) for k, v in zip(dataset.ids, values)}
    return AttributionResult(method, item_id, scores, config_hash({"method": method, **meta}), None, meta)


def attribute_random(dataset: Dataset, stream, item_id: str = "") -> AttributionResult:
    stream = as_stream(stream)
    values = stream.numpy().uniform(size=len(dataset))
    return _wrap("random", dataset, item_id, values, {"stream": stream.key})


def _condition_matrix(dataset: Dataset, num_classes: int | None = None) -> np.ndarray:
    if dataset.cond_mode == "class":
        k = num_classes or int(dataset.c.max()) + 1
        return np.eye(k)[dataset.c]
    return np.asarray(dataset.c, dtype=np.float64)


def attribute_condition_cosine(dataset: Dataset, z_hat: GeneratedItem) -> AttributionResult:
    if dataset.c is None:
        raise ConfigError("condition cosine needs a conditional dataset")
    if z_hat.c_hat is None:
        raise ConfigError("generated item carries no condition")
    if dataset.cond_mode == "class":
        k = max(int(dataset.c.max()), int(z_hat.c_hat)) + 1
        mat = _condition_matrix(dataset, k)
        target = np.eye(k)[int(z_hat.c_hat)]
    else:
        mat = _condition_matrix(dataset)
        target = np.asarray(z_hat.c_hat, dtype=np.float64)
    return _wrap("condition", dataset, z_hat.id, cosine_rows(mat, target), {})


def attribute_embedding_cosine(dataset: Dataset, z_hat: GeneratedItem, embedder: Embedder) -> AttributionResult:
    emb = embedder.embed(dataset.x)
    target = embedder.embed(np.asarray(z_hat.x_hat)[None])[0]
    return _wrap(f"cos-{embedder.name}", dataset, z_hat.id, cosine_rows(emb, target), {"embedder": embedder.name})


def forward_inf_config(steps: int, lr: float) -> UnlearnConfig:
    return UnlearnConfig(lam=1.0, mask="all", clamp=False, stop_rule=False, fine_tune=False,
                         fixed_steps=steps, lr=lr, mode=f"forward-inf(steps={steps},lr={lr})")


def attribute_forward_inf(dataset: Dataset, z_hat: GeneratedItem, f1: ModelSnapshot, steps: int, lr: float,
                          stream, num_draws: int = 100, l_null: NullLossEstimate | None = None,
                          train_config: TrainConfig | None = None,
                          ) -> tuple[AttributionResult, UnlearnTrace]:
    """Unbounded gradient ascent on the generated item for a fixed number of
    steps, then mean loss differences over fresh, non-shared draws."""
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    stream = as_stream(stream)
    f2, trace = unlearn(f1, z_hat, dataset, l_null, forward_inf_config(steps, lr), stream.child("ga"),
                        train_config)
    shape = f1.arch.input_shape
    means = []
    for tag, model in (("f1", f1), ("f2", f2)):
        gen = stream.child("draws", tag).torch()
        vals = np.empty(len(dataset))
        for i in range(len(dataset)):
            sigma, n = draw_noise(num_draws, shape, f1.loss, gen)
            sub = Dataset((dataset.ids[i],), dataset.x[i:i + 1], None if dataset.c is None else dataset.c[i:i + 1])
            vals[i] = loss_matrix(model, sub, sigma.numpy(), n.numpy())[0].mean()
        means.append(vals)
    meta = {"steps": steps, "lr": lr, "num_draws": num_draws, "f2": f2.digest(), "stream": stream.key}
    return _wrap("forward-inf", dataset, z_hat.id, means[1] - means[0], meta), trace
