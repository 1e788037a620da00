"""Image similarity metrics used to compare pre/post-retrain generations.

``ssim`` is the Gaussian-windowed structural similarity. The cosine metrics
are small-scale stand-ins for learned perceptual embeddings and should not
be read as faithful substitutes.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..baselines import AutoencoderEmbedder, Embedder, FlattenEmbedder, RandomProjectionEmbedder, cosine_rows
from ..data import Dataset
from ..diffusion.config import ConfigError

METRICS = ("ssim", "cos-ae", "cos-rp", "cos-flat")
# which reported role each stand-in occupies
ROLES = {"ssim": "SSIM", "cos-ae": "SSCD (stand-in)", "cos-rp": "LPIPS (stand-in)", "cos-flat": "CLIP (stand-in)"}


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 2.0, win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over channels of (C, H, W) images; population covariances,
    11x11 Gaussian window evaluated where it fits inside the image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"geometry mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < win:
        raise ConfigError(f"images smaller than the {win}x{win} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = _gaussian_window(win, sigma)
    vals = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        vx = _filter_valid(x * x, g) - mx * mx
        vy = _filter_valid(y * y, g) - my * my
        cxy = _filter_valid(x * y, g) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


class SimilaritySuite:
    """Named similarity functions sharing one set of fitted embedders."""

    def __init__(self, embedders: dict[str, Embedder]):
        self.embedders = embedders

    @classmethod
    def for_dataset(cls, dataset: Dataset, seed: int = 0, ae_steps: int = 800) -> "SimilaritySuite":
        dim = int(np.prod(dataset.x.shape[1:]))
        return cls({
            "cos-ae": AutoencoderEmbedder.fit(dataset, steps=ae_steps, seed=seed),
            "cos-rp": RandomProjectionEmbedder(dim, 128, seed),
            "cos-flat": FlattenEmbedder(),
        })

    @property
    def names(self) -> tuple[str, ...]:
        return ("ssim", *self.embedders)

    def metric(self, name: str) -> Callable[[np.ndarray, np.ndarray], float]:
        if name == "ssim":
            return ssim
        if name not in self.embedders:
            raise ConfigError(f"unknown similarity {name!r}; expected one of {self.names}")
        emb = self.embedders[name]

        def cos(a, b):
            a = np.asarray(a)
            b = np.asarray(b)
            if a.shape != b.shape:
                raise ConfigError(f"geometry mismatch: {a.shape} vs {b.shape}")
            ea = emb.embed(a[None])
            return float(cosine_rows(ea, emb.embed(b[None])[0])[0])

        return cos

    def __call__(self, name: str, a, b) -> float:
        return self.metric(name)(a, b)


def builtin_similarity(name: str, x_a, x_b, suite: SimilaritySuite | None = None) -> float:
    if name == "ssim":
        return ssim(x_a, x_b)
    if name == "cos-flat":
        return SimilaritySuite({"cos-flat": FlattenEmbedder()})(name, x_a, x_b)
    if suite is None:
        raise ConfigError(f"similarity {name!r} needs a fitted SimilaritySuite")
    return suite(name, x_a, x_b)
