"""Keyed random streams.

Every consumer of randomness gets its own stream derived from
``(root, purpose, index)``, so concurrent or reordered consumers never share
state and any single stream can be replayed in isolation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class Stream:
    root: int
    path: tuple[str, ...] = ()

    def child(self, purpose: str, index: int | str = 0) -> "Stream":
        return Stream(self.root, self.path + (f"{purpose}:{index}",))

    @property
    def key(self) -> str:
        return "/".join((str(self.root),) + self.path)

    @property
    def seed(self) -> int:
        digest = hashlib.blake2b(self.key.encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF

    def torch(self) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(self.seed)
        return gen

    def numpy(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def as_stream(value: "Stream | int") -> Stream:
    if isinstance(value, Stream):
        return value
    return Stream(int(value))
