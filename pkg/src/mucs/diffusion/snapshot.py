from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Literal, Mapping

import torch

from .config import ArchConfig, LossConfig
from .network import Denoiser

FORMAT_VERSION = 1
Role = Literal["F0", "F1", "F2", "raw"]


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModelSnapshot:
    """Immutable denoiser weights plus the configs needed to rebuild them.

    Tensors are cloned on the way in and on the way out; use :meth:`module`
    for a cached read-only network and :meth:`trainable` for a private copy.
    """

    weights: Mapping[str, torch.Tensor]
    arch: ArchConfig
    loss: LossConfig
    role: Role
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {k: v.detach().clone().requires_grad_(False) for k, v in self.weights.items()}
        expected = {n: p.shape for n, p in Denoiser(self.arch).named_parameters()}
        got = {n: t.shape for n, t in frozen.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            raise CheckpointError(f"weights do not match arch registry (missing={missing}, extra={extra})")
        object.__setattr__(self, "weights", MappingProxyType(frozen))
        object.__setattr__(self, "provenance", MappingProxyType(dict(self.provenance)))
        object.__setattr__(self, "_module", None)
        object.__setattr__(self, "_digest", None)

    @classmethod
    def from_module(cls, net: Denoiser, loss: LossConfig, role: Role, **provenance) -> "ModelSnapshot":
        return cls({n: p for n, p in net.named_parameters()}, net.arch, loss, role, provenance)

    @classmethod
    def random_init(cls, arch: ArchConfig, loss: LossConfig, seed: int) -> "ModelSnapshot":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = Denoiser(arch)
        return cls.from_module(net, loss, "F0", seed=seed, steps=0, ema=False)

    def module(self) -> Denoiser:
        if self._module is None:
            net = self._build()
            net.requires_grad_(False)
            net.eval()
            object.__setattr__(self, "_module", net)
        return self._module

    def trainable(self) -> Denoiser:
        net = self._build()
        net.train()
        return net

    def _build(self) -> Denoiser:
        net = Denoiser(self.arch)
        with torch.no_grad():
            for name, p in net.named_parameters():
                p.copy_(self.weights[name])
        return net

    def with_role(self, role: Role, **provenance) -> "ModelSnapshot":
        prov = dict(self.provenance)
        prov.update(provenance)
        return ModelSnapshot(self.weights, self.arch, self.loss, role, prov)

    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.sha256()
            h.update(repr(sorted(self.arch.to_dict().items())).encode())
            h.update(repr(sorted(self.loss.to_dict().items())).encode())
            for name in sorted(self.weights):
                h.update(name.encode())
                h.update(self.weights[name].contiguous().numpy().tobytes())
            object.__setattr__(self, "_digest", h.hexdigest()[:16])
        return self._digest

    def same_weights(self, other: "ModelSnapshot") -> bool:
        return self.weights.keys() == other.weights.keys() and all(
            torch.equal(self.weights[k], other.weights[k]) for k in self.weights)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format_version": FORMAT_VERSION,
            "weights": dict(self.weights),
            "arch": self.arch.to_dict(),
            "loss": self.loss.to_dict(),
            "role": self.role,
            "provenance": dict(self.provenance),
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ModelSnapshot":
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        version = payload.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format_version {version!r}")
        return cls(payload["weights"], ArchConfig(**payload["arch"]), LossConfig(**payload["loss"]),
                   payload["role"], payload["provenance"])
