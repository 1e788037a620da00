"""Desk-scale denoiser: conv encoder/decoder around conditioned MLP blocks."""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import ArchConfig, ConfigError

_FOURIER = 32
_COND_IN = 64

MASKS = {
    "mlp-only": ("cond_mlp", "block_mlp"),
    "blocks": ("cond_mlp", "block_mlp", "block_mod"),
    "all": ("encoder", "cond_embed", "cond_mlp", "block_mlp", "block_mod", "decoder"),
}


class _Block(nn.Module):
    def __init__(self, width: int, embed_dim: int, ratio: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False)
        self.mod = nn.Linear(embed_dim, 2 * width)
        self.mlp = nn.Sequential(nn.Linear(width, ratio * width), nn.SiLU(), nn.Linear(ratio * width, width))

    def forward(self, h, e):
        scale, shift = self.mod(e).chunk(2, dim=-1)
        return h + self.mlp(self.norm(h) * (1 + scale) + shift)


class Denoiser(nn.Module):
    """Raw network F(x_in, c_noise, cond).

    Preconditioning is applied by the loss variant, not here. The output
    convolution starts at zero so a fresh network predicts no correction.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        c, h, w = arch.input_shape
        ch = arch.enc_channels
        self._lat = (ch, h // 2, w // 2)
        flat = ch * (h // 2) * (w // 2)

        self.enc_in = nn.Conv2d(c, ch, 3, padding=1)
        self.enc_down = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
        self.enc_proj = nn.Linear(flat, arch.width)

        if arch.cond_mode == "class":
            self.cond_embed = nn.Embedding(arch.cond_dim + 1, _COND_IN)
        elif arch.cond_mode == "vector":
            self.cond_embed = nn.Linear(arch.cond_dim, _COND_IN)
        cond_in = 2 * _FOURIER + (_COND_IN if arch.conditional else 0)
        self.cond_mlp = nn.Sequential(
            nn.Linear(cond_in, arch.embed_dim), nn.SiLU(),
            nn.Linear(arch.embed_dim, arch.embed_dim), nn.SiLU())
        self.register_buffer(
            "freqs", 2 * math.pi * torch.logspace(-1, 1.5, _FOURIER), persistent=False)

        self.blocks = nn.ModuleList(
            _Block(arch.width, arch.embed_dim, arch.mlp_ratio) for _ in range(arch.num_blocks))

        self.dec_proj = nn.Linear(arch.width, flat)
        self.dec_up = nn.ConvTranspose2d(ch, ch, 4, stride=2, padding=1)
        self.dec_mix = nn.Conv2d(2 * ch, ch, 3, padding=1)
        self.dec_out = nn.Conv2d(ch, c, 3, padding=1)
        nn.init.zeros_(self.dec_out.weight)
        nn.init.zeros_(self.dec_out.bias)
        self.act = nn.SiLU()

    def null_condition(self, batch: int) -> torch.Tensor | None:
        if self.arch.cond_mode == "class":
            return torch.full((batch,), self.arch.cond_dim, dtype=torch.long)
        if self.arch.cond_mode == "vector":
            return torch.zeros(batch, self.arch.cond_dim)
        return None

    def forward(self, x_in: torch.Tensor, c_noise: torch.Tensor, cond: torch.Tensor | None = None):
        angles = c_noise.reshape(-1, 1) * self.freqs
        feats = [angles.sin(), angles.cos()]
        if self.arch.conditional:
            if cond is None:
                cond = self.null_condition(x_in.shape[0])
            feats.append(self.cond_embed(cond))
        e = self.cond_mlp(torch.cat(feats, dim=-1))

        skip = self.act(self.enc_in(x_in))
        h = self.enc_proj(self.act(self.enc_down(skip)).flatten(1))
        for block in self.blocks:
            h = block(h, e)
        u = self.act(self.dec_proj(h)).view(-1, *self._lat)
        u = self.act(self.dec_up(u))
        u = self.act(self.dec_mix(torch.cat([u, skip], dim=1)))
        return self.dec_out(u)


def group_of(name: str) -> str:
    """Parameter-group label for a named parameter of :class:`Denoiser`."""
    if name.startswith("enc_"):
        return "encoder"
    if name.startswith("dec_"):
        return "decoder"
    if name.startswith("cond_embed."):
        return "cond_embed"
    if name.startswith("cond_mlp."):
        return "cond_mlp"
    if name.startswith("blocks."):
        part = name.split(".")[2]
        if part == "mlp":
            return "block_mlp"
        if part == "mod":
            return "block_mod"
    raise KeyError(f"parameter {name!r} has no group")


def parameter_groups(net: nn.Module) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name, _ in net.named_parameters():
        groups.setdefault(group_of(name), []).append(name)
    return groups


def mask_names(net: nn.Module, mask: str) -> set[str]:
    if mask not in MASKS:
        raise ConfigError(f"unknown parameter mask {mask!r}; expected one of {sorted(MASKS)}")
    wanted = set(MASKS[mask])
    return {n for n, _ in net.named_parameters() if group_of(n) in wanted}
