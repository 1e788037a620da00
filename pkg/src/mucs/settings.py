"""INI configuration: the checked-in reference file overlaid by user files."""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .data import ToyDataSpec
from .diffusion.config import ArchConfig, ConfigError, LossConfig, TrainConfig
from .evaluation.harness import EvalConfig
from .unlearn import UnlearnConfig


def reference_text() -> str:
    return resources.files("mucs").joinpath("configs/reference.ini").read_text()


@dataclass
class Settings:
    parser: configparser.ConfigParser

    @classmethod
    def load(cls, paths=()) -> "Settings":
        cp = configparser.ConfigParser()
        cp.read_string(reference_text())
        known = {s: set(cp[s]) for s in cp.sections()}
        for path in paths:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            user = configparser.ConfigParser()
            try:
                user.read(path)
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {path}: {exc}".replace("\n", " ")) from exc
            for section in user.sections():
                if section not in known:
                    raise ConfigError(f"{path}: unknown section [{section}]")
                for key in user[section]:
                    if key not in known[section]:
                        raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                    cp[section][key] = user[section][key]
        return cls(cp)

    def _get(self, fn, section: str, key: str):
        try:
            return fn(section, key)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    def int(self, s, k) -> int:
        return self._get(self.parser.getint, s, k)

    def float(self, s, k) -> float:
        return self._get(self.parser.getfloat, s, k)

    def bool(self, s, k) -> bool:
        return self._get(self.parser.getboolean, s, k)

    def str(self, s, k) -> str:
        return self.parser.get(s, k)

    def optional_float(self, s, k) -> float | None:
        raw = self.parser.get(s, k).strip().lower()
        return None if raw in ("", "none", "off") else self.float(s, k)

    def data_spec(self) -> ToyDataSpec:
        return ToyDataSpec(self.int("data", "size"), self.int("data", "num_classes"), self.int("data", "image_size"),
                           self.bool("data", "conditional"), self.int("data", "seed"))

    def arch(self) -> ArchConfig:
        spec = self.data_spec()
        return ArchConfig(
            input_shape=(3, spec.image_size, spec.image_size),
            enc_channels=self.int("arch", "enc_channels"), width=self.int("arch", "width"),
            num_blocks=self.int("arch", "num_blocks"), mlp_ratio=self.int("arch", "mlp_ratio"),
            embed_dim=self.int("arch", "embed_dim"), cond_mode="class" if spec.conditional else "none",
            cond_dim=spec.num_classes, cond_dropout=self.float("arch", "cond_dropout"))

    def loss(self) -> LossConfig:
        return LossConfig(self.str("loss", "variant"), self.float("loss", "p_mean"), self.float("loss", "p_std"),
                          self.float("loss", "sigma_data"))

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig(self.int("train", "steps"), self.int("train", "batch_size"), self.float("train", "lr"),
                           self.int("train", "warmup"), self.float("train", "ema"),
                           self.float("train", "weight_decay"),
                           (self.float("train", "beta1"), self.float("train", "beta2")), seed)

    def schedule(self) -> tuple[float, float, float, int]:
        return (self.float("generate", "sigma_min"), self.float("generate", "sigma_max"),
                self.float("generate", "rho"), self.int("generate", "num_steps"))

    def cfg_weight(self) -> float | None:
        return self.optional_float("generate", "cfg_weight") if self.data_spec().conditional else None

    def unlearn(self) -> UnlearnConfig:
        return UnlearnConfig(lam=self.float("unlearn", "lam"), batch_size=self.int("unlearn", "batch_size"),
                             stop_fraction=self.float("unlearn", "stop_fraction"),
                             lr_factor=self.float("unlearn", "lr_factor"), max_steps=self.int("unlearn", "max_steps"),
                             mask=self.str("unlearn", "mask"))

    def eval(self, workers: int = 1, seed_consistency: bool | None = None) -> EvalConfig:
        metrics = tuple(m.strip() for m in self.str("eval", "metrics").split(",") if m.strip())
        sc = self.bool("eval", "seed_consistency") if seed_consistency is None else seed_consistency
        return EvalConfig(self.float("eval", "k_fraction"), self.int("eval", "m"), self.int("eval", "repeats"),
                          metrics, self.cfg_weight(), self.schedule(), self.int("generate", "seed_base"), sc,
                          self.float("eval", "seed_removal_fraction"), workers,
                          self.int("score", "target_size"), self.float("score", "retention"))

    def method_options(self, name: str) -> dict:
        if name == "forward-inf":
            return {"steps": self.int("baselines", "forward_inf_steps"), "lr": self.float("baselines", "forward_inf_lr"),
                    "num_draws": self.int("baselines", "forward_inf_draws")}
        if name == "mucs" or name.startswith(("mucs:", "u-", "s-")):
            return {"base": self.unlearn(), "epsilon": self.float("score", "epsilon")}
        return {}

    def snapshot(self) -> dict:
        return {s: dict(self.parser[s]) for s in self.parser.sections()}
