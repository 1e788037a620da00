"""Datasets, generated items and leave-k-out removal bookkeeping."""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingInstance:
    id: str
    x: np.ndarray
    c: Any = None


@dataclass(frozen=True, eq=False)
class GeneratedItem:
    id: str
    x_hat: np.ndarray
    c_hat: Any
    seed: int
    snapshot: str
    schedule: tuple[float, float, float, int]
    cfg_weight: float | None = None

    def to_record(self) -> dict:
        return {
            "id": self.id, "c_hat": _jsonable(self.c_hat), "seed": self.seed,
            "snapshot": self.snapshot, "schedule": list(self.schedule), "cfg_weight": self.cfg_weight,
            "x_hat": np.asarray(self.x_hat).tolist(),
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "GeneratedItem":
        sched = rec["schedule"]
        return cls(rec["id"], np.asarray(rec["x_hat"], dtype=np.float32), rec["c_hat"], int(rec["seed"]),
                   rec["snapshot"], (float(sched[0]), float(sched[1]), float(sched[2]), int(sched[3])),
                   rec.get("cfg_weight"))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable set of training instances stored as stacked arrays.

    ``c`` is ``None`` for unconditional data, an int array of class ids or a
    float matrix of condition vectors.
    """

    ids: tuple[str, ...]
    x: np.ndarray
    c: np.ndarray | None = None
    spec: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float32)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "ids", tuple(self.ids))
        if len(set(self.ids)) != len(self.ids):
            raise DatasetError("instance ids must be unique")
        if x.shape[0] != len(self.ids):
            raise DatasetError("ids and x disagree in length")
        if x.size and (x.min() < -1 or x.max() > 1):
            raise DatasetError("data items must lie in [-1, 1]")
        if self.c is not None:
            c = np.ascontiguousarray(self.c)
            c.setflags(write=False)
            if c.shape[0] != len(self.ids):
                raise DatasetError("ids and c disagree in length")
            object.__setattr__(self, "c", c)
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(self.ids)})

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> TrainingInstance:
        c = None if self.c is None else self.c[i]
        return TrainingInstance(self.ids[i], self.x[i], c.item() if np.ndim(c) == 0 and c is not None else c)

    @property
    def cond_mode(self) -> str:
        if self.c is None:
            return "none"
        return "class" if np.issubdtype(self.c.dtype, np.integer) else "vector"

    def index_of(self, instance_id: str) -> int:
        return self._index[instance_id]

    def cond_batch(self, idx) -> torch.Tensor | None:
        if self.c is None:
            return None
        c = self.c[np.asarray(idx)]
        if self.cond_mode == "class":
            return torch.as_tensor(c, dtype=torch.long)
        return torch.as_tensor(c, dtype=torch.float32)

    def x_batch(self, idx) -> torch.Tensor:
        return torch.from_numpy(np.array(self.x[np.asarray(idx)]))

    def without(self, ids: Iterable[str]) -> "Dataset":
        drop = set(ids)
        unknown = drop - set(self.ids)
        if unknown:
            raise DatasetError(f"unknown instance ids: {sorted(unknown)[:5]}")
        keep = [i for i, k in enumerate(self.ids) if k not in drop]
        return Dataset(tuple(self.ids[i] for i in keep), self.x[keep],
                       None if self.c is None else self.c[keep], dict(self.spec))

    def manifest_hash(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.ids).encode())
        h.update(self.x.tobytes())
        if self.c is not None:
            h.update(self.c.tobytes())
        return h.hexdigest()

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        arrays = {"x": self.x}
        if self.c is not None:
            arrays["c"] = self.c
        np.savez(d / "data.npz", **arrays)
        with open(d / "manifest.jsonl", "w") as fh:
            fh.write(json.dumps({"type": "dataset", "hash": self.manifest_hash(), "size": len(self),
                                 "spec": dict(self.spec)}, sort_keys=True) + "\n")
            for k in self.ids:
                fh.write(json.dumps({"id": k}) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "Dataset":
        d = Path(directory)
        lines = (d / "manifest.jsonl").read_text().splitlines()
        header = json.loads(lines[0])
        ids = tuple(json.loads(line)["id"] for line in lines[1:])
        with np.load(d / "data.npz") as arrays:
            ds = cls(ids, arrays["x"], arrays["c"] if "c" in arrays else None, header.get("spec", {}))
        if ds.manifest_hash() != header["hash"]:
            raise DatasetError(f"{d}: content hash does not match manifest")
        return ds


@dataclass(frozen=True)
class ToyDataSpec:
    size: int = 500
    num_classes: int = 10
    image_size: int = 16
    conditional: bool = True
    seed: int = 0


# hue per class, background/foreground value levels chosen so that
# the per-pixel mean square of the [-1, 1] data sits near 0.25
_SHAPES = ("disk", "square", "triangle", "ring")


def _class_palette(k: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    hue = k / num_classes
    bg_val, fg_val = (0.3, 0.85) if k % 2 == 0 else (0.75, 0.2)
    bg = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.35, bg_val))
    fg = np.array(colorsys.hsv_to_rgb(hue, 0.8, fg_val))
    return bg, fg


def _shape_mask(kind: str, cx: float, cy: float, r: float, size: int, ss: int = 4) -> np.ndarray:
    g = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(g, g, indexing="ij")
    dx, dy = xx - cx, yy - cy
    if kind == "disk":
        m = dx ** 2 + dy ** 2 <= r ** 2
    elif kind == "square":
        m = (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    elif kind == "triangle":
        m = (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    else:
        d2 = dx ** 2 + dy ** 2
        m = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    return m.reshape(size, ss, size, ss).mean(axis=(1, 3))


def toy_image(rng: np.random.Generator, label: int, num_classes: int, size: int) -> np.ndarray:
    bg, fg = _class_palette(label, num_classes)
    bg = np.clip(bg + rng.normal(0, 0.05, 3), 0, 1)
    fg = np.clip(fg + rng.normal(0, 0.07, 3), 0, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * np.arange(size)[None, :] + np.sin(angle) * np.arange(size)[:, None]) / size
    ramp = ramp - ramp.mean()
    img = bg[:, None, None] + 0.25 * ramp[None]
    kind = _SHAPES[rng.integers(len(_SHAPES))]
    r = rng.uniform(0.18, 0.32) * size
    cx, cy = rng.uniform(r, size - r, 2)
    m = _shape_mask(kind, cx, cy, r, size)[None]
    img = img * (1 - m) + fg[:, None, None] * m
    return np.clip(2 * img - 1, -1, 1).astype(np.float32)


def build_toy_dataset(spec: ToyDataSpec, stream=None) -> Dataset:
    """Procedural 16x16 RGB shapes with class-structured palettes."""
    if spec.size < 1:
        raise DatasetError("dataset size must be >= 1")
    if spec.size < spec.num_classes:
        raise DatasetError(f"size {spec.size} is smaller than the class count {spec.num_classes}")
    rng = stream.numpy() if stream is not None else np.random.default_rng(spec.seed)
    labels = np.arange(spec.size) % spec.num_classes
    labels = labels[rng.permutation(spec.size)]
    x = np.stack([toy_image(rng, int(k), spec.num_classes, spec.image_size) for k in labels])
    ids = tuple(f"z{i:05d}" for i in range(spec.size))
    meta = {"kind": "toy-shapes", "size": spec.size, "num_classes": spec.num_classes,
            "image_size": spec.image_size, "conditional": spec.conditional,
            "seed": spec.seed if stream is None else stream.key}
    return Dataset(ids, x, labels.astype(np.int64) if spec.conditional else None, meta)


@dataclass(frozen=True)
class RemovalSet:
    ids: tuple[str, ...]
    method: str
    per_item: Mapping[str, tuple[str, ...]]

    def to_records(self) -> list[dict]:
        recs = [{"type": "removal", "method": self.method, "ids": list(self.ids)}]
        recs += [{"item_id": k, "topk": list(v)} for k, v in self.per_item.items()]
        return recs

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(r) + "\n" for r in self.to_records()))
        return path


def topk_count(k_fraction: float, n: int) -> int:
    # guard against 0.02 * 350 = 7.000000000000001
    return max(1, math.ceil(round(k_fraction * n, 9)))


def topk_ids(scores: Mapping[str, float], count: int) -> tuple[str, ...]:
    """Highest scores first, ties broken by ascending id."""
    return tuple(sorted(scores, key=lambda k: (-scores[k], k))[:count])


def remove_topk(dataset: Dataset, results: Sequence, k_fraction: float) -> tuple[Dataset, RemovalSet]:
    if not 0 < k_fraction < 1:
        raise DatasetError(f"k_fraction must lie in (0, 1), got {k_fraction}")
    if not results:
        raise DatasetError("no attribution results given")
    count = topk_count(k_fraction, len(dataset))
    union: dict[str, None] = {}
    per_item = {}
    ids = set(dataset.ids)
    for res in results:
        if set(res.scores) != ids:
            raise DatasetError(f"result for {res.item_id} does not score the full dataset")
        top = topk_ids(res.scores, count)
        per_item[res.item_id] = top
        union.update(dict.fromkeys(top))
    if len(union) >= len(dataset):
        raise DatasetError("removal would empty the training set")
    methods = sorted({r.method for r in results})
    removal = RemovalSet(tuple(union), ",".join(methods), per_item)
    return dataset.without(union), removal
