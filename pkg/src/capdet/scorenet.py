"""Affine score heads over region descriptors.

One model holds K parallel object heads (softmax over classes plus
background), per-head attribute heads (softmax over each category's
values), and a two-stream image-evidence block: one affine map squashed
per entry by a sigmoid, one turned into a distribution over regions per
class, multiplied elementwise. Summing that product over regions and
applying a sigmoid gives the per-class image score, which therefore
always lies in (0.5, 1).

Forward evaluation and the analytic backward pass are paired; the
backward pass is checked against central finite differences in the test
suite rather than trusted by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

# probabilities are clamped to [PROB_FLOOR, 1 - PROB_FLOOR] before any log
PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"capdet-checkpoint-v1\n"


def clamp_prob(p: np.ndarray | float) -> np.ndarray | float:
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cols(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


@dataclass
class Affine:
    weight: np.ndarray  # (d, out)
    bias: np.ndarray  # (out,)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias


@dataclass
class ModelParams:
    """All trainable parameters plus the layout they were built for.

    category_values fixes the column order of every attribute head, and
    class_names fixes the column order of object and evidence heads, so a
    checkpoint is self-describing.
    """

    class_names: tuple[str, ...]
    category_values: dict[str, tuple[str, ...]]
    object_heads: list[Affine]  # each d -> (C + 1), background last
    attribute_heads: list[dict[str, Affine]]  # per head, per category: d -> |values|
    mid_det: Affine  # d -> C
    mid_cls: Affine  # d -> C

    @property
    def feature_dim(self) -> int:
        return self.object_heads[0].weight.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_heads(self) -> int:
        return len(self.object_heads)


@dataclass
class RegionSet:
    """Proposal boxes plus one descriptor per proposal."""

    boxes: np.ndarray  # (m, 4) in (x_min, y_min, x_max, y_max) order
    features: np.ndarray  # (m, d)

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=float)
        self.features = np.asarray(self.features, dtype=float)
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise ValueError("boxes must be (m, 4)")
        if self.features.ndim != 2 or self.features.shape[0] != self.boxes.shape[0]:
            raise ValueError("features must be (m, d) with one row per box")
        if self.boxes.shape[0] < 1:
            raise ValueError("need at least one region")
        if not np.isfinite(self.features).all() or not np.isfinite(self.boxes).all():
            raise ValueError("non-finite region data")
        if not ((self.boxes[:, 0] < self.boxes[:, 2]) & (self.boxes[:, 1] < self.boxes[:, 3])).all():
            raise ValueError("degenerate box in region set")

    @property
    def size(self) -> int:
        return self.boxes.shape[0]


@dataclass
class ScoreTensor:
    objects: list[np.ndarray]  # per head: (m, C + 1), rows sum to 1
    attributes: list[dict[str, np.ndarray]]  # per head, per category: (m, |values|)


@dataclass
class MidScores:
    per_region: np.ndarray  # (m, C) product of the two streams
    image_level: np.ndarray  # (C,) sigmoid of per-class sums, in (0.5, 1)


@dataclass
class ScoreGrads:
    """Gradient of some loss with respect to every score output."""

    objects: list[np.ndarray]
    attributes: list[dict[str, np.ndarray]]
    mid_per_region: np.ndarray
    mid_image: np.ndarray

    @staticmethod
    def zeros_like(scores: ScoreTensor, mid: MidScores) -> "ScoreGrads":
        return ScoreGrads(
            objects=[np.zeros_like(s) for s in scores.objects],
            attributes=[{c: np.zeros_like(a) for c, a in head.items()} for head in scores.attributes],
            mid_per_region=np.zeros_like(mid.per_region),
            mid_image=np.zeros_like(mid.image_level),
        )

    def add_scaled(self, other: "ScoreGrads", scale: float = 1.0) -> None:
        for mine, theirs in zip(self.objects, other.objects):
            mine += scale * theirs
        for mine_h, theirs_h in zip(self.attributes, other.attributes):
            for cat, arr in theirs_h.items():
                mine_h[cat] += scale * arr
        self.mid_per_region += scale * other.mid_per_region
        self.mid_image += scale * other.mid_image


def init_params(
    feature_dim: int,
    class_names: Sequence[str],
    category_values: Mapping[str, Sequence[str]],
    num_heads: int,
    seed: int,
) -> ModelParams:
    """Centered-uniform weights at scale 1/sqrt(d), zero biases, fixed draw order."""
    if feature_dim < 1:
        raise ValueError(f"feature_dim must be positive, got {feature_dim}")
    if len(class_names) < 1:
        raise ValueError("need at least one class")
    if num_heads < 1:
        raise ValueError(f"need at least one head, got {num_heads}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(feature_dim)
    cat_values = {str(c): tuple(str(v) for v in vals) for c, vals in category_values.items()}
    c_plus_bg = len(class_names) + 1

    def draw(out_dim: int) -> Affine:
        w = rng.uniform(-scale, scale, size=(feature_dim, out_dim))
        return Affine(weight=w, bias=np.zeros(out_dim))

    object_heads = [draw(c_plus_bg) for _ in range(num_heads)]
    attribute_heads = [{cat: draw(len(vals)) for cat, vals in cat_values.items()} for _ in range(num_heads)]
    mid_det = draw(len(class_names))
    mid_cls = draw(len(class_names))
    return ModelParams(
        class_names=tuple(str(n) for n in class_names),
        category_values=cat_values,
        object_heads=object_heads,
        attribute_heads=attribute_heads,
        mid_det=mid_det,
        mid_cls=mid_cls,
    )


def forward(params: ModelParams, regions: RegionSet) -> tuple[ScoreTensor, MidScores]:
    x = regions.features
    if x.shape[1] != params.feature_dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match model dim {params.feature_dim}")
    objects = [softmax_rows(head.apply(x)) for head in params.object_heads]
    attributes = [
        {cat: softmax_rows(head.apply(x)) for cat, head in heads.items()}
        for heads in params.attribute_heads
    ]
    gate = sigmoid(params.mid_cls.apply(x))
    region_dist = softmax_cols(params.mid_det.apply(x))
    per_region = gate * region_dist
    image_level = sigmoid(per_region.sum(axis=0))
    return ScoreTensor(objects, attributes), MidScores(per_region, image_level)


def zeros_like_params(params: ModelParams) -> ModelParams:
    return ModelParams(
        class_names=params.class_names,
        category_values=params.category_values,
        object_heads=[Affine(np.zeros_like(a.weight), np.zeros_like(a.bias)) for a in params.object_heads],
        attribute_heads=[
            {c: Affine(np.zeros_like(a.weight), np.zeros_like(a.bias)) for c, a in head.items()}
            for head in params.attribute_heads
        ],
        mid_det=Affine(np.zeros_like(params.mid_det.weight), np.zeros_like(params.mid_det.bias)),
        mid_cls=Affine(np.zeros_like(params.mid_cls.weight), np.zeros_like(params.mid_cls.bias)),
    )


def _softmax_rows_backward(s: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return s * (grad - (grad * s).sum(axis=1, keepdims=True))


def _softmax_cols_backward(s: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return s * (grad - (grad * s).sum(axis=0, keepdims=True))


def param_gradients(params: ModelParams, regions: RegionSet, grads: ScoreGrads) -> ModelParams:
    """Exact gradient of sum(grads * scores) with respect to every parameter.

    Heads whose upstream gradient is all zero come back with exactly zero
    parameter gradient; nothing leaks across heads.
    """
    x = regions.features
    if len(grads.objects) != params.num_heads:
        raise ValueError("gradient structure does not match the number of heads")
    out = zeros_like_params(params)

    for k, head in enumerate(params.object_heads):
        g = grads.objects[k]
        if not np.any(g):
            continue
        s = softmax_rows(head.apply(x))
        dz = _softmax_rows_backward(s, g)
        out.object_heads[k].weight[:] = x.T @ dz
        out.object_heads[k].bias[:] = dz.sum(axis=0)

    for k, heads in enumerate(params.attribute_heads):
        for cat, head in heads.items():
            g = grads.attributes[k][cat]
            if not np.any(g):
                continue
            s = softmax_rows(head.apply(x))
            dz = _softmax_rows_backward(s, g)
            out.attribute_heads[k][cat].weight[:] = x.T @ dz
            out.attribute_heads[k][cat].bias[:] = dz.sum(axis=0)

    if np.any(grads.mid_per_region) or np.any(grads.mid_image):
        gate = sigmoid(params.mid_cls.apply(x))
        region_dist = softmax_cols(params.mid_det.apply(x))
        per_region = gate * region_dist
        y = sigmoid(per_region.sum(axis=0))
        d_per_region = grads.mid_per_region + grads.mid_image * y * (1.0 - y)
        d_gate = d_per_region * region_dist
        d_dist = d_per_region * gate
        dz_cls = d_gate * gate * (1.0 - gate)
        dz_det = _softmax_cols_backward(region_dist, d_dist)
        out.mid_cls.weight[:] = x.T @ dz_cls
        out.mid_cls.bias[:] = dz_cls.sum(axis=0)
        out.mid_det.weight[:] = x.T @ dz_det
        out.mid_det.bias[:] = dz_det.sum(axis=0)
    return out


def iter_param_arrays(params: ModelParams) -> Iterator[tuple[str, np.ndarray]]:
    """Canonical traversal order shared by the optimizer, checkpoints, and checks."""
    for k, head in enumerate(params.object_heads):
        yield f"object[{k}].weight", head.weight
        yield f"object[{k}].bias", head.bias
    for k, heads in enumerate(params.attribute_heads):
        for cat in params.category_values:
            yield f"attribute[{k}][{cat}].weight", heads[cat].weight
            yield f"attribute[{k}][{cat}].bias", heads[cat].bias
    yield "mid_det.weight", params.mid_det.weight
    yield "mid_det.bias", params.mid_det.bias
    yield "mid_cls.weight", params.mid_cls.weight
    yield "mid_cls.bias", params.mid_cls.bias


def flatten_params(params: ModelParams) -> np.ndarray:
    return np.concatenate([arr.ravel() for _, arr in iter_param_arrays(params)])


def unflatten_params(template: ModelParams, flat: np.ndarray) -> ModelParams:
    out = zeros_like_params(template)
    offset = 0
    for (_, src), (_, dst) in zip(iter_param_arrays(template), iter_param_arrays(out)):
        n = src.size
        dst[:] = flat[offset : offset + n].reshape(src.shape)
        offset += n
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, model needs {offset}")
    return out


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Magic line, JSON layout header, then the flat float64 parameter vector."""
    header = {
        "feature_dim": params.feature_dim,
        "class_names": list(params.class_names),
        "category_values": {c: list(v) for c, v in params.category_values.items()},
        "num_heads": params.num_heads,
        "dtype": "<f8",
    }
    flat = flatten_params(params).astype("<f8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(flat.tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a capdet checkpoint (bad magic)")
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ValueError(f"{path}: corrupt checkpoint header") from None
        blob = f.read()
    template = init_params(
        feature_dim=int(header["feature_dim"]),
        class_names=header["class_names"],
        category_values=header["category_values"],
        num_heads=int(header["num_heads"]),
        seed=0,
    )
    flat = np.frombuffer(blob, dtype=header.get("dtype", "<f8"))
    expected = flatten_params(template).size
    if flat.size != expected:
        raise ValueError(f"{path}: checkpoint holds {flat.size} values, layout needs {expected}")
    return unflatten_params(template, flat.astype(float))
