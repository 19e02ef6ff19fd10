"""Synthetic caption-detection benchmark on prototype features.

Every class owns a prototype vector; confusable pairs share a
neighborhood (distance <= delta) while all other class pairs stay at
least 4*delta apart, so class identity alone cannot separate a
confusable pair once noise is added. Attribute values own prototype
vectors too, and a proposal's descriptor is its class prototype plus the
prototypes of the object's attribute values plus Gaussian noise. Since
confusable partners draw from disjoint color pools, the attribute part
of the descriptor is what makes them separable; captions are the only
place that information is spelled out.

Scenes are deterministic in (master seed, scene index): each scene draws
from its own stream, so generation order or parallelism cannot change
the data. Serialization keeps nine significant digits; the in-memory
scenes hold exactly the serialized values, so a generate/load round trip
is an identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box, iou
from .scorenet import RegionSet
from .textgraph import AttributeRegistry, Vocabulary


class DataError(ValueError):
    """A dataset or label file is malformed or does not match its schema."""


SCHEMA_NAME = "capdet-synth"
SCHEMA_VERSION = 1

# prenominal word order used by the caption templates
_CATEGORY_ORDER = ("size", "shape", "color", "material")

_DEFAULT_CLASSES = ("apple", "pear", "cup", "bowl", "cat", "dog", "chair", "stop sign")
_DEFAULT_CONFUSABLE = (("apple", "pear"), ("cup", "bowl"))
_DEFAULT_POOLS: dict[str, dict[str, tuple[str, ...]]] = {
    "apple": {"color": ("red", "yellow"), "size": ("small", "large")},
    "pear": {"color": ("green", "brown"), "size": ("small", "large")},
    "cup": {"color": ("white", "blue"), "size": ("small", "large")},
    "bowl": {"color": ("black", "orange"), "size": ("small", "large")},
    "cat": {"color": ("black", "white", "brown"), "size": ("small", "large")},
    "dog": {"color": ("brown", "black", "white"), "size": ("small", "large")},
    "chair": {"color": ("blue", "green"), "material": ("wooden", "plastic")},
    "stop sign": {"color": ("red",), "shape": ("square", "round")},
}


def round_sig(value: float) -> float:
    """Nine significant digits, the precision everything on disk carries."""
    return float(f"{value:.9g}")


def round_sig_array(arr: np.ndarray) -> np.ndarray:
    flat = np.asarray(arr, dtype=float).ravel()
    return np.array([float(f"{v:.9g}") for v in flat]).reshape(np.shape(arr))


@dataclass(frozen=True)
class SynthConfig:
    feature_dim: int = 64
    noise_sigma: float = 0.1
    confusable_distance: float = 0.05  # delta
    attribute_norm: float = 0.35
    class_names: tuple[str, ...] = _DEFAULT_CLASSES
    confusable_pairs: tuple[tuple[str, str], ...] = _DEFAULT_CONFUSABLE
    attribute_pools: Mapping[str, Mapping[str, tuple[str, ...]]] = field(
        default_factory=lambda: _DEFAULT_POOLS
    )
    max_objects: int = 4
    jitters_per_gt: int = 6
    background_boxes: int = 10
    attr_mention_prob: float = 0.7  # rho
    extra_attr_prob: float = 0.4
    cooccur_prob: float = 0.9
    captions_min: int = 1
    captions_max: int = 3

    def __post_init__(self) -> None:
        if self.feature_dim < 8:
            raise ValueError(f"feature_dim must be at least 8, got {self.feature_dim}")
        if len(self.class_names) < 2:
            raise ValueError("need at least two classes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.attr_mention_prob <= 1.0:
            raise ValueError("attr_mention_prob must lie in [0, 1]")
        names = set(self.class_names)
        for a, b in self.confusable_pairs:
            if a not in names or b not in names or a == b:
                raise ValueError(f"bad confusable pair ({a!r}, {b!r})")
        for name in self.class_names:
            if name not in self.attribute_pools or "color" not in self.attribute_pools[name]:
                raise ValueError(f"class {name!r} needs an attribute pool with at least a color entry")
        if not 1 <= self.captions_min <= self.captions_max <= 5:
            raise ValueError("caption count bounds must satisfy 1 <= min <= max <= 5")

    def partner(self, name: str) -> str | None:
        for a, b in self.confusable_pairs:
            if name == a:
                return b
            if name == b:
                return a
        return None


@dataclass
class Universe:
    config: SynthConfig
    class_prototypes: np.ndarray  # (C, d)
    attribute_prototypes: dict[tuple[str, str], np.ndarray]
    background_prototype: np.ndarray

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.config.class_names


def make_universe(config: SynthConfig, registry: AttributeRegistry, seed: int) -> Universe:
    """Place prototypes so the stated separations hold, or fail loudly.

    Confusable partners end up delta/2 apart; every other class pair (and
    the background) must clear 4*delta. Anchors are unit vectors redrawn
    until they are comfortably spread, which a small feature_dim may make
    impossible.
    """
    rng = np.random.default_rng(seed)
    delta = config.confusable_distance
    names = config.class_names
    # one anchor per confusable pair (owned by its first member) plus one per free class
    owners = [n for n in names if all(n != b for _, b in config.confusable_pairs)]
    min_gap = max(5.5 * delta, 1.0)

    def unit(v: np.ndarray) -> np.ndarray:
        return v / np.linalg.norm(v)

    for attempt in range(200):
        anchors = {n: unit(rng.standard_normal(config.feature_dim)) for n in owners}
        background = unit(rng.standard_normal(config.feature_dim))
        points = list(anchors.values()) + [background]
        gaps = [
            np.linalg.norm(points[i] - points[j])
            for i in range(len(points))
            for j in range(i + 1, len(points))
        ]
        if gaps and min(gaps) < min_gap:
            continue
        prototypes = {}
        for n in owners:
            prototypes[n] = anchors[n]
        for a, b in config.confusable_pairs:
            prototypes[b] = prototypes[a] + (delta / 2.0) * unit(rng.standard_normal(config.feature_dim))
        confusable = {frozenset(p) for p in config.confusable_pairs}
        ok = True
        for i, ni in enumerate(names):
            for nj in names[i + 1 :]:
                dist = np.linalg.norm(prototypes[ni] - prototypes[nj])
                if frozenset((ni, nj)) in confusable:
                    ok = ok and dist <= delta
                else:
                    ok = ok and dist >= 4.0 * delta
            ok = ok and np.linalg.norm(prototypes[ni] - background) >= 4.0 * delta
        if not ok:
            continue
        attr_prototypes = {}
        for cat in registry.categories:
            for val in registry.values[cat]:
                attr_prototypes[(cat, val)] = config.attribute_norm * unit(
                    rng.standard_normal(config.feature_dim)
                )
        proto_matrix = np.stack([prototypes[n] for n in names])
        return Universe(config, proto_matrix, attr_prototypes, background)
    raise ValueError(
        f"could not satisfy prototype separation constraints in {config.feature_dim} dimensions"
    )


@dataclass
class GroundTruth:
    box: Box
    class_index: int
    attributes: list[tuple[str, str]]


@dataclass
class SyntheticScene:
    image_id: str
    gt: list[GroundTruth]
    proposals: RegionSet
    captions: list[str]

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "gt": [
                {
                    "box": list(g.box.as_array()),
                    "class": g.class_index,
                    "attributes": [list(p) for p in g.attributes],
                }
                for g in self.gt
            ],
            "boxes": self.proposals.boxes.tolist(),
            "features": self.proposals.features.tolist(),
            "captions": list(self.captions),
        }

    @staticmethod
    def from_record(record: Mapping) -> "SyntheticScene":
        gt = [
            GroundTruth(
                box=Box.from_array(g["box"]),
                class_index=int(g["class"]),
                attributes=[(str(c), str(v)) for c, v in g["attributes"]],
            )
            for g in record["gt"]
        ]
        proposals = RegionSet(
            boxes=np.asarray(record["boxes"], dtype=float),
            features=np.asarray(record["features"], dtype=float),
        )
        return SyntheticScene(
            image_id=str(record["image_id"]),
            gt=gt,
            proposals=proposals,
            captions=[str(c) for c in record["captions"]],
        )


@dataclass
class CaptionFacts:
    """What the generated captions actually said, for parser fidelity checks."""

    mentioned_classes: set[int] = field(default_factory=set)
    mentioned_pairs: set[tuple[int, str, str]] = field(default_factory=set)


def _sample_attributes(rng: np.random.Generator, config: SynthConfig, name: str) -> list[tuple[str, str]]:
    pools = config.attribute_pools[name]
    color_pool = pools["color"]
    attrs = [("color", str(color_pool[rng.integers(len(color_pool))]))]
    extras = [c for c in _CATEGORY_ORDER if c != "color" and c in pools]
    if extras and rng.random() < config.extra_attr_prob:
        cat = extras[int(rng.integers(len(extras)))]
        pool = pools[cat]
        attrs.append((cat, str(pool[rng.integers(len(pool))])))
    return attrs


def _sample_classes(rng: np.random.Generator, config: SynthConfig) -> list[str]:
    count = int(rng.integers(1, config.max_objects + 1))
    pool = list(config.class_names)
    chosen: list[str] = []
    while len(chosen) < count and pool:
        name = pool.pop(int(rng.integers(len(pool))))
        chosen.append(name)
        partner = config.partner(name)
        if partner in pool and len(chosen) < count and rng.random() < config.cooccur_prob:
            pool.remove(partner)
            chosen.append(partner)
    return chosen


def _sample_gt_box(rng: np.random.Generator) -> Box:
    w = float(rng.uniform(0.18, 0.38))
    h = float(rng.uniform(0.18, 0.38))
    x0 = float(rng.uniform(0.35 * w, 1.0 - 1.35 * w))
    y0 = float(rng.uniform(0.35 * h, 1.0 - 1.35 * h))
    return Box(x0, y0, x0 + w, y0 + h)


def _jitter_box(rng: np.random.Generator, gt: Box, target_iou: float) -> Box:
    """Shift a copy of gt so its IoU with gt is exactly target_iou."""
    w = gt.x_max - gt.x_min
    h = gt.y_max - gt.y_min
    mode = int(rng.integers(3)) if target_iou >= 0.5 else 0
    if mode == 0:  # shift both axes equally
        alpha = 1.0 - np.sqrt(2.0 * target_iou / (1.0 + target_iou))
        dx = alpha * w * (1 if rng.random() < 0.5 else -1)
        dy = alpha * h * (1 if rng.random() < 0.5 else -1)
    else:  # shift one axis
        alpha = (1.0 - target_iou) / (1.0 + target_iou)
        if mode == 1:
            dx = alpha * w * (1 if rng.random() < 0.5 else -1)
            dy = 0.0
        else:
            dx = 0.0
            dy = alpha * h * (1 if rng.random() < 0.5 else -1)
    return Box(gt.x_min + dx, gt.y_min + dy, gt.x_max + dx, gt.y_max + dy)


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def _phrase(name: str, mentioned: Sequence[tuple[str, str]]) -> str:
    by_cat = dict(mentioned)
    words = [by_cat[c] for c in _CATEGORY_ORDER if c in by_cat]
    noun = " ".join(words + [name]) if words else name
    return f"{_article(noun)} {noun}"


def _build_captions(
    rng: np.random.Generator,
    config: SynthConfig,
    objects: Sequence[tuple[str, int, list[tuple[str, str]]]],
    cooccurring: set[str],
    facts: CaptionFacts,
) -> list[str]:
    captions: list[str] = []
    n_captions = int(rng.integers(config.captions_min, config.captions_max + 1))
    connectors = [" and ", " and ", " next to ", " near ", " beside "]
    for _ in range(n_captions):
        parts = []
        for name, class_index, attrs in objects:
            facts.mentioned_classes.add(class_index)
            mentioned = []
            for cat, val in attrs:
                forced = cat == "color" and name in cooccurring
                if forced or rng.random() < config.attr_mention_prob:
                    mentioned.append((cat, val))
                    facts.mentioned_pairs.add((class_index, cat, val))
            parts.append(_phrase(name, mentioned))
        sentence = parts[0]
        for part in parts[1:]:
            sentence += connectors[int(rng.integers(len(connectors)))] + part
        caption = sentence + "."
        # occasionally restate one attribute as a copula sentence
        if rng.random() < 0.3:
            name, class_index, attrs = objects[int(rng.integers(len(objects)))]
            if attrs:
                cat, val = attrs[int(rng.integers(len(attrs)))]
                caption += f" the {name} is {val}."
                facts.mentioned_pairs.add((class_index, cat, val))
        captions.append(caption)
    return captions


def generate_scene(
    universe: Universe, image_id: str, stream_key: Sequence[int]
) -> tuple[SyntheticScene, CaptionFacts]:
    """Build one scene from its own RNG stream; deterministic in the key."""
    config = universe.config
    rng = np.random.default_rng(list(stream_key))
    class_index = {n: i for i, n in enumerate(config.class_names)}

    chosen = _sample_classes(rng, config)
    objects: list[tuple[str, int, list[tuple[str, str]]]] = []
    for name in chosen:
        objects.append((name, class_index[name], _sample_attributes(rng, config, name)))
    # confusable partners present together must disagree on color
    by_name = {name: attrs for name, _, attrs in objects}
    cooccurring: set[str] = set()
    for a, b in config.confusable_pairs:
        if a in by_name and b in by_name:
            cooccurring.update((a, b))
            color_a = dict(by_name[a])["color"]
            pool_b = [v for v in config.attribute_pools[b]["color"] if v != color_a]
            if pool_b and dict(by_name[b])["color"] == color_a:
                value = pool_b[int(rng.integers(len(pool_b)))]
                attrs_b = by_name[b]
                attrs_b[[c for c, _ in attrs_b].index("color")] = ("color", value)

    gt: list[GroundTruth] = []
    boxes: list[list[float]] = []
    features: list[np.ndarray] = []
    for name, c_idx, attrs in objects:
        gt_box = Box(*[round_sig(v) for v in _sample_gt_box(rng).as_array()])
        gt.append(GroundTruth(box=gt_box, class_index=c_idx, attributes=list(attrs)))
        base = universe.class_prototypes[c_idx].copy()
        for cat, val in attrs:
            base = base + universe.attribute_prototypes[(cat, val)]
        for j in range(config.jitters_per_gt):
            target = float(rng.uniform(0.55, 0.85)) if j == 0 else float(rng.uniform(0.3, 0.9))
            jittered = _jitter_box(rng, gt_box, target)
            boxes.append([round_sig(v) for v in jittered.as_array()])
            noise = config.noise_sigma * rng.standard_normal(config.feature_dim)
            features.append(base + noise)
    for _ in range(config.background_boxes):
        w = float(rng.uniform(0.08, 0.25))
        h = float(rng.uniform(0.08, 0.25))
        x0 = float(rng.uniform(0.0, 1.0 - w))
        y0 = float(rng.uniform(0.0, 1.0 - h))
        boxes.append([round_sig(v) for v in (x0, y0, x0 + w, y0 + h)])
        noise = config.noise_sigma * rng.standard_normal(config.feature_dim)
        features.append(universe.background_prototype + noise)

    facts = CaptionFacts()
    captions = _build_captions(rng, config, objects, cooccurring, facts)
    proposals = RegionSet(
        boxes=np.asarray(boxes, dtype=float),
        features=round_sig_array(np.stack(features)),
    )
    return SyntheticScene(image_id=image_id, gt=gt, proposals=proposals, captions=captions), facts


def gen_dataset(
    universe: Universe,
    num_scenes: int,
    seed_key: Sequence[int] | int,
    path: str | Path | None = None,
    id_prefix: str = "scene",
) -> list[SyntheticScene]:
    """Generate scenes (optionally writing them) and return them in order.

    Runs with the same universe and seed key produce byte-identical files.
    """
    if num_scenes < 1:
        raise ValueError(f"num_scenes must be positive, got {num_scenes}")
    key = [int(seed_key)] if isinstance(seed_key, (int, np.integer)) else [int(k) for k in seed_key]
    scenes = []
    for i in range(num_scenes):
        scene, _ = generate_scene(universe, f"{id_prefix}-{i:06d}", key + [i])
        scenes.append(scene)
    if path is not None:
        write_dataset(path, scenes, universe)
    return scenes


def dataset_header(universe: Universe) -> dict:
    return {
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "feature_dim": universe.config.feature_dim,
        "class_names": list(universe.class_names),
        "confusable_pairs": [list(p) for p in universe.config.confusable_pairs],
    }


def write_dataset(path: str | Path, scenes: Iterable[SyntheticScene], universe: Universe) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(dataset_header(universe), sort_keys=True) + "\n")
        for scene in scenes:
            f.write(json.dumps(scene.to_record(), sort_keys=True) + "\n")


def read_dataset_header(path: str | Path) -> dict | None:
    """The header record, or None for an empty file."""
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            try:
                header = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line 1: bad header: {e}") from None
            if header.get("schema") != SCHEMA_NAME or header.get("version") != SCHEMA_VERSION:
                raise DataError(
                    f"{path}: line 1: expected schema {SCHEMA_NAME!r} version {SCHEMA_VERSION}"
                )
            return header
    return None


def load_dataset(path: str | Path) -> list[SyntheticScene]:
    """Parse a dataset file; an empty file is an empty dataset.

    Any malformed line fails with its line number; a generate/load round
    trip reproduces the in-memory scenes exactly.
    """
    header = read_dataset_header(path)
    if header is None:
        return []
    scenes: list[SyntheticScene] = []
    feature_dim = int(header["feature_dim"])
    with open(path, encoding="utf-8") as f:
        saw_header = False
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            if not saw_header:
                saw_header = True
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: truncated or corrupt record: {e}") from None
            try:
                scene = SyntheticScene.from_record(record)
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}: line {lineno}: bad scene record: {e}") from None
            if scene.proposals.features.shape[1] != feature_dim:
                raise DataError(
                    f"{path}: line {lineno}: feature width {scene.proposals.features.shape[1]} "
                    f"does not match header feature_dim {feature_dim}"
                )
            scenes.append(scene)
    return scenes


def benchmark_vocabulary(class_names: Sequence[str]) -> Vocabulary:
    """Vocabulary over the benchmark's canonical class names, no synonyms."""
    return Vocabulary(class_names)


def proposal_hit_exists(scene: SyntheticScene, threshold: float = 0.5) -> bool:
    """True when every GT box has at least one proposal overlapping it by >= threshold."""
    proposal_boxes = [Box.from_array(b) for b in scene.proposals.boxes]
    return all(
        any(iou(g.box, pb) >= threshold for pb in proposal_boxes) for g in scene.gt
    )
