"""Instance refinement across a chain of heads.

Head k is supervised by head k-1: for each mentioned class, the region
where the previous head scores highest becomes a seed, every region that
overlaps the seed box by at least tau inherits the class label with the
seed's score as its weight, and everything else is labeled background.
Head 1's predecessor is the image-evidence block, normalized into a
distribution over regions per class (a monotone per-class transform, so
it picks the same seeds as the raw evidence scores).

Attribute heads join the chain one step late: at head 1 each class's
evidence seed box is labeled with the class's attribute values, trained
by plain cross-entropy on those boxes only. From head 2 on, each
(class, attribute) pair seeds at the region maximizing the previous
head's object-attribute product, propagates by box overlap like the
object labels, and the cross-entropy at head k applies to both the
object and the attribute head, keeping the two coupled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import scorenet
from .geometry import iou_matrix
from .scorenet import MidScores, ModelParams, RegionSet, ScoreGrads, ScoreTensor, clamp_prob, softmax_cols
from .textgraph import LabelSet


@dataclass(frozen=True)
class RefinementConfig:
    num_heads: int = 3
    tau: float = 0.5
    # weight propagated labels by the seed's score; uniform weights otherwise
    weighted: bool = True
    # train attribute heads and the coupled refinement terms at all
    attributes_enabled: bool = True
    # which head's scores pick the coupled seeds for head k >= 2:
    # "prev" uses head k-1 (default), "current" uses head k itself
    entang_seed_source: str = "prev"

    def __post_init__(self) -> None:
        if self.num_heads < 1:
            raise ValueError(f"need at least one refinement head, got {self.num_heads}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.entang_seed_source not in ("prev", "current"):
            raise ValueError(f"unknown seed source {self.entang_seed_source!r}")


@dataclass
class PseudoLabels:
    """Per-region supervision for one head."""

    class_labels: np.ndarray  # (m,) class index, background = num_classes
    weights: np.ndarray  # (m,)
    seeds: dict[int, tuple[int, float]] = field(default_factory=dict)  # class -> (region, score)
    # coupled assignments: (region, class, category, value, weight)
    attrs: list[tuple[int, int, str, str, float]] = field(default_factory=list)


def initial_scores(mid: MidScores) -> np.ndarray:
    """Head 0: the evidence product normalized over regions per class."""
    return softmax_cols(mid.per_region)


def seed_and_assign(
    prev_scores: np.ndarray,
    objects: Iterable[int],
    boxes: np.ndarray,
    tau: float,
    num_classes: int,
) -> PseudoLabels:
    """Seed each mentioned class at its best previous-head region and propagate by overlap.

    A region claimed by several classes keeps the one whose seed scored
    highest; regions claimed by none are background with weight one.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    prev_scores = np.asarray(prev_scores, dtype=float)
    mentioned = sorted(set(int(c) for c in objects))
    if not mentioned:
        raise ValueError("cannot seed without mentioned classes")
    m = prev_scores.shape[0]
    labels = np.full(m, num_classes, dtype=int)
    weights = np.ones(m, dtype=float)
    best = np.full(m, -np.inf)
    pseudo = PseudoLabels(class_labels=labels, weights=weights)
    overlaps = iou_matrix(boxes, boxes)
    for c in mentioned:
        if not 0 <= c < num_classes:
            raise ValueError(f"class index {c} out of range for {num_classes} classes")
        seed = int(np.argmax(prev_scores[:, c]))
        score = float(prev_scores[seed, c])
        pseudo.seeds[c] = (seed, score)
        for i in np.flatnonzero(overlaps[:, seed] >= tau):
            if score > best[i]:
                best[i] = score
                labels[i] = c
                weights[i] = score
    return pseudo


def refinement_loss(
    head_scores: np.ndarray, pseudo: PseudoLabels, weighted: bool = True
) -> tuple[float, np.ndarray]:
    """Weighted cross-entropy over all regions: -(1/m) sum w_i log s[i, label_i]."""
    head_scores = np.asarray(head_scores, dtype=float)
    m = head_scores.shape[0]
    if pseudo.class_labels.shape != (m,):
        raise ValueError(f"pseudo labels cover {pseudo.class_labels.shape[0]} regions, scores have {m}")
    w = pseudo.weights if weighted else np.ones(m)
    grad = np.zeros_like(head_scores)
    total = 0.0
    for i in range(m):
        p = float(clamp_prob(head_scores[i, pseudo.class_labels[i]]))
        total -= w[i] * np.log(p)
        grad[i, pseudo.class_labels[i]] -= w[i] / (m * p)
    return float(total / m), grad


def attribute_assignments(
    head_index: int,
    prev_obj: np.ndarray,
    prev_attr: Mapping[str, np.ndarray] | None,
    labels: LabelSet,
    boxes: np.ndarray,
    tau: float,
    category_values: Mapping[str, Sequence[str]],
    object_seeds: Mapping[int, tuple[int, float]],
) -> list[tuple[int, int, str, str, float]]:
    """Build the coupled (region, class, category, value, weight) assignments for one head.

    head_index is 1-based. At head 1 the object seeds are reused and no
    propagation happens; later heads seed per pair at the best previous
    product and propagate to overlapping boxes.

    Assignments carry weight 1: the coupled term exists to pull a class
    toward regions its attribute explains, and scaling it by the previous
    product would silence it exactly where the object score has collapsed
    and the rescue is needed.
    """
    out: list[tuple[int, int, str, str, float]] = []
    if head_index == 1:
        for c in sorted(labels.objects):
            seed, _ = object_seeds[c]
            for cat, val in labels.pairs_for(c):
                out.append((seed, c, cat, val, 1.0))
        return out
    if prev_attr is None:
        raise ValueError("coupled seeding beyond head 1 needs previous attribute scores")
    overlaps = iou_matrix(boxes, boxes)
    for c in sorted(labels.objects):
        for cat, val in labels.pairs_for(c):
            vi = list(category_values[cat]).index(val)
            product = np.asarray(prev_obj, dtype=float)[:, c] * np.asarray(prev_attr[cat], dtype=float)[:, vi]
            seed = int(np.argmax(product))
            for i in np.flatnonzero(overlaps[:, seed] >= tau):
                out.append((int(i), c, cat, val, 1.0))
    return out


def coupled_refinement_loss(
    head_index: int,
    obj_scores: np.ndarray,
    attr_scores: Mapping[str, np.ndarray],
    assignments: Sequence[tuple[int, int, str, str, float]],
    category_values: Mapping[str, Sequence[str]],
    weighted: bool = True,
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Cross-entropy over the coupled assignments, averaged per assignment.

    At head 1 only the attribute factor is trained (the object head
    already has its own labels there); later heads train both factors.
    """
    obj_scores = np.asarray(obj_scores, dtype=float)
    grad_obj = np.zeros_like(obj_scores)
    grad_attr = {cat: np.zeros_like(np.asarray(a, dtype=float)) for cat, a in attr_scores.items()}
    if not assignments:
        return 0.0, grad_obj, grad_attr
    n = len(assignments)
    total = 0.0
    for region, c, cat, val, weight in assignments:
        w = weight if weighted else 1.0
        vi = list(category_values[cat]).index(val)
        p_attr = float(clamp_prob(np.asarray(attr_scores[cat], dtype=float)[region, vi]))
        total -= w * np.log(p_attr)
        grad_attr[cat][region, vi] -= w / (n * p_attr)
        if head_index >= 2:
            p_obj = float(clamp_prob(obj_scores[region, c]))
            total -= w * np.log(p_obj)
            grad_obj[region, c] -= w / (n * p_obj)
    return float(total / n), grad_obj, grad_attr


def build_pseudo_labels(
    scores: ScoreTensor,
    mid: MidScores,
    labels: LabelSet,
    boxes: np.ndarray,
    config: RefinementConfig,
    category_values: Mapping[str, Sequence[str]],
) -> list[PseudoLabels | None]:
    """Freeze each head's supervision from its predecessor's current scores.

    The result is pure data: recomputing losses against it involves no
    argmax over live scores, which is what a gradient check needs.
    """
    num_classes = mid.per_region.shape[1]
    if not labels.objects:
        return [None] * config.num_heads
    s0 = initial_scores(mid)
    pseudos: list[PseudoLabels | None] = []
    for j in range(config.num_heads):
        prev_obj = s0 if j == 0 else scores.objects[j - 1]
        pseudo = seed_and_assign(prev_obj, labels.objects, boxes, config.tau, num_classes)
        if config.attributes_enabled and labels.attribute_pairs:
            # head 1 always bootstraps from the evidence seeds; the seed
            # source switch only affects later heads
            if j == 0 or config.entang_seed_source == "prev":
                src_obj = prev_obj
                src_attr = None if j == 0 else scores.attributes[j - 1]
            else:
                src_obj, src_attr = scores.objects[j], scores.attributes[j]
            pseudo.attrs = attribute_assignments(
                j + 1, src_obj, src_attr, labels, boxes, config.tau, category_values, pseudo.seeds
            )
        pseudos.append(pseudo)
    return pseudos


def refinement_terms(
    scores: ScoreTensor,
    mid: MidScores,
    pseudos: Sequence[PseudoLabels | None],
    config: RefinementConfig,
    category_values: Mapping[str, Sequence[str]],
) -> tuple[list[float], ScoreGrads]:
    """Per-head loss values plus their gradients with respect to head scores."""
    grads = ScoreGrads.zeros_like(scores, mid)
    values: list[float] = []
    for j, pseudo in enumerate(pseudos):
        if pseudo is None:
            values.append(0.0)
            continue
        value, g = refinement_loss(scores.objects[j], pseudo, weighted=config.weighted)
        grads.objects[j] += g
        if pseudo.attrs:
            cv, g_obj, g_attr = coupled_refinement_loss(
                j + 1,
                scores.objects[j],
                scores.attributes[j],
                pseudo.attrs,
                category_values,
                weighted=config.weighted,
            )
            value += cv
            grads.objects[j] += g_obj
            for cat, arr in g_attr.items():
                grads.attributes[j][cat] += arr
        values.append(float(value))
    return values, grads


def run_refinement(
    params: ModelParams,
    regions: RegionSet,
    labels: LabelSet,
    config: RefinementConfig,
) -> tuple[list[float], ScoreGrads, list[PseudoLabels | None]]:
    """Forward the model, freeze supervision per head, and score the chain."""
    scores, mid = scorenet.forward(params, regions)
    pseudos = build_pseudo_labels(scores, mid, labels, regions.boxes, config, params.category_values)
    values, grads = refinement_terms(scores, mid, pseudos, config, params.category_values)
    return values, grads, pseudos
