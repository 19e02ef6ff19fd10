"""Training, inference, and evaluation for the caption-supervised detector.

Training is plain adaptive-gradient descent over per-scene losses: the
image-evidence term, the first head's MIL and coupled terms, and one
refinement term per head. Setting lambda2 to zero removes every
attribute-dependent computation, including the coupled refinement terms
that would otherwise feed gradients into later object heads; that is the
exact-match baseline, and the two spellings of it (loss_mode="em",
lambda2=0) are required to produce identical checkpoints.

Inference averages the refinement heads' class scores, drops the
background column, and applies per-class NMS with a score floor.
Evaluation reports all-point average precision at IoU 0.5 per class,
their mean over classes present in the ground truth, and CorLoc.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence, get_type_hints

import numpy as np

from . import oicr, scorenet, weakloss
from .geometry import Box, iou, nms
from .oicr import RefinementConfig
from .scorenet import ModelParams, RegionSet
from .synthbench import SyntheticScene
from .textgraph import AttributeRegistry, LabelSet, Vocabulary, extract_labels
from .weakloss import LossReport, LossWeights


class NumericalError(RuntimeError):
    """Training produced a non-finite loss and cannot continue."""


LOSS_MODES = ("em", "em+sg")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 2
    steps: int = 2000
    seed: int = 0
    lambda1: float = 0.5
    lambda2: float = 0.01
    loss_mode: str = "em+sg"
    num_heads: int = 3
    tau: float = 0.5
    nms_threshold: float = 0.4
    score_floor: float = 0.05
    weighted_refinement: bool = True
    per_pair_normalization: bool = False
    entang_seed_source: str = "prev"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.steps < 1 or self.num_heads < 1:
            raise ValueError("batch_size, steps, and num_heads must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        # the two spellings of the baseline must coincide
        if (self.lambda2 == 0) != (self.loss_mode == "em"):
            raise ValueError(
                f"loss_mode={self.loss_mode!r} conflicts with lambda2={self.lambda2}; "
                "the exact-match baseline is lambda2=0 and vice versa"
            )
        if not 0 < self.nms_threshold <= 1 or not 0 <= self.score_floor < 1:
            raise ValueError("nms_threshold must lie in (0, 1], score_floor in [0, 1)")

    @property
    def attributes_enabled(self) -> bool:
        return self.lambda2 > 0

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            per_pair_normalization=self.per_pair_normalization,
        )

    def refinement_config(self) -> RefinementConfig:
        return RefinementConfig(
            num_heads=self.num_heads,
            tau=self.tau,
            weighted=self.weighted_refinement,
            attributes_enabled=self.attributes_enabled,
            entang_seed_source=self.entang_seed_source,
        )

    @staticmethod
    def field_types() -> dict[str, type]:
        return dict(get_type_hints(TrainConfig))

    @staticmethod
    def from_mapping(values: Mapping[str, object]) -> "TrainConfig":
        known = TrainConfig.field_types()
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        coerced: dict[str, object] = {}
        for key, raw in values.items():
            target = known[key]
            if isinstance(raw, str):
                if target is bool:
                    if raw.lower() not in ("true", "false", "0", "1"):
                        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
                    coerced[key] = raw.lower() in ("true", "1")
                elif target is int:
                    coerced[key] = int(raw)
                elif target is float:
                    coerced[key] = float(raw)
                else:
                    coerced[key] = raw
            else:
                coerced[key] = raw
        if "loss_mode" in coerced and "lambda2" not in coerced and coerced["loss_mode"] == "em":
            coerced["lambda2"] = 0.0
        if "lambda2" in coerced and "loss_mode" not in coerced and float(coerced["lambda2"]) == 0.0:
            coerced["loss_mode"] = "em"
        return TrainConfig(**coerced)  # type: ignore[arg-type]


@dataclass
class Detection:
    box: Box
    class_index: int
    score: float


class Adagrad:
    """Accumulate squared gradients; scale each step by 1 / (sqrt(accum) + eps)."""

    def __init__(self, size: int, learning_rate: float, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.eps = eps
        self.accum = np.zeros(size)

    def step(self, params_flat: np.ndarray, grad_flat: np.ndarray) -> np.ndarray:
        self.accum += grad_flat * grad_flat
        return params_flat - self.learning_rate * grad_flat / (np.sqrt(self.accum) + self.eps)


def scene_loss(
    params: ModelParams,
    regions: RegionSet,
    labels: LabelSet,
    config: TrainConfig,
    pseudos: Sequence[oicr.PseudoLabels | None] | None = None,
) -> tuple[LossReport, list[oicr.PseudoLabels | None]]:
    """Assemble the full per-scene loss; optionally reuse frozen refinement supervision."""
    scores, mid = scorenet.forward(params, regions)
    ref_cfg = config.refinement_config()
    if pseudos is None:
        pseudos = oicr.build_pseudo_labels(
            scores, mid, labels, regions.boxes, ref_cfg, params.category_values
        )
    values, ref_grads = oicr.refinement_terms(scores, mid, pseudos, ref_cfg, params.category_values)
    report = weakloss.total_loss(
        scores,
        mid,
        labels,
        config.loss_weights(),
        params.category_values,
        oicr_values=values,
        oicr_grads=ref_grads,
    )
    return report, list(pseudos)


def label_scenes(
    scenes: Sequence[SyntheticScene], vocab: Vocabulary, registry: AttributeRegistry
) -> list[LabelSet]:
    return [extract_labels(scene.captions, vocab, registry) for scene in scenes]


def train(
    scenes: Sequence[SyntheticScene],
    vocab: Vocabulary,
    registry: AttributeRegistry,
    config: TrainConfig,
    log_sink: Callable[[dict], None] | None = None,
) -> ModelParams:
    """Run the optimization; deterministic in (scenes, config).

    Scene order is reshuffled per epoch from the config seed. A non-finite
    loss aborts immediately, naming the offending scene.
    """
    if not scenes:
        raise ValueError("cannot train on an empty dataset")
    feature_dim = scenes[0].proposals.features.shape[1]
    category_values = {cat: tuple(registry.values[cat]) for cat in registry.categories}
    params = scorenet.init_params(
        feature_dim=feature_dim,
        class_names=vocab.class_names,
        category_values=category_values,
        num_heads=config.num_heads,
        seed=config.seed,
    )
    labels = label_scenes(scenes, vocab, registry)

    flat = scorenet.flatten_params(params)
    optimizer = Adagrad(flat.size, config.learning_rate)
    order_rng = np.random.default_rng(config.seed)
    order = order_rng.permutation(len(scenes))
    cursor = 0

    for step in range(config.steps):
        grad_flat = np.zeros_like(flat)
        batch_report: dict[str, float] = {"l_obj": 0.0, "l_entang": 0.0, "l_mid": 0.0, "l_total": 0.0}
        batch_oicr = np.zeros(config.num_heads)
        for _ in range(config.batch_size):
            if cursor >= len(order):
                order = order_rng.permutation(len(scenes))
                cursor = 0
            scene = scenes[order[cursor]]
            scene_labels = labels[order[cursor]]
            cursor += 1
            report, _ = scene_loss(params, scene.proposals, scene_labels, config)
            if not np.isfinite(report.l_total):
                raise NumericalError(
                    f"non-finite loss at step {step} on scene {scene.image_id!r}: {report.l_total}"
                )
            grads = scorenet.param_gradients(params, scene.proposals, report.grad)
            grad_flat += scorenet.flatten_params(grads)
            batch_report["l_obj"] += report.l_obj
            batch_report["l_entang"] += report.l_entang
            batch_report["l_mid"] += report.l_mid
            batch_report["l_total"] += report.l_total
            batch_oicr += np.asarray(report.l_oicr)
        grad_flat /= config.batch_size
        if not np.isfinite(grad_flat).all():
            raise NumericalError(f"non-finite gradient at step {step}")
        flat = optimizer.step(flat, grad_flat)
        params = scorenet.unflatten_params(params, flat)
        if log_sink is not None:
            record = {k: v / config.batch_size for k, v in batch_report.items()}
            record["l_oicr"] = (batch_oicr / config.batch_size).tolist()
            record["step"] = step
            log_sink(record)
    return params


def infer(params: ModelParams, regions: RegionSet, config: TrainConfig) -> list[Detection]:
    """Mean class scores over heads, background dropped, per-class NMS, score floor."""
    scores, _ = scorenet.forward(params, regions)
    num_classes = params.num_classes
    mean_scores = np.mean([s[:, :num_classes] for s in scores.objects], axis=0)
    boxes = [Box.from_array(b) for b in regions.boxes]
    detections: list[Detection] = []
    for c in range(num_classes):
        kept = nms(boxes, mean_scores[:, c].tolist(), config.nms_threshold)
        for i in kept:
            score = float(mean_scores[i, c])
            if score >= config.score_floor:
                detections.append(Detection(box=boxes[i], class_index=c, score=score))
    return detections


def average_precision(
    detections: Sequence[tuple[str, float, Box]],
    gt_boxes: Mapping[str, Sequence[Box]],
    iou_threshold: float = 0.5,
) -> float:
    """All-point interpolated AP for one class.

    Detections are (scene id, score, box); each GT box can match at most
    one detection, visited in descending score order.
    """
    total_gt = sum(len(v) for v in gt_boxes.values())
    if total_gt == 0:
        return 0.0
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    matched: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gt_boxes.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        scene_id, _, box = detections[i]
        candidates = gt_boxes.get(scene_id, ())
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(candidates):
            v = iou(box, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold and not matched[scene_id][best_j]:
            matched[scene_id][best_j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / total_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    # precision envelope (running max from the right), then the exact
    # area under the recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(order) else precision
    ap = 0.0
    prev_recall = 0.0
    for r in range(len(order)):
        if tp[r] > 0:
            ap += (recall[r] - prev_recall) * envelope[r]
            prev_recall = recall[r]
    return float(ap)


def evaluate(
    params: ModelParams, scenes: Sequence[SyntheticScene], config: TrainConfig
) -> dict:
    """Per-class AP at IoU 0.5 over classes present in GT, their mean, and CorLoc."""
    num_classes = params.num_classes
    per_class_dets: list[list[tuple[str, float, Box]]] = [[] for _ in range(num_classes)]
    per_class_gt: list[dict[str, list[Box]]] = [dict() for _ in range(num_classes)]
    top_hits = np.zeros(num_classes)
    top_total = np.zeros(num_classes)

    for scene in scenes:
        detections = infer(params, scene.proposals, config)
        for det in detections:
            per_class_dets[det.class_index].append((scene.image_id, det.score, det.box))
        classes_here: set[int] = set()
        for g in scene.gt:
            per_class_gt[g.class_index].setdefault(scene.image_id, []).append(g.box)
            classes_here.add(g.class_index)
        for c in classes_here:
            top_total[c] += 1
            best = None
            for det in detections:
                if det.class_index == c and (best is None or det.score > best.score):
                    best = det
            if best is not None and any(
                iou(best.box, g.box) >= 0.5 for g in scene.gt if g.class_index == c
            ):
                top_hits[c] += 1

    present = [c for c in range(num_classes) if per_class_gt[c]]
    per_class_ap = {
        params.class_names[c]: average_precision(per_class_dets[c], per_class_gt[c])
        for c in present
    }
    per_class_corloc = {
        params.class_names[c]: float(top_hits[c] / top_total[c]) for c in present
    }
    mean_ap = float(np.mean([per_class_ap[params.class_names[c]] for c in present])) if present else 0.0
    corloc = float(np.mean([per_class_corloc[params.class_names[c]] for c in present])) if present else 0.0
    return {
        "per_class_ap": per_class_ap,
        "map": mean_ap,
        "per_class_corloc": per_class_corloc,
        "corloc": corloc,
        "num_scenes": len(scenes),
    }


def metrics_report(metrics: dict, config: TrainConfig) -> dict:
    report = dict(metrics)
    report["config_echo"] = asdict(config)
    report["seed"] = config.seed
    return report


def write_metrics(path: str | Path, report: Mapping) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
