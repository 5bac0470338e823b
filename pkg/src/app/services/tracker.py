import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence as Seq, Tuple

import numpy as np
import torch

from src.app.exceptions import ConfigError
from src.app.models.decoder import pick_best
from src.app.schemas import RunConfig
from src.app.services.geometry import Box3D, TrackScore, points_in_box, to_box_frame
from src.app.services.pillars import as_point_cloud, crop_points
from src.app.services.sequences import ResultRecord, Sequence

logger = logging.getLogger(__name__)


class TemplateStrategy(str, Enum):
    FIRST = "F"
    PREVIOUS = "P"
    FIRST_AND_PREVIOUS = "FP"
    ALL_PREVIOUS = "AP"

    @classmethod
    def parse(cls, value: "str | TemplateStrategy") -> "TemplateStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace("&", ""))
        except ValueError:
            raise ValueError(f"Unknown template strategy '{value}'") from None


def crop_in_box(points: np.ndarray, box: Box3D, margin: float) -> np.ndarray:
    """Points inside `box` grown by `margin` per side, expressed in the box frame."""
    cloud = as_point_cloud(points)
    return to_box_frame(cloud[points_in_box(cloud, box.enlarged(margin))], box)


def crop_template(frames_so_far: Seq[np.ndarray], boxes_so_far: Seq[Box3D],
                  strategy: "str | TemplateStrategy", margin: float = 0.25) -> np.ndarray:
    """Template points in the canonical box frame.

    boxes_so_far[0] is the first-frame ground truth, later entries are the tracker's own results.
    Unions keep duplicates.
    """
    if not frames_so_far:
        raise ValueError("Template needs at least one previous frame")
    if len(frames_so_far) != len(boxes_so_far):
        raise ValueError(f"{len(frames_so_far)} frames but {len(boxes_so_far)} boxes")
    strategy = TemplateStrategy.parse(strategy)
    first = crop_in_box(frames_so_far[0], boxes_so_far[0], margin)
    if len(frames_so_far) == 1 or strategy is TemplateStrategy.FIRST:
        return first
    previous = crop_in_box(frames_so_far[-1], boxes_so_far[-1], margin)
    if strategy is TemplateStrategy.PREVIOUS:
        return previous
    if strategy is TemplateStrategy.FIRST_AND_PREVIOUS:
        return np.concatenate([first, previous])
    crops = [crop_in_box(f, b, margin) for f, b in zip(frames_so_far, boxes_so_far)]
    return np.concatenate(crops)


@dataclass(frozen=True)
class SearchTransform:
    """Axis-aligned translation between the world and a search crop."""

    offset: Tuple[float, float, float]

    def to_world(self, box: Box3D) -> Box3D:
        ox, oy, oz = self.offset
        return box.moved_to(box.x + ox, box.y + oy, box.z + oz)

    def to_local(self, box: Box3D) -> Box3D:
        ox, oy, oz = self.offset
        return box.moved_to(box.x - ox, box.y - oy, box.z - oz)

    def points_to_local(self, points: np.ndarray) -> np.ndarray:
        local = as_point_cloud(points).copy()
        local[:, :3] -= np.array(self.offset)
        return local


def crop_search(frame: np.ndarray, prev_box: Box3D, area: Seq[float]) -> Tuple[np.ndarray, SearchTransform]:
    transform = SearchTransform((prev_box.x, prev_box.y, prev_box.z))
    return crop_points(transform.points_to_local(frame), area), transform


@dataclass
class TrackResult:
    boxes: List[Box3D]
    frame_scores: List[float]
    score: TrackScore


class Tracker:

    def __init__(self, model, cfg: RunConfig):
        model_cfg = getattr(model, "cfg", None)
        if model_cfg is not None and model_cfg.config_hash != cfg.config_hash:
            raise ConfigError("Model was built for a different configuration")
        self.model = model
        self.cfg = cfg

    def _predict_box(self, template: np.ndarray, search: np.ndarray, transform: SearchTransform,
                     known_size: Tuple[float, float, float]) -> Tuple[Box3D, float]:
        predictions = self.model.predict(template, search)
        local = pick_best(predictions, known_size)
        return transform.to_world(local), float(torch.max(predictions.scores))

    def track_sequence(self, seq: Sequence, strategy: "str | TemplateStrategy | None" = None) -> TrackResult:
        strategy = TemplateStrategy.parse(strategy or self.cfg.tracker.strategy)
        first = seq.frames[0].box
        boxes, frame_scores = [first], [1.0]
        for t in range(1, len(seq)):
            template = crop_template(seq.clouds[:t], boxes, strategy, self.cfg.tracker.template_margin)
            search, transform = crop_search(seq.frames[t].points, boxes[-1], self.cfg.pillars.area)
            box, score = self._predict_box(template, search, transform, first.size)
            boxes.append(box)
            frame_scores.append(score)
        result = TrackScore.from_boxes(boxes[1:], seq.boxes[1:])
        logger.info("Sequence %s (%s): success %.2f precision %.2f over %d frames", seq.object_id,
                    seq.category, result.success, result.precision, result.num_frames)
        return TrackResult(boxes, frame_scores, result)


@dataclass
class CategoryScore:
    frames: int
    success: float
    precision: float


@dataclass
class EvaluationSummary:
    categories: Dict[str, CategoryScore]
    mean: CategoryScore
    records: List[ResultRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "categories": {name: vars(score) for name, score in self.categories.items()},
            "mean": vars(self.mean),
        }


def _weighted(scores: Seq[Tuple[int, float, float]]) -> CategoryScore:
    frames = sum(n for n, _, _ in scores)
    success = sum(n * s for n, s, _ in scores) / frames
    precision = sum(n * p for n, _, p in scores) / frames
    return CategoryScore(frames, success, precision)


def evaluate(tracker: Tracker, sequences: Seq[Sequence], strategy=None) -> EvaluationSummary:
    """Frame-weighted Success/Precision per category and over all categories."""
    if not sequences:
        raise ValueError("No sequences to evaluate")
    per_category: Dict[str, List[Tuple[int, float, float]]] = {}
    records: List[ResultRecord] = []
    for seq in sequences:
        result = tracker.track_sequence(seq, strategy)
        per_category.setdefault(seq.category, []).append(
            (result.score.num_frames, result.score.success, result.score.precision))
        for i, (box, score) in enumerate(zip(result.boxes, result.frame_scores)):
            records.append(ResultRecord(sequence=seq.object_id, frame=i, box=box.as_tuple(), score=score))
    categories = {name: _weighted(scores) for name, scores in sorted(per_category.items())}
    mean = _weighted([(c.frames, c.success, c.precision) for c in categories.values()])
    return EvaluationSummary(categories, mean, records)


def format_summary(summary: EvaluationSummary) -> str:
    rows = [f"{'category':<12}{'frames':>8}{'success':>10}{'precision':>11}"]
    for name, score in summary.categories.items():
        rows.append(f"{name:<12}{score.frames:>8}{score.success:>10.2f}{score.precision:>11.2f}")
    rows.append(f"{'Mean':<12}{summary.mean.frames:>8}{summary.mean.success:>10.2f}{summary.mean.precision:>11.2f}")
    return "\n".join(rows)
