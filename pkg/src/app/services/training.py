import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence as Seq, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel
from scipy.optimize import linear_sum_assignment

from src.app.exceptions import DataError, NumericError
from src.app.models.decoder import DecoderOutput, PredictionSet
from src.app.models.tracker_net import FUSED_STRIDE, SiameseTracker
from src.app.schemas import LossWeights, PillarConfig, RunConfig
from src.app.services.geometry import Box3D, points_in_box
from src.app.services.pillars import PillarTensor, crop_points, pillar_indices, pillarize
from src.app.services.sequences import Sequence
from src.app.services.tracker import crop_search, crop_template

logger = logging.getLogger(__name__)


def box_state(box: Box3D) -> np.ndarray:
    return np.array([box.x, box.y, box.z, math.sin(box.yaw), math.cos(box.yaw)])


@dataclass
class LabelSet:
    """One entry per foreground cell, all sharing the ground-truth state."""

    cells: np.ndarray  # (N_fg, 2) cell indices (ix, iy) at the label stride
    target: np.ndarray  # (5,)
    grid_size: Tuple[int, int]

    @property
    def n_fg(self) -> int:
        return len(self.cells)

    @property
    def targets(self) -> np.ndarray:
        return np.tile(self.target, (self.n_fg, 1))

    @property
    def flat_indices(self) -> np.ndarray:
        return self.cells[:, 0] * self.grid_size[1] + self.cells[:, 1]


def augment_labels(points: np.ndarray, gt: Box3D, cfg: PillarConfig, stride: int = FUSED_STRIDE) -> LabelSet:
    """Every occupied stride-`stride` BEV cell inside the box is a positive label."""
    cloud = crop_points(points, cfg.area)
    inside = cloud[points_in_box(cloud, gt)]
    nx, ny = cfg.grid_size
    grid = (nx // stride, ny // stride)
    if len(inside):
        cells = np.unique(pillar_indices(inside, cfg) // stride, axis=0)
    else:
        x_min, y_min = cfg.area[0], cfg.area[1]
        ix = int(np.clip(math.floor((gt.x - x_min) / (cfg.pillar_size[0] * stride)), 0, grid[0] - 1))
        iy = int(np.clip(math.floor((gt.y - y_min) / (cfg.pillar_size[1] * stride)), 0, grid[1] - 1))
        cells = np.array([[ix, iy]])
    return LabelSet(cells.astype(np.int64), box_state(gt), grid)


def hungarian(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment of min(rows, cols) pairs."""
    rows, cols = linear_sum_assignment(cost)
    return rows.astype(np.int64), cols.astype(np.int64)


@torch.no_grad()
def match_cost(preds: PredictionSet, labels: LabelSet, w: LossWeights) -> np.ndarray:
    prob = preds.logits.sigmoid()
    targets = torch.as_tensor(labels.targets, dtype=preds.boxes.dtype, device=preds.boxes.device)
    l1 = torch.cdist(preds.boxes, targets, p=1)
    cost = -w.cls * prob[:, None] + w.l1 * l1
    return cost.cpu().numpy().astype(np.float64)


def match(preds: PredictionSet, labels: LabelSet, w: LossWeights) -> Tuple[np.ndarray, np.ndarray]:
    if labels.n_fg == 0:
        raise ValueError("Cannot match against an empty label set")
    return hungarian(match_cost(preds, labels, w))


def dense_assignment(labels: LabelSet) -> Tuple[np.ndarray, np.ndarray]:
    return labels.flat_indices, np.arange(labels.n_fg)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    cls: torch.Tensor
    l1: torch.Tensor

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(self.total + other.total, self.cls + other.cls, self.l1 + other.l1)

    def scaled(self, factor: float) -> "LossBreakdown":
        return LossBreakdown(self.total * factor, self.cls * factor, self.l1 * factor)


def set_loss(preds: PredictionSet, labels: LabelSet, assignment: Tuple[np.ndarray, np.ndarray],
             w: LossWeights) -> LossBreakdown:
    """Cross-entropy over every prediction (matched -> object) plus L1 over matched states."""
    pred_idx, label_idx = (torch.as_tensor(a, dtype=torch.long, device=preds.logits.device) for a in assignment)
    target_cls = torch.zeros_like(preds.logits)
    target_cls[pred_idx] = 1.0
    cls = F.binary_cross_entropy_with_logits(preds.logits, target_cls)
    if len(pred_idx):
        targets = torch.as_tensor(labels.targets, dtype=preds.boxes.dtype, device=preds.boxes.device)
        l1 = (preds.boxes[pred_idx] - targets[label_idx]).abs().sum(-1).mean()
    else:
        l1 = preds.boxes.sum() * 0.0
    return LossBreakdown(w.cls * cls + w.l1 * l1, cls, l1)


def compute_loss(output: DecoderOutput, labels: Seq[LabelSet], w: LossWeights,
                 dense_stage_one: bool = False) -> LossBreakdown:
    """Batch mean of the stage-two set loss plus, when present, the stage-one loss."""
    total = None
    batch = len(labels)
    for b, label_set in enumerate(labels):
        final = output.predictions.sample(b)
        loss = set_loss(final, label_set, match(final, label_set, w), w)
        if output.stage_one is not None:
            dense = PredictionSet(output.stage_one.boxes[b], output.stage_one.logits[b])
            assignment = dense_assignment(label_set) if dense_stage_one else match(dense, label_set, w)
            loss = loss + set_loss(dense, label_set, assignment, w)
        total = loss if total is None else total + loss
    return total.scaled(1.0 / batch)


@dataclass
class TrainingSample:
    template: PillarTensor
    search: PillarTensor
    target: Box3D
    labels: LabelSet


def build_samples(sequences: Seq[Sequence], cfg: RunConfig, rng: np.random.Generator) -> List[TrainingSample]:
    """Every frame t >= 1 of every sequence, searched around a jittered previous ground truth."""
    samples = []
    for seq in sequences:
        boxes = seq.boxes
        for t in range(1, len(seq)):
            prev = boxes[t - 1]
            jx, jy = rng.normal(0.0, cfg.training.search_jitter, 2) if cfg.training.search_jitter > 0 else (0.0, 0.0)
            template = crop_template(seq.clouds[:t], boxes[:t], cfg.training.strategy, cfg.tracker.template_margin)
            search, transform = crop_search(seq.frames[t].points, prev.moved_to(prev.x + jx, prev.y + jy, prev.z),
                                            cfg.pillars.area)
            target = transform.to_local(boxes[t])
            samples.append(TrainingSample(
                template=pillarize(crop_points(template, cfg.template_pillars.area), cfg.template_pillars, cfg.seed),
                search=pillarize(search, cfg.pillars, cfg.seed),
                target=target,
                labels=augment_labels(search, target, cfg.pillars),
            ))
    if not samples:
        raise DataError("No training samples could be built")
    return samples


class MetricRecord(BaseModel):
    step: int
    loss: float
    cls: float
    l1: float
    lr: float


def _diagnostics(model: SiameseTracker, output: DecoderOutput) -> Dict[str, float]:
    info = {"nonfinite_logits": int((~torch.isfinite(output.predictions.logits)).sum()),
            "nonfinite_boxes": int((~torch.isfinite(output.predictions.boxes)).sum())}
    info["nonfinite_params"] = sum(int((~torch.isfinite(p)).sum()) for p in model.parameters())
    return info


class Trainer:

    def __init__(self, model: SiameseTracker, cfg: RunConfig, total_steps: int):
        self.model = model
        self.cfg = cfg
        self.total_steps = total_steps
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr,
                                           weight_decay=cfg.optim.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.MultiStepLR(self.optimizer, self.milestones(),
                                                              gamma=cfg.optim.gamma)
        self.step = 0

    def milestones(self) -> List[int]:
        return sorted({max(1, int(round(f * self.total_steps))) for f in self.cfg.optim.milestones})

    def train_step(self, batch: Seq[TrainingSample]) -> MetricRecord:
        self.model.train()
        lr = self.optimizer.param_groups[0]["lr"]
        output = self.model(self.model.bev([s.template for s in batch]), self.model.bev([s.search for s in batch]))
        if not (torch.isfinite(output.predictions.logits).all() and torch.isfinite(output.predictions.boxes).all()):
            raise NumericError(f"Non-finite network output at step {self.step + 1}",
                               _diagnostics(self.model, output))
        losses = compute_loss(output, [s.labels for s in batch], self.cfg.loss, self.cfg.training.dense_stage_one)
        if not torch.isfinite(losses.total):
            raise NumericError(f"Non-finite loss at step {self.step + 1}", _diagnostics(self.model, output))
        self.optimizer.zero_grad()
        losses.total.backward()
        self.optimizer.step()
        self.scheduler.step()
        self.step += 1
        return MetricRecord(step=self.step, loss=float(losses.total), cls=float(losses.cls),
                            l1=float(losses.l1), lr=lr)

    def state_dict(self) -> dict:
        return {"optimizer": self.optimizer.state_dict(), "scheduler": self.scheduler.state_dict(),
                "step": self.step}

    def load_state_dict(self, state: dict):
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.step = state["step"]
        # decay boundaries follow this run's step budget, not the checkpoint's
        self.scheduler.milestones = Counter(self.milestones())
        self.scheduler.last_epoch = self.step
        decays = sum(1 for m in self.scheduler.milestones if m <= self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = group["initial_lr"] * self.cfg.optim.gamma ** decays


def steps_per_epoch(num_samples: int, batch_size: int) -> int:
    return max(1, math.ceil(num_samples / batch_size))


def planned_steps(cfg: RunConfig, num_samples: int) -> int:
    if cfg.training.max_steps:
        return cfg.training.max_steps
    return cfg.training.epochs * steps_per_epoch(num_samples, cfg.training.batch_size)


def fit(trainer: Trainer, sequences: Seq[Sequence], metrics_path: str | Path | None = None) -> List[MetricRecord]:
    """Run until the planned step count, writing one metric record per step.

    A fresh run truncates `metrics_path`; a resumed trainer appends to it.
    """
    cfg = trainer.cfg
    records: List[MetricRecord] = []
    epoch = trainer.step // steps_per_epoch(sum(len(s) - 1 for s in sequences), cfg.training.batch_size)
    sink = open(metrics_path, "a" if trainer.step else "w", encoding="utf-8") if metrics_path else None
    try:
        while trainer.step < trainer.total_steps:
            rng = np.random.default_rng([cfg.seed, epoch])
            samples = build_samples(sequences, cfg, rng)
            order = rng.permutation(len(samples))
            per_epoch = steps_per_epoch(len(samples), cfg.training.batch_size)
            # on resume, skip the batches this epoch already consumed
            first_batch = trainer.step - epoch * per_epoch
            for i in range(max(0, first_batch), per_epoch):
                if trainer.step >= trainer.total_steps:
                    break
                idx = order[i * cfg.training.batch_size:(i + 1) * cfg.training.batch_size]
                record = trainer.train_step([samples[j] for j in idx])
                records.append(record)
                if sink:
                    sink.write(record.model_dump_json() + "\n")
                if record.step % cfg.training.log_every == 0:
                    logger.info("step %d loss %.4f cls %.4f l1 %.4f lr %.2e", record.step, record.loss,
                                record.cls, record.l1, record.lr)
            epoch += 1
    finally:
        if sink:
            sink.close()
    return records


def save_checkpoint(path: str | Path, model: SiameseTracker, trainer: Trainer | None = None):
    torch.save({
        "model": model.state_dict(),
        "trainer": trainer.state_dict() if trainer else None,
        "config": model.cfg.to_text(),
        "config_hash": model.cfg.config_hash,
    }, path)


def load_checkpoint(path: str | Path) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as e:
        raise DataError(f"Cannot read checkpoint {path}: {e}") from e
