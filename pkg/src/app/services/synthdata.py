import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence as Seq, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
from scipy.stats import spearmanr

from src.app.schemas import RunConfig, ScenarioConfig
from src.app.services.geometry import Box3D, from_box_frame, points_in_box, to_box_frame
from src.app.services.sequences import Frame, Sequence
from src.app.services.tracker import Tracker

logger = logging.getLogger(__name__)

# outward normal in the box frame and the two half extents spanning the face
FACES: Dict[str, Tuple[Tuple[float, float, float], str, str]] = {
    "front": ((1.0, 0.0, 0.0), "w", "h"),
    "back": ((-1.0, 0.0, 0.0), "w", "h"),
    "left": ((0.0, 1.0, 0.0), "l", "h"),
    "right": ((0.0, -1.0, 0.0), "l", "h"),
    "top": ((0.0, 0.0, 1.0), "l", "w"),
}


def step_motion(box: Box3D, cfg: ScenarioConfig, rng: np.random.Generator) -> Box3D:
    """Constant velocity along the heading plus a yaw rate, both with Gaussian process noise."""
    yaw = box.yaw + cfg.yaw_rate + (rng.normal(0.0, cfg.yaw_noise_std) if cfg.yaw_noise_std > 0 else 0.0)
    noise = rng.normal(0.0, cfg.noise_std, 2) if cfg.noise_std > 0 else np.zeros(2)
    x = box.x + cfg.velocity * math.cos(yaw) + noise[0]
    y = box.y + cfg.velocity * math.sin(yaw) + noise[1]
    return box.moved_to(x, y, box.z, yaw)


def visible_faces(box: Box3D, sensor: np.ndarray, dropped: Seq[str] = ()) -> List[str]:
    direction = to_box_frame(np.asarray(sensor, dtype=np.float64)[None, :3], box)[0]
    axis_half = (box.l / 2.0, box.w / 2.0, box.h / 2.0)
    faces = []
    for name, (normal, _, _) in FACES.items():
        axis = int(np.argmax(np.abs(normal)))
        if name not in dropped and normal[axis] * direction[axis] > axis_half[axis]:
            faces.append(name)
    return faces


def sample_surface(box: Box3D, count: int, faces: Seq[str], rng: np.random.Generator) -> np.ndarray:
    """`count` points uniform over the union of `faces`, with uniform intensity, in world frame."""
    if count == 0 or not faces:
        return np.zeros((0, 4))
    half = {"l": box.l / 2.0, "w": box.w / 2.0, "h": box.h / 2.0}
    areas = np.array([4.0 * half[FACES[f][1]] * half[FACES[f][2]] for f in faces])
    picks = rng.choice(len(faces), size=count, p=areas / areas.sum())
    local = np.zeros((count, 3))
    for i, name in enumerate(faces):
        rows = np.flatnonzero(picks == i)
        normal, first, second = FACES[name]
        axis = int(np.argmax(np.abs(normal)))
        span_axes = [a for a in range(3) if a != axis]
        local[rows, axis] = normal[axis] * (half["l"], half["w"], half["h"])[axis]
        for span_axis, extent in zip(span_axes, (first, second)):
            local[rows, span_axis] = rng.uniform(-half[extent], half[extent], len(rows))
    world = from_box_frame(local, box)
    return np.concatenate([world, rng.uniform(0.0, 1.0, (count, 1))], axis=1)


def sample_clutter(box: Box3D, cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in the clutter area around the target centre, none inside the target."""
    low = np.array(cfg.clutter_area[:3]) + box.center
    high = np.array(cfg.clutter_area[3:]) + box.center
    chunks, have = [], 0
    for _ in range(100):
        if have >= cfg.clutter_points:
            break
        draw = rng.uniform(low, high, (cfg.clutter_points, 3))
        draw = draw[~points_in_box(draw, box)]
        chunks.append(draw)
        have += len(draw)
    xyz = np.concatenate(chunks)[:cfg.clutter_points] if chunks else np.zeros((0, 3))
    return np.concatenate([xyz, rng.uniform(0.0, 1.0, (len(xyz), 1))], axis=1)


def generate_sequence(cfg: ScenarioConfig) -> Sequence:
    rng = np.random.default_rng(cfg.seed)
    w, l, h = cfg.size
    x, y, z, yaw = cfg.initial_pose
    sensor = np.array([0.0, 0.0, cfg.sensor_height])
    box = Box3D(x, y, z, w, l, h, yaw)
    frames = []
    for t in range(cfg.n_frames):
        if t > 0:
            box = step_motion(box, cfg, rng)
        count = cfg.first_frame_points if t == 0 and cfg.first_frame_points >= 0 else cfg.points_on_target
        target = sample_surface(box, count, visible_faces(box, sensor, cfg.drop_faces), rng)
        cloud = np.concatenate([target, sample_clutter(box, cfg, rng)])
        frames.append(Frame(cloud[rng.permutation(len(cloud))], box))
    return Sequence(frames, cfg.object_id, cfg.category)


def random_scenarios(base: ScenarioConfig, count: int, seed: int) -> List[ScenarioConfig]:
    """Varied start pose and motion around `base`, one seed per sequence."""
    rng = np.random.default_rng(seed)
    scenarios = []
    for i in range(count):
        radius, bearing = rng.uniform(6.0, 20.0), rng.uniform(-math.pi, math.pi)
        scenarios.append(base.model_copy(update={
            "initial_pose": (radius * math.cos(bearing), radius * math.sin(bearing), base.initial_pose[2],
                             rng.uniform(-math.pi, math.pi)),
            "velocity": base.velocity * rng.uniform(0.5, 1.5),
            "yaw_rate": base.yaw_rate + rng.normal(0.0, 0.02),
            "object_id": f"{base.object_id}-{i:04d}",
            "seed": int(rng.integers(0, 2**31 - 1)),
        }))
    return scenarios


def generate_sequences(base: ScenarioConfig, count: int, seed: int) -> List[Sequence]:
    return [generate_sequence(s) for s in random_scenarios(base, count, seed)]


def first_frame_target_points(seq: Sequence) -> int:
    first = seq.frames[0]
    return int(np.count_nonzero(points_in_box(first.points, first.box, tol=1e-6)))


@dataclass
class SweepRow:
    count: int
    success: float
    precision: float
    sequences: int


@dataclass
class SweepResult:
    rows: List[SweepRow]
    spearman: float
    pvalue: float
    samples: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def empty_buckets(self) -> List[int]:
        return [row.count for row in self.rows if row.sequences == 0]


def _bucket_of(points: int, edges: Seq[int]) -> int | None:
    """Index of the last edge not above `points`; buckets are [edge_i, edge_i+1)."""
    index = None
    for i, edge in enumerate(edges):
        if points >= edge:
            index = i
    return index


def sparsity_sweep(model, cfg: RunConfig, point_counts: Seq[int] | None = None,
                   tracker: Tracker | None = None) -> SweepResult:
    """Success/Precision as a function of the first frame's target point count."""
    counts = sorted(set(point_counts or cfg.sweep.point_counts))
    if not counts:
        raise ValueError("Sweep needs at least one point count")
    tracker = tracker or Tracker(model, cfg)
    buckets: Dict[int, List[Tuple[int, float, float]]] = {i: [] for i in range(len(counts))}
    samples = []
    for i, count in enumerate(counts):
        base = cfg.scenario.model_copy(update={"first_frame_points": count, "object_id": f"sweep{count}"})
        for seq in generate_sequences(base, cfg.sweep.sequences_per_bucket, cfg.data.eval_seed + i):
            observed = first_frame_target_points(seq)
            bucket = _bucket_of(observed, counts)
            if bucket is None:
                logger.warning("Sequence %s has %d first-frame points, below every bucket", seq.object_id, observed)
                continue
            score = tracker.track_sequence(seq).score
            buckets[bucket].append((score.num_frames, score.success, score.precision))
            samples.append((observed, score.success))
    rows = []
    for i, count in enumerate(counts):
        scores = buckets[i]
        if not scores:
            logger.warning("Sweep bucket %d has no sequences", count)
            rows.append(SweepRow(count, math.nan, math.nan, 0))
            continue
        frames = sum(n for n, _, _ in scores)
        rows.append(SweepRow(count, sum(n * s for n, s, _ in scores) / frames,
                             sum(n * p for n, _, p in scores) / frames, len(scores)))
    rho, pvalue = _rank_correlation(samples)
    logger.info("Sweep over %d buckets: spearman %.3f (p=%.3g)", len(rows), rho, pvalue)
    return SweepResult(rows, rho, pvalue, samples)


def _rank_correlation(samples: Seq[Tuple[int, float]]) -> Tuple[float, float]:
    if len(samples) < 2:
        return math.nan, math.nan
    xs, ys = zip(*samples)
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        # constant input has no rank correlation
        return math.nan, math.nan
    result = spearmanr(xs, ys)
    return float(result.statistic), float(result.pvalue)


def write_sweep(result: SweepResult, directory: str | Path) -> Tuple[Path, Path]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    table = root / "sweep.csv"
    with open(table, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["count", "success", "precision", "sequences"])
        for row in result.rows:
            writer.writerow([row.count, f"{row.success:.4f}", f"{row.precision:.4f}", row.sequences])
        writer.writerow(["spearman", f"{result.spearman:.4f}", f"{result.pvalue:.4g}", len(result.samples)])

    plot = root / "sweep.png"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    counts = [row.count for row in result.rows]
    ax.plot(counts, [row.success for row in result.rows], marker="o", label="Success")
    ax.plot(counts, [row.precision for row in result.rows], marker="s", label="Precision")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("points on target in the first frame")
    ax.set_ylabel("score")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(plot, dpi=120)
    plt.close(fig)
    return table, plot
