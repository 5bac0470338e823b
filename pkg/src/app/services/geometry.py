import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.linspace(0.0, 2.0, 21)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [-pi, pi); angles already in range are returned unchanged."""
    if -math.pi <= yaw < math.pi:
        return yaw
    wrapped = (yaw + math.pi) % (2.0 * math.pi) - math.pi
    # float rounding can land exactly on +pi
    return -math.pi if wrapped >= math.pi else wrapped


@dataclass(frozen=True)
class Box3D:
    """Oriented box. `l` runs along the heading (local x), `w` across it (local y)."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        values = (self.x, self.y, self.z, self.w, self.l, self.h, self.yaw)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("Box values must be finite")
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise ValueError(f"Box size must be positive, got ({self.w}, {self.l}, {self.h})")
        for name, value in zip(("x", "y", "z", "w", "l", "h"), values):
            object.__setattr__(self, name, float(value))
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box3D":
        if len(values) != 7:
            raise ValueError(f"Expected 7 box values, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def size(self) -> Tuple[float, float, float]:
        return self.w, self.l, self.h

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    def as_tuple(self) -> Tuple[float, ...]:
        return self.x, self.y, self.z, self.w, self.l, self.h, self.yaw

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple())

    def moved_to(self, x: float, y: float, z: float, yaw: float | None = None) -> "Box3D":
        return Box3D(x, y, z, self.w, self.l, self.h, self.yaw if yaw is None else yaw)

    def enlarged(self, margin: float) -> "Box3D":
        return Box3D(self.x, self.y, self.z, self.w + 2 * margin, self.l + 2 * margin,
                     self.h + 2 * margin, self.yaw)


def rotation_2d(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def bev_corners(box: Box3D) -> np.ndarray:
    """Counter-clockwise BEV corners, shape (4, 2)."""
    half_l, half_w = box.l / 2.0, box.w / 2.0
    local = np.array([[-half_l, -half_w], [half_l, -half_w], [half_l, half_w], [-half_l, half_w]])
    return local @ rotation_2d(box.yaw).T + np.array([box.x, box.y])


def to_box_frame(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Express points (N x >=3) in the box frame: centred and rotated by -yaw."""
    local = np.array(points, dtype=np.float64, copy=True)
    if len(local) == 0:
        return local
    offset = local[:, :2] - np.array([box.x, box.y])
    local[:, :2] = offset @ rotation_2d(box.yaw)
    local[:, 2] = local[:, 2] - box.z
    return local


def from_box_frame(points: np.ndarray, box: Box3D) -> np.ndarray:
    world = np.array(points, dtype=np.float64, copy=True)
    if len(world) == 0:
        return world
    world[:, :2] = world[:, :2] @ rotation_2d(box.yaw).T + np.array([box.x, box.y])
    world[:, 2] = world[:, 2] + box.z
    return world


def points_in_box(points: np.ndarray, box: Box3D, tol: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the closed box grown by `tol` on every side."""
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    local = to_box_frame(np.asarray(points)[:, :3], box)
    return ((np.abs(local[:, 0]) <= box.l / 2.0 + tol)
            & (np.abs(local[:, 1]) <= box.w / 2.0 + tol)
            & (np.abs(local[:, 2]) <= box.h / 2.0 + tol))


def polygon_area(polygon: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise order."""
    if len(polygon) < 3:
        return 0.0
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _cross(edge_start: np.ndarray, edge_end: np.ndarray, point: np.ndarray) -> float:
    return float((edge_end[0] - edge_start[0]) * (point[1] - edge_start[1])
                 - (edge_end[1] - edge_start[1]) * (point[0] - edge_start[0]))


def _segment_intersection(p: np.ndarray, q: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    side_p, side_q = _cross(a, b, p), _cross(a, b, q)
    t = side_p / (side_p - side_q)
    return p + t * (q - p)


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of `subject` by the convex counter-clockwise `clip`."""
    output = [np.asarray(p, dtype=np.float64) for p in subject]
    for i in range(len(clip)):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % len(clip)]
        candidates, output = output, []
        for j, current in enumerate(candidates):
            previous = candidates[j - 1]
            current_inside = _cross(a, b, current) >= 0.0
            previous_inside = _cross(a, b, previous) >= 0.0
            if current_inside:
                if not previous_inside:
                    output.append(_segment_intersection(previous, current, a, b))
                output.append(current)
            elif previous_inside:
                output.append(_segment_intersection(previous, current, a, b))
    return np.array(output).reshape(-1, 2)


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    polygon = clip_polygon(bev_corners(a), bev_corners(b))
    if len(polygon) < 3:
        return 0.0
    return max(0.0, abs(polygon_area(polygon)))


def iou3d(a: Box3D, b: Box3D) -> float:
    if a == b:
        return 1.0
    # fixed argument order keeps the floating result symmetric
    if a.as_tuple() > b.as_tuple():
        a, b = b, a
    reach = (math.hypot(a.w, a.l) + math.hypot(b.w, b.l)) / 2.0
    if math.hypot(a.x - b.x, a.y - b.y) >= reach:
        return 0.0
    overlap_z = min(a.z + a.h / 2.0, b.z + b.h / 2.0) - max(a.z - a.h / 2.0, b.z - b.h / 2.0)
    if overlap_z <= 0.0:
        return 0.0
    area = bev_intersection_area(a, b)
    if area <= 0.0:
        return 0.0
    intersection = area * overlap_z
    union = a.volume + b.volume - intersection
    return min(1.0, max(0.0, intersection / union))


def center_distance(a: Box3D, b: Box3D) -> float:
    return math.sqrt((a.x - b.x) ** 2 + (a.y - b.y) ** 2 + (a.z - b.z) ** 2)


def _threshold_auc(values: Sequence[float], thresholds: np.ndarray, above: bool) -> float:
    if len(values) == 0:
        raise ValueError("Cannot compute an AUC over zero frames")
    data = np.asarray(values, dtype=np.float64)
    hits = 0
    for t in thresholds:
        hits += int(np.count_nonzero(data > t if above else data < t))
    return 100.0 * hits / (len(data) * len(thresholds))


def success_auc(ious: Sequence[float]) -> float:
    if any(not 0.0 <= v <= 1.0 for v in ious):
        raise ValueError("IoU values must lie in [0, 1]")
    return _threshold_auc(ious, SUCCESS_THRESHOLDS, above=True)


def precision_auc(distances: Sequence[float]) -> float:
    if any(v < 0.0 for v in distances):
        raise ValueError("Distances must be non-negative")
    return _threshold_auc(distances, PRECISION_THRESHOLDS, above=False)


@dataclass
class TrackScore:
    success: float
    precision: float
    ious: List[float] = field(default_factory=list)
    distances: List[float] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.ious)

    @classmethod
    def from_boxes(cls, predictions: Sequence[Box3D], ground_truth: Sequence[Box3D]) -> "TrackScore":
        if len(predictions) != len(ground_truth):
            raise ValueError(f"{len(predictions)} predictions for {len(ground_truth)} ground-truth boxes")
        ious = [iou3d(p, g) for p, g in zip(predictions, ground_truth)]
        distances = [center_distance(p, g) for p, g in zip(predictions, ground_truth)]
        return cls(success_auc(ious), precision_auc(distances), ious, distances)
