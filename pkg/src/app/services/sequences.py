import base64
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Literal, Optional, Protocol, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from src.app.exceptions import DataError
from src.app.services.geometry import Box3D
from src.app.services.pillars import POINT_DIMS, as_point_cloud

logger = logging.getLogger(__name__)

FORMAT_NAME = "tracking-sequence"
FORMAT_VERSION = 1
SEQUENCE_SUFFIX = ".seq"


@dataclass
class Frame:
    points: np.ndarray
    box: Box3D


@dataclass
class Sequence:
    frames: List[Frame]
    object_id: str = "unknown"
    category: str = "Car"

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError(f"A sequence needs at least 2 frames, got {len(self.frames)}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def boxes(self) -> List[Box3D]:
        return [f.box for f in self.frames]

    @property
    def clouds(self) -> List[np.ndarray]:
        return [f.points for f in self.frames]


class SequenceHeader(BaseModel):
    format: Literal["tracking-sequence"] = FORMAT_NAME
    version: Literal[1] = FORMAT_VERSION
    encoding: Literal["text", "binary"] = "text"
    object_id: str
    category: str
    num_frames: int = Field(..., ge=2)


class FrameRecord(BaseModel):
    frame: int = Field(..., ge=0)
    box: Tuple[float, float, float, float, float, float, float]
    num_points: int = Field(..., ge=0)
    points: Optional[List[Tuple[float, float, float, float]]] = None
    points_b64: Optional[str] = None

    def decode_points(self) -> np.ndarray:
        if self.points_b64 is not None:
            raw = np.frombuffer(base64.b64decode(self.points_b64), dtype="<f4")
            cloud = raw.astype(np.float64).reshape(-1, POINT_DIMS)
        else:
            cloud = np.asarray(self.points or [], dtype=np.float64).reshape(-1, POINT_DIMS)
        if len(cloud) != self.num_points:
            raise DataError(f"frame {self.frame}: expected {self.num_points} points, got {len(cloud)}")
        return as_point_cloud(cloud)


class ResultRecord(BaseModel):
    sequence: str
    frame: int
    box: Tuple[float, float, float, float, float, float, float]
    score: float


class SequenceReader(Protocol):
    """Anything able to produce sequences; dataset converters implement this."""

    def read(self, path: Path) -> Sequence: ...


def encode_frame(index: int, frame: Frame, encoding: str) -> FrameRecord:
    cloud = as_point_cloud(frame.points)
    record = FrameRecord(frame=index, box=frame.box.as_tuple(), num_points=len(cloud))
    if encoding == "binary":
        record.points_b64 = base64.b64encode(cloud.astype("<f4").tobytes()).decode("ascii")
    else:
        record.points = [tuple(p) for p in cloud.tolist()]
    return record


def write_sequence(sequence: Sequence, path: str | Path, encoding: str = "text"):
    header = SequenceHeader(encoding=encoding, object_id=sequence.object_id, category=sequence.category,
                            num_frames=len(sequence))
    lines = [header.model_dump_json()]
    lines += [encode_frame(i, f, encoding).model_dump_json(exclude_none=True) for i, f in enumerate(sequence.frames)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sequence(path: str | Path) -> Sequence:
    try:
        lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as e:
        raise DataError(f"Cannot read sequence {path}: {e}") from e
    if not lines:
        raise DataError(f"{path}: empty sequence file")
    try:
        header = SequenceHeader.model_validate_json(lines[0])
        records = [FrameRecord.model_validate_json(line) for line in lines[1:]]
    except ValidationError as e:
        raise DataError(f"{path}: {e}") from e
    if len(records) != header.num_frames:
        raise DataError(f"{path}: header announces {header.num_frames} frames, found {len(records)}")
    frames = []
    for expected, record in enumerate(records):
        if record.frame != expected:
            raise DataError(f"{path}: frame {record.frame} out of order, expected {expected}")
        try:
            frames.append(Frame(record.decode_points(), Box3D.from_array(record.box)))
        except ValueError as e:
            raise DataError(f"{path}: frame {record.frame}: {e}") from e
    return Sequence(frames, header.object_id, header.category)


class SequenceFileReader:

    def read(self, path: Path) -> Sequence:
        return read_sequence(path)


def load_sequences(path: str | Path, reader: SequenceReader | None = None) -> List[Sequence]:
    reader = reader or SequenceFileReader()
    root = Path(path)
    files = sorted(root.glob(f"*{SEQUENCE_SUFFIX}")) if root.is_dir() else [root]
    if not files or not files[0].exists():
        raise DataError(f"No sequence files found at {path}")
    logger.info("Loading %d sequence files from %s", len(files), path)
    return [reader.read(f) for f in files]


def write_sequences(sequences: Iterable[Sequence], directory: str | Path, encoding: str = "text") -> List[Path]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, seq in enumerate(sequences):
        path = root / f"{i:04d}_{seq.object_id}{SEQUENCE_SUFFIX}"
        write_sequence(seq, path, encoding)
        paths.append(path)
    return paths


def write_results(records: Iterable[ResultRecord], path: str | Path):
    Path(path).write_text("".join(r.model_dump_json() + "\n" for r in records), encoding="utf-8")
