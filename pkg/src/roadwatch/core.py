"""Domain types and assessment math: box area, size classing, frame-skip policy, counting."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class OrderingError(Exception):
    """Raised when frames are observed out of sequence order."""


class ClassSet(enum.Enum):
    FOUR = "four"
    EIGHT = "eight"


class AnomalyClass(enum.Enum):
    """Road damage classes (RDD2022 naming)."""

    D00 = (0, "Longitudinal crack")
    D10 = (1, "Transverse crack")
    D20 = (2, "Alligator crack")
    D40 = (3, "Pothole")
    D43 = (4, "Crosswalk blur")
    D44 = (5, "White line blur")
    D50 = (6, "Manhole cover")
    REPAIR = (7, "Repair")

    def __init__(self, class_id: int, display_name: str):
        self.class_id = class_id
        self.display_name = display_name

    @classmethod
    def from_id(cls, class_id: int) -> AnomalyClass:
        for member in cls:
            if member.class_id == class_id:
                return member
        raise ValueError(f"unknown anomaly class id {class_id}")

    @classmethod
    def members(cls, class_set: ClassSet) -> tuple[AnomalyClass, ...]:
        if class_set is ClassSet.FOUR:
            return (cls.D00, cls.D10, cls.D20, cls.D40)
        return tuple(cls)


class SizeClass(enum.Enum):
    LARGE = "large"
    SMALL = "small"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner plus length (horizontal) and width (vertical), in pixels."""

    x: int
    y: int
    length: int
    width: int

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"box dimensions must be positive, got {self.length}x{self.width}")

    @property
    def area(self) -> int:
        return self.length * self.width


@dataclass(frozen=True)
class Detection:
    cls: AnomalyClass
    box: BoundingBox
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0,1], got {self.confidence}")


@dataclass(frozen=True)
class SizeConfig:
    """Area-threshold configuration: a box is large when it covers at least this fraction of the frame."""

    rho_fraction: float = 0.10

    def __post_init__(self):
        if not 0.0 < self.rho_fraction < 1.0:
            raise ValueError(f"rho_fraction must be in (0,1), got {self.rho_fraction}")

    def rho_pixels(self, frame_w: int, frame_h: int) -> float:
        if frame_w <= 0 or frame_h <= 0:
            raise ValueError(f"frame dimensions must be positive, got {frame_w}x{frame_h}")
        return self.rho_fraction * frame_w * frame_h


@dataclass(frozen=True)
class MotionState:
    speed_mps: float
    fps: float

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.speed_mps < 0:
            raise ValueError(f"speed must be nonnegative, got {self.speed_mps}")


@dataclass(frozen=True)
class SkipPolicy:
    """How many frames to drop after each processed one; stride is the period of processed frames."""

    fsi: float
    skip: int

    @property
    def stride(self) -> int:
        return self.skip + 1


def bbox_area(box: BoundingBox) -> int:
    """Box area in pixels squared (length times width, exact integer)."""
    return box.area


def classify_size(box: BoundingBox, frame_w: int, frame_h: int,
                  cfg: SizeConfig = SizeConfig()) -> SizeClass:
    """Large iff the box area meets the frame-area fraction threshold (inclusive)."""
    rho = cfg.rho_pixels(frame_w, frame_h)
    return SizeClass.LARGE if bbox_area(box) >= rho else SizeClass.SMALL


def compute_fsi(m: MotionState) -> float:
    """Road meters covered per captured frame: speed / fps."""
    return m.speed_mps / m.fps


def skip_policy(fsi: float) -> SkipPolicy:
    """Skip 5 frames when each frame spans at least half a meter, else skip 30."""
    if fsi < 0:
        raise ValueError(f"fsi must be nonnegative, got {fsi}")
    return SkipPolicy(fsi=fsi, skip=5 if fsi >= 0.5 else 30)


def kmh_to_mps(v_kmh: float) -> float:
    return v_kmh / 3.6


def should_process(frame_seq: int, policy: SkipPolicy) -> bool:
    """True on every stride-th frame, starting with frame 0."""
    return frame_seq % policy.stride == 0


@dataclass
class AnomalyCounter:
    """Per-class running tallies over one pipeline session."""

    counts: dict[AnomalyClass, int] = field(default_factory=dict)
    last_seq: int | None = None

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def count(self, cls: AnomalyClass) -> int:
        return self.counts.get(cls, 0)

    def add(self, cls: AnomalyClass, n: int = 1) -> None:
        self.counts[cls] = self.counts.get(cls, 0) + n


def counter_observe(counter: AnomalyCounter, frame_seq: int,
                    detections: list[Detection], policy: SkipPolicy) -> AnomalyCounter:
    """Fold one frame into the counter, honoring the skip policy; frames must arrive in order."""
    if counter.last_seq is not None and frame_seq <= counter.last_seq:
        raise OrderingError(
            f"frame {frame_seq} not after last processed {counter.last_seq}")
    if should_process(frame_seq, policy):
        for det in detections:
            counter.add(det.cls)
    counter.last_seq = frame_seq
    return counter


def counter_reset(counter: AnomalyCounter) -> AnomalyCounter:
    counter.counts.clear()
    counter.last_seq = None
    return counter
