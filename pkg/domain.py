"""
Domain module for StixelPointNet
Holds the value types shared by every service plus elementary rectangle geometry
"""

import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Tuple

import numpy as np


# Mask codes are label_id * INSTANCE_CODE_BASE + counter; codes below the base are background
INSTANCE_CODE_BASE = 1000


class StixelPointNetError(Exception):
    """Base class of every error raised by this package."""


class InvalidGeometryError(StixelPointNetError, ValueError):
    """A Stixel, box or frame violates its geometric invariants."""


class ConfigError(StixelPointNetError, ValueError):
    """A parameter lies outside the range its owning module accepts."""


class EmptyDatasetError(StixelPointNetError):
    """An operation that needs at least one sample got none."""


class Rect(NamedTuple):
    """Pixel rectangle, half-open [u_tl, u_br) x [v_tl, v_br)."""
    u_tl: float
    v_tl: float
    u_br: float
    v_br: float

    @property
    def width(self) -> float:
        return self.u_br - self.u_tl

    @property
    def height(self) -> float:
        return self.v_br - self.v_tl

    @property
    def center(self) -> Tuple[float, float]:
        return (self.u_tl + self.u_br) / 2.0, (self.v_tl + self.v_br) / 2.0


def rect_area(rect: Rect) -> float:
    """
    Area of a pixel rectangle.

    Args:
        rect: (u_tl, v_tl, u_br, v_br)

    Returns:
        float: (u_br - u_tl) * (v_br - v_tl), zero for degenerate rectangles
    """
    u_tl, v_tl, u_br, v_br = rect
    return max(0.0, u_br - u_tl) * max(0.0, v_br - v_tl)


def rect_intersection_area(a: Rect, b: Rect) -> float:
    """Area of the geometric intersection of two rectangles, 0 when disjoint."""
    du = min(a[2], b[2]) - max(a[0], b[0])
    dv = min(a[3], b[3]) - max(a[1], b[1])
    if du <= 0 or dv <= 0:
        return 0.0
    return du * dv


def rect_pixel_bounds(rect: Rect, width: int, height: int) -> Tuple[int, int, int, int]:
    """
    Pixel index range covered by a rectangle on a width x height grid.

    A pixel (i, j) is covered when its center (i + 0.5, j + 0.5) lies inside
    the half-open rectangle. The range is clipped to the grid.
    """
    u0 = max(0, int(math.ceil(rect[0] - 0.5)))
    v0 = max(0, int(math.ceil(rect[1] - 0.5)))
    u1 = min(width, int(math.ceil(rect[2] - 0.5)))
    v1 = min(height, int(math.ceil(rect[3] - 0.5)))
    return u0, v0, max(u0, u1), max(v0, v1)


@dataclass(frozen=True)
class Stixel:
    """
    One Semantic Stixel.

    Anchor convention: (x, z) is the object surface point under the column
    center and y is the height of the Stixel's vertical base, all in meters
    in a camera-centered frame with y pointing up from the ground plane.
    """
    x: float
    y: float
    z: float
    w: float
    h: float
    u_tl: float
    v_tl: float
    u_br: float
    v_br: float
    label: int
    label_conf: float
    stixel_id: int

    def __post_init__(self):
        if not (self.u_tl < self.u_br and self.v_tl < self.v_br):
            raise InvalidGeometryError(f"Stixel {self.stixel_id}: empty image rectangle.")
        if not (self.w > 0 and self.h > 0):
            raise InvalidGeometryError(f"Stixel {self.stixel_id}: world size must be positive.")
        if not self.z > 0:
            raise InvalidGeometryError(f"Stixel {self.stixel_id}: must lie in front of the camera.")
        if not 0.0 <= self.label_conf <= 1.0:
            raise InvalidGeometryError(f"Stixel {self.stixel_id}: label confidence outside [0, 1].")

    @property
    def rect(self) -> Rect:
        return Rect(self.u_tl, self.v_tl, self.u_br, self.v_br)


@dataclass(frozen=True)
class DetectionBox:
    """A 2D detector output."""
    u_tl: float
    v_tl: float
    u_br: float
    v_br: float
    box_label: int
    box_conf: float

    def __post_init__(self):
        if not (self.u_tl < self.u_br and self.v_tl < self.v_br):
            raise InvalidGeometryError("Detection box has an empty rectangle.")
        if not 0.0 <= self.box_conf <= 1.0:
            raise InvalidGeometryError("Detection confidence outside [0, 1].")

    @property
    def rect(self) -> Rect:
        return Rect(self.u_tl, self.v_tl, self.u_br, self.v_br)


@dataclass(frozen=True)
class StixelFrame:
    """All Stixels describing one camera image."""
    frame_id: str
    width: int
    height: int
    stixels: Tuple[Stixel, ...]

    def __post_init__(self):
        object.__setattr__(self, "stixels", tuple(self.stixels))
        seen = set()
        for stixel in self.stixels:
            if stixel.stixel_id in seen:
                raise InvalidGeometryError(
                    f"Frame {self.frame_id}: duplicate stixel_id {stixel.stixel_id}.")
            seen.add(stixel.stixel_id)
            if stixel.u_tl < 0 or stixel.v_tl < 0 or stixel.u_br > self.width or stixel.v_br > self.height:
                raise InvalidGeometryError(
                    f"Frame {self.frame_id}: stixel {stixel.stixel_id} leaves the image.")

    @property
    def stixel_ids(self) -> List[int]:
        return [s.stixel_id for s in self.stixels]

    def by_id(self) -> Dict[int, Stixel]:
        return {s.stixel_id: s for s in self.stixels}

    def rect_array(self) -> np.ndarray:
        """(N, 4) float64 array of stixel rectangles in stixel order."""
        if not self.stixels:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([s.rect for s in self.stixels], dtype=np.float64)


@dataclass(frozen=True, order=True)
class InstanceId:
    """Instance identity: semantic class index plus per-class counter."""
    label: int
    counter: int

    @property
    def is_background(self) -> bool:
        return self.label < 0


# Real instances always carry label >= 0
BACKGROUND = InstanceId(-1, -1)


def make_instance_id(label: int, counter: int) -> InstanceId:
    if label < 0 or counter < 0:
        raise InvalidGeometryError(f"Invalid instance ({label}, {counter}).")
    return InstanceId(label, counter)


@dataclass
class InstanceLabeling:
    """
    Per-Stixel instance IDs of one frame, shared by ground truth and predictions.

    confidences holds one score per predicted instance; ground truth leaves it empty.
    """
    frame_id: str
    labels: Dict[int, InstanceId]
    confidences: Dict[InstanceId, float] = field(default_factory=dict)

    def instances(self) -> List[InstanceId]:
        """Non-background instances in ascending order."""
        return sorted({iid for iid in self.labels.values() if not iid.is_background})

    def stixels_of(self, instance: InstanceId) -> List[int]:
        return sorted(sid for sid, iid in self.labels.items() if iid == instance)

    def groups(self) -> Dict[InstanceId, List[int]]:
        groups: Dict[InstanceId, List[int]] = {}
        for sid in sorted(self.labels):
            iid = self.labels[sid]
            if not iid.is_background:
                groups.setdefault(iid, []).append(sid)
        return groups

    def canonical_partition(self) -> FrozenSet[Tuple[int, FrozenSet[int]]]:
        """Instances as (class, stixel set) pairs, independent of counter numbering."""
        return frozenset((iid.label, frozenset(sids)) for iid, sids in self.groups().items())

    def covers(self, frame: StixelFrame) -> bool:
        return set(self.labels) == set(frame.stixel_ids)


def background_labeling(frame: StixelFrame) -> InstanceLabeling:
    return InstanceLabeling(frame.frame_id, {sid: BACKGROUND for sid in frame.stixel_ids})


CITYSCAPES_CLASSES = ("person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle")
CITYSCAPES_LABEL_IDS = (24, 25, 26, 27, 28, 31, 32, 33)
BACKGROUND_CLASS = "background"


@dataclass(frozen=True)
class ClassTable:
    """
    Ordered semantic classes.

    names: class names, index = class index
    evaluated: indices scored by AP
    merge: class index -> class index used at inference (e.g. train -> bus)
    label_ids: mask label id per class (0 for the background class)
    background: index of the non-instance class used for ground/structure Stixels, or None
    """
    names: Tuple[str, ...]
    evaluated: FrozenSet[int]
    merge: Dict[int, int]
    label_ids: Tuple[int, ...]
    background: Optional[int] = None

    def __post_init__(self):
        n = len(self.names)
        if len(self.label_ids) != n:
            raise ConfigError("ClassTable needs one mask label id per class.")
        for src, dst in self.merge.items():
            if not (0 <= src < n and 0 <= dst < n):
                raise ConfigError(f"Merge {src} -> {dst} references an unknown class.")
            if self.merge.get(dst, dst) != dst:
                raise ConfigError("Class merge map must be idempotent.")
        if any(not 0 <= c < n for c in self.evaluated):
            raise ConfigError("Evaluated class index out of range.")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def merged(self, label: int) -> int:
        return self.merge.get(label, label)

    def is_instance_class(self, label: int) -> bool:
        return 0 <= label < len(self.names) and label != self.background

    def encode_label(self, label: int) -> float:
        """Class index scaled into [0, 1] as a network feature."""
        return label / max(1, len(self.names) - 1)

    def instance_code(self, instance: InstanceId) -> int:
        if instance.is_background:
            return 0
        return self.label_ids[instance.label] * INSTANCE_CODE_BASE + instance.counter

    def instance_from_code(self, code: int) -> InstanceId:
        """
        Mask code to InstanceId of the merged class.

        Unknown label ids and codes below the base are background. Codes of
        merged classes can collide (train 1 and bus 1 both give bus 1), so
        callers that need distinct instances keep the code as the key.
        """
        if code < INSTANCE_CODE_BASE:
            return BACKGROUND
        label_id, counter = divmod(int(code), INSTANCE_CODE_BASE)
        if label_id not in self.label_ids:
            return BACKGROUND
        label = self.label_ids.index(label_id)
        if not self.is_instance_class(label):
            return BACKGROUND
        return InstanceId(self.merged(label), counter)

    def to_dict(self) -> Dict:
        return {
            "names": list(self.names),
            "evaluated": sorted(self.evaluated),
            "merge": {str(k): v for k, v in sorted(self.merge.items())},
            "label_ids": list(self.label_ids),
            "background": self.background,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ClassTable":
        return cls(
            names=tuple(data["names"]),
            evaluated=frozenset(int(c) for c in data["evaluated"]),
            merge={int(k): int(v) for k, v in data["merge"].items()},
            label_ids=tuple(int(v) for v in data["label_ids"]),
            background=data.get("background"),
        )


def default_class_table() -> ClassTable:
    """
    The 8 Cityscapes instance classes plus a background class.

    Train is merged into bus and therefore not scored on its own.
    """
    names = CITYSCAPES_CLASSES + (BACKGROUND_CLASS,)
    return ClassTable(
        names=names,
        evaluated=frozenset(range(len(CITYSCAPES_CLASSES))) - {names.index("train")},
        merge={names.index("train"): names.index("bus")},
        label_ids=CITYSCAPES_LABEL_IDS + (0,),
        background=len(CITYSCAPES_CLASSES),
    )
