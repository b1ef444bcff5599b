"""2-D primitives: boxes, rays, coordinate modes, quantization, intersection, IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum


class CoordinateMode(str, Enum):
    ABSOLUTE = "absolute"
    RELATIVE_1 = "relative_1"
    RELATIVE_1000 = "relative_1000"


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned box stored as a corner pair (x1, y1)-(x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float
    mode: CoordinateMode = CoordinateMode.ABSOLUTE

    @classmethod
    def from_xywh(
        cls,
        x: float,
        y: float,
        w: float,
        h: float,
        mode: CoordinateMode = CoordinateMode.ABSOLUTE,
    ) -> BBox2D:
        """Build from a corner-plus-size quadruple."""
        return cls(x, y, x + w, y + h, mode)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class SpatialAnchor:
    """Quantized box corners, one bin index per coordinate."""

    bins: tuple[int, int, int, int]
    n_bins: int

    def __post_init__(self) -> None:
        bx1, by1, bx2, by2 = self.bins
        if not all(0 <= b < self.n_bins for b in self.bins):
            raise ValueError(f"bins out of range for n_bins={self.n_bins}: {self.bins}")
        if bx1 > bx2 or by1 > by2:
            raise ValueError(f"bins must be per-axis non-decreasing: {self.bins}")

    def tokens(self) -> tuple[str, str, str, str]:
        return tuple(f"<bin_{b}>" for b in self.bins)  # type: ignore[return-value]


@dataclass(frozen=True)
class Ray2D:
    """Half-line from an origin along a unit direction."""

    origin: tuple[float, float]
    direction: tuple[float, float]

    def __post_init__(self) -> None:
        norm = math.hypot(self.direction[0], self.direction[1])
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"direction must be unit length, got norm {norm}")

    @classmethod
    def from_vector(cls, origin: tuple[float, float], vector: tuple[float, float]) -> Ray2D:
        """Normalize an arbitrary non-zero vector into a ray direction."""
        n = math.hypot(vector[0], vector[1])
        if n == 0.0:
            raise ValueError("cannot build a ray from a zero vector")
        return cls(
            (float(origin[0]), float(origin[1])),
            (float(vector[0]) / n, float(vector[1]) / n),
        )

    def point_at(self, t: float) -> tuple[float, float]:
        return (self.origin[0] + t * self.direction[0], self.origin[1] + t * self.direction[1])

    def rotated(self, angle: float) -> Ray2D:
        return Ray2D(self.origin, rotate_unit(self.direction, angle))


def unit(vector: tuple[float, float]) -> tuple[float, float]:
    """Normalize a non-zero vector."""
    n = math.hypot(vector[0], vector[1])
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return (vector[0] / n, vector[1] / n)


def rotate_unit(v: tuple[float, float], angle: float) -> tuple[float, float]:
    """Rotate a unit vector by `angle` radians."""
    c, s = math.cos(angle), math.sin(angle)
    return (c * v[0] - s * v[1], s * v[0] + c * v[1])


def centroid(box: BBox2D) -> tuple[float, float]:
    return ((box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0)


def quantize_coord(c: float, axis_extent: float, n_bins: int) -> int:
    """Map a coordinate in [0, axis_extent] to one of n_bins integer bins."""
    if axis_extent <= 0:
        raise ValueError(f"axis_extent must be positive, got {axis_extent}")
    if n_bins < 2:
        raise ValueError(f"n_bins must be at least 2, got {n_bins}")
    if c < 0 or c > axis_extent:
        raise ValueError(f"coordinate {c} outside [0, {axis_extent}]")
    b = math.floor((c / axis_extent) * (n_bins - 1))
    return min(max(b, 0), n_bins - 1)


def anchor_tokens(box: BBox2D, width: float, height: float, n_bins: int = 1000) -> SpatialAnchor:
    """Quantize an absolute box into per-corner bins (x against width, y against height)."""
    if box.mode != CoordinateMode.ABSOLUTE:
        raise ValueError(f"anchor_tokens requires an absolute box, got {box.mode.value}")
    return SpatialAnchor(
        bins=(
            quantize_coord(box.x1, width, n_bins),
            quantize_coord(box.y1, height, n_bins),
            quantize_coord(box.x2, width, n_bins),
            quantize_coord(box.y2, height, n_bins),
        ),
        n_bins=n_bins,
    )


def ray_box_intersect(ray: Ray2D, box: BBox2D) -> tuple[float, float] | None:
    """Forward-clipped slab intersection.

    Returns (t_entry, t_exit) with 0 <= t_entry <= t_exit, or None when the
    half-line misses the box. An origin inside the box yields t_entry = 0.
    """
    (ox, oy), (dx, dy) = ray.origin, ray.direction
    t_lo, t_hi = -math.inf, math.inf
    for o, d, lo, hi in ((ox, dx, box.x1, box.x2), (oy, dy, box.y1, box.y2)):
        if d == 0.0:
            if o < lo or o > hi:
                return None
        else:
            t0 = (lo - o) / d
            t1 = (hi - o) / d
            if t0 > t1:
                t0, t1 = t1, t0
            t_lo = max(t_lo, t0)
            t_hi = min(t_hi, t1)
            if t_lo > t_hi:
                return None
    if t_hi < 0.0:
        return None
    return (max(t_lo, 0.0), t_hi)


def intersection_area(a: BBox2D, b: BBox2D) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: BBox2D, b: BBox2D) -> float:
    """Continuous-area intersection over union; 0 when both boxes are degenerate."""
    if a.mode != CoordinateMode.ABSOLUTE or b.mode != CoordinateMode.ABSOLUTE:
        raise ValueError("iou requires absolute boxes")
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _to_absolute_factors(mode: CoordinateMode, width: float, height: float) -> tuple[float, float]:
    if mode == CoordinateMode.ABSOLUTE:
        return (1.0, 1.0)
    if mode == CoordinateMode.RELATIVE_1:
        return (float(width), float(height))
    return (width / 1000.0, height / 1000.0)


def convert_mode(box: BBox2D, target: CoordinateMode, width: float, height: float) -> BBox2D:
    """Rescale a box between coordinate modes; identity when target equals source."""
    if width <= 0 or height <= 0:
        raise ValueError(f"invalid image dims {width}x{height}")
    if box.mode == target:
        return box
    fx, fy = _to_absolute_factors(box.mode, width, height)
    gx, gy = _to_absolute_factors(target, width, height)
    return BBox2D(
        box.x1 * fx / gx,
        box.y1 * fy / gy,
        box.x2 * fx / gx,
        box.y2 * fy / gy,
        target,
    )


def sanitize(box: BBox2D, width: float, height: float) -> BBox2D | None:
    """Swap inverted corners and clamp to the frame; None if the result is degenerate."""
    if box.mode != CoordinateMode.ABSOLUTE:
        raise ValueError(f"sanitize requires an absolute box, got {box.mode.value}")
    x1, x2 = (box.x1, box.x2) if box.x1 <= box.x2 else (box.x2, box.x1)
    y1, y2 = (box.y1, box.y2) if box.y1 <= box.y2 else (box.y2, box.y1)
    x1 = min(max(x1, 0.0), float(width))
    x2 = min(max(x2, 0.0), float(width))
    y1 = min(max(y1, 0.0), float(height))
    y2 = min(max(y2, 0.0), float(height))
    if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
        return None
    return BBox2D(x1, y1, x2, y2, CoordinateMode.ABSOLUTE)
