"""
Box algebra: anchors, IoU, delta encoding/decoding, anchor labels, mask boxes.

Coordinates are continuous pixels with the origin at the top-left corner of
the image, x to the right and y down; pixel (r, c) covers [c, c+1) x [r, r+1).
Boxes are stored in center format (cx, cy, w, h), matching the delta encoding

    tx = (x - xa) / wa    ty = (y - ya) / ha
    tw = log(w / wa)      th = log(h / ha)

All functions are pure and operate on immutable values.
"""
import logging
import math
from dataclasses import dataclass
from typing import Literal

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from looptrack.config import split_list
from looptrack.errors import EmptyTargetError

logger = logging.getLogger(__name__)

# Anchor labels
POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

POSITIVE_IOU = 0.6
NEGATIVE_IOU = 0.3

# Bound on decoded log-scale deltas; exp(4) ~ 55x the anchor size
DELTA_BOUND = 4.0


# --- Boxes ---


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in center format, pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        values = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"Box coordinates must be finite: {values}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"Box width and height must be positive: {values}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        """Top-left corner plus size (the VOT ground-truth convention)."""
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    @classmethod
    def from_array(cls, values) -> "Box":
        cx, cy, w, h = (float(v) for v in values)
        return cls(cx, cy, w, h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def to_xyxy(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> "RotatedBox":
        x1, y1, x2, y2 = self.to_xyxy()
        return RotatedBox(((x1, y1), (x2, y1), (x2, y2), (x1, y2)))


def _shoelace(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True)
class RotatedBox:
    """Four ordered corners of a convex quadrilateral (usually a rotated rectangle)."""

    corners: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.corners) != 4:
            raise ValueError(f"RotatedBox needs exactly 4 corners, got {len(self.corners)}")
        if not all(math.isfinite(v) for p in self.corners for v in p):
            raise ValueError("RotatedBox corners must be finite")
        if abs(_shoelace(self.as_array())) <= 0:
            raise ValueError("RotatedBox is degenerate (zero area)")

    @classmethod
    def from_flat(cls, values) -> "RotatedBox":
        v = [float(x) for x in values]
        if len(v) != 8:
            raise ValueError(f"expected 8 numbers, got {len(v)}")
        return cls(tuple((v[i], v[i + 1]) for i in range(0, 8, 2)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.corners, dtype=np.float64)

    def to_flat(self) -> list[float]:
        return [float(v) for p in self.corners for v in p]

    @property
    def area(self) -> float:
        return abs(_shoelace(self.as_array()))

    def bounds(self) -> Box:
        """Axis-aligned reduction: min/max of the corner coordinates."""
        pts = self.as_array()
        x1, y1 = pts.min(axis=0)
        x2, y2 = pts.max(axis=0)
        return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.tx, self.ty, self.tw, self.th)):
            raise ValueError("BoxDelta components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


# --- IoU ---


def iou_many(boxes: np.ndarray, box: Box) -> np.ndarray:
    """IoU of each row of `boxes` (N x 4, center format) against `box`."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    bx1, by1, bx2, by2 = box.to_xyxy()
    x1 = boxes[:, 0] - boxes[:, 2] / 2.0
    y1 = boxes[:, 1] - boxes[:, 3] / 2.0
    x2 = boxes[:, 0] + boxes[:, 2] / 2.0
    y2 = boxes[:, 1] + boxes[:, 3] / 2.0
    iw = np.maximum(0.0, np.minimum(x2, bx2) - np.maximum(x1, bx1))
    ih = np.maximum(0.0, np.minimum(y2, by2) - np.maximum(y1, by1))
    inter = iw * ih
    union = boxes[:, 2] * boxes[:, 3] + box.w * box.h - inter
    return np.clip(inter / union, 0.0, 1.0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two axis-aligned boxes, in [0, 1]."""
    return float(iou_many(a.as_array(), b)[0])


# --- Anchors ---


class AnchorConfig(BaseModel):
    """Anchor layout over the response lattice of a search patch."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    ratios: tuple[float, ...] = (0.33, 0.5, 1.0, 2.0, 3.0)
    scale: float = Field(8.0, gt=0)
    stride: float = Field(8.0, gt=0)
    score_size: int = Field(25, ge=1)
    search_size: int = Field(255, ge=1)

    @field_validator("ratios", mode="before")
    @classmethod
    def split_ratios(cls, v):
        return split_list(v)

    @field_validator("ratios")
    @classmethod
    def check_ratios(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if not v:
            raise ValueError("at least one anchor ratio is required")
        if any(r <= 0 for r in v):
            raise ValueError("anchor ratios must be positive")
        return v

    @property
    def k(self) -> int:
        return len(self.ratios)


@dataclass(frozen=True)
class AnchorGrid:
    """
    k anchors per lattice position, in search-patch pixel coordinates.

    `anchors` has shape (k, S, S, 4); the flat index of anchor a at row y,
    column x is a*S*S + y*S + x, the same order the network heads use.
    """

    config: AnchorConfig
    anchors: np.ndarray

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def size(self) -> int:
        return self.config.score_size

    @property
    def flat(self) -> np.ndarray:
        return self.anchors.reshape(-1, 4)

    def __len__(self) -> int:
        return self.anchors.shape[0] * self.anchors.shape[1] * self.anchors.shape[2]

    def unravel(self, index: int) -> tuple[int, int, int]:
        """Flat anchor index -> (anchor, row, column)."""
        a, rest = divmod(int(index), self.size * self.size)
        y, x = divmod(rest, self.size)
        return a, y, x

    def box(self, index: int) -> Box:
        return Box.from_array(self.flat[index])

    def position_center(self, y: int, x: int) -> tuple[float, float]:
        cx, cy = self.anchors[0, y, x, :2]
        return float(cx), float(cy)


def make_anchor_grid(config: AnchorConfig | None = None) -> AnchorGrid:
    """
    Build the anchor lattice. For ratio r the anchor has h/w = r and area
    (scale*stride)^2; lattice centers are spaced by stride and centered on
    the search patch.
    """
    config = config or AnchorConfig()
    base = config.scale * config.stride
    size = config.score_size
    center = config.search_size / 2.0
    offsets = (np.arange(size, dtype=np.float64) - (size - 1) / 2.0) * config.stride
    xs, ys = np.meshgrid(center + offsets, center + offsets, indexing="xy")

    anchors = np.empty((config.k, size, size, 4), dtype=np.float64)
    for a, ratio in enumerate(config.ratios):
        anchors[a, :, :, 0] = xs
        anchors[a, :, :, 1] = ys
        anchors[a, :, :, 2] = base / math.sqrt(ratio)
        anchors[a, :, :, 3] = base * math.sqrt(ratio)
    anchors.setflags(write=False)
    return AnchorGrid(config=config, anchors=anchors)


# --- Delta encoding ---


def encode(anchor: Box, box: Box) -> BoxDelta:
    return BoxDelta(
        (box.cx - anchor.cx) / anchor.w,
        (box.cy - anchor.cy) / anchor.h,
        math.log(box.w / anchor.w),
        math.log(box.h / anchor.h),
    )


def decode(anchor: Box, delta: BoxDelta, bound: float = DELTA_BOUND) -> tuple[Box, bool]:
    """
    Invert `encode`. Log-scale components outside [-bound, bound] are clamped
    before exponentiation; the second return value flags that a clamp happened.
    """
    tw = min(max(delta.tw, -bound), bound)
    th = min(max(delta.th, -bound), bound)
    clamped = tw != delta.tw or th != delta.th
    if clamped:
        logger.debug("decode clamped log-scale delta (%.3f, %.3f)", delta.tw, delta.th)
    box = Box(
        delta.tx * anchor.w + anchor.cx,
        delta.ty * anchor.h + anchor.cy,
        anchor.w * math.exp(tw),
        anchor.h * math.exp(th),
    )
    return box, clamped


def encode_many(anchors: np.ndarray, box: Box) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(anchors)
    out[:, 0] = (box.cx - anchors[:, 0]) / anchors[:, 2]
    out[:, 1] = (box.cy - anchors[:, 1]) / anchors[:, 3]
    out[:, 2] = np.log(box.w / anchors[:, 2])
    out[:, 3] = np.log(box.h / anchors[:, 3])
    return out


def decode_many(
    anchors: np.ndarray, deltas: np.ndarray, bound: float = DELTA_BOUND
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized `decode`: returns (N x 4 boxes, N clamp flags)."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    scales = np.clip(deltas[:, 2:], -bound, bound)
    clamped = np.any(scales != deltas[:, 2:], axis=1)
    boxes = np.empty_like(anchors)
    boxes[:, 0] = deltas[:, 0] * anchors[:, 2] + anchors[:, 0]
    boxes[:, 1] = deltas[:, 1] * anchors[:, 3] + anchors[:, 1]
    boxes[:, 2] = anchors[:, 2] * np.exp(scales[:, 0])
    boxes[:, 3] = anchors[:, 3] * np.exp(scales[:, 1])
    return boxes, clamped


# --- Label assignment ---


class LabelCaps(BaseModel):
    """Per-sample limits on labeled anchors; surplus anchors become ignored."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    max_positives: int = Field(16, ge=1)
    max_total: int = Field(48, ge=1)


@dataclass(frozen=True)
class AnchorLabels:
    """
    Per-anchor label (POSITIVE, NEGATIVE or IGNORE) and, for positives, the
    target delta. `promoted` flags that no anchor passed the positive
    threshold and the best-overlapping one was promoted.
    """

    labels: np.ndarray
    targets: np.ndarray
    promoted: bool = False

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)

    @property
    def num_labeled(self) -> int:
        return int(np.count_nonzero(self.labels != IGNORE))

    def positive_positions(self, grid: AnchorGrid) -> np.ndarray:
        """Sorted lattice positions (y*S + x) holding at least one positive anchor."""
        cells = grid.size * grid.size
        return np.unique(self.positives % cells)


def _subsample(labels: np.ndarray, value: int, keep: int, rng: np.random.Generator) -> None:
    idx = np.flatnonzero(labels == value)
    if len(idx) > keep:
        drop = rng.choice(idx, size=len(idx) - keep, replace=False)
        labels[drop] = IGNORE


def assign_anchor_labels(
    grid: AnchorGrid,
    gt: Box,
    caps: LabelCaps | None = LabelCaps(),
    rng: np.random.Generator | None = None,
    positive_iou: float = POSITIVE_IOU,
    negative_iou: float = NEGATIVE_IOU,
) -> AnchorLabels:
    """
    Label every anchor against `gt` (search-patch coordinates): IoU above
    `positive_iou` is positive, below `negative_iou` negative, otherwise
    ignored. If nothing is positive, the highest-IoU anchor (lowest index on
    ties) is promoted. With `caps`, surplus positives and then negatives are
    moved to IGNORE, chosen by `rng`. `caps=None` disables capping.
    """
    anchors = grid.flat
    overlaps = iou_many(anchors, gt)
    labels = np.full(len(anchors), IGNORE, dtype=np.int8)
    labels[overlaps < negative_iou] = NEGATIVE
    labels[overlaps > positive_iou] = POSITIVE

    promoted = False
    if not np.any(labels == POSITIVE):
        best = int(np.argmax(overlaps))
        labels[best] = POSITIVE
        promoted = True
        logger.debug("no anchor above IoU %.2f; promoted anchor %d (IoU %.3f)",
                     positive_iou, best, overlaps[best])

    if caps is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        _subsample(labels, POSITIVE, caps.max_positives, rng)
        num_pos = int(np.count_nonzero(labels == POSITIVE))
        _subsample(labels, NEGATIVE, max(0, caps.max_total - num_pos), rng)

    targets = np.zeros_like(anchors)
    pos = labels == POSITIVE
    targets[pos] = encode_many(anchors[pos], gt)
    labels.setflags(write=False)
    targets.setflags(write=False)
    return AnchorLabels(labels=labels, targets=targets, promoted=promoted)


# --- Boxes from masks ---


def _row_extrema(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.flatnonzero(mask.any(axis=1))
    sub = mask[rows]
    first = sub.argmax(axis=1)
    last = mask.shape[1] - 1 - sub[:, ::-1].argmax(axis=1)
    return rows, first, last


def box_from_mask(
    mask: np.ndarray,
    mode: Literal["axis_aligned", "min_area"] = "axis_aligned",
) -> Box | RotatedBox:
    """
    Box enclosing the foreground pixels of `mask` (each pixel a unit square).

    axis_aligned: the tightest axis-aligned Box.
    min_area: the minimum-area enclosing rectangle (rotating calipers over the
    convex hull of the pixel corners), as a RotatedBox.
    """
    mask = np.asarray(mask) > 0
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise EmptyTargetError("mask has no foreground pixels")

    rows, first, last = _row_extrema(mask)
    if mode == "axis_aligned":
        x1, x2 = float(first.min()), float(last.max()) + 1.0
        y1, y2 = float(rows[0]), float(rows[-1]) + 1.0
        return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    if mode != "min_area":
        raise ValueError(f"unknown box mode {mode!r}")

    # Row-wise leftmost/rightmost pixel corners are enough for the hull
    left = first.astype(np.float32)
    right = last.astype(np.float32) + 1.0
    top = rows.astype(np.float32)
    bottom = top + 1.0
    points = np.concatenate([
        np.stack([left, top], axis=1),
        np.stack([left, bottom], axis=1),
        np.stack([right, top], axis=1),
        np.stack([right, bottom], axis=1),
    ])
    rect = cv2.minAreaRect(points.reshape(-1, 1, 2))
    corners = cv2.boxPoints(rect).astype(np.float64)
    return RotatedBox(tuple((float(x), float(y)) for x, y in corners))
