"""
Cycle tracking: crops with provenance, single tracking steps, and the
forward-backward circle that turns an unlabeled clip into a training target.

A cycle over frames I_0..I_{n-1} tracks the initial box forward to I_{n-1},
then backward to I_0. The response map of the last backward step is
supervised with the initial box (and mask), so no annotation beyond the
first frame is needed.

Crop coordinates derived from predictions are constants: gradients only flow
through each network application's own forward pass.
"""
import logging
import math
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from looptrack.errors import CycleDiscarded, TrackingLostError
from looptrack.geometry import (
    DELTA_BOUND,
    AnchorGrid,
    AnchorLabels,
    Box,
    BoxDelta,
    LabelCaps,
    assign_anchor_labels,
    decode,
)
from looptrack.losses import MaskTarget
from looptrack.model import ResponseMap, SiameseNet, to_tensor

logger = logging.getLogger(__name__)

# Decoded boxes are never smaller than this (frame pixels)
MIN_BOX_SIZE = 2.0


class CropSpec(BaseModel):
    """Template/search crop geometry. Context padding p = context_margin * (w + h)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    context_margin: float = Field(0.5, ge=0)
    template_size: int = Field(127, ge=1)
    search_size: int = Field(255, ge=1)

    @model_validator(mode="after")
    def check_sizes(self) -> "CropSpec":
        if self.search_size <= self.template_size:
            raise ValueError("search_size must exceed template_size")
        return self

    @property
    def search_scale(self) -> float:
        return self.search_size / self.template_size

    def template_side(self, box: Box) -> float:
        pad = self.context_margin * (box.w + box.h)
        return math.sqrt((box.w + pad) * (box.h + pad))

    def search_side(self, box: Box) -> float:
        return self.template_side(box) * self.search_scale


# --- Patches ---


@dataclass(frozen=True)
class Patch:
    """
    Square crop resampled to `pixels` (N x N x 3, [0, 1]). It covers the frame
    square of side `side` centered on (cx, cy); patch point (x, y) maps to
    frame point (cx + (x - N/2) / scale, cy + (y - N/2) / scale).
    """

    pixels: np.ndarray
    cx: float
    cy: float
    side: float

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def scale(self) -> float:
        """Patch pixels per frame pixel."""
        return self.size / self.side

    def to_frame(self, x, y):
        return (self.cx + (x - self.size / 2.0) / self.scale,
                self.cy + (y - self.size / 2.0) / self.scale)

    def to_patch(self, x, y):
        return ((x - self.cx) * self.scale + self.size / 2.0,
                (y - self.cy) * self.scale + self.size / 2.0)

    def box_to_frame(self, box: Box) -> Box:
        cx, cy = self.to_frame(box.cx, box.cy)
        return Box(cx, cy, box.w / self.scale, box.h / self.scale)

    def box_to_patch(self, box: Box) -> Box:
        cx, cy = self.to_patch(box.cx, box.cy)
        return Box(cx, cy, box.w * self.scale, box.h * self.scale)

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x < self.size and 0.0 <= y < self.size


def _check_in_frame(frame: np.ndarray, box: Box) -> None:
    h, w = frame.shape[:2]
    x1, y1, x2, y2 = box.to_xyxy()
    if x2 <= 0 or y2 <= 0 or x1 >= w or y1 >= h:
        raise TrackingLostError(f"box {box} lies outside the {w}x{h} frame")


def crop(frame: np.ndarray, cx: float, cy: float, side: float, out_size: int) -> Patch:
    """
    Bilinear resample of the frame square (cx, cy, side) to out_size^2;
    area outside the frame takes the frame's mean color.
    """
    a = side / out_size
    # dst index j -> src index a*j + b, with pixel centers at index + 0.5
    b_x = cx + (0.5 - out_size / 2.0) * a - 0.5
    b_y = cy + (0.5 - out_size / 2.0) * a - 0.5
    mapping = np.array([[a, 0.0, b_x], [0.0, a, b_y]], dtype=np.float64)
    fill = tuple(float(v) for v in frame.reshape(-1, frame.shape[2]).mean(axis=0))
    pixels = cv2.warpAffine(
        np.ascontiguousarray(frame, dtype=np.float32),
        mapping,
        (out_size, out_size),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=fill,
    )
    return Patch(pixels=pixels, cx=cx, cy=cy, side=side)


def crop_template(frame: np.ndarray, box: Box, spec: CropSpec = CropSpec()) -> Patch:
    """Context-padded square around `box`, resampled to template_size."""
    _check_in_frame(frame, box)
    return crop(frame, box.cx, box.cy, spec.template_side(box), spec.template_size)


def crop_search(frame: np.ndarray, center_box: Box, spec: CropSpec = CropSpec()) -> Patch:
    """Square search_size/template_size times the template crop, same center."""
    _check_in_frame(frame, center_box)
    return crop(frame, center_box.cx, center_box.cy, spec.search_side(center_box), spec.search_size)


# --- Mask window geometry ---


def mask_window_coords(
    grid: AnchorGrid, positions: np.ndarray, mask_size: int, mask_window: float
) -> tuple[np.ndarray, np.ndarray]:
    """
    Search-patch coordinates of every mask cell center for the given lattice
    positions: two (P, mask_size, mask_size) arrays (x, y).
    """
    positions = np.asarray(positions, dtype=np.int64)
    ys, xs = np.divmod(positions, grid.size)
    centers = grid.anchors[0, ys, xs, :2]
    offsets = (np.arange(mask_size) + 0.5 - mask_size / 2.0) * (mask_window / mask_size)
    px = centers[:, 0, None, None] + offsets[None, None, :]
    py = centers[:, 1, None, None] + offsets[None, :, None]
    return np.broadcast_to(px, (len(positions), mask_size, mask_size)), \
        np.broadcast_to(py, (len(positions), mask_size, mask_size))


def mask_to_frame_affine(
    search: Patch, center: tuple[float, float], mask_size: int, mask_window: float
) -> np.ndarray:
    """2x3 map from mask-cell indices of one position to frame pixel indices."""
    cell = mask_window / mask_size / search.scale
    x0, y0 = search.to_frame(center[0] + (0.5 - mask_size / 2.0) * mask_window / mask_size,
                             center[1] + (0.5 - mask_size / 2.0) * mask_window / mask_size)
    return np.array([[cell, 0.0, x0 - 0.5], [0.0, cell, y0 - 0.5]], dtype=np.float64)


# --- Tracking steps ---


@dataclass
class StepResult:
    """One network application: the prediction in frame coordinates plus provenance."""

    box: Box
    score: float
    response: ResponseMap
    search: Patch
    index: int
    clamped: bool = False
    degenerate: bool = False

    @property
    def mask_logits(self) -> np.ndarray | None:
        if self.response.masks is None:
            return None
        position = self.index % (self.response.size ** 2)
        return self.response.mask_logits_at([position])[0].detach().cpu().numpy()


def track_step(
    net: SiameseNet,
    template: Patch,
    frame: np.ndarray,
    prior: Box,
    grid: AnchorGrid,
    spec: CropSpec = CropSpec(),
    grad: bool = False,
    delta_bound: float = DELTA_BOUND,
) -> StepResult:
    """
    Search around `prior`, run the network, take the anchor with the highest
    object probability (lowest flat index on ties), decode it and map it back
    to frame coordinates.
    """
    search = crop_search(frame, prior, spec)
    dtype = next(net.parameters()).dtype
    with torch.set_grad_enabled(grad):
        response = net(to_tensor(template.pixels, dtype), to_tensor(search.pixels, dtype))
    if not response.is_finite():
        raise FloatingPointError("network produced a non-finite response")

    p_obj = response.objectness()[0].detach().cpu().numpy().astype(np.float64)
    index = int(np.argmax(p_obj))
    delta = response.flat_deltas()[0, index].detach().cpu().numpy().astype(np.float64)
    box_patch, clamped = decode(grid.box(index), BoxDelta(*delta), delta_bound)
    box = search.box_to_frame(box_patch)

    degenerate = box.w < MIN_BOX_SIZE or box.h < MIN_BOX_SIZE
    if degenerate:
        logger.debug("degenerate box %s clamped to %.0f px", box, MIN_BOX_SIZE)
        box = Box(box.cx, box.cy, max(box.w, MIN_BOX_SIZE), max(box.h, MIN_BOX_SIZE))
    return StepResult(box, float(p_obj[index]), response, search, index, clamped, degenerate)


# --- Cycles ---


@dataclass(frozen=True)
class CycleEntry:
    frame_index: int
    box: Box
    score: float
    mask_logits: np.ndarray | None = None


@dataclass
class CycleResult:
    """
    Forward then backward predictions. `entries` starts with the initial
    target at the first frame and ends with the prediction back at that frame;
    `steps` holds one StepResult per network application, in order.
    """

    entries: list[CycleEntry]
    steps: list[StepResult]
    init_box: Box
    init_mask: np.ndarray | None = None
    length: int = field(init=False)

    def __post_init__(self):
        indices = [e.frame_index for e in self.entries]
        self.length = (len(indices) + 1) // 2
        forward, backward = indices[: self.length], indices[self.length - 1:]
        if len(indices) < 3 or indices[0] != indices[-1]:
            raise ValueError("a cycle must start and end on the same frame")
        if any(b <= a for a, b in zip(forward, forward[1:])):
            raise ValueError("forward frame indices must be strictly increasing")
        if any(b >= a for a, b in zip(backward, backward[1:])):
            raise ValueError("backward frame indices must be strictly decreasing")

    @property
    def final(self) -> StepResult:
        return self.steps[-1]

    @property
    def forward_entries(self) -> list[CycleEntry]:
        return self.entries[: self.length]

    @property
    def backward_entries(self) -> list[CycleEntry]:
        return self.entries[self.length - 1:]


def run_cycle(
    net: SiameseNet,
    frames: list[np.ndarray],
    init_box: Box,
    grid: AnchorGrid,
    init_mask: np.ndarray | None = None,
    spec: CropSpec = CropSpec(),
    frame_ids: list[int] | None = None,
    train: bool = False,
    intermediate: bool = False,
    delta_bound: float = DELTA_BOUND,
) -> CycleResult:
    """
    Track init_box from frames[0] to frames[-1] and back, re-cropping the
    template from each prediction. With `train`, the final step keeps its
    graph (and, with `intermediate`, every backward step does).
    A lost target raises CycleDiscarded.
    """
    if len(frames) < 2:
        raise ValueError("a cycle needs at least 2 frames")
    ids = list(frame_ids) if frame_ids is not None else list(range(len(frames)))
    if len(ids) != len(frames):
        raise ValueError("frame_ids must match frames")

    entries = [CycleEntry(ids[0], init_box, 1.0)]
    steps: list[StepResult] = []
    try:
        template = crop_template(frames[0], init_box, spec)
        prior = init_box
        order = list(range(1, len(frames))) + list(range(len(frames) - 2, -1, -1))
        for n, i in enumerate(order):
            last = n == len(order) - 1
            backward = n >= len(frames) - 1
            grad = train and (last or (intermediate and backward))
            step = track_step(net, template, frames[i], prior, grid, spec, grad, delta_bound)
            steps.append(step)
            entries.append(CycleEntry(ids[i], step.box, step.score, step.mask_logits))
            if not last:
                template = crop_template(frames[i], step.box, spec)
                prior = step.box
    except TrackingLostError as e:
        raise CycleDiscarded(f"target lost mid-cycle: {e.msg}", reason="lost") from e
    return CycleResult(entries, steps, init_box, init_mask)


# --- Loss targets ---


@dataclass(frozen=True)
class CycleTarget:
    """Supervision for one step's response map."""

    step: StepResult
    gt: Box
    labels: AnchorLabels
    mask: MaskTarget | None = None


def mask_targets(
    mask: np.ndarray,
    search: Patch,
    grid: AnchorGrid,
    positions: np.ndarray,
    mask_size: int,
    mask_window: float,
) -> np.ndarray:
    """
    Nearest-neighbor resample of a frame mask into each position's window:
    (P, mask_size^2) of +1 (foreground) / -1 (background or outside frame).
    """
    px, py = mask_window_coords(grid, positions, mask_size, mask_window)
    fx, fy = search.to_frame(px, py)
    cols = np.floor(fx).astype(np.int64)
    rows = np.floor(fy).astype(np.int64)
    h, w = mask.shape
    inside = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    values = np.zeros(cols.shape, dtype=bool)
    values[inside] = mask[rows[inside], cols[inside]] > 0
    return np.where(values, 1.0, -1.0).reshape(len(positions), -1)


def _labels_for(step: StepResult, gt_frame: Box, grid: AnchorGrid, caps, rng) -> tuple[Box, AnchorLabels]:
    gt = step.search.box_to_patch(gt_frame)
    if not step.search.contains(gt.cx, gt.cy):
        raise CycleDiscarded(f"target center {gt.cx:.1f},{gt.cy:.1f} outside the search patch")
    return gt, assign_anchor_labels(grid, gt, caps, rng)


def cycle_loss_targets(
    result: CycleResult,
    grid: AnchorGrid,
    caps: LabelCaps | None = LabelCaps(),
    rng: np.random.Generator | None = None,
    mask_window: float = 127.0,
) -> CycleTarget:
    """
    Labels for the final (start-frame) response: the initial box mapped into
    that step's search patch, plus mask targets at positive positions when the
    network has a mask head and an initial mask is known.
    Raises CycleDiscarded when the cycle drifted off the initial target.
    """
    final = result.final
    gt, labels = _labels_for(final, result.init_box, grid, caps, rng)
    mask = None
    if final.response.masks is not None and result.init_mask is not None:
        positions = labels.positive_positions(grid)
        flags = -np.ones(grid.size * grid.size, dtype=np.int8)
        flags[positions] = 1
        targets = mask_targets(
            result.init_mask, final.search, grid, positions, final.response.mask_size, mask_window
        )
        mask = MaskTarget(flags=flags, positions=positions, targets=targets)
    return CycleTarget(final, gt, labels, mask)


def pair_targets(
    result: CycleResult,
    grid: AnchorGrid,
    caps: LabelCaps | None = LabelCaps(),
    rng: np.random.Generator | None = None,
) -> list[CycleTarget]:
    """
    Box targets for intermediate backward steps: the forward prediction p_i
    supervises the backward response at the same frame. Pairs whose forward
    box falls outside the backward search patch are skipped.
    """
    forward = {e.frame_index: e.box for e in result.forward_entries}
    backward_steps = result.steps[result.length - 1: -1]
    backward_entries = result.backward_entries[1:-1]
    targets = []
    for step, entry in zip(backward_steps, backward_entries):
        try:
            gt, labels = _labels_for(step, forward[entry.frame_index], grid, caps, rng)
        except CycleDiscarded as e:
            logger.debug("skipping pair at frame %d: %s", entry.frame_index, e.msg)
            continue
        targets.append(CycleTarget(step, gt, labels))
    return targets
