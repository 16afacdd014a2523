"""
Inference: one network pass per frame, template re-cropped from every
prediction, optional mask pasted back into the frame.

Tracker      stateless apart from a forward-pass counter; owns net, anchors, crop spec
TrackState   per-target state, single owner
VOTAdapter   init(frame, region) / update(frame) -> region, for the evaluation protocol
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import cv2
import numpy as np
from scipy.special import expit

from looptrack.checkpoint import load_checkpoint
from looptrack.cycle import (
    MIN_BOX_SIZE,
    CropSpec,
    Patch,
    StepResult,
    crop_template,
    mask_to_frame_affine,
    track_step,
)
from looptrack.data import Sequence
from looptrack.errors import EmptyTargetError, TrackingLostError
from looptrack.geometry import AnchorGrid, Box, RotatedBox, box_from_mask, make_anchor_grid
from looptrack.model import SiameseNet

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5

BoxMode = Literal["axis_aligned", "min_area"]


@dataclass
class TrackState:
    template: Patch
    box: Box
    score: float = 1.0
    frame_index: int = 0


@dataclass(frozen=True)
class TrackOutput:
    box: Box
    score: float
    mask_prob: np.ndarray | None = None
    clamped: bool = False


@dataclass(frozen=True)
class BinaryMask:
    """H x W uint8 in {0, 1} at frame resolution."""

    pixels: np.ndarray
    instance_id: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def area(self) -> int:
        return int(self.pixels.sum())


def binarize(mask_prob: np.ndarray, instance_id: int = 1) -> BinaryMask:
    """Pixel is foreground iff its probability is strictly above 0.5."""
    return BinaryMask((np.asarray(mask_prob) > MASK_THRESHOLD).astype(np.uint8), instance_id)


def _inside(frame: np.ndarray, box: Box) -> bool:
    h, w = frame.shape[:2]
    x1, y1, x2, y2 = box.to_xyxy()
    return x2 > 0 and y2 > 0 and x1 < w and y1 < h


class Tracker:
    def __init__(self, net: SiameseNet, spec: CropSpec | None = None, grid: AnchorGrid | None = None):
        self.net = net.eval()
        self.spec = spec or CropSpec(
            template_size=net.config.template_size, search_size=net.config.search_size
        )
        self.grid = grid or make_anchor_grid(net.config.anchors)
        self.forward_passes = 0

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Tracker":
        net, spec, _ = load_checkpoint(path)
        return cls(net, spec)

    @property
    def mask_enabled(self) -> bool:
        return self.net.mask_head is not None

    def init(self, frame: np.ndarray, box: Box) -> TrackState:
        if box.w < MIN_BOX_SIZE or box.h < MIN_BOX_SIZE:
            raise ValueError(f"degenerate initial box {box}")
        if not _inside(frame, box):
            raise ValueError(f"initial box {box} lies outside the frame")
        return TrackState(crop_template(frame, box, self.spec), box)

    def init_from_mask(self, frame: np.ndarray, mask: np.ndarray) -> TrackState:
        return self.init(frame, box_from_mask(mask, "axis_aligned"))

    def update(self, state: TrackState, frame: np.ndarray) -> TrackOutput:
        """
        Track one frame and advance `state`. Raises TrackingLostError, with
        the unchanged state attached, when the prediction leaves the frame.
        """
        try:
            step = track_step(self.net, state.template, frame, state.box, self.grid, self.spec)
        except TrackingLostError as e:
            raise TrackingLostError(e.msg, state) from e
        self.forward_passes += 1
        if not _inside(frame, step.box):
            raise TrackingLostError(f"prediction {step.box} left the frame", state)

        mask_prob = self._paste_mask(step, frame.shape[:2]) if self.mask_enabled else None
        state.template = crop_template(frame, step.box, self.spec)
        state.box = step.box
        state.score = step.score
        state.frame_index += 1
        return TrackOutput(step.box, step.score, mask_prob, step.clamped)

    def _paste_mask(self, step: StepResult, shape: tuple[int, int]) -> np.ndarray:
        config = self.net.config
        m = config.mask_size
        prob = expit(step.mask_logits.reshape(m, m)).astype(np.float32)
        y, x = divmod(step.index % (self.grid.size ** 2), self.grid.size)
        affine = mask_to_frame_affine(step.search, self.grid.position_center(y, x), m, config.mask_window)
        return cv2.warpAffine(
            prob, affine, (shape[1], shape[0]),
            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0.0,
        )


def output_region(output: TrackOutput, mode: BoxMode) -> Box | RotatedBox:
    """The box to report: axis-aligned, or the min-area rectangle of the mask."""
    if mode == "min_area" and output.mask_prob is not None:
        try:
            return box_from_mask(binarize(output.mask_prob).pixels, "min_area")
        except EmptyTargetError:
            pass
    return output.box


# --- Whole sequences ---


@dataclass
class TrackRun:
    regions: list[Box | RotatedBox]
    scores: list[float]
    masks: list[np.ndarray] | None = None
    lost_at: int | None = None
    seconds: float = 0.0

    @property
    def fps(self) -> float:
        return (len(self.regions) - 1) / self.seconds if self.seconds > 0 else 0.0


def track_sequence(tracker: Tracker, sequence: Sequence, mode: BoxMode = "axis_aligned") -> TrackRun:
    """
    Initialize from the first-frame box (or mask of instance 1) and track to
    the end. After a loss the last good box is repeated.
    """
    first = sequence.frame(0)
    if sequence.boxes is not None:
        state = tracker.init(first, sequence.boxes[0])
    elif sequence.masks is not None:
        state = tracker.init_from_mask(first, sequence.mask(0) == 1)
    else:
        raise ValueError(f"sequence {sequence.id} has no first-frame annotation")

    init_mask = None
    if tracker.mask_enabled:
        init_mask = sequence.mask(0)
        init_mask = (init_mask == 1).astype(np.uint8) if init_mask is not None else np.zeros(first.shape[:2], np.uint8)
    run = TrackRun([state.box if mode == "axis_aligned" else state.box.corners()], [1.0],
                   [init_mask] if init_mask is not None else None)
    started = time.perf_counter()
    for i in range(1, len(sequence)):
        frame = sequence.frame(i)
        if run.lost_at is None:
            try:
                output = tracker.update(state, frame)
            except TrackingLostError as e:
                logger.warning("%s: target lost at frame %d: %s", sequence.id, i, e.msg)
                run.lost_at = i
        if run.lost_at is not None:
            run.regions.append(run.regions[-1])
            run.scores.append(0.0)
            if run.masks is not None:
                run.masks.append(np.zeros(frame.shape[:2], np.uint8))
            continue
        region = output_region(output, mode)
        run.regions.append(region if mode == "axis_aligned" or isinstance(region, RotatedBox) else region.corners())
        run.scores.append(output.score)
        if run.masks is not None:
            run.masks.append(binarize(output.mask_prob).pixels)
    run.seconds = time.perf_counter() - started
    return run


# --- Mask propagation ---


@dataclass
class PropagationResult:
    """Per-frame label maps (0 background) and, per lost instance, the frame it was lost."""

    label_maps: list[np.ndarray]
    lost: dict[int, int] = field(default_factory=dict)

    def instance_mask(self, frame: int, instance_id: int) -> BinaryMask:
        return BinaryMask((self.label_maps[frame] == instance_id).astype(np.uint8), instance_id)


def resolve_conflicts(probs: dict[int, np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    """
    Label map from per-instance probabilities: a pixel goes to the instance
    with the highest probability if that exceeds 0.5 (lowest id on ties).
    """
    labels = np.zeros(shape, dtype=np.uint8)
    if not probs:
        return labels
    ids = sorted(probs)
    stack = np.stack([probs[i] for i in ids])
    best = stack.argmax(axis=0)
    claimed = stack.max(axis=0) > MASK_THRESHOLD
    labels[claimed] = np.asarray(ids, dtype=np.uint8)[best[claimed]]
    return labels


def propagate_masks(
    tracker: Tracker, frames: list[np.ndarray], init_masks: dict[int, np.ndarray]
) -> PropagationResult:
    """
    Track every instance independently from its first-frame mask; per frame,
    overlapping claims are resolved by resolve_conflicts. A lost instance
    stays empty from that frame on.
    """
    if not init_masks:
        raise ValueError("at least one instance mask is required")
    if not tracker.mask_enabled:
        raise ValueError("mask propagation needs a network with a mask head")
    shape = frames[0].shape[:2]
    states = {i: tracker.init_from_mask(frames[0], init_masks[i]) for i in sorted(init_masks)}

    first = np.zeros(shape, dtype=np.uint8)
    for i in sorted(init_masks):
        first[np.asarray(init_masks[i]) > 0] = i
    result = PropagationResult([first])
    for t in range(1, len(frames)):
        probs = {}
        for i, state in states.items():
            if i in result.lost:
                continue
            try:
                probs[i] = tracker.update(state, frames[t]).mask_prob
            except TrackingLostError as e:
                logger.warning("instance %d lost at frame %d: %s", i, t, e.msg)
                result.lost[i] = t
        result.label_maps.append(resolve_conflicts(probs, shape))
    return result


# --- Evaluation adapter ---


class VOTAdapter:
    """Region-in, region-out wrapper used by the reset protocol."""

    def __init__(self, tracker: Tracker, mode: BoxMode = "axis_aligned"):
        self.tracker = tracker
        self.mode = mode
        self.state: TrackState | None = None

    def init(self, frame: np.ndarray, region: Box | RotatedBox) -> None:
        box = region.bounds() if isinstance(region, RotatedBox) else region
        self.state = self.tracker.init(frame, box)

    def update(self, frame: np.ndarray) -> Box | RotatedBox:
        if self.state is None:
            raise RuntimeError("update() before init()")
        try:
            return output_region(self.tracker.update(self.state, frame), self.mode)
        except TrackingLostError as e:
            logger.debug("adapter lost target: %s", e.msg)
            return self.state.box
