"""
Sequences: folder loading, synthetic generation, and mask/box file I/O.

Folder layout (VOT/DAVIS-like, so benchmark data can be dropped in):

    <sequence>/frames/00000000.png|jpg   frames, numbered from 0 or 1 without gaps
    <sequence>/groundtruth.txt           one line per frame: x,y,w,h or 8 polygon numbers
    <sequence>/masks/00000000.png        optional paletted label maps (0 = background)

A groundtruth.txt with a single line marks a first-frame-only (training)
sequence. Polygons are kept for evaluation and reduced to axis-aligned boxes
for everything else. Frames are decoded lazily.
"""
import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Literal

import cv2
import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from looptrack.config import split_list
from looptrack.errors import SequenceFormatError
from looptrack.geometry import Box, RotatedBox

logger = logging.getLogger(__name__)

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")
GROUNDTRUTH_FILE = "groundtruth.txt"

# Supersampling factor for anti-aliased synthetic shapes
_SUPERSAMPLE = 4


def _palette() -> list[int]:
    """The usual VOC/DAVIS label palette: index i gets a bit-interleaved color."""
    palette = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette.extend((r, g, b))
    return palette


PALETTE = _palette()


# --- Sequences ---


@lru_cache(maxsize=512)
def _decode_frame(path: str) -> np.ndarray:
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    pixels.setflags(write=False)
    return pixels


def _decode_mask(path: str) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("P", "L"):
            raise SequenceFormatError(path, f"mask must be paletted or grayscale, got mode {img.mode}")
        return np.array(img, dtype=np.uint8)


@dataclass
class Sequence:
    """
    Ordered frames with optional ground truth. `frames` and `masks` hold
    either file paths (decoded on access) or in-memory arrays. Masks are
    label maps: 0 background, 1..N instance ids.
    """

    id: str
    frames: list
    boxes: list[Box] | None = None
    polygons: list[RotatedBox | None] | None = None
    masks: list | None = None
    first_frame_only: bool = False

    def __post_init__(self):
        n = len(self.frames)
        if n < 2:
            raise ValueError(f"sequence {self.id} needs at least 2 frames, has {n}")
        expected = 1 if self.first_frame_only else n
        for name, values in (("boxes", self.boxes), ("polygons", self.polygons), ("masks", self.masks)):
            if values is not None and len(values) != expected:
                raise ValueError(f"sequence {self.id}: {len(values)} {name} for {expected} expected")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def has_full_gt(self) -> bool:
        return self.boxes is not None and not self.first_frame_only

    def frame(self, i: int) -> np.ndarray:
        item = self.frames[i]
        if isinstance(item, np.ndarray):
            return item
        return _decode_frame(str(item))

    def frame_shape(self) -> tuple[int, int]:
        return self.frame(0).shape[:2]

    def mask(self, i: int) -> np.ndarray | None:
        if self.masks is None:
            return None
        item = self.masks[i]
        return item if isinstance(item, np.ndarray) else _decode_mask(str(item))

    def instance_ids(self) -> list[int]:
        first = self.mask(0)
        if first is None:
            return [1] if self.boxes is not None else []
        return [int(v) for v in np.unique(first) if v != 0]

    def region(self, i: int) -> Box | RotatedBox:
        """Ground-truth region for evaluation: the polygon when one was given."""
        if self.boxes is None:
            raise ValueError(f"sequence {self.id} has no ground truth")
        if self.polygons is not None and self.polygons[i] is not None:
            return self.polygons[i]
        return self.boxes[i]

    def cycle_view(self, start: int) -> "CycleView":
        return CycleView(self, start)


class CycleView:
    """
    Trainer-facing accessor: any frame, but only the annotation of the
    cycle's start frame.
    """

    def __init__(self, sequence: Sequence, start: int):
        if sequence.first_frame_only and start != 0:
            raise ValueError("first-frame-only sequences can only start a cycle at frame 0")
        if not 0 <= start < len(sequence):
            raise IndexError(f"start {start} outside sequence {sequence.id}")
        self._sequence = sequence
        self.start = start

    @property
    def sequence_id(self) -> str:
        return self._sequence.id

    def __len__(self) -> int:
        return len(self._sequence)

    def frame_shape(self) -> tuple[int, int]:
        return self._sequence.frame_shape()

    def frames(self, indices: list[int]) -> list[np.ndarray]:
        return [self._sequence.frame(i) for i in indices]

    def initial_box(self) -> Box | None:
        if self._sequence.boxes is None:
            return None
        return self._sequence.boxes[0 if self._sequence.first_frame_only else self.start]

    def initial_mask(self, instance_id: int = 1) -> np.ndarray | None:
        labels = self._sequence.mask(0 if self._sequence.first_frame_only else self.start)
        if labels is None:
            return None
        return labels == instance_id


# --- Loading ---


def _parse_numbers(line: str) -> list[float]:
    return [float(v) for v in re.split(r"[,\s]+", line.strip()) if v]


def parse_region(values: list[float], center_format: bool = False) -> tuple[Box, RotatedBox | None]:
    """4 numbers -> Box (x,y,w,h, or cx,cy,w,h); 8 numbers -> polygon and its bounds."""
    if len(values) == 4:
        box = Box(*values) if center_format else Box.from_xywh(*values)
        return box, None
    if len(values) == 8:
        polygon = RotatedBox.from_flat(values)
        return polygon.bounds(), polygon
    raise ValueError(f"expected 4 or 8 numbers, got {len(values)}")


def read_regions(path: str | Path, center_format: bool = False) -> list[tuple[Box, RotatedBox | None]]:
    """Parse a box file; malformed lines raise SequenceFormatError with file and line."""
    path = Path(path)
    regions = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            regions.append(parse_region(_parse_numbers(line), center_format))
        except ValueError as e:
            raise SequenceFormatError(str(path), str(e), line_no) from e
    return regions


def read_boxes(path: str | Path) -> list[Box | RotatedBox]:
    """Prediction file: cx,cy,w,h or 8 corner numbers per line."""
    return [poly if poly is not None else box for box, poly in read_regions(path, center_format=True)]


def _format_numbers(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def write_boxes(path: str | Path, regions: list[Box | RotatedBox]) -> Path:
    """One line per frame: cx,cy,w,h for boxes, 8 corner numbers for rotated boxes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for region in regions:
        if isinstance(region, RotatedBox):
            lines.append(_format_numbers(region.to_flat()))
        else:
            lines.append(_format_numbers((region.cx, region.cy, region.w, region.h)))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _numbered_files(directory: Path, suffixes: tuple[str, ...]) -> list[Path]:
    """Frame files in order; numbering starts at 0 or 1 and has no gaps."""
    files = [p for p in directory.iterdir() if p.suffix.lower() in suffixes]
    for p in files:
        if not p.stem.isdigit():
            raise SequenceFormatError(str(p), "file names must be zero-padded frame numbers")
    files.sort(key=lambda p: int(p.stem))
    first = int(files[0].stem) if files else 0
    if first not in (0, 1):
        raise SequenceFormatError(str(files[0]), "frame numbers must start at 0 or 1")
    for expected, p in enumerate(files, start=first):
        if int(p.stem) != expected:
            raise SequenceFormatError(str(p), f"missing frame {expected:08d}")
    return files


def load_sequence(path: str | Path) -> Sequence:
    """Load one sequence folder; see the module docstring for the layout."""
    path = Path(path)
    frame_dir = path / "frames"
    if not frame_dir.is_dir():
        raise SequenceFormatError(str(path), "no frames/ directory")
    frames = _numbered_files(frame_dir, FRAME_SUFFIXES)
    if len(frames) < 2:
        raise SequenceFormatError(str(frame_dir), f"need at least 2 frames, found {len(frames)}")

    boxes = polygons = None
    first_only = False
    gt_path = path / GROUNDTRUTH_FILE
    if gt_path.exists():
        regions = read_regions(gt_path)
        if len(regions) == 1 and len(frames) > 1:
            first_only = True
        elif len(regions) != len(frames):
            raise SequenceFormatError(
                str(gt_path), f"{len(regions)} annotations for {len(frames)} frames"
            )
        boxes = [box for box, _ in regions]
        polygons = [poly for _, poly in regions]
        if all(p is None for p in polygons):
            polygons = None

    masks = None
    mask_dir = path / "masks"
    if mask_dir.is_dir():
        masks = _numbered_files(mask_dir, (".png",))
        expected = 1 if first_only else len(frames)
        if len(masks) == 1 and len(frames) > 1 and boxes is None:
            first_only = True
            expected = 1
        if len(masks) != expected:
            raise SequenceFormatError(str(mask_dir), f"{len(masks)} masks for {expected} expected")

    sequence = Sequence(path.name, frames, boxes, polygons, masks, first_only)
    logger.debug("loaded %s: %d frames%s", sequence.id, len(frames),
                 " (first-frame-only)" if first_only else "")
    return sequence


def load_dataset(root: str | Path) -> list[Sequence]:
    """Every subdirectory of `root` with a frames/ folder, in name order."""
    root = Path(root)
    if not root.is_dir():
        raise SequenceFormatError(str(root), "dataset directory does not exist")
    sequences = [load_sequence(p) for p in sorted(root.iterdir()) if (p / "frames").is_dir()]
    if not sequences:
        raise SequenceFormatError(str(root), "no sequences found")
    return sequences


def load_masks(directory: str | Path) -> list[np.ndarray]:
    return [_decode_mask(str(p)) for p in _numbered_files(Path(directory), (".png",))]


# --- Writing ---


def save_masks(sequence_id: str, masks: list[np.ndarray], path: str | Path) -> list[Path]:
    """
    Write label maps as paletted PNGs `<path>/<sequence_id>/%08d.png`
    (0 background, 1..N instances). Read back with load_masks.
    """
    directory = Path(path) / sequence_id
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, labels in enumerate(masks):
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ValueError(f"mask {i} of {sequence_id} must be 2-D")
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise ValueError(f"mask {i} of {sequence_id} has labels outside 0..255")
        img = Image.fromarray(labels.astype(np.uint8))
        img.putpalette(PALETTE)
        target = directory / f"{i:08d}.png"
        img.save(target)
        written.append(target)
    return written


def write_sequence(sequence: Sequence, root: str | Path) -> Path:
    """Write a sequence in the folder layout load_sequence reads."""
    directory = Path(root) / sequence.id
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    for i in range(len(sequence)):
        pixels = np.clip(np.rint(sequence.frame(i) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels).save(directory / "frames" / f"{i:08d}.png")
    if sequence.boxes is not None:
        lines = []
        for i, box in enumerate(sequence.boxes):
            poly = sequence.polygons[i] if sequence.polygons is not None else None
            lines.append(_format_numbers(poly.to_flat() if poly is not None else box.to_xywh()))
        (directory / GROUNDTRUTH_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if sequence.masks is not None:
        save_masks("masks", [sequence.mask(i) for i in range(len(sequence.masks))], directory)
    return directory


# --- Synthetic videos ---


class SynthConfig(BaseModel):
    """Moving anti-aliased shapes over a smooth random texture."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    frame_width: int = Field(96, ge=8)
    frame_height: int = Field(96, ge=8)
    length: int = Field(8, ge=2)
    object_count: int = Field(1, ge=1, le=255)
    shapes: tuple[Literal["rectangle", "ellipse"], ...] = ("rectangle", "ellipse")
    size_min: float = Field(16.0, gt=2)
    size_max: float = Field(32.0, gt=2)
    # Fixed (vx, vy) px/frame for every object; random in [-speed_max, speed_max] when unset
    velocity: tuple[float, float] | None = None
    speed_max: float = Field(2.0, ge=0)
    jitter: float = Field(0.0, ge=0)
    scale_rate: float = Field(0.0, gt=-0.5, lt=0.5)
    occluder: bool = False
    texture_seed: int | None = None
    count: int = Field(64, ge=1)
    seed: int = 0

    @field_validator("shapes", "velocity", mode="before")
    @classmethod
    def split_lists(cls, v):
        if isinstance(v, str) and v.strip().lower() in ("", "none"):
            return None
        return split_list(v)

    @model_validator(mode="after")
    def check_fit(self) -> "SynthConfig":
        if not self.shapes:
            raise ValueError("at least one shape is required")
        if self.size_min > self.size_max:
            raise ValueError("size_min must not exceed size_max")
        if self.size_max >= min(self.frame_width, self.frame_height):
            raise ValueError("objects must fit within the frame")
        return self


def _texture(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    tex_rng = np.random.default_rng(config.texture_seed) if config.texture_seed is not None else rng
    h, w = config.frame_height, config.frame_width
    coarse = tex_rng.random((h // 8 + 2, w // 8 + 2, 3)).astype(np.float32)
    smooth = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    return np.clip(0.25 + 0.5 * smooth, 0.0, 1.0).astype(np.float32)


def _coverage(shape: str, cx: float, cy: float, w: float, h: float, height: int, width: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape, by supersampling."""
    s = _SUPERSAMPLE
    xs = (np.arange(width * s) + 0.5) / s
    ys = (np.arange(height * s) + 0.5) / s
    dx = (xs[None, :] - cx) / (w / 2.0)
    dy = (ys[:, None] - cy) / (h / 2.0)
    if shape == "ellipse":
        inside = dx * dx + dy * dy <= 1.0
    else:
        inside = (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)
    return inside.reshape(height, s, width, s).mean(axis=(1, 3)).astype(np.float32)


@dataclass
class _Mover:
    shape: str
    color: np.ndarray
    cx: float
    cy: float
    w: float
    h: float
    vx: float
    vy: float

    def advance(self, config: SynthConfig, rng: np.random.Generator) -> None:
        grow = 1.0 + config.scale_rate
        limit_w, limit_h = config.frame_width - 2.0, config.frame_height - 2.0
        self.w = min(max(self.w * grow, 2.0), limit_w)
        self.h = min(max(self.h * grow, 2.0), limit_h)
        self.cx += self.vx
        self.cy += self.vy
        if config.jitter > 0:
            self.cx += rng.normal(0.0, config.jitter)
            self.cy += rng.normal(0.0, config.jitter)
        # Reflect off the frame borders
        lo_x, hi_x = self.w / 2.0, config.frame_width - self.w / 2.0
        lo_y, hi_y = self.h / 2.0, config.frame_height - self.h / 2.0
        if self.cx < lo_x or self.cx > hi_x:
            self.vx = -self.vx
            self.cx = min(max(self.cx, lo_x), hi_x)
        if self.cy < lo_y or self.cy > hi_y:
            self.vy = -self.vy
            self.cy = min(max(self.cy, lo_y), hi_y)

    def box(self) -> Box:
        return Box(self.cx, self.cy, self.w, self.h)


def synth_sequence(config: SynthConfig, rng: np.random.Generator, sequence_id: str = "synth_0000") -> Sequence:
    """
    Render a sequence with exact per-frame boxes (instance 1) and label-map
    masks. Deterministic for a fixed rng state.
    """
    height, width = config.frame_height, config.frame_width
    background = _texture(config, rng)
    movers = []
    for _ in range(config.object_count):
        w, h = rng.uniform(config.size_min, config.size_max, size=2)
        cx = rng.uniform(w / 2.0, width - w / 2.0)
        cy = rng.uniform(h / 2.0, height - h / 2.0)
        if config.velocity is not None:
            vx, vy = config.velocity
        else:
            vx, vy = rng.uniform(-config.speed_max, config.speed_max, size=2)
        shape = config.shapes[int(rng.integers(len(config.shapes)))]
        # Saturated colors keep objects distinct from the mid-gray texture
        color = rng.permutation(np.array([rng.uniform(0.85, 1.0), rng.uniform(0.0, 0.15), rng.uniform(0.0, 1.0)]))
        movers.append(_Mover(shape, color.astype(np.float32), cx, cy, w, h, float(vx), float(vy)))

    frames, boxes, masks = [], [], []
    bar_w = max(2, width // 8)
    for t in range(config.length):
        if t > 0:
            for mover in movers:
                mover.advance(config, rng)
        frame = background.copy()
        labels = np.zeros((height, width), dtype=np.uint8)
        for instance, mover in enumerate(movers, start=1):
            cov = _coverage(mover.shape, mover.cx, mover.cy, mover.w, mover.h, height, width)
            frame = frame * (1.0 - cov[..., None]) + mover.color * cov[..., None]
            labels[cov >= 0.5] = instance
        if config.occluder:
            bar_x = (t * width / max(1, config.length - 1)) % width
            cov = _coverage("rectangle", bar_x, height / 2.0, bar_w, height * 2.0, height, width)
            frame = frame * (1.0 - cov[..., None]) + 0.5 * cov[..., None]
            labels[cov >= 0.5] = 0
        frames.append(frame.astype(np.float32))
        boxes.append(movers[0].box())
        masks.append(labels)
    return Sequence(sequence_id, frames, boxes, None, masks)


def synth_dataset(config: SynthConfig, count: int | None = None, seed: int | None = None) -> list[Sequence]:
    """`count` sequences; sequence i depends only on (config, seed, i)."""
    count = config.count if count is None else count
    seed = config.seed if seed is None else seed
    return [
        synth_sequence(config, np.random.default_rng([seed, i]), f"synth_{i:04d}")
        for i in range(count)
    ]
