"""
Benchmark metrics.

VOT style: per-frame overlap under the reset protocol (a zero-overlap frame
is a failure; the tracker is re-initialized from ground truth 5 frames later
and the next 10 frames are left out of accuracy), accuracy, robustness and a
simplified windowed EAO.

DAVIS style: region similarity J (mask IoU) and boundary F-measure with a
pixel tolerance.

Reports are written as an aligned text table and as CSV with the same
formatted numbers.
"""
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from prettytable import PrettyTable
from scipy.ndimage import distance_transform_edt

from looptrack.data import Sequence
from looptrack.geometry import Box, RotatedBox, iou

logger = logging.getLogger(__name__)

FAILURE_SKIP = 5
BURN_IN = 10
EAO_RANGE = (1, 100)
BOUNDARY_TOLERANCE = 0.008


class RegionTracker(Protocol):
    def init(self, frame: np.ndarray, region: Box | RotatedBox) -> None: ...

    def update(self, frame: np.ndarray) -> Box | RotatedBox: ...


# --- Overlap ---


def _polygon(region: Box | RotatedBox) -> np.ndarray:
    points = (region.corners() if isinstance(region, Box) else region).as_array()
    x, y = points[:, 0], points[:, 1]
    signed = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return points if signed > 0 else points[::-1]


def _area(points: np.ndarray) -> float:
    if len(points) < 3:
        return 0.0
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip(subject: list[np.ndarray], a: np.ndarray, b: np.ndarray) -> list[np.ndarray]:
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    for i, cur in enumerate(subject):
        prev = subject[i - 1]
        s_cur, s_prev = side(cur), side(prev)
        if s_cur >= 0:
            if s_prev < 0:
                out.append(prev + (cur - prev) * (s_prev / (s_prev - s_cur)))
            out.append(cur)
        elif s_prev >= 0:
            out.append(prev + (cur - prev) * (s_prev / (s_prev - s_cur)))
    return out


def polygon_overlap(a: Box | RotatedBox, b: Box | RotatedBox) -> float:
    """IoU of two convex regions by Sutherland-Hodgman clipping."""
    if isinstance(a, Box) and isinstance(b, Box):
        return iou(a, b)
    pa, pb = _polygon(a), _polygon(b)
    inter = list(pa)
    for i in range(len(pb)):
        if not inter:
            break
        inter = _clip(inter, pb[i], pb[(i + 1) % len(pb)])
    overlap = _area(np.asarray(inter)) if inter else 0.0
    union = _area(pa) + _area(pb) - overlap
    return float(min(max(overlap / union, 0.0), 1.0)) if union > 0 else 0.0


# --- VOT protocol ---


@dataclass
class VOTTrace:
    """
    Per-frame overlaps of one sequence. `overlaps[i]` is None for
    initialization and skipped frames; `counted[i]` marks frames that enter
    accuracy.
    """

    sequence_id: str
    overlaps: list[float | None]
    counted: list[bool]
    failures: list[int] = field(default_factory=list)
    inits: list[int] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def frames_tracked(self) -> int:
        return sum(v is not None for v in self.overlaps)

    def accuracy(self) -> float | None:
        values = [v for v, c in zip(self.overlaps, self.counted) if c]
        return float(np.mean(values)) if values else None


@dataclass(frozen=True)
class VOTResult:
    accuracy: float
    robustness: int
    eao: float
    failures: dict[str, int]
    frames: int = 0
    seconds: float = 0.0

    @property
    def fps(self) -> float:
        return self.frames / self.seconds if self.seconds > 0 else 0.0


def run_vot_sequence(
    tracker: RegionTracker,
    sequence: Sequence,
    reset: bool = True,
    skip: int = FAILURE_SKIP,
    burn_in: int = BURN_IN,
) -> VOTTrace:
    if not sequence.has_full_gt:
        raise ValueError(f"sequence {sequence.id} has no per-frame ground truth")
    n = len(sequence)
    trace = VOTTrace(sequence.id, [None] * n, [False] * n)
    tracker.init(sequence.frame(0), sequence.region(0))
    trace.inits.append(0)
    burn_until = 0
    i = 1
    while i < n:
        started = time.perf_counter()
        prediction = tracker.update(sequence.frame(i))
        trace.seconds += time.perf_counter() - started
        overlap = polygon_overlap(prediction, sequence.region(i))
        trace.overlaps[i] = overlap
        if overlap > 0.0 or not reset:
            trace.counted[i] = i > burn_until or not reset
            if overlap <= 0.0:
                trace.failures.append(i)
            i += 1
            continue

        trace.failures.append(i)
        restart = i + skip
        if restart >= n:
            break
        tracker.init(sequence.frame(restart), sequence.region(restart))
        trace.inits.append(restart)
        burn_until = restart + burn_in
        i = restart + 1
    return trace


def run_vot_protocol(
    tracker: RegionTracker,
    sequences: list[Sequence],
    reset: bool = True,
    skip: int = FAILURE_SKIP,
    burn_in: int = BURN_IN,
) -> list[VOTTrace]:
    """Reset protocol over sequences, in order."""
    return [run_vot_sequence(tracker, s, reset, skip, burn_in) for s in sequences]


class _Replay:
    def __init__(self, regions: list[Box | RotatedBox]):
        self.regions = regions
        self.index = 0

    def init(self, frame, region) -> None:
        pass

    def update(self, frame) -> Box | RotatedBox:
        self.index += 1
        return self.regions[self.index]


def vot_from_predictions(
    predictions: dict[str, list[Box | RotatedBox]], sequences: list[Sequence]
) -> list[VOTTrace]:
    """Score stored prediction files (first line = initialization frame) without resets."""
    traces = []
    for sequence in sequences:
        if sequence.id not in predictions:
            raise ValueError(f"no predictions for sequence {sequence.id}")
        regions = predictions[sequence.id]
        if len(regions) != len(sequence):
            raise ValueError(
                f"{sequence.id}: {len(regions)} predictions for {len(sequence)} frames"
            )
        traces.append(run_vot_sequence(_Replay(regions), sequence, reset=False))
    return traces


def _segments(trace: VOTTrace) -> list[tuple[list[float], bool]]:
    """Overlap runs after each initialization; the flag marks runs ended by a failure."""
    failures = set(trace.failures)
    segments = []
    for start in trace.inits:
        values = []
        failed = False
        for i in range(start + 1, len(trace.overlaps)):
            if trace.overlaps[i] is None:
                break
            if i in failures:
                values.append(0.0)
                failed = True
                break
            values.append(trace.overlaps[i])
        segments.append((values, failed))
    return segments


def eao_simplified(traces: list[VOTTrace], window: tuple[int, int] = EAO_RANGE) -> float:
    """
    For every window length s in the range: per sequence, the mean over its
    segments long enough (or ended by a failure, which pads with zeros) of
    the average overlap of their first s frames; then the mean over the
    sequences that had such a segment. The result averages those values over
    the lengths that had any segment.
    """
    if not traces:
        raise ValueError("no traces to score")
    lo, hi = window
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid EAO window {window}")
    per_trace = [_segments(trace) for trace in traces]
    per_length = []
    for s in range(lo, hi + 1):
        sequence_means = []
        for segments in per_trace:
            means = []
            for values, failed in segments:
                if len(values) >= s:
                    means.append(float(np.mean(values[:s])))
                elif failed:
                    means.append(float(np.sum(values)) / s)
            if means:
                sequence_means.append(float(np.mean(means)))
        if sequence_means:
            per_length.append(float(np.mean(sequence_means)))
    if not per_length:
        raise ValueError("no tracked segment falls inside the EAO window")
    return float(np.mean(per_length))


def summarize_vot(traces: list[VOTTrace], window: tuple[int, int] = EAO_RANGE) -> VOTResult:
    accuracies = [a for a in (t.accuracy() for t in traces) if a is not None]
    return VOTResult(
        accuracy=float(np.mean(accuracies)) if accuracies else 0.0,
        robustness=sum(len(t.failures) for t in traces),
        eao=eao_simplified(traces, window),
        failures={t.sequence_id: len(t.failures) for t in traces},
        frames=sum(t.frames_tracked for t in traces),
        seconds=sum(t.seconds for t in traces),
    )


# --- Masks ---


def _pixels(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "pixels", mask)) > 0


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def jaccard(pred, gt) -> float:
    """|pred & gt| / |pred | gt|; 1 when both are empty."""
    p, g = _pixels(pred), _pixels(gt)
    _check_shapes(p, g)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbor in the background or off the image."""
    m = _pixels(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def default_tolerance(shape: tuple[int, int]) -> int:
    return math.ceil(BOUNDARY_TOLERANCE * math.hypot(shape[0], shape[1]))


def boundary_f(pred, gt, tolerance: float | None = None) -> float:
    """
    F-measure of boundary precision and recall: a boundary pixel matches if
    the other mask's boundary lies within `tolerance` pixels (Euclidean).
    """
    p, g = _pixels(pred), _pixels(gt)
    _check_shapes(p, g)
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    tol = default_tolerance(p.shape) if tolerance is None else tolerance
    bp, bg = boundary(p), boundary(g)
    to_gt = distance_transform_edt(~bg)
    to_pred = distance_transform_edt(~bp)
    precision = float(np.mean(to_gt[bp] <= tol))
    recall = float(np.mean(to_pred[bg] <= tol))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class DAVISResult:
    j_mean: float
    f_mean: float
    per_object: dict[str, tuple[float, float]]
    frames: int = 0
    seconds: float = 0.0

    @property
    def fps(self) -> float:
        return self.frames / self.seconds if self.seconds > 0 else 0.0


def evaluate_davis(
    predictions: dict[str, list[np.ndarray]],
    sequences: list[Sequence],
    tolerance: float | None = None,
    seconds: float = 0.0,
) -> DAVISResult:
    """
    J and F per object (mean over frames after the first), then the mean
    over all objects. Objects are the instance ids of each first-frame mask.
    """
    per_object = {}
    frames = 0
    for sequence in sequences:
        if sequence.masks is None or sequence.first_frame_only:
            raise ValueError(f"sequence {sequence.id} has no per-frame masks")
        labels = predictions.get(sequence.id)
        if labels is None or len(labels) != len(sequence):
            raise ValueError(f"{sequence.id}: expected {len(sequence)} predicted masks")
        frames += len(sequence) - 1
        for instance in sequence.instance_ids():
            js, fs = [], []
            for i in range(1, len(sequence)):
                gt = sequence.mask(i) == instance
                pred = np.asarray(labels[i]) == instance
                js.append(jaccard(pred, gt))
                fs.append(boundary_f(pred, gt, tolerance))
            per_object[f"{sequence.id}/{instance}"] = (float(np.mean(js)), float(np.mean(fs)))
    if not per_object:
        raise ValueError("no objects to evaluate")
    j_mean = float(np.mean([j for j, _ in per_object.values()]))
    f_mean = float(np.mean([f for _, f in per_object.values()]))
    return DAVISResult(j_mean, f_mean, per_object, frames, seconds)


# --- Reports ---


def _row(name: str, result: VOTResult | DAVISResult) -> list[str]:
    if isinstance(result, VOTResult):
        values = [f"{result.accuracy:.3f}", str(result.robustness), f"{result.eao:.3f}"]
    else:
        values = [f"{result.j_mean:.3f}", f"{result.f_mean:.3f}"]
    return [name] + values + [f"{result.fps:.1f}"]


def report(results: dict[str, VOTResult | DAVISResult], out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.txt (aligned table) and report.csv with identical numbers."""
    if not results:
        raise ValueError("nothing to report")
    kinds = {type(r) for r in results.values()}
    if len(kinds) != 1:
        raise ValueError("cannot mix VOT and DAVIS results in one report")
    if kinds == {VOTResult}:
        header = ["Tracker", "Accuracy", "Robustness", "EAO", "FPS"]
    else:
        header = ["Tracker", "J(Mean)", "F(Mean)", "FPS"]
    rows = [_row(name, result) for name, result in results.items()]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = PrettyTable(header)
    for row in rows:
        table.add_row(row)
    txt = out_dir / "report.txt"
    txt.write_text(table.get_string() + "\n", encoding="utf-8")
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    logger.info("wrote %s and %s", txt, csv_path)
    return txt, csv_path
