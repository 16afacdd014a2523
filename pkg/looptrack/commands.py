"""
Command handlers: synth, train, track, propagate, eval.

Thin layer over the domain modules. Handlers validate paths, call into
data/trainer/tracker/evaluation and write outputs; they never implement
tracking or metric logic themselves. Per-sequence work runs on a thread pool
when jobs > 1 (networks are shared read-only, each sequence gets its own
Tracker).
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Literal, TypeVar

import cv2
import numpy as np

from looptrack.config import write_config_file
from looptrack.data import (
    PALETTE,
    Sequence,
    SynthConfig,
    load_dataset,
    load_masks,
    read_boxes,
    save_masks,
    synth_dataset,
    write_boxes,
    write_sequence,
)
from looptrack.errors import UsageError
from looptrack.evaluation import (
    DAVISResult,
    VOTResult,
    evaluate_davis,
    report,
    run_vot_sequence,
    summarize_vot,
    vot_from_predictions,
)
from looptrack.geometry import Box, RotatedBox
from looptrack.tracker import PropagationResult, Tracker, TrackRun, VOTAdapter, propagate_masks, track_sequence
from looptrack.trainer import TrainConfig, train

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def _existing_dir(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{what} directory not found: {path}")
    return path


def _existing_file(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _map(fn: Callable[[T], R], items: list[T], jobs: int) -> list[R]:
    """Ordered map, concurrent when jobs > 1."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --- synth ---


def synth_command(config: SynthConfig, out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sequences = synth_dataset(config)
    paths = [write_sequence(s, out) for s in sequences]
    write_config_file(out / "synth.cfg", config)
    logger.info("wrote %d synthetic sequences to %s", len(paths), out)
    return paths


# --- train ---


def train_command(config: TrainConfig, data: str | Path, out: str | Path) -> Path:
    dataset = load_dataset(_existing_dir(data, "data"))
    return train(config, dataset, out)


# --- track ---


def render_overlay(frame: np.ndarray, region: Box | RotatedBox, mask: np.ndarray | None = None) -> np.ndarray:
    """BGR uint8 image with the mask tinted and the region outlined."""
    image = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    if mask is not None:
        colors = np.asarray(PALETTE, dtype=np.float32).reshape(-1, 3)
        labels = np.asarray(mask, dtype=np.int64)
        tinted = image.astype(np.float32)
        fg = labels > 0
        tinted[fg] = 0.5 * tinted[fg] + 0.5 * colors[labels[fg]]
        image = tinted.astype(np.uint8)
    image = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    corners = (region.corners() if isinstance(region, Box) else region).as_array()
    cv2.polylines(image, [np.rint(corners).astype(np.int32).reshape(-1, 1, 2)], True, (0, 255, 255), 1)
    return image


def _render(sequence: Sequence, run: TrackRun, directory: Path) -> None:
    target = directory / sequence.id
    target.mkdir(parents=True, exist_ok=True)
    for i, region in enumerate(run.regions):
        mask = run.masks[i] if run.masks is not None else None
        cv2.imwrite(str(target / f"{i:08d}.png"), render_overlay(sequence.frame(i), region, mask))


def track_command(
    checkpoint: str | Path,
    data: str | Path,
    out: str | Path,
    box_mode: Literal["axis_aligned", "min_area"] = "axis_aligned",
    jobs: int = 1,
    render: str | Path | None = None,
) -> dict[str, TrackRun]:
    """One prediction file `<out>/<sequence>.txt` per sequence."""
    checkpoint = _existing_file(checkpoint, "checkpoint")
    sequences = load_dataset(_existing_dir(data, "data"))
    base = Tracker.from_checkpoint(checkpoint)
    out = Path(out)

    def run(sequence: Sequence) -> TrackRun:
        tracker = Tracker(base.net, base.spec, base.grid)
        result = track_sequence(tracker, sequence, box_mode)
        write_boxes(out / f"{sequence.id}.txt", result.regions)
        if render is not None:
            _render(sequence, result, Path(render))
        return result

    runs = _map(run, sequences, jobs)
    frames = sum(len(r.regions) - 1 for r in runs)
    seconds = sum(r.seconds for r in runs)
    logger.info("tracked %d sequences, %d frames, %.1f fps", len(runs), frames,
                frames / seconds if seconds > 0 else 0.0)
    return {s.id: r for s, r in zip(sequences, runs)}


# --- propagate ---


def _first_frame_instances(sequence: Sequence) -> dict[int, np.ndarray]:
    labels = sequence.mask(0)
    if labels is None:
        raise UsageError(f"sequence {sequence.id} has no first-frame mask")
    return {i: labels == i for i in sequence.instance_ids()}


def _propagate(base: Tracker, sequences: list[Sequence], jobs: int) -> tuple[list[PropagationResult], float]:
    def run(sequence: Sequence) -> tuple[PropagationResult, float]:
        tracker = Tracker(base.net, base.spec, base.grid)
        frames = [sequence.frame(i) for i in range(len(sequence))]
        started = time.perf_counter()
        result = propagate_masks(tracker, frames, _first_frame_instances(sequence))
        return result, time.perf_counter() - started

    outcomes = _map(run, sequences, jobs)
    return [r for r, _ in outcomes], sum(s for _, s in outcomes)


def propagate_command(checkpoint: str | Path, data: str | Path, out: str | Path, jobs: int = 1) -> list[Path]:
    """Per-frame paletted masks under `<out>/<sequence>/`."""
    base = Tracker.from_checkpoint(_existing_file(checkpoint, "checkpoint"))
    if not base.mask_enabled:
        raise UsageError("checkpoint has no mask head; train with mask_enabled=true")
    sequences = load_dataset(_existing_dir(data, "data"))
    results, _ = _propagate(base, sequences, jobs)
    written = []
    for sequence, result in zip(sequences, results):
        written.extend(save_masks(sequence.id, result.label_maps, out))
        if result.lost:
            logger.warning("%s: lost instances %s", sequence.id, result.lost)
    return written


# --- eval ---


def _eval_vot(sequences, checkpoint, pred, box_mode, jobs) -> VOTResult:
    if checkpoint is not None:
        base = Tracker.from_checkpoint(_existing_file(checkpoint, "checkpoint"))

        def run(sequence):
            return run_vot_sequence(VOTAdapter(Tracker(base.net, base.spec, base.grid), box_mode), sequence)

        return summarize_vot(_map(run, sequences, jobs))
    pred = _existing_dir(pred, "prediction")
    predictions = {}
    for sequence in sequences:
        predictions[sequence.id] = read_boxes(_existing_file(pred / f"{sequence.id}.txt", "prediction file"))
    return summarize_vot(vot_from_predictions(predictions, sequences))


def _eval_davis(sequences, checkpoint, pred, tolerance, jobs) -> DAVISResult:
    if checkpoint is not None:
        base = Tracker.from_checkpoint(_existing_file(checkpoint, "checkpoint"))
        if not base.mask_enabled:
            raise UsageError("checkpoint has no mask head")
        results, seconds = _propagate(base, sequences, jobs)
        predictions = {s.id: r.label_maps for s, r in zip(sequences, results)}
        return evaluate_davis(predictions, sequences, tolerance, seconds)
    pred = _existing_dir(pred, "prediction")
    predictions = {s.id: load_masks(_existing_dir(pred / s.id, "prediction")) for s in sequences}
    return evaluate_davis(predictions, sequences, tolerance)


def eval_command(
    task: Literal["vot", "davis"],
    data: str | Path,
    out: str | Path,
    pred: str | Path | None = None,
    checkpoint: str | Path | None = None,
    name: str = "looptrack",
    box_mode: Literal["axis_aligned", "min_area"] = "axis_aligned",
    tolerance: float | None = None,
    jobs: int = 1,
) -> tuple[Path, Path]:
    """
    VOT: live reset protocol with --checkpoint, otherwise stored prediction
    files scored without resets. DAVIS: live propagation or stored masks.
    """
    if (pred is None) == (checkpoint is None):
        raise UsageError("give exactly one of --pred or --checkpoint")
    sequences = load_dataset(_existing_dir(data, "data"))
    if task == "vot":
        result = _eval_vot(sequences, checkpoint, pred, box_mode, jobs)
        logger.info("accuracy %.3f, robustness %d, eao %.3f", result.accuracy, result.robustness, result.eao)
    else:
        result = _eval_davis(sequences, checkpoint, pred, tolerance, jobs)
        logger.info("J %.3f, F %.3f", result.j_mean, result.f_mean)
    return report({name: result}, out)
