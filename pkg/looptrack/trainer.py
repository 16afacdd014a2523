"""
Self-supervised training on unlabeled sequences.

Each step samples a batch of cycles (a start frame with its annotation, or a
random box, plus a few later frames), tracks every cycle forward and back,
labels the final response with the start-frame target and takes one SGD
step on the averaged loss. Cycles that lose or drift off the target are
discarded rather than masked.

Samples are processed one at a time and backpropagated immediately, so peak
memory holds one cycle's graph regardless of batch size.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from looptrack import config as settings
from looptrack.checkpoint import save_checkpoint
from looptrack.config import split_list, write_config_file
from looptrack.cycle import CropSpec, CycleTarget, cycle_loss_targets, pair_targets, run_cycle
from looptrack.data import Sequence
from looptrack.errors import CycleDiscarded, EmptyTargetError, NonFiniteLossError
from looptrack.geometry import DELTA_BOUND, AnchorConfig, AnchorGrid, Box, LabelCaps, box_from_mask, make_anchor_grid
from looptrack.losses import LossWeights, box_loss_from_deltas, mask_loss, score_loss_from_logits, total_loss
from looptrack.model import ModelConfig, SiameseNet

logger = logging.getLogger(__name__)

# Random-box initialization: area fraction of the frame and aspect range
RANDOM_AREA = (0.01, 0.25)
RANDOM_ASPECT = (0.5, 2.0)


class TrainConfig(BaseModel):
    """Every training knob; flat so it maps one-to-one onto key=value files and flags."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    steps: int = Field(1000, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    grad_clip: float | None = Field(10.0, gt=0)
    seed: int = 0

    # Cycle sampling
    cycle_length_min: int = Field(2, ge=2)
    cycle_length_max: int = Field(4, ge=2)
    max_frame_gap: int = Field(10, ge=1)
    init_mode: Literal["object", "random"] = "object"
    # Backward steps also regress toward the forward box at the same frame (box term only, no score term)
    intermediate_losses: bool = False

    # Loss
    mask_enabled: bool = False
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(30.0, ge=0)
    max_positives: int = Field(16, ge=1)
    max_total: int = Field(48, ge=1)

    # Network and geometry
    width: int = Field(64, ge=2)
    mask_size: int = Field(63, ge=1)
    mask_window: float = Field(127.0, gt=0)
    anchor_ratios: tuple[float, ...] = (0.33, 0.5, 1.0, 2.0, 3.0)
    anchor_scale: float = Field(8.0, gt=0)
    context_margin: float = Field(0.5, ge=0)
    delta_bound: float = Field(DELTA_BOUND, gt=0)

    checkpoint_every: int = Field(settings.CHECKPOINT_EVERY, ge=1)

    @field_validator("anchor_ratios", mode="before")
    @classmethod
    def split_ratios(cls, v):
        return split_list(v)

    @model_validator(mode="after")
    def check_cycle_range(self) -> "TrainConfig":
        if self.cycle_length_min > self.cycle_length_max:
            raise ValueError("cycle_length_min must not exceed cycle_length_max")
        return self

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(ratios=self.anchor_ratios, scale=self.anchor_scale)

    def network_config(self) -> ModelConfig:
        return ModelConfig(
            width=self.width,
            mask_enabled=self.mask_enabled,
            mask_size=self.mask_size,
            mask_window=self.mask_window,
            anchors=self.anchor_config(),
            seed=self.seed,
        )

    def crop_spec(self) -> CropSpec:
        return CropSpec(context_margin=self.context_margin)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2)

    def label_caps(self) -> LabelCaps:
        return LabelCaps(max_positives=self.max_positives, max_total=self.max_total)


@dataclass(frozen=True)
class CycleSample:
    """A sampled cycle: which frames, and the start-frame target only."""

    sequence_id: str
    sequence_index: int
    frame_indices: tuple[int, ...]
    init_box: Box
    init_mask: np.ndarray | None = None

    def __post_init__(self):
        if len(set(self.frame_indices)) < 2:
            raise ValueError("a cycle needs at least 2 distinct frames")

    @property
    def sample_id(self) -> str:
        return f"{self.sequence_id}@{','.join(str(i) for i in self.frame_indices)}"


# --- Sampling ---


def _random_box(shape: tuple[int, int], rng: np.random.Generator) -> Box:
    height, width = shape
    area = rng.uniform(*RANDOM_AREA) * height * width
    aspect = math.exp(rng.uniform(math.log(RANDOM_ASPECT[0]), math.log(RANDOM_ASPECT[1])))
    w = min(math.sqrt(area * aspect), float(width))
    h = min(math.sqrt(area / aspect), float(height))
    cx = rng.uniform(w / 2.0, width - w / 2.0)
    cy = rng.uniform(h / 2.0, height - h / 2.0)
    return Box(cx, cy, w, h)


def _frame_indices(start: int, length: int, count: int, max_gap: int, rng: np.random.Generator) -> list[int]:
    indices = [start]
    for remaining in range(length - 1, 0, -1):
        # Leave room for the frames still to be picked
        largest = min(max_gap, count - remaining - indices[-1])
        indices.append(indices[-1] + int(rng.integers(1, largest + 1)))
    return indices


def sample_cycle(dataset: list[Sequence], config: TrainConfig, rng: np.random.Generator) -> CycleSample:
    """
    Pick a sequence, a cycle length, a start frame and later frames with
    gaps of at most max_frame_gap. Sequences shorter than the cycle are
    resampled. Only the start frame's annotation is read.
    """
    if not dataset:
        raise ValueError("cannot sample cycles from an empty dataset")
    for _ in range(settings.MAX_RESAMPLE):
        seq_index = int(rng.integers(len(dataset)))
        sequence = dataset[seq_index]
        length = int(rng.integers(config.cycle_length_min, config.cycle_length_max + 1))
        if len(sequence) < length:
            logger.debug("%s has %d frames, cycle needs %d; resampling", sequence.id, len(sequence), length)
            continue
        start = 0 if sequence.first_frame_only else int(rng.integers(0, len(sequence) - length + 1))
        indices = _frame_indices(start, length, len(sequence), config.max_frame_gap, rng)
        view = sequence.cycle_view(start)

        init_mask = None
        if config.init_mode == "random":
            init_box = _random_box(view.frame_shape(), rng)
        else:
            init_mask = view.initial_mask()
            init_box = view.initial_box()
            if init_box is None:
                if init_mask is None:
                    raise ValueError(f"sequence {sequence.id} has no start-frame annotation")
                try:
                    init_box = box_from_mask(init_mask)
                except EmptyTargetError:
                    logger.debug("%s frame %d has an empty mask; resampling", sequence.id, start)
                    continue
            if init_mask is not None and not init_mask.any():
                init_mask = None
        return CycleSample(sequence.id, seq_index, tuple(indices), init_box, init_mask)
    raise ValueError(
        f"no sequence holds a {config.cycle_length_min}-frame cycle after {settings.MAX_RESAMPLE} attempts"
    )


# --- Steps ---


def build_optimizer(net: SiameseNet, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        net.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def sample_losses(
    target: CycleTarget, pairs: list[CycleTarget], config: TrainConfig
) -> dict[str, torch.Tensor]:
    """Loss components for one cycle; `loss` is the weighted total."""
    response = target.step.response
    l_score = score_loss_from_logits(response.flat_scores()[0], target.labels.labels)
    l_box = box_loss_from_deltas(response.flat_deltas()[0], target.labels)
    for pair in pairs:
        l_box = l_box + box_loss_from_deltas(pair.step.response.flat_deltas()[0], pair.labels)

    losses = {"score_loss": l_score, "box_loss": l_box}
    l_mask = None
    if config.mask_enabled:
        if target.mask is not None:
            l_mask = mask_loss(response.mask_logits_at(target.mask.positions), target.mask)
        else:
            l_mask = l_score * 0.0
        losses["mask_loss"] = l_mask
    losses["loss"] = total_loss(l_score, l_box, l_mask, config.loss_weights(), config.mask_enabled)
    return losses


def train_step(
    net: SiameseNet,
    optimizer: torch.optim.Optimizer,
    batch: list[CycleSample],
    dataset: list[Sequence],
    config: TrainConfig,
    grid: AnchorGrid,
    rng: np.random.Generator,
) -> dict:
    """
    One update from a batch of cycles. The loss is averaged over the kept
    (non-discarded) cycles. If every cycle is discarded the parameters are
    left untouched and the metrics carry skipped=True.
    """
    spec = config.crop_spec()
    caps = config.label_caps()
    names = ["loss", "score_loss", "box_loss"] + (["mask_loss"] if config.mask_enabled else [])
    sums = dict.fromkeys(names, 0.0)
    kept = discarded = 0

    optimizer.zero_grad()
    for sample in batch:
        frames = dataset[sample.sequence_index].cycle_view(sample.frame_indices[0]).frames(
            list(sample.frame_indices)
        )
        try:
            result = run_cycle(
                net, frames, sample.init_box, grid, sample.init_mask, spec,
                frame_ids=list(sample.frame_indices), train=True,
                intermediate=config.intermediate_losses, delta_bound=config.delta_bound,
            )
            target = cycle_loss_targets(result, grid, caps, rng, config.mask_window)
            pairs = pair_targets(result, grid, caps, rng) if config.intermediate_losses else []
        except CycleDiscarded as e:
            discarded += 1
            logger.debug("discarded %s (%s): %s", sample.sample_id, e.reason, e.msg)
            continue
        except FloatingPointError as e:
            raise NonFiniteLossError(f"non-finite response on {sample.sample_id}", sample.sample_id) from e

        losses = sample_losses(target, pairs, config)
        if not torch.isfinite(losses["loss"]):
            raise NonFiniteLossError(f"non-finite loss on {sample.sample_id}", sample.sample_id)
        (losses["loss"] / len(batch)).backward()
        kept += 1
        for name in names:
            sums[name] += float(losses[name].detach())

    metrics = {"kept": kept, "discarded": discarded, "skipped": kept == 0}
    if kept == 0:
        logger.warning("all %d cycles discarded; skipping update", len(batch))
        metrics.update(dict.fromkeys(names))
        return metrics

    if kept < len(batch):
        for p in net.parameters():
            if p.grad is not None:
                p.grad.mul_(len(batch) / kept)
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
    optimizer.step()
    metrics.update({name: value / kept for name, value in sums.items()})
    return metrics


# --- Training loop ---


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if settings.NUM_THREADS:
        torch.set_num_threads(settings.NUM_THREADS)


def train(
    config: TrainConfig,
    dataset: list[Sequence],
    out_dir: str | Path,
    progress: bool | None = None,
) -> Path:
    """
    Run config.steps updates, appending one JSON record per step to the
    metrics log and checkpointing every checkpoint_every steps and at the
    end. Returns the final checkpoint path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(config.seed)
    write_config_file(out_dir / "train.cfg", config)

    net = SiameseNet(config.network_config())
    grid = make_anchor_grid(config.anchor_config())
    optimizer = build_optimizer(net, config)
    rng = np.random.default_rng(config.seed)
    checkpoint_path = out_dir / settings.CHECKPOINT_NAME
    show = settings.SHOW_PROGRESS if progress is None else progress

    logger.info(
        "training %d steps, batch %d, %d sequences, %d parameters%s",
        config.steps, config.batch_size, len(dataset), net.parameter_count,
        " (mask)" if config.mask_enabled else "",
    )
    with open(out_dir / settings.METRICS_FILE, "w", encoding="utf-8") as log:
        for step in tqdm(range(1, config.steps + 1), disable=not show, desc="train"):
            batch = [sample_cycle(dataset, config, rng) for _ in range(config.batch_size)]
            try:
                metrics = train_step(net, optimizer, batch, dataset, config, grid, rng)
            except NonFiniteLossError as e:
                logger.error("aborting at step %d: %s (sample %s)", step, e.msg, e.sample_id)
                raise
            log.write(json.dumps({"step": step, **metrics}) + "\n")
            log.flush()
            if step % config.checkpoint_every == 0 and step != config.steps:
                save_checkpoint(checkpoint_path, net, config.crop_spec(), step)
    return save_checkpoint(checkpoint_path, net, config.crop_spec(), config.steps)
