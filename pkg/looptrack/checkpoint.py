"""
Checkpoint persistence.

A checkpoint is a plain dict written with torch.save: format tag, version,
the ModelConfig and CropSpec it was trained with, the step and the network
state_dict. Loading uses weights_only=True, so only tensors and plain
Python values are ever unpickled.
"""
import logging
from pathlib import Path

import torch
from pydantic import ValidationError

from looptrack.cycle import CropSpec
from looptrack.errors import CheckpointError
from looptrack.model import MODEL_VERSION, ModelConfig, SiameseNet

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "looptrack-checkpoint"


def save_checkpoint(path: str | Path, net: SiameseNet, crop: CropSpec | None = None, step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": MODEL_VERSION,
        "model": net.config.model_dump(mode="json"),
        "crop": (crop or CropSpec()).model_dump(mode="json"),
        "step": int(step),
        "state_dict": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
    }
    torch.save(payload, path)
    logger.info("saved checkpoint %s (step %d)", path, step)
    return path


def load_checkpoint(path: str | Path) -> tuple[SiameseNet, CropSpec, dict]:
    """Rebuild the network; returns (net, crop spec, {"step": ..., "version": ...})."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a looptrack checkpoint")
    if payload.get("version") != MODEL_VERSION:
        raise CheckpointError(
            f"{path} has model version {payload.get('version')}, expected {MODEL_VERSION}"
        )
    try:
        config = ModelConfig.model_validate(payload["model"])
        crop = CropSpec.model_validate(payload["crop"])
        net = SiameseNet(config)
        net.load_state_dict(payload["state_dict"])
    except (KeyError, ValidationError, RuntimeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    net.eval()
    return net, crop, {"step": int(payload.get("step", 0)), "version": payload["version"]}
