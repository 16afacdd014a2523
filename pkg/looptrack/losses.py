"""
Training losses: smooth-L1 box regression, two-sided cross-entropy score loss,
per-pixel logistic mask loss, and their weighted totals

    L = L_sco + lambda1 * L_box                      (box model)
    L = L_sco + lambda1 * L_box + lambda2 * L_mask   (mask model)

Reductions: box loss averages over positive anchors, score loss over labeled
anchors, mask loss over positive lattice positions.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from looptrack.geometry import IGNORE, POSITIVE, AnchorLabels, BoxDelta

PROB_EPS = 1e-7


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(30.0, ge=0)


@dataclass(frozen=True)
class MaskTarget:
    """
    `flags` holds y_n in {+1, -1} for every lattice position (S*S,);
    `positions` lists the positives in ascending order and `targets`
    (P, mask_size^2) their per-pixel labels c_n in {+1, -1}.
    """

    flags: np.ndarray
    positions: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if not np.array_equal(np.flatnonzero(self.flags == 1), self.positions):
            raise ValueError("mask targets must cover exactly the positive positions")
        if len(self.targets) != len(self.positions):
            raise ValueError("one target mask per positive position is required")


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64)).to(dtype)


def smooth_l1(x):
    """0.5 x^2 if |x| < 1 else |x| - 0.5. Floats in, float out; tensors elementwise."""
    if not isinstance(x, torch.Tensor):
        ax = abs(float(x))
        return 0.5 * ax * ax if ax < 1.0 else ax - 0.5
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def box_loss(pred, target):
    """
    Sum of smooth-L1 over (tx, ty, tw, th). For BoxDelta inputs returns a
    float; for (N, 4) tensors returns the mean over the N rows (N = 0 -> 0).
    """
    if isinstance(pred, BoxDelta):
        return sum(smooth_l1(p - t) for p, t in zip(pred.as_array(), _delta_array(target)))
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    return smooth_l1(pred - target).sum(dim=-1).mean()


def _delta_array(d) -> np.ndarray:
    return d.as_array() if isinstance(d, BoxDelta) else np.asarray(d, dtype=np.float64)


def score_loss(p_obj, p_back, y_o, y_b):
    """
    -[y_o log p_obj + (1-y_o) log(1-p_obj) + y_b log p_back + (1-y_b) log(1-p_back)]
    with probabilities clamped to [1e-7, 1-1e-7]. Scalars give a float;
    tensors give the mean over their elements.
    """
    if not isinstance(p_obj, torch.Tensor):
        po = min(max(float(p_obj), PROB_EPS), 1.0 - PROB_EPS)
        pb = min(max(float(p_back), PROB_EPS), 1.0 - PROB_EPS)
        return -(
            y_o * math.log(po) + (1 - y_o) * math.log(1.0 - po)
            + y_b * math.log(pb) + (1 - y_b) * math.log(1.0 - pb)
        )
    po = p_obj.clamp(PROB_EPS, 1.0 - PROB_EPS)
    pb = _as_tensor(p_back, p_obj).clamp(PROB_EPS, 1.0 - PROB_EPS)
    yo = _as_tensor(y_o, p_obj)
    yb = _as_tensor(y_b, p_obj)
    if po.numel() == 0:
        return p_obj.sum() * 0.0
    per_anchor = -(
        yo * torch.log(po) + (1 - yo) * torch.log(1 - po)
        + yb * torch.log(pb) + (1 - yb) * torch.log(1 - pb)
    )
    return per_anchor.mean()


def score_loss_from_logits(scores: torch.Tensor, labels: np.ndarray) -> torch.Tensor:
    """
    Score loss from (N, 2) logits (s_obj, s_back) and anchor labels;
    ignored anchors contribute nothing.
    """
    labels = np.asarray(labels)
    keep = torch.as_tensor(np.flatnonzero(labels != IGNORE), device=scores.device)
    probs = F.softmax(scores, dim=-1)[keep]
    y_o = _as_tensor((labels[labels != IGNORE] == POSITIVE).astype(np.float64), scores)
    return score_loss(probs[:, 0], probs[:, 1], y_o, 1 - y_o)


def box_loss_from_deltas(deltas: torch.Tensor, labels: AnchorLabels) -> torch.Tensor:
    """Box loss over positive anchors of (N, 4) predicted deltas."""
    pos = labels.positives
    idx = torch.as_tensor(pos, device=deltas.device)
    target = _as_tensor(labels.targets[pos], deltas)
    return box_loss(deltas[idx], target)


def mask_loss(mask_logits: torch.Tensor, targets: MaskTarget) -> torch.Tensor:
    """
    Logistic mask loss: for each positive position, the mean over pixels of
    log(1 + exp(-c * m)); averaged over positives. `mask_logits` holds one row
    per lattice position (S*S, m^2) or only the positives' rows (P, m^2).
    Negative positions carry zero weight.
    """
    if len(targets.positions) == 0:
        return mask_logits.sum() * 0.0
    if mask_logits.shape[0] == len(targets.flags):
        idx = torch.as_tensor(targets.positions, device=mask_logits.device)
        mask_logits = mask_logits[idx]
    c = _as_tensor(targets.targets, mask_logits)
    per_position = F.softplus(-c * mask_logits).mean(dim=1)
    return per_position.mean()


def total_loss(score, box, mask=None, weights: LossWeights = LossWeights(), mask_enabled: bool = False):
    """Weighted sum; the mask term only when mask_enabled."""
    loss = score + weights.lambda1 * box
    if mask_enabled:
        if mask is None:
            raise ValueError("mask loss required when mask_enabled")
        loss = loss + weights.lambda2 * mask
    return loss
