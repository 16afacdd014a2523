"""
Siamese region-proposal network with an optional per-position mask head.

One fully convolutional backbone (stride 8) embeds both the 127x127 template
and the 255x255 search patch; a 1x1 adjust layer per branch feeds a depthwise
cross-correlation whose 25x25xC volume is shared by the score (2k), box (4k)
and mask (mask_size^2) heads.

Inputs are HWC pixels in [0, 1]; `to_tensor` batches them into NCHW and the
network subtracts PIXEL_MEAN itself.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from looptrack.geometry import AnchorConfig

MODEL_VERSION = 1
PIXEL_MEAN = 0.5

# Template features are center-cropped to this size before correlation
TEMPLATE_FEATURE_SIZE = 7

# Init gain of the last layer of each head (backbone and hidden layers use 2)
HEAD_OUTPUT_GAIN = 0.1


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    width: int = Field(64, ge=2)
    head_width: int | None = Field(None, ge=1)
    mask_enabled: bool = False
    mask_size: int = Field(63, ge=1)
    # Side, in search-patch pixels, of the region each position's mask covers
    mask_window: float = Field(127.0, gt=0)
    template_size: int = 127
    search_size: int = 255
    anchors: AnchorConfig = AnchorConfig()
    seed: int = 0

    @model_validator(mode="after")
    def check_geometry(self) -> "ModelConfig":
        if self.anchors.search_size != self.search_size:
            raise ValueError("anchors.search_size must equal search_size")
        if _feature_size(self.template_size) < TEMPLATE_FEATURE_SIZE:
            raise ValueError(f"template_size {self.template_size} too small")
        score = _feature_size(self.search_size) - TEMPLATE_FEATURE_SIZE + 1
        if score != self.anchors.score_size:
            raise ValueError(
                f"search_size {self.search_size} gives a {score}x{score} response, "
                f"anchors expect {self.anchors.score_size}"
            )
        return self

    @property
    def k(self) -> int:
        return self.anchors.k

    @property
    def hidden(self) -> int:
        return self.head_width or self.width


def _feature_size(n: int) -> int:
    # Three unpadded 3x3 stride-2 convs, then a padded 3x3 conv
    for _ in range(3):
        n = (n - 3) // 2 + 1
    return n


# --- Response map ---


@dataclass
class ResponseMap:
    """
    Raw head outputs, NCHW: scores (B, 2k, S, S), deltas (B, 4k, S, S),
    masks (B, mask_size^2, S, S) or None. Channel 2a is s_obj and 2a+1 is
    s_back of anchor a; channels 4a..4a+3 are its (tx, ty, tw, th).
    """

    scores: torch.Tensor
    deltas: torch.Tensor
    masks: torch.Tensor | None
    k: int

    @property
    def size(self) -> int:
        return self.scores.shape[-1]

    @property
    def mask_size(self) -> int:
        if self.masks is None:
            raise ValueError("response has no mask head output")
        return math.isqrt(self.masks.shape[1])

    def flat_scores(self) -> torch.Tensor:
        """(B, k*S*S, 2) logits ordered by flat anchor index a*S*S + y*S + x."""
        b, _, s, _ = self.scores.shape
        return self.scores.view(b, self.k, 2, s, s).permute(0, 1, 3, 4, 2).reshape(b, -1, 2)

    def flat_deltas(self) -> torch.Tensor:
        b, _, s, _ = self.deltas.shape
        return self.deltas.view(b, self.k, 4, s, s).permute(0, 1, 3, 4, 2).reshape(b, -1, 4)

    def objectness(self) -> torch.Tensor:
        """(B, k*S*S) softmax probability of the object class."""
        return F.softmax(self.flat_scores(), dim=-1)[..., 0]

    def mask_logits_at(self, positions: torch.Tensor | np.ndarray | list[int]) -> torch.Tensor:
        """Mask logits of lattice positions (y*S + x) for batch item 0: (P, mask_size^2)."""
        if self.masks is None:
            raise ValueError("response has no mask head output")
        flat = self.masks[0].flatten(1)  # (m^2, S*S)
        idx = torch.as_tensor(np.asarray(positions, dtype=np.int64), device=flat.device)
        return flat[:, idx].transpose(0, 1)

    def is_finite(self) -> bool:
        tensors = [self.scores, self.deltas] + ([self.masks] if self.masks is not None else [])
        return all(bool(torch.isfinite(t).all()) for t in tensors)

    def detach(self) -> "ResponseMap":
        return ResponseMap(
            self.scores.detach(),
            self.deltas.detach(),
            None if self.masks is None else self.masks.detach(),
            self.k,
        )


# --- Layers ---


def depthwise_xcorr(fz: torch.Tensor, fx: torch.Tensor) -> torch.Tensor:
    """
    Per-channel cross-correlation of template features fz (B, C, h, w) over
    search features fx (B, C, H, W): out[b, c, u, v] = sum_ij fz[b,c,i,j] *
    fx[b,c,u+i,v+j], giving (B, C, H-h+1, W-w+1).
    """
    if fz.dim() != 4 or fx.dim() != 4:
        raise ValueError("depthwise_xcorr expects 4-D (B, C, H, W) tensors")
    if fz.shape[:2] != fx.shape[:2]:
        raise ValueError(f"batch/channel mismatch: {tuple(fz.shape)} vs {tuple(fx.shape)}")
    if fz.shape[2] > fx.shape[2] or fz.shape[3] > fx.shape[3]:
        raise ValueError("template features larger than search features")
    b, c = fz.shape[:2]
    search = fx.reshape(1, b * c, fx.shape[2], fx.shape[3])
    kernel = fz.reshape(b * c, 1, fz.shape[2], fz.shape[3])
    out = F.conv2d(search, kernel, groups=b * c)
    return out.view(b, c, out.shape[2], out.shape[3])


def _head(in_channels: int, hidden: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, hidden, kernel_size=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(hidden, out_channels, kernel_size=1),
    )


class SiameseNet(nn.Module):
    """The tracking network F(z, x; theta)."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config.width
        self.backbone = nn.Sequential(
            nn.Conv2d(3, max(1, c // 2), kernel_size=3, stride=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(max(1, c // 2), c, kernel_size=3, stride=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, kernel_size=3, stride=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, kernel_size=3, padding=1),
        )
        self.template_adjust = nn.Conv2d(c, c, kernel_size=1)
        self.search_adjust = nn.Conv2d(c, c, kernel_size=1)

        k, hidden = self.config.k, self.config.hidden
        self.score_head = _head(c, hidden, 2 * k)
        self.box_head = _head(c, hidden, 4 * k)
        self.mask_head = (
            _head(c, hidden, self.config.mask_size ** 2) if self.config.mask_enabled else None
        )
        self.reset_parameters(self.config.seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        """Fan-in scaled normal weights from a seeded generator; zero biases."""
        gen = torch.Generator().manual_seed(seed)
        finals = {id(h[-1]) for h in (self.score_head, self.box_head, self.mask_head) if h is not None}
        for module in self.modules():
            if not isinstance(module, nn.Conv2d):
                continue
            fan_in = module.in_channels // module.groups * module.kernel_size[0] * module.kernel_size[1]
            gain = HEAD_OUTPUT_GAIN if id(module) in finals else 2.0
            std = math.sqrt(gain / fan_in)
            module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
            module.bias.zero_()

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """
        Shared backbone. template_size inputs give 7x7 features (center crop),
        search_size inputs give 31x31 features; any other size is rejected.
        """
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2] != images.shape[3]:
            raise ValueError(f"expected (B, 3, N, N) images, got {tuple(images.shape)}")
        side = images.shape[2]
        if side not in (self.config.template_size, self.config.search_size):
            raise ValueError(
                f"input size {side} is neither template ({self.config.template_size}) "
                f"nor search ({self.config.search_size})"
            )
        features = self.backbone(images - PIXEL_MEAN)
        if side == self.config.template_size:
            start = (features.shape[-1] - TEMPLATE_FEATURE_SIZE) // 2
            end = start + TEMPLATE_FEATURE_SIZE
            features = features[:, :, start:end, start:end]
        return features

    def heads(self, corr: torch.Tensor) -> ResponseMap:
        if corr.dim() != 4 or corr.shape[1] != self.config.width:
            raise ValueError(f"expected (B, {self.config.width}, S, S) volume, got {tuple(corr.shape)}")
        masks = self.mask_head(corr) if self.mask_head is not None else None
        return ResponseMap(self.score_head(corr), self.box_head(corr), masks, self.config.k)

    def forward(self, template: torch.Tensor, search: torch.Tensor) -> ResponseMap:
        if template.shape[-1] != self.config.template_size:
            raise ValueError(f"template must be {self.config.template_size} px")
        if search.shape[-1] != self.config.search_size:
            raise ValueError(f"search must be {self.config.search_size} px")
        fz = self.template_adjust(self.embed(template))
        fx = self.search_adjust(self.embed(search))
        # Mean rather than sum over the template window
        corr = depthwise_xcorr(fz, fx) / (fz.shape[-2] * fz.shape[-1])
        return self.heads(corr)


def to_tensor(pixels, dtype: torch.dtype | None = None) -> torch.Tensor:
    """HWC array (or list of them) in [0, 1] -> NCHW tensor."""
    if isinstance(pixels, (list, tuple)):
        array = np.stack([np.asarray(p) for p in pixels])
    else:
        array = np.asarray(pixels)[None]
    tensor = torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2)))
    return tensor.to(dtype or torch.get_default_dtype())
