"""Global ray-drop refinement: a residual U-Net over range-view images.

The network sees the composited return probability, normalized depth and
intensity of a whole scan and predicts a logit correction added to
``logit(P)``. With its last convolution zeroed the refiner is the identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .sensor import RangeScan

EPS = 1e-7


@dataclass
class RefinerConfig:
    channels: Sequence[int] = (32, 64, 128, 256)
    convs_per_scale: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(d["channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RefinerConfig":
        return cls(tuple(d["channels"]), d["convs_per_scale"])


def _block(c_in: int, c_out: int, n: int) -> nn.Sequential:
    layers = []
    for i in range(n):
        layers += [nn.Conv2d(c_in if i == 0 else c_out, c_out, 3, padding=1), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class RefinerNet(nn.Module):
    """U-Net with max-pool downsampling, bilinear upsampling and skip
    concatenation. Input ``(B, 3, H, W)``; output logits ``(B, 1, H, W)``.

    Odd sizes are handled by upsampling to the skip tensor's exact size.
    """

    def __init__(self, cfg: RefinerConfig = RefinerConfig()):
        super().__init__()
        self.cfg = cfg
        ch = list(cfg.channels)
        n = cfg.convs_per_scale
        self.down = nn.ModuleList()
        c_prev = 3
        for c in ch:
            self.down.append(_block(c_prev, c, n))
            c_prev = c
        self.up = nn.ModuleList()
        for c_skip in reversed(ch[:-1]):
            self.up.append(_block(c_prev + c_skip, c_skip, n))
            c_prev = c_skip
        self.out = nn.Conv2d(c_prev, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = x[:, :1].clamp(EPS, 1 - EPS)
        skips = []
        h = x
        for i, block in enumerate(self.down):
            if i > 0:
                h = F.max_pool2d(h, 2, ceil_mode=True)
            h = block(h)
            skips.append(h)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], 1))
        return self.out(h) + torch.logit(p)


def _stack_inputs(raydrop, depth, intensity) -> torch.Tensor:
    imgs = [torch.as_tensor(np.asarray(a) if not torch.is_tensor(a) else a) for a in (raydrop, depth, intensity)]
    shapes = {tuple(a.shape) for a in imgs}
    if len(shapes) != 1:
        raise ValueError(f"refiner inputs must share one shape, got {sorted(shapes)}")
    x = torch.stack([a.float() for a in imgs], -3)
    return x if x.dim() == 4 else x.unsqueeze(0)


def refine_mask(net: RefinerNet, raydrop_img, depth_img, intensity_img) -> torch.Tensor:
    """Refined return probability; same shape as the inputs.

    ``depth_img`` must already be divided by the sensor's max range.
    """
    x = _stack_inputs(raydrop_img, depth_img, intensity_img)
    squeeze = torch.as_tensor(np.asarray(raydrop_img) if not torch.is_tensor(raydrop_img) else raydrop_img).dim() == 2
    prob = torch.sigmoid(net(x))[:, 0]
    return prob[0] if squeeze else prob


def refine_loss(pred_prob: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    p = torch.as_tensor(pred_prob).clamp(EPS, 1 - EPS)
    m = torch.as_tensor(gt_mask).to(p.dtype)
    if p.shape != m.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(m.shape)}")
    return -(m * torch.log(p) + (1 - m) * torch.log1p(-p)).mean()


def apply_mask(scan: RangeScan, prob, tau: float = 0.5) -> RangeScan:
    """Binarise ``prob`` at ``tau`` (kept where ``prob >= tau``) and zero
    depth and intensity of dropped pixels."""
    prob = np.asarray(prob.detach().cpu() if torch.is_tensor(prob) else prob)
    if prob.shape != scan.depth.shape:
        raise ValueError(f"shape mismatch {prob.shape} vs {scan.depth.shape}")
    m = (prob >= tau) & (scan.depth > 0)
    return RangeScan(np.where(m, scan.depth, 0), np.where(m, scan.intensity, 0), m, scan.pose, scan.timestamp)
