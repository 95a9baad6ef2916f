"""Decoder side: glimpse decoder, pasting glimpses onto the canvas and compositing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .inference import box_affine

RENDER_EPS = 1e-6


@dataclass
class DecodedGlimpse:
    rgb: torch.Tensor    # (..., 3, gh, gw) in [0, 1]
    alpha: torch.Tensor  # (..., 1, gh, gw) in [0, 1]


class GlimpseDecoder(nn.Module):
    """``z_what`` -> rgb + alpha glimpse.

    For a 32x32 glimpse: linear A->256, deconvs to 128x2x2, 128x4x4, 64x8x8,
    32x16x16, a 3x3 conv, a deconv to 16x32x32 and a 3x3 output conv with 4
    channels (rgb and alpha), all through a sigmoid. Smaller power-of-two
    glimpses drop the leading upsampling stages.
    """

    STAGES = (128, 128, 64, 32, 16)

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.out_hw = (cfg.glimpse_h, cfg.glimpse_w)
        n_up = max(1, min(len(self.STAGES), int(round(math.log2(max(self.out_hw))))))
        stages = self.STAGES[len(self.STAGES) - n_up:]
        self.fc = nn.Sequential(nn.Linear(cfg.what_dim, 256), nn.ReLU(inplace=True))
        layers = []
        c = 256
        for i, out in enumerate(stages):
            groups = 4 if out <= 16 else 8
            layers += [nn.ConvTranspose2d(c, out, 4, stride=2, padding=1),
                       nn.GroupNorm(groups, out), nn.ReLU(inplace=True)]
            c = out
            if i == len(stages) - 2:
                layers += [nn.Conv2d(c, c, 3, padding=1), nn.GroupNorm(8, c),
                           nn.ReLU(inplace=True)]
        layers.append(nn.Conv2d(c, 4, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z_what):
        lead = z_what.shape[:-1]
        h = self.fc(z_what.reshape(-1, z_what.shape[-1]))
        out = self.net(h[:, :, None, None])
        if tuple(out.shape[-2:]) != self.out_hw:
            out = F.interpolate(out, size=self.out_hw, mode="bilinear", align_corners=False)
        out = torch.sigmoid(out).reshape(*lead, 4, *self.out_hw)
        return DecodedGlimpse(rgb=out[..., :3, :, :], alpha=out[..., 3:, :, :])


def paste_glimpses(glimpses, boxes, image_hw):
    """Inverse spatial transform: place each glimpse into its box on a zero canvas.

    ``glimpses`` is ``(..., K, gh, gw)``, ``boxes`` ``(..., 4)`` pixel
    ``(cx, cy, w, h)``; returns ``(..., K, H, W)``.
    """
    lead = glimpses.shape[:-3]
    K, gh, gw = glimpses.shape[-3:]
    H, W = image_hw
    g = glimpses.reshape(-1, K, gh, gw)
    sx, sy, tx, ty = (t.reshape(-1) for t in box_affine(boxes, image_hw))
    zero = torch.zeros_like(sx)
    theta = torch.stack([
        torch.stack([1 / sx, zero, -tx / sx], dim=-1),
        torch.stack([zero, 1 / sy, -ty / sy], dim=-1),
    ], dim=-2)
    grid = F.affine_grid(theta, (g.shape[0], K, H, W), align_corners=False)
    out = F.grid_sample(g, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.reshape(*lead, K, H, W)


def paste_glimpse(glimpse: DecodedGlimpse, box, image_hw=(128, 128)):
    """Paste one decoded glimpse; returns ``(rgb, alpha)`` canvases."""
    both = torch.cat([glimpse.rgb, glimpse.alpha], dim=-3)
    out = paste_glimpses(both, torch.as_tensor(box, dtype=both.dtype), image_hw)
    return out[..., :3, :, :], out[..., 3:, :, :]


def _object_sum(t, exact=False):
    # exact: sum in value order so any permutation of objects gives identical bits
    if exact:
        t = t.sort(dim=1).values
    return t.sum(1)


def composite(colour, coverage, z_pres, z_depth, exact=False):
    """Blend per-object canvases into one image on a black background.

    ``colour`` is the pasted alpha-premultiplied rgb ``(B, N, 3, H, W)``,
    ``coverage`` the pasted alpha ``(B, N, 1, H, W)``. Each object's
    importance at a pixel is ``z_pres * alpha * sigmoid(z_depth)``. An object
    contributes ``z_pres * colour`` scaled by its importance normalised as if
    it were present, so the image is linear in each ``z_pres`` and an absent
    object still receives the gradient of switching on. For hard presence
    this equals plain importance normalisation.

    ``exact=True`` makes the result bit-identical under any reordering of the
    objects at a large speed cost; training leaves it off.
    """
    pres = z_pres[..., None, None, None]
    own = coverage * torch.sigmoid(z_depth)[..., None, None, None]
    total = _object_sum(pres * own, exact).unsqueeze(1)
    weight = own / (total + (1 - pres) * own).clamp(min=RENDER_EPS)
    return _object_sum(weight * pres * colour, exact).clamp(0.0, 1.0)


def render_scene(glimpses: DecodedGlimpse, boxes, z_pres, z_depth, image_hw, exact=False):
    """Render decoded glimpses ``(B, N, ...)`` at ``boxes`` into ``(B, 3, H, W)``.

    Also returns the pasted premultiplied colour canvases, which the overlap
    penalty consumes.
    """
    premult = torch.cat([glimpses.rgb * glimpses.alpha, glimpses.alpha], dim=-3)
    canvases = paste_glimpses(premult, boxes, image_hw)
    colour, coverage = canvases[..., :3, :, :], canvases[..., 3:, :, :]
    return composite(colour, coverage, z_pres, z_depth, exact), colour


def overlap_penalty(canvases, pres, exact=False):
    """Mean over pixels and channels of ``sum_i c_i - max_i c_i``.

    ``canvases`` is ``(B, N, K, H, W)`` and ``pres`` ``(B, N)``; returns one
    value per batch element.
    """
    c = pres[..., None, None, None] * canvases
    excess = _object_sum(c, exact) - c.max(1).values
    return excess.flatten(1).mean(1)
