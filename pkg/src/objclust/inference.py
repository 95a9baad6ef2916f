"""Encoder networks: backbone, per-cell heads, glimpse cropping and glimpse encoders."""
from __future__ import annotations

import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from .config import ModelConfig

LOG_STD_MIN, LOG_STD_MAX = -8.0, 4.0


class Backbone(nn.Module):
    """Image -> ``(B, D, grid_h, grid_w)`` feature map.

    ``resnet18``: a ResNet-18 trunk without pooling/classifier followed by two
    stride-2 deconvolutions (512 -> 128 -> 64 channels). A 128x128 input gives
    a 512x4x4 trunk output and a 64x16x16 feature map. ``small`` swaps the
    trunk for three stride-2 convolutions, for tests and CPU runs. In both
    cases the map is average-pooled onto the grid when the strides do not
    already land there.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.feature_channels
        self.grid = (cfg.grid_h, cfg.grid_w)
        if cfg.backbone == "resnet18":
            resnet = torchvision.models.resnet18(weights=None)
            self.trunk = nn.Sequential(*list(resnet.children())[:-2])
            self.up = nn.Sequential(
                nn.ConvTranspose2d(512, 128, 4, stride=2, padding=1),
                nn.BatchNorm2d(128),
                nn.ReLU(inplace=True),
                nn.ConvTranspose2d(128, d, 4, stride=2, padding=1),
                nn.BatchNorm2d(d),
                nn.ReLU(inplace=True),
            )
        else:
            self.trunk = nn.Sequential(
                nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.ReLU(inplace=True),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(inplace=True),
                nn.Conv2d(64, d, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            )
            self.up = nn.Identity()

    def forward(self, x):
        f = self.up(self.trunk(x))
        if tuple(f.shape[-2:]) != self.grid:
            f = F.adaptive_avg_pool2d(f, self.grid)
        return f


class ConvHead(nn.Module):
    """Three 3x3 conv layers then a 1x1 output conv.

    ``with_log_std`` adds a parallel 1x1 conv on the shared trunk producing
    the posterior log standard deviations.
    """

    def __init__(self, in_channels, out_channels, hidden=128, with_log_std=False):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(3):
            layers += [nn.Conv2d(c, hidden, 3, padding=1), nn.ReLU(inplace=True)]
            c = hidden
        self.trunk = nn.Sequential(*layers)
        self.out = nn.Conv2d(hidden, out_channels, 1)
        self.log_std = nn.Conv2d(hidden, out_channels, 1) if with_log_std else None

    def forward(self, f):
        h = self.trunk(f)
        mean = _cells_last(self.out(h))
        if self.log_std is None:
            return mean
        log_std = _cells_last(self.log_std(h)).clamp(LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std


def _cells_last(t):
    # (B, K, H, W) -> (B, H*W, K), row-major cells
    return t.flatten(2).transpose(1, 2)


def mlp(sizes):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class CatEncoder(nn.Module):
    def __init__(self, glimpse_numel, num_clusters):
        super().__init__()
        self.net = mlp([glimpse_numel, 128, 256, 512, num_clusters])

    def forward(self, glimpses):
        return self.net(glimpses.flatten(-3))


class WhatEncoder(nn.Module):
    """Glimpse concatenated with ``z_cat`` -> ``(what_mean, what_log_std)``."""

    def __init__(self, glimpse_numel, num_clusters, what_dim):
        super().__init__()
        self.what_dim = what_dim
        self.net = mlp([glimpse_numel + num_clusters, 128, 256, 512, 2 * what_dim])

    def forward(self, glimpses, z_cat):
        h = self.net(torch.cat([glimpses.flatten(-3), z_cat.to(glimpses.dtype)], dim=-1))
        mean, log_std = h.split(self.what_dim, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)


def cell_offsets(cfg: ModelConfig, device=None, dtype=None):
    """Column and row index of every cell in row-major order, shape (N,) each."""
    rows = torch.arange(cfg.grid_h, device=device, dtype=dtype)
    cols = torch.arange(cfg.grid_w, device=device, dtype=dtype)
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    return cc.reshape(-1), rr.reshape(-1)


def decode_where(raw, cfg: ModelConfig, cell_index=None):
    """Map raw ``z_where`` to pixel boxes ``(cx, cy, w, h)``.

    The centre is ``(col + sigmoid(raw_x)) * cell_w`` so it never leaves its
    cell; the size is the anchor scaled by ``exp`` of the clamped raw value.
    ``raw`` is ``(..., N, 4)`` over the whole grid, or ``(..., 4)`` for a
    single cell when ``cell_index=(row, col)`` is given.
    """
    if cell_index is None:
        col, row = cell_offsets(cfg, raw.device, raw.dtype)
        col, row = col.unsqueeze(-1), row.unsqueeze(-1)
    else:
        row, col = cell_index
        if not (0 <= row < cfg.grid_h and 0 <= col < cfg.grid_w):
            raise IndexError(f"cell {cell_index} outside the {cfg.grid_h}x{cfg.grid_w} grid")
    c = cfg.where_scale_clamp
    cx = (col + torch.sigmoid(raw[..., 0:1])) * cfg.cell_w
    cy = (row + torch.sigmoid(raw[..., 1:2])) * cfg.cell_h
    w = cfg.anchor_w * torch.exp(raw[..., 2:3].clamp(-c, c))
    h = cfg.anchor_h * torch.exp(raw[..., 3:4].clamp(-c, c))
    return torch.cat([cx, cy, w, h], dim=-1)


def center_to_corners(boxes):
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def box_affine(boxes, image_hw):
    """Affine map from glimpse-normalised to image-normalised coordinates.

    Returns ``(sx, sy, tx, ty)`` such that image_coord = s * glimpse_coord + t
    in ``[-1, 1]`` units with pixel-edge (``align_corners=False``) semantics.
    """
    H, W = image_hw
    cx, cy, w, h = boxes.unbind(-1)
    return w / W, h / H, 2 * cx / W - 1, 2 * cy / H - 1


def extract_glimpses(x, boxes, glimpse_hw):
    """Bilinearly crop every box of every image.

    ``x`` is ``(B, K, H, W)``, ``boxes`` ``(B, N, 4)`` pixel ``(cx, cy, w, h)``;
    the result is ``(B, N, K, gh, gw)``. Areas outside the image read as 0.
    """
    B, K, H, W = x.shape
    N = boxes.shape[1]
    gh, gw = glimpse_hw
    sx, sy, tx, ty = box_affine(boxes, (H, W))
    u = (torch.arange(gw, dtype=x.dtype, device=x.device) + 0.5) / gw * 2 - 1
    v = (torch.arange(gh, dtype=x.dtype, device=x.device) + 0.5) / gh * 2 - 1
    gx = sx[..., None, None] * u[None, :] + tx[..., None, None]   # (B, N, 1, gw)
    gy = sy[..., None, None] * v[:, None] + ty[..., None, None]   # (B, N, gh, 1)
    grid = torch.stack(torch.broadcast_tensors(gx, gy), dim=-1)   # (B, N, gh, gw, 2)
    # all glimpses of one image are sampled in a single call, no image copies
    out = F.grid_sample(x, grid.reshape(B, N * gh, gw, 2), mode="bilinear",
                        padding_mode="zeros", align_corners=False)
    return out.reshape(B, K, N, gh, gw).transpose(1, 2)


class Encoder(nn.Module):
    """Everything on the inference side that has weights."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        d, hidden = cfg.feature_channels, cfg.head_channels
        self.pres_head = ConvHead(d, 1, hidden)
        self.depth_head = ConvHead(d, 1, hidden, with_log_std=True)
        self.where_head = ConvHead(d, 4, hidden, with_log_std=True)
        numel = 3 * cfg.glimpse_h * cfg.glimpse_w
        self.cat_encoder = CatEncoder(numel, cfg.num_clusters)
        self.what_encoder = WhatEncoder(numel, cfg.num_clusters, cfg.what_dim)

    def extract_features(self, x):
        cfg = self.cfg
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, cfg.image_height, cfg.image_width):
            raise ValueError(
                f"expected images of shape (B, 3, {cfg.image_height}, {cfg.image_width}), "
                f"got {tuple(x.shape)}")
        return self.backbone(x)

    def predict_heads(self, f):
        """Return ``pres_logit (B,N)``, depth and where ``(mean, log_std)`` pairs."""
        pres_logit = self.pres_head(f).squeeze(-1)
        depth_mean, depth_log_std = self.depth_head(f)
        where_mean, where_log_std = self.where_head(f)
        return (pres_logit, (depth_mean.squeeze(-1), depth_log_std.squeeze(-1)),
                (where_mean, where_log_std))

    def glimpses(self, x, z_where):
        boxes = decode_where(z_where, self.cfg)
        return extract_glimpses(x, boxes, (self.cfg.glimpse_h, self.cfg.glimpse_w)), boxes

    def encode_cat(self, g):
        return self.cat_encoder(g)

    def encode_what(self, g, z_cat):
        return self.what_encoder(g, z_cat)
