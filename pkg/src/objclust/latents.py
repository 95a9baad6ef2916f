"""Per-cell latent variables, their priors and reparameterised samplers.

All tensors carry a leading batch axis ``B`` and a flattened cell axis
``N = grid_h * grid_w`` (row-major), e.g. ``z_where`` is ``(B, N, 4)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import torch
from torch import nn

LOG_2PI = math.log(2 * math.pi)


class _TensorBundle:
    def map(self, fn):
        return replace(self, **{f.name: fn(getattr(self, f.name)) for f in fields(self)})

    def detach(self):
        return self.map(lambda t: t.detach())

    def to(self, *args, **kwargs):
        return self.map(lambda t: t.to(*args, **kwargs))

    def index(self, idx):
        """Select along the batch axis."""
        return self.map(lambda t: t[idx])


@dataclass
class PosteriorParams(_TensorBundle):
    pres_logit: torch.Tensor      # (B, N)
    where_mean: torch.Tensor      # (B, N, 4)
    where_log_std: torch.Tensor   # (B, N, 4)
    depth_mean: torch.Tensor      # (B, N)
    depth_log_std: torch.Tensor   # (B, N)
    cat_logits: torch.Tensor      # (B, N, C)
    what_mean: torch.Tensor       # (B, N, A)
    what_log_std: torch.Tensor    # (B, N, A)

    @property
    def pres_prob(self):
        return torch.sigmoid(self.pres_logit)


@dataclass
class LatentGrid(_TensorBundle):
    z_pres: torch.Tensor   # (B, N) in [0, 1]
    z_what: torch.Tensor   # (B, N, A)
    z_cat: torch.Tensor    # (B, N, C) on the simplex
    z_where: torch.Tensor  # (B, N, 4) raw (x, y, w, h) offsets
    z_depth: torch.Tensor  # (B, N)

    def clone(self):
        return self.map(lambda t: t.clone())


@dataclass(frozen=True)
class PriorParams:
    """Fixed priors; the mixture over ``z_what`` lives in :class:`MixturePrior`."""
    pres_prob: float
    num_clusters: int
    where_mean: float = 0.0
    where_std: float = 1.0
    depth_mean: float = 0.0
    depth_std: float = 1.0

    @property
    def cat_pi(self):
        return torch.full((self.num_clusters,), 1.0 / self.num_clusters)


class MixturePrior(nn.Module):
    """Learnable per-cluster Gaussian over ``z_what``.

    Means and log standard deviations are stored as ``(C, A)`` matrices and
    read out through a bias-free linear map of ``z_cat``, so a one-hot
    ``z_cat`` selects a row exactly and a relaxed one interpolates.
    """

    def __init__(self, num_clusters, what_dim, init_std=0.5, log_sigma_clamp=5.0):
        super().__init__()
        self.mu = nn.Parameter(torch.randn(num_clusters, what_dim) * init_std)
        self.log_sigma = nn.Parameter(torch.zeros(num_clusters, what_dim))
        self.log_sigma_clamp = log_sigma_clamp

    @property
    def num_clusters(self):
        return self.mu.shape[0]

    @property
    def what_dim(self):
        return self.mu.shape[1]

    def clamped_log_sigma(self):
        c = self.log_sigma_clamp
        return self.log_sigma.clamp(-c, c)

    def forward(self, z_cat):
        return mixture_params(self, z_cat)


def mixture_params(mp: MixturePrior, z_cat):
    """Return ``(mu, sigma)`` of the component(s) picked by ``z_cat`` (..., C)."""
    z_cat = z_cat.to(mp.mu.dtype)
    mu = z_cat @ mp.mu
    log_sigma = z_cat @ mp.log_sigma
    c = mp.log_sigma_clamp
    return mu, torch.exp(log_sigma.clamp(-c, c))


def gaussian_log_density(x, mean, std):
    return -0.5 * ((x - mean) / std) ** 2 - torch.log(std) - 0.5 * LOG_2PI


def mixture_log_density(mp: MixturePrior, pi, x):
    """log sum_k pi_k prod_d N(x_d; mu_kd, sigma_kd^2) for ``x`` of shape (..., A)."""
    pi = torch.as_tensor(pi, dtype=mp.mu.dtype, device=mp.mu.device)
    sigma = torch.exp(mp.clamped_log_sigma())
    x = x.unsqueeze(-2)  # (..., 1, A) against (C, A)
    comp = gaussian_log_density(x, mp.mu, sigma).sum(-1)
    return torch.logsumexp(comp + torch.log(pi), dim=-1)


def sample_gaussian(mean, log_std, generator=None):
    """Reparameterised draw ``mean + exp(log_std) * eps``."""
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
    return mean + torch.exp(log_std) * eps


def sample_gumbel_softmax(logits, temperature, generator=None, hard=False):
    """Relaxed categorical sample over the last axis.

    With ``hard=True`` the forward value is the one-hot argmax of the soft
    sample while gradients flow through the soft sample (straight-through).
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    tiny = torch.finfo(logits.dtype).tiny
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
    gumbel = -torch.log((-torch.log(u.clamp(min=tiny))).clamp(min=tiny))
    soft = torch.softmax((logits + gumbel) / temperature, dim=-1)
    if not hard:
        return soft
    return _StraightThrough.apply(soft, one_hot_argmax(soft.detach()))


class _StraightThrough(torch.autograd.Function):
    # forward emits the hard value bit-exactly; backward is the identity onto soft
    @staticmethod
    def forward(ctx, soft, hard):
        return hard.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def bernoulli_as_categorical(logit):
    """Two-class logits whose first component has probability ``sigmoid(logit)``."""
    return torch.stack([logit, torch.zeros_like(logit)], dim=-1)


def sample_pres(pres_logit, temperature, generator=None, hard=True):
    return sample_gumbel_softmax(
        bernoulli_as_categorical(pres_logit), temperature, generator, hard)[..., 0]


def one_hot_argmax(logits):
    index = logits.argmax(dim=-1, keepdim=True)
    return torch.zeros_like(logits).scatter_(-1, index, 1.0)
