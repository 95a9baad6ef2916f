"""Training objective: reconstruction, the five KL terms, overlap and their weighted sum."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossWeights, RunConfig, schedule_value
from .latents import MixturePrior, PriorParams, mixture_params, sample_gumbel_softmax

PROB_EPS = 1e-6
TERMS = ("recon", "overlap", "pres", "where", "depth", "cat", "what")


def kl_bernoulli(q_prob, p_prob):
    q = torch.as_tensor(q_prob).clamp(PROB_EPS, 1 - PROB_EPS)
    p = torch.as_tensor(p_prob, dtype=q.dtype).clamp(PROB_EPS, 1 - PROB_EPS)
    return q * (torch.log(q) - torch.log(p)) + (1 - q) * (torch.log1p(-q) - torch.log1p(-p))


def kl_gaussian_diag(q_mean, q_log_std, p_mean, p_log_std):
    """KL between diagonal Gaussians, summed over the last axis."""
    q_mean, q_log_std = torch.as_tensor(q_mean), torch.as_tensor(q_log_std)
    p_mean = torch.as_tensor(p_mean, dtype=q_mean.dtype)
    p_log_std = torch.as_tensor(p_log_std, dtype=q_mean.dtype)
    var_ratio = torch.exp(2 * (q_log_std - p_log_std))
    mahal = ((q_mean - p_mean) * torch.exp(-p_log_std)) ** 2
    return (p_log_std - q_log_std + 0.5 * (var_ratio + mahal) - 0.5).sum(-1)


def kl_categorical(q_logits, pi):
    """KL(softmax(q_logits) || pi) over the last axis."""
    log_q = F.log_softmax(q_logits, dim=-1)
    log_pi = torch.log(torch.as_tensor(pi, dtype=log_q.dtype, device=log_q.device))
    return (log_q.exp() * (log_q - log_pi)).sum(-1)


def kl_what_term(what_mean, what_log_std, z_cat_sample, mp: MixturePrior):
    """KL of the appearance posterior against the mixture component chosen by ``z_cat``."""
    mu, sigma = mixture_params(mp, z_cat_sample)
    return kl_gaussian_diag(what_mean, what_log_std, mu, torch.log(sigma))


def expected_kl_what(encode_what, cat_logits, mp, temperature, n_samples, generator=None,
                     hard=False):
    """Monte Carlo average of :func:`kl_what_term` over ``z_cat ~ q(z_cat)``.

    ``encode_what(z_cat)`` returns the ``(mean, log_std)`` of the appearance
    posterior for that category sample.
    """
    total = 0.0
    for _ in range(n_samples):
        z_cat = sample_gumbel_softmax(cat_logits, temperature, generator, hard=hard)
        mean, log_std = encode_what(z_cat)
        total = total + kl_what_term(mean, log_std, z_cat, mp)
    return total / n_samples


def reconstruction_loss(x, x_hat, pixel_std=0.15):
    """Negative Gaussian log-likelihood per image, additive constant dropped."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    sq = (x - x_hat) ** 2 / (2 * pixel_std ** 2)
    return sq.reshape(sq.shape[0], -1).sum(1) if sq.dim() > 1 else sq.sum()


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    overlap: torch.Tensor
    pres: torch.Tensor
    where: torch.Tensor
    depth: torch.Tensor
    cat: torch.Tensor
    what: torch.Tensor
    total: torch.Tensor

    def as_dict(self):
        return {f.name: float(getattr(self, f.name).detach()) for f in dataclasses.fields(self)}


def scheduled(cfg: RunConfig, step: int):
    """Prior and loss weights in effect at ``step``."""
    m = cfg.model
    pres = cfg.schedule("pres_prior")
    overlap = cfg.schedule("alpha_overlap")
    prior = PriorParams(
        pres_prob=schedule_value(pres, step) if pres else 1e-5,
        num_clusters=m.num_clusters,
        where_mean=m.where_prior_mean, where_std=m.where_prior_std,
        depth_mean=m.depth_prior_mean, depth_std=m.depth_prior_std,
    )
    weights = cfg.loss
    if overlap is not None:
        weights = dataclasses.replace(weights, alpha_overlap=schedule_value(overlap, step))
    return prior, weights


def total_loss(x, out, prior: PriorParams, weights: LossWeights, mixture: MixturePrior,
               pixel_std=0.15):
    """Weighted training loss for one forward pass ``out`` (a ``ModelOutput``).

    KL terms are summed over cells and averaged over the batch. All but the
    presence KL are weighted per cell by the soft presence probability.
    """
    post = out.posterior
    pres_prob = post.pres_prob
    dtype = pres_prob.dtype

    recon = reconstruction_loss(x, out.recon, pixel_std).mean()
    overlap = out.overlap.mean()
    kl_pres = kl_bernoulli(pres_prob, prior.pres_prob).sum(1).mean()
    kl_where = kl_gaussian_diag(post.where_mean, post.where_log_std,
                                prior.where_mean, math.log(prior.where_std))
    kl_depth = kl_gaussian_diag(post.depth_mean.unsqueeze(-1), post.depth_log_std.unsqueeze(-1),
                                prior.depth_mean, math.log(prior.depth_std))
    pi = prior.cat_pi.to(dtype)
    kl_cat = torch.stack([kl_categorical(s.cat_logits, pi) for s in out.mc]).mean(0)
    kl_what = torch.stack([kl_what_term(s.what_mean, s.what_log_std, s.z_cat, mixture)
                           for s in out.mc]).mean(0)

    def weighted(kl):
        return (pres_prob * kl).sum(1).mean()

    terms = dict(recon=recon, overlap=overlap, pres=kl_pres, where=weighted(kl_where),
                 depth=weighted(kl_depth), cat=weighted(kl_cat), what=weighted(kl_what))
    total = sum(getattr(weights, f"alpha_{k}") * terms[k] for k in TERMS)
    return LossBreakdown(total=total, **terms)
