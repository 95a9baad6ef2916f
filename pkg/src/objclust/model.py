"""The full generative model: encoder, mixture prior over appearance, decoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .generation import DecodedGlimpse, GlimpseDecoder, overlap_penalty, render_scene
from .inference import Encoder, decode_where
from .latents import (LatentGrid, MixturePrior, PosteriorParams, one_hot_argmax,
                      sample_gaussian, sample_gumbel_softmax, sample_pres)


@dataclass
class MCSample:
    """One draw through the category/appearance pathway."""
    cat_logits: torch.Tensor
    z_cat: torch.Tensor
    what_mean: torch.Tensor
    what_log_std: torch.Tensor


@dataclass
class ModelOutput:
    posterior: PosteriorParams
    latents: LatentGrid
    mc: list
    boxes: torch.Tensor          # (B, N, 4) rendered boxes, pixel (cx, cy, w, h)
    decoded: DecodedGlimpse      # (B, N, ...) decoded glimpses
    recon: torch.Tensor          # (B, 3, H, W)
    overlap: torch.Tensor        # (B,)


class SceneVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.prior = MixturePrior(cfg.num_clusters, cfg.what_dim, cfg.mixture_init_std,
                                  cfg.log_sigma_clamp)
        self.decoder = GlimpseDecoder(cfg)

    @property
    def image_hw(self):
        return self.cfg.image_height, self.cfg.image_width

    def param_groups(self):
        return {"encoder": list(self.encoder.parameters()),
                "prior": list(self.prior.parameters()),
                "decoder": list(self.decoder.parameters())}

    def infer(self, x, generator=None, deterministic=False):
        """Posterior parameters and one latent sample per cell.

        Sampling follows the conditioning order of the posterior: ``z_where``
        first, then ``z_cat`` from the glimpse it selects, then ``z_what``
        from the glimpse and ``z_cat``. In deterministic mode every latent
        takes its posterior mode (presence thresholded at 0.5, argmax
        category, Gaussian means).
        """
        cfg = self.cfg
        enc = self.encoder
        f = enc.extract_features(x)
        pres_logit, (depth_mean, depth_log_std), (where_mean, where_log_std) = enc.predict_heads(f)

        if deterministic:
            z_where, z_depth = where_mean, depth_mean
            z_pres = (torch.sigmoid(pres_logit) >= 0.5).to(x.dtype)
        else:
            z_where = sample_gaussian(where_mean, where_log_std, generator)
            z_depth = sample_gaussian(depth_mean, depth_log_std, generator)
            z_pres = sample_pres(pres_logit, cfg.gumbel_temperature, generator, hard=True)

        mc = []
        cat_logits = glimpses = None
        n_samples = 1 if deterministic else cfg.mc_samples
        for m in range(n_samples):
            if cfg.sample_where_for_glimpse and not deterministic:
                where_m = z_where if m == 0 else sample_gaussian(where_mean, where_log_std, generator)
                glimpses, _ = enc.glimpses(x, where_m)
                cat_logits = enc.encode_cat(glimpses)
            elif glimpses is None:
                glimpses, _ = enc.glimpses(x, where_mean)
                cat_logits = enc.encode_cat(glimpses)
            if deterministic:
                z_cat = one_hot_argmax(cat_logits)
            else:
                z_cat = sample_gumbel_softmax(cat_logits, cfg.gumbel_temperature, generator,
                                              hard=cfg.hard_cat_in_what_prior)
            what_mean, what_log_std = enc.encode_what(glimpses, z_cat)
            mc.append(MCSample(cat_logits, z_cat, what_mean, what_log_std))

        first = mc[0]
        z_what = first.what_mean if deterministic else sample_gaussian(
            first.what_mean, first.what_log_std, generator)
        posterior = PosteriorParams(
            pres_logit=pres_logit, where_mean=where_mean, where_log_std=where_log_std,
            depth_mean=depth_mean, depth_log_std=depth_log_std, cat_logits=first.cat_logits,
            what_mean=first.what_mean, what_log_std=first.what_log_std)
        latents = LatentGrid(z_pres=z_pres, z_what=z_what, z_cat=first.z_cat,
                             z_where=z_where, z_depth=z_depth)
        return posterior, latents, mc

    def decode(self, latents: LatentGrid, exact=False):
        """Render a latent grid; returns ``(image, colour_canvases, decoded, boxes)``."""
        decoded = self.decoder(latents.z_what)
        boxes = decode_where(latents.z_where, self.cfg)
        recon, colour = render_scene(decoded, boxes, latents.z_pres, latents.z_depth,
                                     self.image_hw, exact=exact)
        return recon, colour, decoded, boxes

    def forward(self, x, generator=None, deterministic=False, exact=False):
        posterior, latents, mc = self.infer(x, generator, deterministic)
        recon, colour, decoded, boxes = self.decode(latents, exact=exact)
        overlap = overlap_penalty(colour, posterior.pres_prob, exact=exact)
        return ModelOutput(posterior=posterior, latents=latents, mc=mc, boxes=boxes,
                           decoded=decoded, recon=recon, overlap=overlap)
