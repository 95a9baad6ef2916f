"""scikit-learn style wrapper around training and deterministic inference."""
from __future__ import annotations

import tempfile

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, load_config
from .datasets import SceneDataset
from .manipulation import deterministic_infer
from .metrics import detect_scenes


def check_images(X, image_hw=None, name="X"):
    """Validate a batch of images and return it as ``(n, 3, H, W)`` float32.

    Accepts ``(n, H, W)`` grayscale or ``(n, 1|3, H, W)``; uint8 in [0, 255]
    or float in [0, 1].
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] not in (1, 3):
        raise ValueError(f"{name} must have shape (n, H, W) or (n, 1|3, H, W); got {X.shape}")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    elif np.issubdtype(X.dtype, np.number):
        X = X.astype(np.float32)
        if not np.isfinite(X).all():
            raise ValueError(f"{name} contains NaN or infinity")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError(f"{name} must lie in [0, 1] (or be uint8)")
    else:
        raise ValueError(f"{name} must be numeric, got dtype {X.dtype}")
    if X.shape[1] == 1:
        X = np.repeat(X, 3, axis=1)
    if image_hw is not None and tuple(X.shape[2:]) != tuple(image_hw):
        raise ValueError(f"{name} images are {X.shape[2:]}, model expects {tuple(image_hw)}")
    return X


class ObjectClusterer(TransformerMixin, BaseEstimator):
    """Unsupervised object detector with clustered appearance codes.

    Parameters
    ----------
    image_size : int
        Side of the square input images.
    grid_size : int
        Cells per side of the detection grid.
    what_dim, num_clusters : int
        Appearance-code size and number of mixture components.
    glimpse_size : int
        Side of the square object crop fed to the appearance encoders.
    anchor : float
        Reference box side in pixels.
    backbone : {"resnet18", "small"}
    batch_size, num_steps, lr, seed
        Optimisation settings.
    out_dir : str or None
        Where checkpoints and logs go; a temporary directory when None.
    overrides : tuple of str
        Extra ``section.field=value`` settings applied last.

    Attributes
    ----------
    model_ : SceneVAE
    config_ : RunConfig
    """

    def __init__(self, image_size=128, grid_size=16, what_dim=256, num_clusters=10,
                 glimpse_size=32, anchor=72.0, backbone="resnet18", batch_size=16,
                 num_steps=10000, lr=1e-4, seed=0, out_dir=None, overrides=()):
        self.image_size = image_size
        self.grid_size = grid_size
        self.what_dim = what_dim
        self.num_clusters = num_clusters
        self.glimpse_size = glimpse_size
        self.anchor = anchor
        self.backbone = backbone
        self.batch_size = batch_size
        self.num_steps = num_steps
        self.lr = lr
        self.seed = seed
        self.out_dir = out_dir
        self.overrides = overrides

    def _build_config(self) -> RunConfig:
        s = self
        flat = [f"model.image_height={s.image_size}", f"model.image_width={s.image_size}",
                f"model.grid_h={s.grid_size}", f"model.grid_w={s.grid_size}",
                f"model.what_dim={s.what_dim}", f"model.num_clusters={s.num_clusters}",
                f"model.glimpse_h={s.glimpse_size}", f"model.glimpse_w={s.glimpse_size}",
                f"model.anchor_h={s.anchor}", f"model.anchor_w={s.anchor}",
                f"model.backbone={s.backbone}", f"train.batch_size={s.batch_size}",
                f"train.num_steps={s.num_steps}", f"train.lr={s.lr}", f"train.seed={s.seed}"]
        return load_config(None, flat + list(s.overrides))

    def fit(self, X, y=None):
        """Train on unlabelled images ``X``; ``y`` is ignored."""
        from .trainer import train

        cfg = self._build_config()
        X = check_images(X, (cfg.model.image_height, cfg.model.image_width))
        out_dir = self.out_dir or tempfile.mkdtemp(prefix="objclust_")
        state = train(cfg, SceneDataset(X), out_dir)
        self.config_ = cfg
        self.model_ = state.model.eval()
        self.n_steps_ = state.step
        return self

    @classmethod
    def from_checkpoint(cls, path):
        """Wrap a trained checkpoint without retraining."""
        from .trainer import resume

        state = resume(path)
        m, t = state.config.model, state.config.train
        est = cls(image_size=m.image_height, grid_size=m.grid_h, what_dim=m.what_dim,
                  num_clusters=m.num_clusters, glimpse_size=m.glimpse_h, anchor=m.anchor_h,
                  backbone=m.backbone, batch_size=t.batch_size, num_steps=t.num_steps,
                  lr=t.lr, seed=t.seed)
        est.config_ = state.config
        est.model_ = state.model.eval()
        est.n_steps_ = state.step
        return est

    def _images(self, X):
        check_is_fitted(self, "model_")
        return check_images(X, self.model_.image_hw)

    def transform(self, X):
        """Deterministic appearance codes of every cell: ``(n, cells, what_dim)``."""
        X = self._images(X)
        out = []
        for start in range(0, len(X), self.batch_size):
            grid = deterministic_infer(self.model_, torch.as_tensor(X[start:start + self.batch_size]))
            out.append(grid.z_what.cpu().numpy())
        return np.concatenate(out)

    def predict(self, X):
        """Per-image lists of :class:`~objclust.metrics.Detection`."""
        X = self._images(X)
        dets = []
        for start in range(0, len(X), self.batch_size):
            dets.extend(detect_scenes(self.model_, X[start:start + self.batch_size]))
        return dets

