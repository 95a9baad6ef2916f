"""Deterministic inference and latent-space edits of decoded scenes.

An object's appearance splits as ``z_what = z_avg + z_local``: ``z_avg`` is the
mean of its cluster's mixture component and ``z_local`` the residual style.
Editing ``z_avg`` changes the object's category, editing ``z_local`` its style.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
import torch

from .latents import LatentGrid, MixturePrior
from .metrics import correct_matches, detect_scenes


@dataclass(frozen=True)
class ObjectLatent:
    scene: int
    cell: int
    cluster: int
    z_avg: torch.Tensor     # float64 (A,)
    z_local: torch.Tensor   # float64 (A,)
    z_where: torch.Tensor
    z_depth: torch.Tensor

    @property
    def z_what(self):
        return self.z_avg + self.z_local


@torch.no_grad()
def deterministic_infer(model, x) -> LatentGrid:
    """Posterior modes for every cell; repeated calls are bitwise identical."""
    was_training = model.training
    model.eval()
    try:
        _, latents, _ = model.infer(torch.as_tensor(x), deterministic=True)
    finally:
        model.train(was_training)
    return latents


def _require_hard(z_cat):
    hard = ((z_cat == 0) | (z_cat == 1)).all() and (z_cat.sum(-1) == 1).all()
    if not hard:
        raise ValueError("decompose needs one-hot z_cat; obtain latents with "
                         "deterministic_infer")


def decompose(grid: LatentGrid, mp: MixturePrior):
    """Split every present object's ``z_what`` into ``z_avg + z_local``.

    The split is held in float64, where the difference of two float32 vectors
    is exact, so :func:`recompose` returns the original ``z_what`` bit for bit.
    """
    _require_hard(grid.z_cat)
    mu = mp.mu.detach().to(torch.float64)
    objs = []
    for b, i in zip(*torch.nonzero(grid.z_pres >= 0.5, as_tuple=True)):
        b, i = int(b), int(i)
        k = int(grid.z_cat[b, i].argmax())
        z_avg = mu[k].clone()
        objs.append(ObjectLatent(
            scene=b, cell=i, cluster=k, z_avg=z_avg,
            z_local=grid.z_what[b, i].detach().to(torch.float64) - z_avg,
            z_where=grid.z_where[b, i].detach(), z_depth=grid.z_depth[b, i].detach()))
    return objs


def recompose(objs, grid: LatentGrid) -> LatentGrid:
    """Write objects back into a copy of ``grid``."""
    out = grid.detach().clone()
    C = out.z_cat.shape[-1]
    for o in objs:
        out.z_what[o.scene, o.cell] = o.z_what.to(out.z_what.dtype)
        out.z_cat[o.scene, o.cell] = torch.nn.functional.one_hot(
            torch.tensor(o.cluster), C).to(out.z_cat.dtype)
        out.z_where[o.scene, o.cell] = o.z_where
        out.z_depth[o.scene, o.cell] = o.z_depth
    return out


def swap_category(objs, mp: MixturePrior, target_k):
    """Move every object to cluster ``target_k`` keeping its style."""
    if not 0 <= target_k < mp.num_clusters:
        raise ValueError(f"target_k must lie in [0, {mp.num_clusters}), got {target_k}")
    mu = mp.mu.detach().to(torch.float64)[target_k]
    return [replace(o, cluster=int(target_k), z_avg=mu.clone()) for o in objs]


def vary_local(objs, noise_scale, generator=None):
    """Replace each style residual with fresh ``N(0, noise_scale^2)`` noise."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    out = []
    for o in objs:
        eps = torch.randn(o.z_local.shape, generator=generator, dtype=torch.float64)
        out.append(replace(o, z_local=eps * noise_scale))
    return out


def shuffle_objects(grid: LatentGrid, generator=None, permutation=None) -> LatentGrid:
    """Permute appearance, depth and category among each scene's present cells.

    Locations stay with their cells, so appearances move around the scene.
    ``permutation`` (applied to the sorted list of present cells, single-scene
    grids only) overrides the random draw.
    """
    out = grid.detach().clone()
    present = grid.z_pres >= 0.5
    if not present.any():
        raise ValueError("shuffle_objects needs at least one present object")
    for b in range(grid.z_pres.shape[0]):
        cells = torch.nonzero(present[b], as_tuple=True)[0]
        if permutation is not None:
            perm = torch.as_tensor(permutation)
        else:
            perm = torch.randperm(len(cells), generator=generator)
        src = cells[perm]
        out.z_what[b, cells] = grid.z_what[b, src]
        out.z_depth[b, cells] = grid.z_depth[b, src]
        out.z_cat[b, cells] = grid.z_cat[b, src]
    return out


@torch.no_grad()
def render_latents(model, grid: LatentGrid):
    was_training = model.training
    model.eval()
    try:
        image, _, _, _ = model.decode(grid)
    finally:
        model.train(was_training)
    return image


def export_latents(model, dataset, out_path, batch_size=16):
    """One CSV row per correctly localised detection: id, cluster, class, z_what."""
    A = model.cfg.what_dim
    n_rows = 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "cluster", "class"] + [f"dim_{d}" for d in range(A)])
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            dets, whats = detect_scenes(model, dataset.batch(idx), return_what=True)
            for j, scene, what in zip(idx, dets, whats):
                for i, cls in correct_matches(scene, dataset.boxes[j], dataset.labels[j]):
                    writer.writerow([dataset.ids[j], scene[i].cluster, cls]
                                    + [repr(float(v)) for v in what[i]])
                    n_rows += 1
    return n_rows


def read_latents(path):
    """Inverse of :func:`export_latents`: ``(ids, clusters, classes, Z)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["scene_id", "cluster", "class"]:
            raise ValueError(f"{path}: not a latent export (bad header)")
        rows = list(reader)
    ids = [r[0] for r in rows]
    clusters = np.array([int(r[1]) for r in rows], dtype=np.int64)
    classes = np.array([int(r[2]) for r in rows], dtype=np.int64)
    Z = np.array([[float(v) for v in r[3:]] for r in rows], dtype=np.float64).reshape(
        len(rows), len(header) - 3)
    return ids, clusters, classes, Z
