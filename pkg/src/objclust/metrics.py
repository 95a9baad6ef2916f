"""Detection and clustering evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .exceptions import UndefinedMetricError


@dataclass(frozen=True)
class Detection:
    box: tuple      # x_min, y_min, x_max, y_max in pixels
    score: float    # posterior presence probability
    cluster: int    # argmax of the category posterior

    def to_json(self):
        return {"box": [float(v) for v in self.box], "score": float(self.score),
                "cluster": int(self.cluster)}


@dataclass
class EvalReport:
    ap: float
    acc: float
    nmi: float
    n_correct_boxes: int

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def refine_box(det: Detection, glimpse_alpha, threshold=0.1) -> Detection:
    """Shrink a box to the support of its decoded glimpse's alpha.

    The tight pixel bounding box of ``alpha > threshold`` inside the glimpse is
    mapped back through the box's placement; an empty support leaves the
    detection unchanged.
    """
    alpha = np.asarray(glimpse_alpha, dtype=np.float64)
    alpha = alpha.reshape(alpha.shape[-2:])
    mask = alpha > threshold
    if not mask.any():
        return det
    gh, gw = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x0, y0, x1, y1 = det.box
    w, h = x1 - x0, y1 - y0
    box = (x0 + cols[0] / gw * w, y0 + rows[0] / gh * h,
           x0 + (cols[-1] + 1) / gw * w, y0 + (rows[-1] + 1) / gh * h)
    return replace(det, box=box)


def iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(boxes_a, boxes_b):
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def average_precision(dets, gts, iou_threshold=0.5):
    """Class-agnostic all-points VOC average precision.

    ``dets`` and ``gts`` are per-scene lists: detections, and ground-truth
    box arrays ``(k, 4)``. Detections are visited by descending score (ties
    keep input order) and each claims the best-overlapping still-unmatched
    ground truth of its scene whose IoU exceeds the threshold.
    """
    n_pos = sum(len(np.asarray(g).reshape(-1, 4)) for g in gts)
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one ground-truth box")
    flat = [(s, d) for s, scene in enumerate(dets) for d in scene]
    if not flat:
        return 0.0
    scores = np.array([d.score for _, d in flat])
    order = np.argsort(-scores, kind="stable")
    ious = [iou_matrix([d.box for d in scene], g) for scene, g in zip(dets, gts)]
    offsets = np.cumsum([0] + [len(scene) for scene in dets])
    matched = [np.zeros(len(np.asarray(g).reshape(-1, 4)), dtype=bool) for g in gts]

    tp = np.zeros(len(flat))
    for rank, i in enumerate(order):
        s, _ = flat[i]
        if matched[s].size == 0:
            continue
        overlaps = np.where(matched[s], -1.0, ious[s][i - offsets[s]])
        j = int(np.argmax(overlaps))
        if overlaps[j] > iou_threshold:
            matched[s][j] = True
            tp[rank] = 1.0
    fp = 1.0 - tp
    tp, fp = np.cumsum(tp), np.cumsum(fp)
    recall = tp / n_pos
    precision = tp / (tp + fp)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def correct_matches(scene, boxes, labels, iou_threshold=0.5):
    """``(detection index, class)`` for each correct detection of one scene."""
    if not scene or len(labels) == 0:
        return []
    ious = iou_matrix([d.box for d in scene], boxes)
    best = ious.argmax(axis=1)
    return [(i, int(labels[j])) for i, j in enumerate(best) if ious[i, j] > iou_threshold]


def filter_correct(dets, gt_boxes, gt_labels, iou_threshold=0.5):
    """Pair every correctly localised detection with its ground-truth class.

    A detection is correct when its best IoU with a ground-truth box of the
    same scene exceeds the threshold; it takes that box's class. Returns
    ``(cluster, class)`` tuples in scene order.
    """
    pairs = []
    for scene, boxes, labels in zip(dets, gt_boxes, gt_labels):
        for i, cls in correct_matches(scene, boxes, labels, iou_threshold):
            pairs.append((int(scene[i].cluster), cls))
    return pairs


def clustering_acc(pairs, C=None, C_prime=None):
    """Sum over clusters of their plurality-class count, over the number of pairs."""
    if len(pairs) == 0:
        raise UndefinedMetricError("clustering accuracy is undefined for no pairs")
    pred, true = np.asarray(pairs, dtype=np.int64).T
    table = _contingency(pred, true)
    return float(table.max(axis=1).sum() / len(pred))


def clustering_nmi(pairs):
    """``2 I(G, P) / (H(G) + H(P))`` with natural logs; 0 when both entropies vanish."""
    if len(pairs) == 0:
        raise UndefinedMetricError("NMI is undefined for no pairs")
    pred, true = np.asarray(pairs, dtype=np.int64).T
    joint = _contingency(pred, true) / len(pred)
    p_pred, p_true = joint.sum(1), joint.sum(0)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(p_pred, p_true)[nz])))
    h_pred = float(-np.sum(p_pred[p_pred > 0] * np.log(p_pred[p_pred > 0])))
    h_true = float(-np.sum(p_true[p_true > 0] * np.log(p_true[p_true > 0])))
    if h_pred + h_true == 0:
        return 0.0
    return float(np.clip(2 * mi / (h_pred + h_true), 0.0, 1.0))


def _contingency(pred, true):
    _, p_idx = np.unique(pred, return_inverse=True)
    _, t_idx = np.unique(true, return_inverse=True)
    table = np.zeros((p_idx.max() + 1, t_idx.max() + 1), dtype=np.int64)
    np.add.at(table, (p_idx, t_idx), 1)
    return table


# -- model-driven evaluation ---------------------------------------------------

@torch.no_grad()
def detect_scenes(model, images, refine=True, return_what=False):
    """Deterministic detections for a batch of images with a :class:`SceneVAE`.

    Cells whose presence probability is below 0.5 are dropped; boxes come from
    the posterior-mean location, optionally shrunk to the decoded alpha and
    clipped to the image. ``return_what`` also returns, per scene, the
    ``z_what`` rows of the kept detections.
    """
    from .inference import center_to_corners

    was_training = model.training
    model.eval()
    try:
        x = torch.as_tensor(np.asarray(images), dtype=next(model.parameters()).dtype)
        out = model(x, deterministic=True)
    finally:
        model.train(was_training)
    H, W = model.image_hw
    threshold = model.cfg.refine_alpha_threshold
    corners = center_to_corners(out.boxes).cpu().numpy()
    probs = out.posterior.pres_prob.cpu().numpy()
    clusters = out.latents.z_cat.argmax(-1).cpu().numpy()
    alphas = out.decoded.alpha.cpu().numpy()
    what = out.latents.z_what.cpu().numpy()
    results, whats = [], []
    for b in range(len(x)):
        scene, scene_what = [], []
        for i in np.flatnonzero(probs[b] >= 0.5):
            det = Detection(tuple(float(v) for v in corners[b, i]), float(probs[b, i]),
                            int(clusters[b, i]))
            if refine:
                det = refine_box(det, alphas[b, i, 0], threshold)
            x0, y0, x1, y1 = det.box
            box = (min(max(x0, 0.0), W), min(max(y0, 0.0), H),
                   min(max(x1, 0.0), W), min(max(y1, 0.0), H))
            if box[2] > box[0] and box[3] > box[1]:
                scene.append(replace(det, box=box))
                scene_what.append(what[b, i])
        results.append(scene)
        whats.append(scene_what)
    return (results, whats) if return_what else results


def evaluate(model, dataset, batch_size=16):
    """Run detection over a :class:`SceneDataset` and score it.

    ``model`` is a :class:`SceneVAE` or anything with a
    ``detect(images) -> list[list[Detection]]`` method. Returns the report and
    the per-scene detections.
    """
    detect = model.detect if hasattr(model, "detect") else (
        lambda imgs: detect_scenes(model, imgs))
    dets = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        dets.extend(detect(dataset.batch(idx)))
    ap = average_precision(dets, dataset.boxes)
    pairs = filter_correct(dets, dataset.boxes, dataset.labels)
    acc = clustering_acc(pairs) if pairs else 0.0
    nmi = clustering_nmi(pairs) if pairs else 0.0
    return EvalReport(ap=ap, acc=acc, nmi=nmi, n_correct_boxes=len(pairs)), dets


def write_detections(path, dataset, dets):
    """Detections in the annotation line format plus per-box score and cluster."""
    with open(path, "w") as fh:
        for scene_id, scene in zip(dataset.ids, dets):
            fh.write(json.dumps({
                "id": scene_id,
                "boxes": [[float(v) for v in d.box] for d in scene],
                "labels": [int(d.cluster) for d in scene],
                "score": [float(d.score) for d in scene],
                "cluster": [int(d.cluster) for d in scene],
            }) + "\n")
