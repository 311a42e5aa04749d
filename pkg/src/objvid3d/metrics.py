"""Evaluation: instance masks, foreground IOU, segmentation covering, depth and 3D detection AP."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box3D, CameraTrack, box_iou, rot_y

MASK_THRESHOLD = 0.5
PRESENCE_THRESHOLD = 0.5
OPACITY_THRESHOLD = 0.5
DETECTION_IOU = 0.3
DEPTH_RATIO = 1.25

REPORT_KEYS = ("fg_iou", "sc", "msc", "sc_track", "msc_track", "mre", "frac125", "ap_3d")


@dataclass
class Detection3D:
    frame: int
    box: Box3D
    score: float = 1.0


# -- instance segmentation --------------------------------------------------


def instance_masks(
    alpha: np.ndarray,
    order: np.ndarray,
    presence: np.ndarray | None = None,
    mode: str = "voxel",
    threshold: float = MASK_THRESHOLD,
    presence_threshold: float = PRESENCE_THRESHOLD,
) -> np.ndarray:
    """Modal instance ids (F, H, W) from per-object soft masks.

    Args:
        alpha: (G, F, H, W) per-object amodal soft masks before presence weighting.
        order: (F, G) object indices far to near.
        presence: (G,) presence values; all ones when omitted.
        mode: "voxel" thresholds ``presence * alpha``; "mesh" drops objects with
            presence below ``presence_threshold`` and thresholds the silhouettes.

    Object ``g`` gets id ``g + 1``; 0 is background. Nearer objects win.
    """
    alpha = np.asarray(alpha)
    G, F = alpha.shape[:2]
    presence = np.ones(G) if presence is None else np.asarray(presence, dtype=np.float64)
    if mode == "voxel":
        binary = presence[:, None, None, None] * alpha > threshold
    elif mode == "mesh":
        binary = (alpha > threshold) & (presence >= presence_threshold)[:, None, None, None]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    ids = np.zeros(alpha.shape[1:], dtype=np.int64)
    for f in range(F):
        for g in order[f]:
            ids[f][binary[g, f]] = g + 1
    return ids


def instance_masks_from_render(render, presence: np.ndarray, mode: str = "voxel") -> np.ndarray:
    """(B, F, H, W) instance ids from a ``SceneRender`` (uses its raw object layers)."""
    alpha = np.asarray(render.raw_alpha)
    order = render.output.order
    presence = np.asarray(presence)
    return np.stack([instance_masks(alpha[b], order[b], presence[b], mode) for b in range(alpha.shape[0])])


def fg_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean over frames of foreground IOU; a frame where both are empty scores 1."""
    pred, gt = np.asarray(pred) > 0, np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    scores = []
    for p, g in zip(pred.reshape(len(pred), -1), gt.reshape(len(gt), -1)):
        union = np.logical_or(p, g).sum()
        scores.append(1.0 if union == 0 else np.logical_and(p, g).sum() / union)
    return float(np.mean(scores))


def _covering(pred: np.ndarray, gt: np.ndarray, area_weighted: bool) -> float | None:
    """Covering of ``gt`` instances by ``pred`` over all given pixels; None without gt objects."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    gt_ids = np.unique(gt[gt > 0])
    if len(gt_ids) == 0:
        return None
    pred_ids = np.unique(pred[pred > 0])
    if len(pred_ids) == 0:
        return 0.0
    gi = np.searchsorted(gt_ids, gt)
    pi = np.searchsorted(pred_ids, pred)
    both = (gt > 0) & (pred > 0)
    inter = np.zeros((len(gt_ids), len(pred_ids)))
    np.add.at(inter, (gi[both], pi[both]), 1)
    g_area = np.array([(gt == i).sum() for i in gt_ids], dtype=np.float64)
    p_area = np.array([(pred == i).sum() for i in pred_ids], dtype=np.float64)
    iou = inter / (g_area[:, None] + p_area[None] - inter)
    best = iou.max(axis=1)
    if area_weighted:
        return float((g_area * best).sum() / g_area.sum())
    return float(best.mean())


def segmentation_covering(pred: np.ndarray, gt: np.ndarray, area_weighted: bool = True) -> float:
    """Per-frame covering averaged over frames that contain gt objects (SC or mSC).

    Returns NaN when no frame has a gt object.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    vals = [v for v in (_covering(p, g, area_weighted) for p, g in zip(pred, gt)) if v is not None]
    return float(np.mean(vals)) if vals else math.nan


def tracking_covering(pred: np.ndarray, gt: np.ndarray, area_weighted: bool = True) -> float:
    """Covering of the whole video treated as one image, so ids must persist over time."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    v = _covering(pred, gt, area_weighted)
    return math.nan if v is None else v


# -- depth ------------------------------------------------------------------


def depth_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> tuple[float, float]:
    """Mean relative error and fraction within a factor of 1.25 (strict); NaNs when nothing is valid."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    valid = (gt > 0) if valid is None else (np.asarray(valid, dtype=bool) & (gt > 0))
    if not valid.any():
        return math.nan, math.nan
    p, g = pred[valid], gt[valid]
    mre = float(np.mean(np.abs(p - g) / g))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, np.where(p > 0, g / p, np.inf))
    return mre, float(np.mean(ratio < DEPTH_RATIO))


# -- 3D detection -----------------------------------------------------------


def _aabb(points: np.ndarray) -> Box3D:
    return Box3D(points.min(axis=0), points.max(axis=0))


def voxel_box(grid: np.ndarray, location, azimuth: float, spacing: float, camera: CameraTrack, t: int,
              threshold: float = OPACITY_THRESHOLD) -> Box3D | None:
    """View-space AABB of the voxels whose opacity exceeds ``threshold``."""
    V = grid.shape[0]
    occ = np.argwhere(grid[..., 3] > threshold)
    if len(occ) == 0:
        return None
    corners = (occ[:, None, :] + np.indices((2, 2, 2)).reshape(3, -1).T[None]).reshape(-1, 3)
    corners = np.unique(corners, axis=0)
    local = (corners - V / 2) * spacing
    world = local @ rot_y(azimuth).T + np.asarray(location)
    return _aabb(world @ camera.extrinsics[t][:3, :3].T + camera.extrinsics[t][:3, 3])


def mesh_box(vertices: np.ndarray, location, azimuth: float, camera: CameraTrack, t: int) -> Box3D:
    """View-space AABB of object-local vertices placed at the given pose."""
    world = np.asarray(vertices) @ rot_y(azimuth).T + np.asarray(location)
    return _aabb(world @ camera.extrinsics[t][:3, :3].T + camera.extrinsics[t][:3, 3])


def predicted_boxes(params, camera: CameraTrack, b: int, frames: Sequence[int], spacing: float | None = None) -> list[Detection3D]:
    """Per-object, per-frame detections for batch element ``b`` of decoded ``SceneParams``.

    Voxel objects score ``presence * max opacity``; mesh objects score ``presence``.
    ``frames`` index both the trajectory and the camera track.
    """
    presence = params.presence.data[b]
    locs, azs = params.locations.data[b], params.azimuths.data[b]
    out = []
    for g in range(len(presence)):
        for t in frames:
            if params.voxels is not None:
                grid = params.voxels.data[b, g]
                box = voxel_box(grid, locs[g, t], azs[g, t], spacing, camera, t)
                score = float(presence[g] * grid[..., 3].max())
            else:
                box = mesh_box(params.obj_vertices.data[b, g], locs[g, t], azs[g, t], camera, t)
                score = float(presence[g])
            if box is not None:
                out.append(Detection3D(t, box, score))
    return out


def match_detections(preds: Sequence[Detection3D], gts: Sequence[Detection3D], iou: float = DETECTION_IOU) -> np.ndarray:
    """True-positive flag per prediction.

    Each gt box in turn claims the most-overlapping unclaimed prediction of the
    same frame with IOU above ``iou``; every other prediction is a false positive.
    """
    tp = np.zeros(len(preds), dtype=bool)
    for gt in gts:
        best, best_iou = -1, iou
        for i, p in enumerate(preds):
            if tp[i] or p.frame != gt.frame:
                continue
            v = box_iou(p.box, gt.box)
            if v > best_iou:
                best, best_iou = i, v
        if best >= 0:
            tp[best] = True
    return tp


def average_precision(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    """Area under the all-point interpolated precision-recall curve.

    Detections with equal scores enter the curve together.
    """
    scores, tp = np.asarray(scores, dtype=np.float64), np.asarray(tp, dtype=bool)
    if n_gt == 0 or len(scores) == 0:
        return 0.0
    idx = np.argsort(-scores, kind="stable")
    s, t = scores[idx], tp[idx]
    ctp, cfp = np.cumsum(t), np.cumsum(~t)
    last = np.r_[s[1:] != s[:-1], True]  # end of each tie group
    recall = np.r_[0.0, ctp[last] / n_gt]
    precision = np.r_[1.0, ctp[last] / (ctp[last] + cfp[last])]
    # monotone envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope[1:]))


def detection_ap(preds: Sequence[Detection3D], gts: Sequence[Detection3D], iou: float = DETECTION_IOU) -> float:
    tp = match_detections(preds, gts, iou)
    return average_precision(np.array([p.score for p in preds]), tp, len(gts))


# -- reporting --------------------------------------------------------------


def summarize(rows: Sequence[dict]) -> dict[str, float]:
    """Mean of each report key over sequences, ignoring undefined (NaN) entries."""
    out = {}
    for k in REPORT_KEYS:
        vals = [r[k] for r in rows if k in r and r[k] is not None and not math.isnan(r[k])]
        out[k] = float(np.mean(vals)) if vals else math.nan
    return out


def write_report(directory, summary: dict, rows: Sequence[dict]) -> tuple[Path, Path]:
    """Write ``metrics.json`` (summary, NaN as null) and ``metrics.csv`` (one row per sequence)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    clean = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in summary.items()}
    jpath, cpath = directory / "metrics.json", directory / "metrics.csv"
    jpath.write_text(json.dumps(clean, indent=2, sort_keys=True))
    cols = ["sequence", *REPORT_KEYS]
    with cpath.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in cols})
    return jpath, cpath
