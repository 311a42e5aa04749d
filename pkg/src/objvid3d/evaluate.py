"""Reconstruction, prior sampling and per-sequence evaluation against generator ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import SequenceRecord, subsample_window
from .geometry import CameraTrack
from .metrics import (
    Detection3D,
    depth_metrics,
    detection_ap,
    fg_iou,
    instance_masks_from_render,
    predicted_boxes,
    segmentation_covering,
    summarize,
    tracking_covering,
)
from .model import SceneModel, SceneParams, sample_prior


@dataclass
class Prediction:
    """Everything the figure panels and metrics need for one video."""

    rgb: np.ndarray  # (F, H, W, 3)
    background: np.ndarray  # (F, H, W, 3)
    objects: np.ndarray  # (F, H, W, 3), objects composited over black
    masks: np.ndarray  # (F, H, W) instance ids
    depth: np.ndarray  # (F, H, W)
    presence: np.ndarray  # (G,)
    foreground: np.ndarray | None = None  # (F, H, W) total object opacity
    boxes: list[Detection3D] = field(default_factory=list)


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def _predictions(model: SceneModel, params: SceneParams, cameras: Sequence[CameraTrack]) -> list[Prediction]:
    render = model.render(params, cameras, decompose=True)
    masks = instance_masks_from_render(render, params.presence.data, model.cfg.representation)
    frames = list(range(model.cfg.frames))
    out = []
    for b, cam in enumerate(cameras):
        out.append(
            Prediction(
                rgb=render.output.rgb.data[b],
                background=render.bg_rgb.data[b],
                objects=render.objects_rgb.data[b],
                masks=masks[b],
                depth=render.output.depth.data[b],
                presence=params.presence.data[b],
                foreground=render.output.foreground.data[b],
                boxes=predicted_boxes(params, cam, b, frames, model.cfg.voxel_spacing),
            )
        )
    return out


def reconstruct(model: SceneModel, records: Sequence[SequenceRecord], batch: int = 4) -> list[Prediction]:
    """Decode each record's first window from the posterior mean and render every frame."""
    L = model.cfg.frames
    windows = [subsample_window(r, 0, L) for r in records]
    out = []
    with ad.no_grad():
        for i in range(0, len(windows), batch):
            chunk = windows[i : i + batch]
            cams = [w.cameras for w in chunk]
            phi = model.encode_camera(cams)
            x = np.stack([w.frames for w in chunk]).astype(ad.get_default_dtype())
            post = model.encode_video(x, phi)
            out += _predictions(model, model.decode(post.mean, phi), cams)
    return out


def generate(model: SceneModel, cameras: Sequence[CameraTrack], seed: int) -> tuple[np.ndarray, list[Prediction]]:
    """Render prior samples ``z ~ N(0, 1)``, one per camera track; returns (z, predictions)."""
    z = sample_prior(seed, model.cfg.d, len(cameras)).astype(ad.get_default_dtype())
    with ad.no_grad():
        phi = model.encode_camera(cameras)
        preds = _predictions(model, model.decode(z, phi), cameras)
    return z, preds


def gt_detections(record: SequenceRecord) -> list[Detection3D]:
    return [Detection3D(b["frame"], box) for b, box in zip(record.boxes, record.gt_boxes())]


def ground_truth_prediction(record: SequenceRecord) -> Prediction:
    """The record's own ground truth dressed as a prediction (metric oracle identity)."""
    G = len(record.meta.get("objects", []))
    return Prediction(record.frames, record.frames, record.frames, record.masks.astype(np.int64), record.depth,
                      np.ones(G), (record.masks > 0).astype(np.float64), gt_detections(record))


def sequence_metrics(pred: Prediction, record: SequenceRecord) -> dict[str, float]:
    """All report metrics for one video; metrics whose ground truth is absent are NaN."""
    F = len(pred.rgb)
    gt = subsample_window(record, 0, F) if record.length != F else record
    row: dict[str, float] = {"psnr": psnr(pred.rgb, gt.frames)}
    if gt.masks is not None:
        row["fg_iou"] = fg_iou(pred.masks, gt.masks)
        row["sc"] = segmentation_covering(pred.masks, gt.masks, True)
        row["msc"] = segmentation_covering(pred.masks, gt.masks, False)
        row["sc_track"] = tracking_covering(pred.masks, gt.masks, True)
        row["msc_track"] = tracking_covering(pred.masks, gt.masks, False)
    if gt.depth is not None:
        row["mre"], row["frac125"] = depth_metrics(pred.depth, gt.depth)
    if gt.boxes:
        row["ap_3d"] = detection_ap(pred.boxes, gt_detections(gt))
    for k in ("fg_iou", "sc", "msc", "sc_track", "msc_track", "mre", "frac125", "ap_3d"):
        row.setdefault(k, math.nan)
    return row


def evaluate_predictions(preds: Sequence[Prediction], records: Sequence[SequenceRecord], names: Sequence[str]):
    """Per-sequence rows and their summary (NaN-aware means, plus mean PSNR)."""
    rows = []
    for name, p, r in zip(names, preds, records):
        rows.append({"sequence": name, **sequence_metrics(p, r)})
    summary = summarize(rows)
    summary["psnr"] = float(np.mean([r["psnr"] for r in rows])) if rows else math.nan
    return rows, summary
