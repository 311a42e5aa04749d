"""Training objective: pyramid Gaussian likelihood, weighted KL and regularizers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mesh import mesh_regularizers
from .model.config import LossConfig

GAUSS_SIGMA = 1.0
GAUSS_SIZE = 5
PRESENCE_FLOOR = 0.3


class NonFiniteLoss(FloatingPointError):
    """A loss term evaluated to NaN or inf; ``term`` names it."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


def _crop_even(x: Tensor) -> Tensor:
    h, w = x.shape[-3], x.shape[-2]
    if h % 2 or w % 2:
        x = x[..., : h - h % 2, : w - w % 2, :]
    return x


def pyramid_nll(x, x_hat, depth: int, sigma: float) -> Tensor:
    """Sum over pyramid levels of the mean of ``((x - x_hat) / sigma)^2 / 2``.

    Inputs are (..., H, W, C). Each level 2x2-average-pools the previous one;
    an odd trailing row or column is cropped before pooling.
    """
    x, x_hat = ad.as_tensor(x), ad.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ad.ShapeError(f"target {x.shape} and reconstruction {x_hat.shape} differ")
    diff = x_hat - x
    total = None
    for level in range(depth):
        if level:
            if min(diff.shape[-3], diff.shape[-2]) < 2:
                raise ad.ShapeError(f"image too small for a {depth}-level pyramid")
            diff = ad.avg_pool2x2(_crop_even(diff))
        term = (diff * diff).mean() * (0.5 / sigma**2)
        total = term if total is None else total + term
    return total


def kl_diag_gaussian(mean, std) -> Tensor:
    """KL(N(mean, std^2) || N(0, 1)) summed over the last axis, averaged over the rest."""
    mean, std = ad.as_tensor(mean), ad.as_tensor(std)
    per = (mean * mean + std * std - 1.0) * 0.5 - ad.log(std)
    return per.sum(axis=-1).mean()


def velocity_l1(velocity, log_speed) -> Tensor:
    """Mean over slots and frames of ``|v * exp(nu^t)|_1``.

    ``velocity`` is (..., G, 3) and ``log_speed`` (..., G, L-1); leading axes are averaged.
    """
    velocity, log_speed = ad.as_tensor(velocity), ad.as_tensor(log_speed)
    L1 = log_speed.shape[-1]
    if L1 == 0:
        return ad.tensor(np.zeros((), dtype=velocity.dtype))
    speeds = velocity.reshape(*velocity.shape[:-1], 1, 3) * ad.exp(log_speed).reshape(*log_speed.shape, 1)
    return ad.abs(speeds).sum(axis=-1).mean()


def presence_hinge(presence) -> Tensor:
    """``mean_g max(0, 0.3 - p_g)``."""
    presence = ad.as_tensor(presence)
    return ad.relu(PRESENCE_FLOOR - presence).mean()


def gaussian_kernel(size: int = GAUSS_SIZE, sigma: float = GAUSS_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur of (..., H, W) with reflective borders."""
    k = gaussian_kernel()
    p = len(k) // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(p, p), (p, p)]
    a = np.pad(img, pad, mode="reflect")
    H, W = img.shape[-2:]
    rows = sum(k[i] * a[..., i : i + H, :] for i in range(len(k)))
    return sum(k[i] * rows[..., :, i : i + W] for i in range(len(k)))


def _central_diff_np(img: np.ndarray, axis: int) -> np.ndarray:
    pad = [(0, 0)] * img.ndim
    pad[axis] = (1, 1)
    a = np.pad(img, pad, mode="reflect")
    n = img.shape[axis]
    hi = np.take(a, np.arange(2, n + 2), axis=axis)
    lo = np.take(a, np.arange(0, n), axis=axis)
    return (hi - lo) / 2


def _central_diff(m: Tensor, axis: int) -> Tensor:
    """Central difference with reflective border, so the border derivative is 0."""
    n = m.shape[axis]
    idx = np.arange(n)
    hi = np.where(idx + 1 < n, idx + 1, n - 2)
    lo = np.where(idx - 1 >= 0, idx - 1, 1)
    return (ad.take(m, hi, axis=axis % m.ndim) - ad.take(m, lo, axis=axis % m.ndim)) * 0.5


def edge_weights(x: np.ndarray, zeta: float) -> tuple[np.ndarray, np.ndarray]:
    """``exp(-zeta |D * K * x|)`` along x and y for frames (..., H, W, 3)."""
    lum = _blur(np.asarray(x, dtype=np.float64).mean(axis=-1))
    wx = np.exp(-zeta * np.abs(_central_diff_np(lum, -1)))
    wy = np.exp(-zeta * np.abs(_central_diff_np(lum, -2)))
    return wx, wy


def edge_matching(mask, x, zeta: float) -> Tensor:
    """Penalise mask edges that do not coincide with image edges.

    ``mask`` is (..., H, W), ``x`` the input frames (..., H, W, 3). Per frame the
    weighted mask gradient magnitudes are summed over pixels; frames (and any
    batch axes) are averaged.
    """
    mask = ad.as_tensor(mask)
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.shape[:-1] != mask.shape:
        raise ad.ShapeError(f"mask {mask.shape} does not match frames {x.shape}")
    wx, wy = (w.astype(mask.dtype) for w in edge_weights(x, zeta))
    gx = ad.abs(_central_diff(mask, -1)) * wx
    gy = ad.abs(_central_diff(mask, -2)) * wy
    return (gx + gy).sum(axis=(-2, -1)).mean()


@dataclass
class LossBreakdown:
    nll: Tensor
    kl: Tensor
    velocity: Tensor
    presence: Tensor
    laplacian_bg: Tensor
    crease_bg: Tensor
    edge_var_bg: Tensor
    laplacian_obj: Tensor
    crease_obj: Tensor
    edge_var_obj: Tensor
    edge_matching: Tensor
    beta: float
    total: Tensor

    TERMS = (
        "nll", "kl", "velocity", "presence", "laplacian_bg", "crease_bg", "edge_var_bg",
        "laplacian_obj", "crease_obj", "edge_var_obj", "edge_matching", "total",
    )

    def values(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).data) for k in self.TERMS}
        out["beta"] = self.beta
        return out

    def check_finite(self) -> None:
        for k, v in self.values().items():
            if not math.isfinite(v):
                raise NonFiniteLoss(k, v)


def _zero(dtype) -> Tensor:
    return ad.tensor(np.zeros((), dtype=dtype))


def total_loss(frames, render, posterior, params, model, cfg: LossConfig, step: int = 0, total_steps: int = 1) -> LossBreakdown:
    """Negative ELBO plus weighted regularizers.

    Args:
        frames: (B, F, H, W, 3) targets for the rendered frames.
        render: ``SceneRender`` of those frames.
        posterior: ``PosteriorGaussian`` over z.
        params: decoded ``SceneParams``.
        model: the ``SceneModel`` (for mesh templates and representation).
        cfg: strengths and schedule.
        step, total_steps: position in training, for the beta schedule.

    Raises:
        NonFiniteLoss: naming the first term that is NaN or inf.
    """
    rgb = render.output.rgb
    dtype = rgb.dtype
    frames = np.asarray(frames, dtype=dtype)
    nll = pyramid_nll(frames, rgb, cfg.pyramid_depth, cfg.sigma_pix)
    kl = kl_diag_gaussian(posterior.mean, posterior.std)
    beta = cfg.beta(step, total_steps)
    vel = velocity_l1(params.velocity, params.log_speed)
    pres = presence_hinge(params.presence)
    lap_bg, crease_bg, ev_bg = mesh_regularizers(params.bg_vertices, model.bg_mesh)
    if params.obj_vertices is not None:
        lap_obj, crease_obj, ev_obj = mesh_regularizers(params.obj_vertices, model.obj_mesh)
    else:
        lap_obj = crease_obj = ev_obj = _zero(dtype)
    if cfg.edge_matching > 0:
        edge = edge_matching(render.output.foreground, frames, cfg.zeta)
    else:
        edge = _zero(dtype)

    total = nll + beta * kl
    for weight, term in (
        (cfg.velocity, vel),
        (cfg.presence_hinge, pres),
        (cfg.laplacian_bg, lap_bg),
        (cfg.crease_bg, crease_bg),
        (cfg.edge_var_bg, ev_bg),
        (cfg.laplacian_obj, lap_obj),
        (cfg.crease_obj, crease_obj),
        (cfg.edge_var_obj, ev_obj),
        (cfg.edge_matching, edge),
    ):
        if weight:
            total = total + weight * term
    out = LossBreakdown(nll, kl, vel, pres, lap_bg, crease_bg, ev_bg, lap_obj, crease_obj, ev_obj, edge, beta, total)
    out.check_finite()
    return out


class LossLog:
    """Appends one CSV row of loss terms per logged step."""

    COLUMNS = ("step", "beta") + LossBreakdown.TERMS

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.COLUMNS)

    def append(self, step: int, values: dict[str, float]) -> None:
        row = {"step": step, **values}
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([row.get(c, "") for c in self.COLUMNS])

    @staticmethod
    def read(path) -> list[dict[str, float]]:
        with Path(path).open(newline="") as fh:
            return [{k: float(v) if v != "" else float("nan") for k, v in r.items()} for r in csv.DictReader(fh)]
