"""Finite-difference self-checks for every differentiable component, run in fp64.

Each check builds a small scalar function of a few leaves and compares the
analytic gradient with central differences. ``run_suite`` groups the results
by component for the ``grad-check`` command.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import mesh as M
from .autodiff.gradcheck import max_rel_error, numeric_grad
from .geometry import CameraTrack

TOLERANCE = 1e-3
COMPONENTS = ("tensor-core", "mesh-renderer", "voxel-renderer", "scene-model")


@dataclass
class CheckResult:
    component: str
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _leaf(rng, *shape, positive=False):
    x = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return ad.tensor(x, requires_grad=True)


def _compare(fn: Callable[[], ad.Tensor], leaves, h: float = 1e-6, select=None) -> float:
    """Max relative error over leaves; ``select`` maps a leaf index to a boolean mask of entries to compare."""
    for leaf in leaves:
        leaf.grad = None
    fn().backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = numeric_grad(fn, leaf, h)
        ana = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
        if select is not None and i in select:
            ana, num = ana[select[i]], num[select[i]]
        worst = max(worst, max_rel_error(ana, num))
    return worst


# -- tensor core ------------------------------------------------------------


def _weighted(op, *leaves, shape):
    def build(rng):
        ls = [_leaf(rng, *s, positive=p) for s, p in leaves]
        w = rng.normal(size=shape)
        return (lambda: (op(*ls) * w).sum()), ls

    return build


def _op_cases() -> dict[str, Callable]:
    u = [((3, 4), False)]
    pos = [((3, 4), True)]
    ab = [((3, 4), False), ((1, 4), False)]
    return {
        "add": _weighted(lambda a, b: a + b, *ab, shape=(3, 4)),
        "sub": _weighted(lambda a, b: a - b, *ab, shape=(3, 4)),
        "mul": _weighted(lambda a, b: a * b, *ab, shape=(3, 4)),
        "div": _weighted(lambda a, b: a / b, ((3, 4), False), ((1, 4), True), shape=(3, 4)),
        "matmul": _weighted(lambda a, b: a @ b, ((2, 3, 4), False), ((4, 2), False), shape=(2, 3, 2)),
        "relu": _weighted(ad.relu, *u, shape=(3, 4)),
        "elu": _weighted(ad.elu, *u, shape=(3, 4)),
        "sigmoid": _weighted(ad.sigmoid, *u, shape=(3, 4)),
        "tanh": _weighted(ad.tanh, *u, shape=(3, 4)),
        "softplus": _weighted(ad.softplus, *u, shape=(3, 4)),
        "exp": _weighted(ad.exp, *u, shape=(3, 4)),
        "log": _weighted(ad.log, *pos, shape=(3, 4)),
        "sqrt": _weighted(ad.sqrt, *pos, shape=(3, 4)),
        "abs": _weighted(ad.abs, *u, shape=(3, 4)),
        "sin": _weighted(ad.sin, *u, shape=(3, 4)),
        "cos": _weighted(ad.cos, *u, shape=(3, 4)),
        "power": _weighted(lambda x: x**3, *u, shape=(3, 4)),
        "conv2d": _weighted(lambda x, k, b: ad.conv2d(x, k, b, stride=2), ((2, 5, 6, 3), False), ((3, 3, 3, 4), False),
                            ((4,), False), shape=(2, 3, 3, 4)),
        "conv3d": _weighted(lambda x, k: ad.conv3d(x, k, stride=(1, 1, 1)), ((1, 3, 5, 5, 2), False),
                            ((2, 3, 3, 2, 3), False), shape=(1, 2, 3, 3, 3)),
        "conv_transpose2d": _weighted(lambda x, k: ad.conv_transpose2d(x, k, stride=2), ((1, 3, 4, 2), False),
                                      ((3, 3, 2, 3), False), shape=(1, 6, 8, 3)),
        "avg_pool2x2": _weighted(ad.avg_pool2x2, ((1, 4, 6, 2), False), shape=(1, 2, 3, 2)),
        "upsample_nearest": _weighted(ad.upsample_nearest, ((1, 2, 3, 2), False), shape=(1, 4, 6, 2)),
        "upsample_bilinear": _weighted(lambda x: ad.upsample_bilinear(x, 4), ((1, 3, 2, 2), False), shape=(1, 12, 8, 2)),
        "group_norm": _weighted(lambda x, g, b: ad.group_norm(x, 2, g, b), ((2, 3, 3, 4), False), ((4,), False),
                                ((4,), False), shape=(2, 3, 3, 4)),
        "layer_norm": _weighted(ad.layer_norm, ((3, 5), False), ((5,), False), ((5,), False), shape=(3, 5)),
        "reshape_transpose_index": _weighted(
            lambda a, b: ad.concat([a, b], axis=1)[:, 1:].transpose().reshape(4, 2)[np.array([0, 3, 3, 1, 2])],
            ((2, 3), False), ((2, 2), False), shape=(5, 2)),
        "take_scatter_add": _weighted(
            lambda x: ad.scatter_add(ad.take(x, np.array([4, 0, 4, 2])) * 1.5, np.array([0, 5, 0, 3]), 6),
            ((5, 2), False), shape=(6, 2)),
        "stack_broadcast": _weighted(lambda a, b: ad.stack([a, ad.broadcast_to(b, (3, 4))], axis=0),
                                     ((3, 4), False), ((1, 4), False), shape=(2, 3, 4)),
        "sum_mean_cumsum": _weighted(lambda x: ad.mean(x * x, axis=0) + ad.cumsum(x, axis=1).sum(axis=0), *u,
                                     shape=(4,)),
        "where_maximum_minimum": _weighted(
            lambda a, b: ad.where(np.array([1, 0, 1, 0], bool), a, b) + ad.maximum(a, b) * 2 + ad.minimum(a, b),
            ((3, 4), False), ((3, 4), False), shape=(3, 4)),
    }


def check_tensor_core(rng) -> list[tuple[str, float]]:
    return [(name, _compare(*build(rng))) for name, build in _op_cases().items()]


# -- mesh renderer ----------------------------------------------------------


def _plane(rows, cols, x0, x1, y0, y1, z):
    g = M.make_plane_grid(rows, cols)
    v = g.vertices.copy()
    v[:, 0] = x0 + (x1 - x0) * v[:, 0] / (cols - 1)
    v[:, 1] = y0 + (y1 - y0) * v[:, 1] / (rows - 1)
    v[:, 2] = z
    return g, v


def check_mesh(rng) -> list[tuple[str, float]]:
    """Vertex and texture gradients over pixels whose 3x3 neighbourhood sees a single face."""
    cam = CameraTrack((10.0, 10.0, 16.0, 16.0), np.eye(4)[None], 32, 32)
    g, v = _plane(3, 3, -3.03, 2.81, -2.93, 3.07, 2.0)
    v[4, 2] = 2.3
    v[1, 2] = 2.1
    verts = ad.tensor(v, requires_grad=True)
    tex = ad.tensor(rng.random((5, 5, 3)), requires_grad=True)
    fid = M.rasterize(verts, g, tex, cam, 0, edge_band=0).face_id[0]
    pad = np.pad(fid, 1, constant_values=-1)
    stable = fid >= 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            stable &= pad[1 + dy : 33 + dy, 1 + dx : 33 + dx] == fid
    w = rng.normal(size=(int(stable.sum()), 3))
    wd = rng.normal(size=int(stable.sum()))

    def f():
        out = M.rasterize(verts, g, tex, cam, 0, edge_band=0)
        return (out.rgb[0][stable] * w).sum() + (out.depth[0][stable] * wd).sum() * 0.1

    # x and y of a vertex move face boundaries; depth and texture do not
    select = {0: np.zeros(v.shape, bool)}
    select[0][:, 2] = True
    return [("vertices(z) and texture", _compare(f, [verts, tex], select=select))]


# -- voxel renderer ---------------------------------------------------------


def check_voxel(rng) -> list[tuple[str, float]]:
    from .voxel import render_voxel_object

    cam = CameraTrack((9.0, 9.0, 4.0, 4.0), np.eye(4)[None], 8, 8)
    grid = ad.tensor(rng.uniform(0.2, 0.8, size=(4, 4, 4, 4)), requires_grad=True)
    loc = ad.tensor(np.array([0.05, -0.03, 2.5]), requires_grad=True)
    az = ad.tensor(np.array(0.37), requires_grad=True)
    w_rgb, w_a, w_d = rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8)), rng.normal(size=(8, 8))

    def f():
        layer = render_voxel_object(grid, loc, az, cam, 0, spacing=0.2)
        return (layer.rgb * w_rgb).sum() + (layer.alpha * w_a).sum() + (layer.depth * w_d).sum() * 0.1

    return [
        ("voxel rgba", _compare(f, [grid])),
        ("location", _compare(f, [loc])),
        ("azimuth", _compare(f, [az])),
    ]


# -- scene model ------------------------------------------------------------


def check_scene(rng) -> list[tuple[str, float]]:
    """d(total loss)/dz for a V=4, 16x16, G=2, L=2 voxel scene."""
    from .losses import total_loss
    from .model import LossConfig, ModelConfig, PosteriorGaussian, SceneModel

    cfg = ModelConfig.toy(voxel_res=4, height=16, width=16, grid=(2, 1, 1), frames=2,
                          grid_lo=(-1.0, 0.2, 1.5), grid_hi=(1.0, 1.0, 3.5))
    model = SceneModel(cfg, seed=3)
    for k, p in model.store.params.items():
        if k.endswith(".w"):
            p.data *= 5.0  # move away from the symmetric grey initialisation
    cams = [CameraTrack.from_fov(np.stack([np.eye(4)] * 2), 16, 16)]
    target = rng.uniform(size=(1, 2, 16, 16, 3))
    phi = ad.tensor(model.encode_camera(cams).data)
    z = ad.tensor(rng.standard_normal((1, cfg.d)), requires_grad=True)
    std = ad.tensor(np.full((1, cfg.d), 0.8))
    loss_cfg = LossConfig(pyramid_depth=2, edge_matching=0.1, presence_hinge=1.0)

    def f():
        params = model.decode(z, phi)
        render = model.render(params, cams)
        return total_loss(target, render, PosteriorGaussian(z, std), params, model, loss_cfg).total

    return [("d loss / d z", _compare(f, [z]))]


CHECKS = {
    "tensor-core": check_tensor_core,
    "mesh-renderer": check_mesh,
    "voxel-renderer": check_voxel,
    "scene-model": check_scene,
}


def run_suite(components=COMPONENTS, seed: int = 0) -> list[CheckResult]:
    unknown = set(components) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}; expected some of {COMPONENTS}")
    results = []
    with ad.default_dtype(np.float64):
        for comp in components:
            rng = np.random.default_rng(seed)
            t0 = time.perf_counter()
            checks = CHECKS[comp](rng)
            dt = (time.perf_counter() - t0) / max(len(checks), 1)
            results += [CheckResult(comp, name, err, dt) for name, err in checks]
    return results
