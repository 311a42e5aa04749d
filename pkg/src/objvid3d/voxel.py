"""Differentiable voxel object renderer and layer compositing.

Each object is a cubic RGBA grid centred on its origin. Rays through the pixels
covered by the object's projected circumscribing sphere are sampled at ``K``
equally spaced points between the entry and exit of that sphere, the samples
are looked up trilinearly (zero opacity outside the grid) and composited front to back.
Object layers are then laid over the background from far to near.

Voxel index ``[i, j, k]`` is the cell along local x, y, z; its centre sits at
voxel coordinate ``(i + 0.5, j + 0.5, k + 0.5)`` so the grid spans ``[0, V]^3``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (
    NEAR_EPS,
    CameraTrack,
    Ellipsoid,
    ObjectPose,
    Ray,
    camera_directions,
    pixel_centers,
    pose_to_transform,
    projected_ellipsoid_bounds,
    rot_y,
)

DEPTH_EPS = 1e-4


def default_samples(resolution: int) -> int:
    """Samples per ray, ``floor(4V/3)``."""
    return (4 * resolution) // 3


def sphere_radius(resolution: int, spacing: float) -> float:
    """Radius of the sphere through the corners of a ``V^3`` grid of spacing ``s``."""
    return float(np.sqrt(3.0) * resolution * spacing / 2)


def projected_region(half_extents, pose: ObjectPose, camera: CameraTrack, t: int):
    """Inclusive pixel rectangle ``(x0, x1, y0, y1)`` covering an object, or None.

    The rectangle bounds the silhouette of the cuboid's circumscribing
    ellipsoid (which contains the cuboid itself), padded by one pixel and
    clipped to the image. An ellipsoid straddling the near plane yields the
    whole image; one entirely behind the camera or outside the frustum yields
    None.
    """
    h = np.asarray(half_extents, dtype=np.float64) * np.ones(3)
    e = Ellipsoid(pose.location, np.sqrt(3.0) * h, pose.azimuth)
    W, H = camera.width, camera.height
    bounds = projected_ellipsoid_bounds(e, camera, t)
    if bounds is None:
        E = camera.extrinsics[t]
        z_center = E[2, :3] @ e.center + E[2, 3]
        reach = np.linalg.norm((rot_y(e.azimuth) * e.radii).T @ E[2, :3])
        if z_center + reach <= NEAR_EPS:
            return None
        return 0, W - 1, 0, H - 1
    u0, u1, v0, v1 = bounds
    x0, x1 = max(int(np.floor(u0)) - 1, 0), min(int(np.floor(u1)) + 1, W - 1)
    y0, y1 = max(int(np.floor(v0)) - 1, 0), min(int(np.floor(v1)) + 1, H - 1)
    if x0 > x1 or y0 > y1:
        return None
    return x0, x1, y0, y1


def ray_samples(ray: Ray, i1, i2, samples: int, transform: np.ndarray, spacing: float, resolution: int):
    """``K`` world points from ``i1`` to ``i2`` inclusive and their voxel coordinates."""
    if samples < 2:
        raise ValueError(f"need at least two samples per ray, got {samples}")
    frac = np.linspace(0.0, 1.0, samples)
    i1, i2 = np.asarray(i1, dtype=np.float64), np.asarray(i2, dtype=np.float64)
    points = i1[..., None, :] + frac[:, None] * (i2 - i1)[..., None, :]
    inv = np.linalg.inv(transform)
    local = points @ inv[:3, :3].T + inv[:3, 3]
    return points, local / spacing + resolution / 2


@dataclass
class ObjectLayer:
    """Rendered object layers; arrays share leading dims ``(..., H, W)``.

    ``rgb`` is premultiplied by ``alpha``; both already include presence.
    """

    rgb: Tensor
    alpha: Tensor
    depth: Tensor
    regions: list | None = None


@dataclass
class RenderOutput:
    rgb: Tensor  # (B, F, H, W, 3)
    depth: Tensor  # (B, F, H, W)
    masks: np.ndarray  # (B, G, F, H, W) visible soft mask per object
    foreground: Tensor  # (B, F, H, W) union of effective alphas
    order: np.ndarray  # (B, F, G) object indices far to near


def _rays_for_instances(locations, azimuths, cameras, frames, resolution, spacing):
    """Numeric ray setup: which pixels of which (b, g, f) instance need marching."""
    B, G, F = locations.shape[:3]
    radius = sphere_radius(resolution, spacing)
    reach = (resolution + 1) * spacing / 2  # support of the zero-padded trilinear field
    inst_all, pix_all, org_all, dir_all, dz_all, regions = [], [], [], [], [], []
    for b in range(B):
        cam = cameras[b]
        centers = pixel_centers(cam.width, cam.height)
        for g in range(G):
            for fi, t in enumerate(frames):
                inst = (b * G + g) * F + fi
                pose = ObjectPose(locations[b, g, fi], float(azimuths[b, g, fi]))
                region = projected_region(resolution * spacing / 2, pose, cam, t)
                regions.append(region)
                if region is None:
                    continue
                x0, x1, y0, y1 = region
                pix = centers[y0 : y1 + 1, x0 : x1 + 1].reshape(-1, 2)
                d_cam = camera_directions(pix, cam)
                R = cam.extrinsics[t][:3, :3]
                d = d_cam @ R
                o = cam.center(t)
                # slab test against the padded cube in object-local coordinates
                Ry = rot_y(pose.azimuth)
                lo_o = (o - pose.location) @ Ry
                lo_d = d @ Ry
                with np.errstate(divide="ignore", invalid="ignore"):
                    inv = 1.0 / lo_d
                    ta = (-reach - lo_o) * inv
                    tb = (reach - lo_o) * inv
                tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
                tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
                # sphere hit in front of the camera
                bq = lo_d @ lo_o
                disc = bq * bq - (lo_o @ lo_o - radius**2)
                keep = (tmax >= np.maximum(tmin, 0.0)) & (disc > 0) & (tmax > NEAR_EPS)
                if not keep.any():
                    continue
                cols = np.arange(x0, x1 + 1)
                rows = np.arange(y0, y1 + 1)
                px = np.tile(cols, len(rows))[keep]
                py = np.repeat(rows, len(cols))[keep]
                n = int(keep.sum())
                inst_all.append(np.full(n, inst))
                pix_all.append(py * cam.width + px)
                org_all.append(np.broadcast_to(o, (n, 3)))
                dir_all.append(d[keep])
                dz_all.append(d_cam[keep, 2])
    if not inst_all:
        return None, regions
    return (
        np.concatenate(inst_all),
        np.concatenate(pix_all),
        np.concatenate(org_all),
        np.concatenate(dir_all),
        np.concatenate(dz_all),
    ), regions


def _trilinear(grid_flat: Tensor, inst: np.ndarray, coords: Tensor, resolution: int) -> Tensor:
    """Trilinear RGBA lookup of (n, K, 3) voxel coordinates in grid ``inst``.

    Opacity is zero outside the grid; colour repeats the border voxel so that
    faded-out samples are not also darkened.
    """
    V = resolution
    c = coords - 0.5
    base = np.floor(c.data).astype(np.intp)
    frac = c - base.astype(c.dtype)
    f = [frac[..., a] for a in range(3)]
    n, K = coords.shape[:2]
    offset = (inst * V**3)[:, None]
    out = None
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = base + np.array([dx, dy, dz])
                valid = np.all((idx >= 0) & (idx < V), axis=-1)
                idx = np.clip(idx, 0, V - 1)
                flat = offset + (idx[..., 0] * V + idx[..., 1]) * V + idx[..., 2]
                w = (f[0] if dx else 1.0 - f[0]) * (f[1] if dy else 1.0 - f[1]) * (f[2] if dz else 1.0 - f[2])
                # colour clamps to the border voxel, opacity is zero outside the grid
                mask = np.ones((n, K, 4), dtype=c.dtype)
                mask[..., 3] = valid
                term = ad.take(grid_flat, flat.reshape(-1)).reshape(n, K, 4) * (w.reshape(n, K, 1) * mask)
                out = term if out is None else out + term
    return out


def render_voxel_layers(
    grids: Tensor,
    locations: Tensor,
    azimuths: Tensor,
    cameras: Sequence[CameraTrack],
    frames: Sequence[int],
    spacing: float,
    samples: int | None = None,
) -> ObjectLayer:
    """Render every object of every batch element at the given frames.

    Args:
        grids: (B, G, V, V, V, 4) RGBA in [0, 1].
        locations: (B, G, F, 3) world-space object centres at ``frames``.
        azimuths: (B, G, F) yaw angles.
        cameras: one track per batch element, all with the same image size.
        frames: camera frame index for each of the F rendered frames.
        spacing: world size of one voxel.
        samples: samples per ray; defaults to ``floor(4V/3)``.

    Returns:
        Layers of shape (B, G, F, H, W[, 3]) before presence weighting.
    """
    B, G, V = grids.shape[:3]
    F = len(frames)
    if locations.shape != (B, G, F, 3) or azimuths.shape != (B, G, F):
        raise ad.ShapeError(f"pose shapes {locations.shape}, {azimuths.shape} do not match grids {grids.shape}")
    W, H = cameras[0].width, cameras[0].height
    if any((c.width, c.height) != (W, H) for c in cameras):
        raise ad.ShapeError("all cameras must share one image size")
    K = samples or default_samples(V)
    dtype = grids.dtype
    total = B * G * F * H * W
    rays, regions = _rays_for_instances(locations.data, azimuths.data, cameras, frames, V, spacing)
    if rays is None:
        zero = ad.zeros((B, G, F, H, W))
        return ObjectLayer(ad.zeros((B, G, F, H, W, 3)), zero, zero, regions)
    inst, pix, origin, direction, dz = rays
    n = len(inst)

    loc = ad.take(locations.reshape(B * G * F, 3), inst)
    az = ad.take(azimuths.reshape(B * G * F), inst)
    ca, sa = ad.cos(az), ad.sin(az)
    q = ad.tensor(origin.astype(dtype)) - loc
    d = direction.astype(dtype)
    # rot_y(a)^T v = (c vx - s vz, vy, s vx + c vz)
    lo = ad.stack([ca * q[:, 0] - sa * q[:, 2], q[:, 1], sa * q[:, 0] + ca * q[:, 2]], axis=-1)
    ld = ad.stack([ca * d[:, 0] - sa * d[:, 2], ad.tensor(d[:, 1]), sa * d[:, 0] + ca * d[:, 2]], axis=-1)

    r2 = sphere_radius(V, spacing) ** 2
    a = (ld * ld).sum(axis=-1)
    bh = (lo * ld).sum(axis=-1)
    c = (lo * lo).sum(axis=-1) - r2
    root = ad.sqrt(ad.maximum(bh * bh - a * c, 1e-12))
    t1 = ad.maximum((-bh - root) / a, NEAR_EPS)
    t2 = (-bh + root) / a
    lin = np.linspace(0.0, 1.0, K).astype(dtype)
    tk = t1.reshape(n, 1) + (t2 - t1).reshape(n, 1) * lin
    coords = (lo.reshape(n, 1, 3) + tk.reshape(n, K, 1) * ld.reshape(n, 1, 3)) * (1.0 / spacing) + V / 2
    rgba = _trilinear(grids.reshape(B * G * V**3, 4), inst // F, coords, V)

    zk = tk * dz.astype(dtype).reshape(n, 1)
    trans = None
    colour = depth_acc = None
    for k in range(K):
        ak = rgba[:, k, 3]
        wk = ak if trans is None else ak * trans
        ck = rgba[:, k, :3] * wk.reshape(n, 1)
        dk = wk * zk[:, k]
        colour = ck if colour is None else colour + ck
        depth_acc = dk if depth_acc is None else depth_acc + dk
        trans = 1.0 - ak if trans is None else trans * (1.0 - ak)
    alpha = 1.0 - trans
    z_mid = (t1 + t2) * (0.5 * dz.astype(dtype))
    depth = (depth_acc + DEPTH_EPS * z_mid) / (alpha + DEPTH_EPS)

    idx = inst * (H * W) + pix
    return ObjectLayer(
        ad.scatter_add(colour, idx, total).reshape(B, G, F, H, W, 3),
        ad.scatter_add(alpha, idx, total).reshape(B, G, F, H, W),
        ad.scatter_add(depth, idx, total).reshape(B, G, F, H, W),
        regions,
    )


def render_voxel_object(
    grid: Tensor,
    location: Tensor,
    azimuth: Tensor,
    camera: CameraTrack,
    t: int,
    presence=1.0,
    spacing: float = 1.0,
    samples: int | None = None,
) -> ObjectLayer:
    """Render one (V, V, V, 4) grid posed at ``location``/``azimuth`` into frame ``t``."""
    grid, location, azimuth = ad.as_tensor(grid), ad.as_tensor(location), ad.as_tensor(azimuth)
    V = grid.shape[0]
    layers = render_voxel_layers(
        grid.reshape(1, 1, V, V, V, 4),
        location.reshape(1, 1, 1, 3),
        azimuth.reshape(1, 1, 1),
        [camera],
        [t],
        spacing,
        samples,
    )
    H, W = camera.height, camera.width
    p = ad.as_tensor(presence)
    alpha = layers.alpha.reshape(H, W) * p
    rgb = layers.rgb.reshape(H, W, 3) * p
    return ObjectLayer(rgb, alpha, layers.depth.reshape(H, W), layers.regions)


def apply_presence(layers: ObjectLayer, presence: Tensor) -> ObjectLayer:
    """Scale (B, G, ...) layers by per-object presence (B, G)."""
    B, G = presence.shape
    p = presence.reshape(B, G, 1, 1, 1)
    return ObjectLayer(layers.rgb * p.reshape(B, G, 1, 1, 1, 1), layers.alpha * p, layers.depth, layers.regions)


def depth_order(centres: np.ndarray, cameras: Sequence[CameraTrack], frames: Sequence[int]) -> np.ndarray:
    """Object indices sorted far to near per (b, f); ties go to the lower index first.

    ``centres`` is (B, G, F, 3) world positions.
    """
    B, G, F = centres.shape[:3]
    order = np.empty((B, F, G), dtype=np.intp)
    for b in range(B):
        for fi, t in enumerate(frames):
            dist = np.linalg.norm(centres[b, :, fi] - cameras[b].center(t), axis=-1)
            order[b, fi] = np.lexsort((np.arange(G), -dist))
    return order


def composite_layers(bg_rgb: Tensor, bg_depth: Tensor, layers: ObjectLayer, order: np.ndarray) -> RenderOutput:
    """Lay object layers over the background from far to near.

    Args:
        bg_rgb: (B, F, H, W, 3) background colour.
        bg_depth: (B, F, H, W) background depth.
        layers: premultiplied layers (B, G, F, H, W[, 3]) with presence applied.
        order: (B, F, G) object indices, farthest first.
    """
    B, F, H, W = bg_depth.shape
    if bg_rgb.shape != (B, F, H, W, 3):
        raise ad.ShapeError(f"background rgb {bg_rgb.shape} does not match depth {bg_depth.shape}")
    G = layers.alpha.shape[1]
    if layers.alpha.shape != (B, G, F, H, W) or layers.rgb.shape != (B, G, F, H, W, 3) or layers.depth.shape != (
        B, G, F, H, W,
    ):
        raise ad.ShapeError(f"layer shapes {layers.rgb.shape}/{layers.alpha.shape} do not match background {bg_rgb.shape}")
    order = np.asarray(order)
    if order.shape != (B, F, G):
        raise ad.ShapeError(f"order shape {order.shape}, expected {(B, F, G)}")

    rgb_flat = layers.rgb.reshape(B * G * F, H, W, 3)
    alpha_flat = layers.alpha.reshape(B * G * F, H, W)
    depth_flat = layers.depth.reshape(B * G * F, H, W)
    bb, ff = np.meshgrid(np.arange(B), np.arange(F), indexing="ij")
    out, depth = bg_rgb, bg_depth
    for j in range(G):
        sel = ((bb * G + order[:, :, j]) * F + ff).reshape(-1)
        a = ad.take(alpha_flat, sel).reshape(B, F, H, W)
        keep = 1.0 - a
        out = ad.take(rgb_flat, sel).reshape(B, F, H, W, 3) + keep.reshape(B, F, H, W, 1) * out
        depth = a * ad.take(depth_flat, sel).reshape(B, F, H, W) + keep * depth

    # visible masks: each layer's alpha attenuated by every nearer layer
    alpha_np = layers.alpha.data
    masks = np.zeros_like(alpha_np)
    clear = np.ones((B, F, H, W), dtype=alpha_np.dtype)
    for j in reversed(range(G)):
        for b in range(B):
            for f in range(F):
                g = order[b, f, j]
                masks[b, g, f] = alpha_np[b, g, f] * clear[b, f]
                clear[b, f] = clear[b, f] * (1.0 - alpha_np[b, g, f])
    if G:
        transmit = (1.0 - layers.alpha).transpose((1, 0, 2, 3, 4))
        prod = transmit[0]
        for g in range(1, G):
            prod = prod * transmit[g]
        foreground = 1.0 - prod
    else:
        foreground = ad.zeros((B, F, H, W))
    return RenderOutput(out, depth, masks, foreground, order)


def render_debug_ppm(path, layer: ObjectLayer) -> None:
    """Dump the colour of a single (H, W) layer as a binary PPM."""
    from .mesh import write_ppm

    write_ppm(path, layer.rgb.data.reshape(layer.alpha.shape + (3,)))


__all__ = [
    "DEPTH_EPS",
    "ObjectLayer",
    "RenderOutput",
    "apply_presence",
    "composite_layers",
    "default_samples",
    "depth_order",
    "pose_to_transform",
    "projected_region",
    "ray_samples",
    "render_voxel_layers",
    "render_voxel_object",
    "sphere_radius",
]
