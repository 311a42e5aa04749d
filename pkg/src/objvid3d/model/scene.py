"""The generative scene model: latent -> background shell + candidate objects -> frames."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..geometry import CameraTrack
from ..mesh import apply_vertex_transforms, make_uv_sphere, rasterize_views
from ..voxel import ObjectLayer, RenderOutput, apply_presence, composite_layers, depth_order, render_voxel_layers
from .config import ModelConfig
from .networks import BackgroundDecoder, CameraEncoder, MeshDecoder, ObjectDecoder, VideoEncoder, VoxelDecoder
from .nn import ParamStore


@dataclass
class PosteriorGaussian:
    mean: Tensor
    std: Tensor


@dataclass
class SceneParams:
    """Decoded scene for a batch; object arrays are (B, G, ...)."""

    phi_star: Tensor
    presence: Tensor
    appearance: Tensor
    offset: Tensor
    velocity: Tensor
    azimuth0: Tensor
    log_speed: Tensor
    angular: Tensor
    locations: Tensor  # (B, G, L, 3)
    azimuths: Tensor  # (B, G, L)
    bg_transforms: Tensor
    bg_vertices: Tensor  # (B, N*M, 3)
    bg_texture: Tensor
    voxels: Tensor | None = None  # (B, G, V, V, V, 4)
    obj_transforms: Tensor | None = None
    obj_vertices: Tensor | None = None  # (B, G, S*T, 3) object-local
    obj_texture: Tensor | None = None

    @property
    def batch(self) -> int:
        return self.presence.shape[0]


@dataclass
class SceneRender:
    output: RenderOutput
    bg_rgb: Tensor  # (B, F, H, W, 3)
    bg_depth: Tensor
    objects_rgb: Tensor | None = None  # objects over black
    layers: ObjectLayer | None = None
    raw_alpha: np.ndarray | None = None  # (B, G, F, H, W) per-object alpha before presence


def reparameterize(post: PosteriorGaussian, noise) -> Tensor:
    """``mean + std * noise``; differentiable in mean and std."""
    return post.mean + post.std * ad.as_tensor(noise)


def sample_prior(seed: int, d: int, count: int = 1) -> np.ndarray:
    """(count, d) standard-normal latents from a seeded generator."""
    return np.random.default_rng(seed).standard_normal((count, d))


def unroll_kinematics(start, velocity, log_speed, azimuth0, angular, velocity_bias) -> tuple[Tensor, Tensor]:
    """Integrate per-frame motion.

    ``Lambda^0 = start`` and ``Lambda^t = Lambda^{t-1} + (v_hat + v * exp(nu^t))``;
    ``alpha^t = alpha^{t-1} + omega^t``. Shapes: start/velocity (..., 3),
    log_speed/angular (..., L-1), azimuth0 (...). Returns (..., L, 3) and (..., L).
    """
    start, velocity = ad.as_tensor(start), ad.as_tensor(velocity)
    log_speed, angular, azimuth0 = ad.as_tensor(log_speed), ad.as_tensor(angular), ad.as_tensor(azimuth0)
    v_hat = np.asarray(velocity_bias, dtype=start.dtype)
    locs, angles = [start], [azimuth0]
    for t in range(log_speed.shape[-1]):
        step = v_hat + velocity * ad.exp(log_speed[..., t : t + 1])
        locs.append(locs[-1] + step)
        angles.append(angles[-1] + angular[..., t])
    return ad.stack(locs, axis=-2), ad.stack(angles, axis=-1)


def _camera_blocks(cameras: Sequence[CameraTrack], frames: Sequence[int], dtype):
    """Rotation transposes (B, F, 3, 3) and translations (B, F, 1, 3) for row-vector transforms."""
    rt = np.stack([[c.extrinsics[t][:3, :3].T for t in frames] for c in cameras]).astype(dtype)
    tr = np.stack([[c.extrinsics[t][None, :3, 3] for t in frames] for c in cameras]).astype(dtype)
    return rt, tr


class SceneModel:
    """All networks plus the fixed templates and candidate grid."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore(seed)
        self.camera_encoder = CameraEncoder(self.store, cfg)
        self.video_encoder = VideoEncoder(self.store, cfg)
        self.object_decoder = ObjectDecoder(self.store, cfg)
        self.background_decoder = BackgroundDecoder(self.store, cfg)
        if cfg.representation == "voxel":
            self.voxel_decoder = VoxelDecoder(self.store, cfg)
        else:
            self.mesh_decoder = MeshDecoder(self.store, cfg)
            self.obj_mesh = make_uv_sphere(cfg.obj_rows, cfg.obj_cols)
        self.bg_mesh = make_uv_sphere(cfg.bg_rows, cfg.bg_cols)
        self.centres = cfg.cell_centres()
        self.half_cell = cfg.cell_size() / 2

    # -- encoders -----------------------------------------------------------

    def encode_camera(self, cameras: Sequence[CameraTrack]) -> Tensor:
        phi = np.stack([c.flatten() for c in cameras])
        return self.camera_encoder(ad.tensor(phi))

    def encode_video(self, frames, phi_star: Tensor) -> PosteriorGaussian:
        mean, std = self.video_encoder(ad.as_tensor(frames), phi_star)
        return PosteriorGaussian(mean, std)

    # -- decoders -----------------------------------------------------------

    def decode_object_voxels(self, appearance: Tensor) -> Tensor:
        return self.voxel_decoder(appearance)

    def decode_object_mesh(self, appearance: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Local vertices (n, S*T, 3), raw transforms and texture (n, 3S, 3T, 3)."""
        transforms, texture = self.mesh_decoder(appearance)
        template = self.obj_mesh.vertices * (self.cfg.object_extent / 2)
        return apply_vertex_transforms(template, transforms, self.cfg.obj_gamma), transforms, texture

    def decode_background(self, z: Tensor, phi_star: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        transforms, texture = self.background_decoder(z, phi_star)
        template = self.bg_mesh.vertices * self.cfg.bg_radius
        return apply_vertex_transforms(template, transforms, self.cfg.bg_gamma), transforms, texture

    def decode(self, z, phi_star: Tensor) -> SceneParams:
        cfg = self.cfg
        z = ad.as_tensor(z)
        B, G, e, L = z.shape[0], cfg.num_slots, cfg.e, cfg.frames
        raw = self.object_decoder(z, phi_star)
        appearance = raw[:, :, :e]
        presence = ad.sigmoid(raw[:, :, e])
        offset = ad.tanh(raw[:, :, e + 1 : e + 4]) * self.half_cell
        velocity = raw[:, :, e + 4 : e + 7]
        azimuth0 = ad.sigmoid(raw[:, :, e + 7]) * (2 * np.pi)
        log_speed = raw[:, :, e + 8 : e + 8 + (L - 1)]
        angular = raw[:, :, e + 8 + (L - 1) :]
        start = offset + self.centres
        locations, azimuths = unroll_kinematics(start, velocity, log_speed, azimuth0, angular, cfg.velocity_bias)
        bg_vertices, bg_transforms, bg_texture = self.decode_background(z, phi_star)
        params = SceneParams(
            phi_star, presence, appearance, offset, velocity, azimuth0, log_speed, angular,
            locations, azimuths, bg_transforms, bg_vertices, bg_texture,
        )
        flat_app = appearance.reshape(B * G, e)
        if cfg.representation == "voxel":
            V = cfg.voxel_res
            params.voxels = self.decode_object_voxels(flat_app).reshape(B, G, V, V, V, 4)
        else:
            verts, transforms, texture = self.decode_object_mesh(flat_app)
            params.obj_vertices = verts.reshape(B, G, -1, 3)
            params.obj_transforms = transforms.reshape(B, G, *transforms.shape[1:])
            params.obj_texture = texture.reshape(B, G, *texture.shape[1:])
        return params

    # -- rendering ----------------------------------------------------------

    def render(
        self,
        params: SceneParams,
        cameras: Sequence[CameraTrack],
        frames: Sequence[int] | None = None,
        decompose: bool = False,
    ) -> SceneRender:
        """Render the requested frames (all by default); kinematics always cover all L."""
        cfg = self.cfg
        frames = list(range(cfg.frames)) if frames is None else list(frames)
        B, F, H, W = params.batch, len(frames), cfg.height, cfg.width
        if len(cameras) != B:
            raise ad.ShapeError(f"{len(cameras)} cameras for a batch of {B}")
        intr = cameras[0].intrinsics
        if any(c.intrinsics != intr or (c.width, c.height) != (W, H) for c in cameras):
            raise ad.ShapeError("cameras must share intrinsics and the configured image size")
        dtype = params.bg_vertices.dtype
        rt, tr = _camera_blocks(cameras, frames, dtype)

        nv = params.bg_vertices.shape[1]
        bg_world = ad.broadcast_to(params.bg_vertices.reshape(B, 1, nv, 3), (B, F, nv, 3))
        bg_cam = (ad.matmul(bg_world, rt) + tr).reshape(B * F, nv, 3)
        tex_idx = np.repeat(np.arange(B), F)
        bg_tex = ad.take(params.bg_texture, tex_idx)
        bg = rasterize_views(bg_cam, self.bg_mesh, bg_tex, intr, H, W)
        bg_rgb = bg.rgb.reshape(B, F, H, W, 3)
        bg_depth = bg.depth.reshape(B, F, H, W)

        locs = params.locations[:, :, frames]
        azs = params.azimuths[:, :, frames]
        if cfg.representation == "voxel":
            raw = render_voxel_layers(params.voxels, locs, azs, cameras, frames, cfg.voxel_spacing, cfg.samples)
        else:
            raw = self._render_mesh_objects(params, locs, azs, rt, tr, intr)
        layers = apply_presence(raw, params.presence)
        order = depth_order(locs.data, cameras, frames)
        out = composite_layers(bg_rgb, bg_depth, layers, order)
        result = SceneRender(out, bg_rgb, bg_depth, layers=layers, raw_alpha=raw.alpha.data)
        if decompose:
            black = ad.zeros((B, F, H, W, 3))
            result.objects_rgb = composite_layers(black, ad.zeros((B, F, H, W)), layers, order).rgb
        return result

    def _render_mesh_objects(self, params: SceneParams, locs: Tensor, azs: Tensor, rt, tr, intr) -> ObjectLayer:
        cfg = self.cfg
        B, G, F = locs.shape[:3]
        H, W = cfg.height, cfg.width
        sv = params.obj_vertices.shape[2]
        local = ad.broadcast_to(params.obj_vertices.reshape(B, G, 1, sv, 3), (B, G, F, sv, 3))
        c = ad.cos(azs).reshape(B, G, F, 1)
        s = ad.sin(azs).reshape(B, G, F, 1)
        x, y, z = local[..., 0], local[..., 1], local[..., 2]
        world = ad.stack([c * x + s * z, y, c * z - s * x], axis=-1) + locs.reshape(B, G, F, 1, 3)
        rt_g = np.broadcast_to(rt[:, None], (B, G, F, 3, 3))
        tr_g = np.broadcast_to(tr[:, None], (B, G, F, 1, 3))
        cam = (ad.matmul(world, rt_g) + tr_g).reshape(B * G * F, sv, 3)
        tex = ad.take(params.obj_texture.reshape(B * G, *params.obj_texture.shape[2:]), np.repeat(np.arange(B * G), F))
        r = rasterize_views(cam, self.obj_mesh, tex, intr, H, W)
        return ObjectLayer(
            r.rgb.reshape(B, G, F, H, W, 3), r.coverage.reshape(B, G, F, H, W), r.depth.reshape(B, G, F, H, W)
        )

    # -- persistence --------------------------------------------------------

    def save(self, directory, extra: dict | None = None) -> None:
        directory = Path(directory)
        self.store.save(directory / "params")
        meta = {"model": self.cfg.__dict__, **(extra or {})}
        (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=list))

    @classmethod
    def load(cls, directory) -> tuple[SceneModel, dict]:
        directory = Path(directory)
        meta = json.loads((directory / "model.json").read_text())
        model = cls(ModelConfig(**meta["model"]))
        model.store.load(directory / "params")
        return model, meta
