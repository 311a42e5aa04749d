"""Encoder and decoder networks.

Each network keeps the published layer structure; hidden channel counts are
scaled by ``ModelConfig.width_mult`` and spatial seed sizes follow the
configured output resolution.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .config import ModelConfig
from .nn import Conv, Dense, Fn, GroupNorm, LayerNorm, ParamStore, Residual, Sequential


def _twos(n: int) -> int:
    """Exponent of the largest power of two dividing ``n``."""
    k = 0
    while n % 2 == 0 and n > 0:
        n //= 2
        k += 1
    return k


def _up_stack(store, name, widths, c_in):
    """Conv(3x3) + Residual(Conv 1x1) blocks with 2x nearest upsampling between them."""
    layers, c = [], c_in
    for i, w in enumerate(widths):
        if i > 0:
            layers.append(Fn(ad.upsample_nearest))
        layers.append(Conv(store, f"{name}.conv{i}", (3, 3), c, w, "elu"))
        layers.append(Residual(Conv(store, f"{name}.res{i}", (1, 1), w, w, "elu")))
        c = w
    return layers, c


class CameraEncoder:
    """Flattened extrinsics (B, 12L) -> embedding (B, c)."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        c = cfg.c
        self.n_in = 12 * cfg.frames
        self.net = Sequential(
            [
                Dense(store, "cam.d0", self.n_in, c, "elu"),
                LayerNorm(store, "cam.ln0", c),
                Residual(Dense(store, "cam.d1", c, c, "elu")),
                LayerNorm(store, "cam.ln1", c),
                Residual(Dense(store, "cam.d2", c, c, "elu")),
                LayerNorm(store, "cam.ln2", c),
            ]
        )

    def __call__(self, phi: Tensor) -> Tensor:
        if phi.shape[-1] != self.n_in:
            raise ad.ShapeError(f"camera vector has length {phi.shape[-1]}, expected 12*L = {self.n_in}")
        return self.net(phi)


class BackgroundDecoder:
    """(z, phi*) -> per-vertex transforms (B, N, M, 4) and texture (B, 6N, 6M, 3)."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        ch = cfg.ch
        h = ch(128)
        self.trunk = Sequential(
            [
                Dense(store, "bg.d0", cfg.d + cfg.c, h, "elu"),
                Residual(Dense(store, "bg.d1", h, h, "elu")),
                Dense(store, "bg.d2", h, 12),
            ]
        )
        N, M = cfg.bg_rows, cfg.bg_cols
        self.shape_seed = (N // 8, M // 8, ch(20))
        layers, c = _up_stack(store, "bg.shape", [ch(96), ch(64), ch(48), ch(32)], self.shape_seed[2])
        self.shape = Sequential(
            [
                Dense(store, "bg.shape.d0", 12, 4),
                Dense(store, "bg.shape.d1", 4, int(np.prod(self.shape_seed)), "elu"),
                Fn(lambda x: x.reshape(x.shape[0], *self.shape_seed)),
                *layers,
                Conv(store, "bg.shape.out", (3, 3), c, 4, zero=True),
            ]
        )
        th, tw = 6 * N, 6 * M
        k = min(5, _twos(th), _twos(tw))
        widths = [ch(w) for w in (128, 96, 64, 48, 32, 24)][-(k + 1) :]
        self.tex_seed = (th >> k, tw >> k, ch(10))
        layers, c = _up_stack(store, "bg.tex", widths, self.tex_seed[2])
        self.tex = Sequential(
            [
                Dense(store, "bg.tex.d0", 12, 64),
                Dense(store, "bg.tex.d1", 64, int(np.prod(self.tex_seed)), "elu"),
                Fn(lambda x: x.reshape(x.shape[0], *self.tex_seed)),
                *layers,
                Conv(store, "bg.tex.out", (3, 3), c, 3),
            ]
        )

    def __call__(self, z: Tensor, phi_star: Tensor) -> tuple[Tensor, Tensor]:
        shared = self.trunk(ad.concat([z, phi_star], axis=-1))
        return self.shape(shared), ad.sigmoid(self.tex(shared))


class ObjectDecoder:
    """(z, phi*) -> raw slot parameters (B, G, e + 8 + 2(L-1))."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        h = cfg.ch(128)
        self.G, self.size = cfg.num_slots, cfg.slot_size
        self.net = Sequential(
            [
                Dense(store, "obj.d0", cfg.d + cfg.c, h, "elu"),
                Residual(Dense(store, "obj.d1", h, h, "elu")),
                Dense(store, "obj.out", h, self.G * self.size),
            ]
        )

    def __call__(self, z: Tensor, phi_star: Tensor) -> Tensor:
        out = self.net(ad.concat([z, phi_star], axis=-1))
        return out.reshape(z.shape[0], self.G, self.size)


class VoxelDecoder:
    """Appearance embedding (n, e) -> RGBA grid (n, V, V, V, 4) in (0, 1).

    The network is 2-D; its final layer emits ``V * 4`` channels that unfold
    into the grid's first axis.
    """

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        V = cfg.voxel_res
        ch = cfg.ch
        k = min(3, _twos(V))
        self.V, self.seed = V, (V >> k, V >> k, ch(64))
        layers, c = [], self.seed[2]
        for i, w in enumerate([ch(64), ch(48), ch(32)][-k:] if k else []):
            layers += [Fn(ad.upsample_nearest), Conv(store, f"vox.conv{i}", (3, 3), c, w, "elu")]
            c = w
        self.net = Sequential(
            [
                Dense(store, "vox.d0", cfg.e, int(np.prod(self.seed)), "elu"),
                Fn(lambda x: x.reshape(x.shape[0], *self.seed)),
                *layers,
                Conv(store, "vox.out", (4, 4), c, V * 4),
            ]
        )

    def __call__(self, a: Tensor) -> Tensor:
        V = self.V
        out = self.net(a).reshape(a.shape[0], V, V, V, 4)
        # channel-unfolded axis becomes the first grid axis
        return ad.sigmoid(out.transpose((0, 3, 1, 2, 4)))


class MeshDecoder:
    """Appearance embedding (n, e) -> vertex transforms (n, S, T, 4) and texture (n, 3S, 3T, 3)."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        ch = cfg.ch
        S, T = cfg.obj_rows, cfg.obj_cols
        self.shape_seed = (S // 4, T // 4, ch(16))
        self.shape = Sequential(
            [
                Dense(store, "mesh.shape.d0", cfg.e, int(np.prod(self.shape_seed)), "elu"),
                Fn(lambda x: x.reshape(x.shape[0], *self.shape_seed)),
                Conv(store, "mesh.shape.c0", (2, 2), self.shape_seed[2], ch(96), "elu"),
                Fn(ad.upsample_nearest),
                Conv(store, "mesh.shape.c1", (3, 3), ch(96), ch(64), "elu"),
                Residual(Conv(store, "mesh.shape.r1", (1, 1), ch(64), ch(64), "elu")),
                Fn(ad.upsample_nearest),
                Conv(store, "mesh.shape.c2", (3, 3), ch(64), ch(48), "elu"),
                Conv(store, "mesh.shape.out", (1, 1), ch(48), 4, zero=True),
            ]
        )
        self.tex_seed = (3 * S // 8, 3 * T // 8, ch(10))
        self.tex = Sequential(
            [
                Dense(store, "mesh.tex.d0", cfg.e, int(np.prod(self.tex_seed)), "elu"),
                Fn(lambda x: x.reshape(x.shape[0], *self.tex_seed)),
                Conv(store, "mesh.tex.c0", (2, 2), self.tex_seed[2], ch(96), "elu"),
                Residual(Conv(store, "mesh.tex.r0", (1, 1), ch(96), ch(96), "elu")),
                Fn(ad.upsample_nearest),
                Conv(store, "mesh.tex.c1", (3, 3), ch(96), ch(64), "elu"),
                Residual(Conv(store, "mesh.tex.r1", (1, 1), ch(64), ch(64), "elu")),
                Fn(lambda x: ad.upsample_bilinear(x, 4)),
                Conv(store, "mesh.tex.c2", (3, 3), ch(64), ch(24), "elu"),
                Conv(store, "mesh.tex.out", (1, 1), ch(24), 3),
            ]
        )

    def __call__(self, a: Tensor) -> tuple[Tensor, Tensor]:
        return self.shape(a), ad.sigmoid(self.tex(a))


class VideoEncoder:
    """Frames (B, L, H, W, 3) and phi* (B, c) -> posterior mean and std, each (B, d).

    Spatial convolutions use 'same' padding so small frames keep a non-empty
    feature map; temporal kernels shrink to the remaining length.
    """

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        ch = cfg.ch
        self.shape = (cfg.frames, cfg.height, cfg.width, 3)
        T = cfg.frames
        t1 = min(2, T)
        t2 = min(2, T - t1 + 1)
        self.conv = Sequential(
            [
                Conv(store, "enc.c0", (1, 7, 7), 3, ch(32), "relu", stride=(1, 2, 2)),
                GroupNorm(store, "enc.gn0", 4, ch(32)),
                Conv(store, "enc.c1", (1, 3, 3), ch(32), ch(64), "relu", stride=(1, 2, 2)),
                Residual(Conv(store, "enc.r1", (1, 3, 3), ch(64), ch(64), "relu")),
                GroupNorm(store, "enc.gn1", 4, ch(64)),
                Conv(store, "enc.c2", (t1, 1, 1), ch(64), ch(96), "relu", padding="valid"),
                GroupNorm(store, "enc.gn2", 6, ch(96)),
                Conv(store, "enc.c3", (1, 3, 3), ch(96), ch(128), "relu", stride=(1, 2, 2)),
                Residual(Conv(store, "enc.r3", (1, 3, 3), ch(128), ch(128), "relu")),
                GroupNorm(store, "enc.gn3", 4, ch(128)),
                Conv(store, "enc.c4", (t2, 1, 1), ch(128), ch(192), "relu", padding="valid"),
                GroupNorm(store, "enc.gn4", 6, ch(192)),
                Conv(store, "enc.c5", (1, 3, 3), ch(192), ch(256), "relu"),
            ]
        )
        t_out = T - t1 + 1 - t2 + 1
        h_out, w_out = cfg.height, cfg.width
        for _ in range(3):  # three stride-2 'same' convolutions
            h_out, w_out = -(-h_out // 2), -(-w_out // 2)
        flat = t_out * h_out * w_out * ch(256)
        self.ln = LayerNorm(store, "enc.ln", flat)
        hidden = ch(1024)
        self.fc = Sequential(
            [
                Dense(store, "enc.d0", flat + cfg.c, hidden, "relu"),
                Residual(Dense(store, "enc.d1", hidden, hidden, "relu")),
                Dense(store, "enc.out", hidden, 2 * cfg.d),
            ]
        )
        self.d = cfg.d

    def __call__(self, frames: Tensor, phi_star: Tensor) -> tuple[Tensor, Tensor]:
        if tuple(frames.shape[1:]) != self.shape:
            raise ad.ShapeError(f"video shape {frames.shape[1:]} does not match configured {self.shape}")
        feats = self.conv(frames)
        flat = self.ln(feats.reshape(frames.shape[0], -1))
        out = self.fc(ad.concat([flat, phi_star], axis=-1))
        mean = out[:, : self.d]
        std = ad.softplus(out[:, self.d :]) + 1e-4
        return mean, std
