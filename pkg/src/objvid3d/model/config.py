"""Model, loss and run configuration with defaults from the published hyperparameters."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ModelConfig:
    """Architecture and scene-layout settings.

    Defaults are the rooms/voxel values; ``toy()`` gives a CPU-trainable variant.
    """

    d: int = 32  # scene latent
    c: int = 128  # camera embedding
    e: int = 16  # object appearance embedding
    frames: int = 3
    height: int = 80
    width: int = 80
    fov_y: float = 60.0
    grid: tuple[int, int, int] = (6, 1, 7)
    # world box (x, y, z) covered by the candidate grid, in the frame-0 camera frame
    grid_lo: tuple[float, float, float] = (-2.4, 0.1, 0.5)
    grid_hi: tuple[float, float, float] = (2.4, 1.1, 4.7)
    velocity_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    representation: str = "voxel"
    voxel_res: int = 24
    object_extent: float = 1.2  # world edge length of the voxel cube / mesh sphere diameter
    samples: int | None = None  # per-ray samples, floor(4V/3) when unset
    bg_rows: int = 24
    bg_cols: int = 64
    bg_radius: float = 5.0
    bg_gamma: float = 1.0
    obj_rows: int = 8
    obj_cols: int = 16
    obj_gamma: float = 0.2
    width_mult: float = 1.0  # scales every hidden channel count

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.grid_lo = tuple(float(v) for v in self.grid_lo)
        self.grid_hi = tuple(float(v) for v in self.grid_hi)
        self.velocity_bias = tuple(float(v) for v in self.velocity_bias)
        if self.representation not in ("voxel", "mesh"):
            raise ValueError(f"representation must be 'voxel' or 'mesh', got {self.representation!r}")
        for name in ("d", "c", "e", "frames", "height", "width", "voxel_res", "bg_rows", "bg_cols", "obj_rows", "obj_cols"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if min(self.grid) <= 0 or any(h <= l for l, h in zip(self.grid_lo, self.grid_hi)):
            raise ValueError("grid dims must be positive and the grid box non-empty")
        if self.bg_rows % 8 or self.bg_cols % 8:
            raise ValueError("background mesh dims must be multiples of 8")
        if self.obj_rows % 8 or self.obj_cols % 8:
            raise ValueError("object mesh dims must be multiples of 8")

    @property
    def num_slots(self) -> int:
        return int(np.prod(self.grid))

    @property
    def slot_size(self) -> int:
        """Raw per-slot output length ``e + 8 + 2(L - 1)``."""
        return self.e + 8 + 2 * (self.frames - 1)

    @property
    def voxel_spacing(self) -> float:
        return self.object_extent / self.voxel_res

    def cell_size(self) -> np.ndarray:
        return (np.array(self.grid_hi) - np.array(self.grid_lo)) / np.array(self.grid)

    def cell_centres(self) -> np.ndarray:
        """(G, 3) lattice centres, x varying slowest."""
        idx = np.stack(np.meshgrid(*[np.arange(g) for g in self.grid], indexing="ij"), -1).reshape(-1, 3)
        return np.array(self.grid_lo) + (idx + 0.5) * self.cell_size()

    def ch(self, n: int) -> int:
        """Hidden width scaled by ``width_mult``, kept a positive multiple of 2."""
        return max(2, int(round(n * self.width_mult / 2)) * 2)

    @classmethod
    def toy(cls, **overrides) -> ModelConfig:
        base = dict(
            d=16,
            c=32,
            e=8,
            height=32,
            width=32,
            grid=(2, 1, 2),
            grid_lo=(-1.6, 0.2, 0.6),
            grid_hi=(1.6, 1.0, 4.2),
            voxel_res=8,
            bg_rows=8,
            bg_cols=16,
            width_mult=0.25,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class LossConfig:
    pyramid_depth: int = 4
    sigma_pix: float = 0.1
    beta_initial: float = 1.0
    beta_final: float = 1.0
    velocity: float = 1.0
    presence_hinge: float = 0.0
    laplacian_obj: float = 0.0
    laplacian_bg: float = 0.0
    crease_bg: float = 10.0
    edge_var_bg: float = 10.0
    crease_obj: float = 0.0
    edge_var_obj: float = 0.0
    edge_matching: float = 0.0
    zeta: float = 10.0

    def __post_init__(self):
        if self.sigma_pix <= 0:
            raise ValueError("sigma_pix must be positive")
        for f in dataclasses.fields(self):
            if f.name not in ("sigma_pix", "pyramid_depth") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.pyramid_depth < 1:
            raise ValueError("pyramid_depth must be at least 1")

    def beta(self, step: int, total_steps: int) -> float:
        """Linear anneal from initial to final over the first half of training."""
        half = max(total_steps // 2, 1)
        frac = min(step / half, 1.0)
        return self.beta_initial + (self.beta_final - self.beta_initial) * frac

    @classmethod
    def mesh_rooms(cls) -> LossConfig:
        return cls(pyramid_depth=5, beta_initial=0.5, beta_final=2.0, presence_hinge=100.0, laplacian_obj=7.5)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: str = "data"
    batch_size: int = 64
    accumulate: int = 1
    steps: int = 1000
    learning_rate: float = 1e-4
    seed: int = 0
    render_frames: int | None = None  # frames rendered per episode; all when unset
    checkpoint_every: int = 500
    log_every: int = 10
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> RunConfig:
        obj = dict(obj)
        model = ModelConfig(**obj.pop("model", {}))
        loss = LossConfig(**obj.pop("loss", {}))
        unknown = set(obj) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(model=model, loss=loss, **obj)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def toy(cls, **overrides) -> RunConfig:
        base = dict(
            model=ModelConfig.toy(),
            # the mean-per-pixel NLL of a 32x32 toy frame is small next to the published
            # background mesh penalties, which otherwise keep the shell too stiff to model the room
            loss=LossConfig(crease_bg=0.1, edge_var_bg=0.1),
            batch_size=4,
            steps=3000,
            learning_rate=1e-3,
            checkpoint_every=1000,
        )
        base.update(overrides)
        return cls(**base)
