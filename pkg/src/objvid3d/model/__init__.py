"""Scene model: configuration, networks and the generative pipeline."""

from .config import LossConfig, ModelConfig, RunConfig
from .scene import (
    PosteriorGaussian,
    SceneModel,
    SceneParams,
    SceneRender,
    reparameterize,
    sample_prior,
    unroll_kinematics,
)

__all__ = [
    "LossConfig",
    "ModelConfig",
    "PosteriorGaussian",
    "RunConfig",
    "SceneModel",
    "SceneParams",
    "SceneRender",
    "reparameterize",
    "sample_prior",
    "unroll_kinematics",
]
