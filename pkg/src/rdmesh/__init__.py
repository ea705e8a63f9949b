"""Dynamic mesh animation from silhouette videos: a triflow VAE over
(condition, jump, trajectory) plus a rectified-flow latent generator."""
from .mesh import (
    Decomposition,
    DynamicSequence,
    NormParams,
    StaticMesh,
    build_adjacency,
    canonicalize,
    decompose,
    fps_sample,
    recompose,
)
from .rf import RFConfig, RFModel
from .vae import TriflowVAE, VAEConfig

__version__ = "0.1.0"

__all__ = [
    "Decomposition",
    "DynamicSequence",
    "NormParams",
    "RFConfig",
    "RFModel",
    "StaticMesh",
    "TriflowVAE",
    "VAEConfig",
    "build_adjacency",
    "canonicalize",
    "decompose",
    "fps_sample",
    "recompose",
]
