"""Desk-scale fMRI-to-image decoding toolkit.

Modules:
  core      shared data contracts, config, seeded randomness
  nn        numpy layer toolkit with hand-written backprop
  rvac      contrastive fMRI-to-semantics encoder with mix augmentation
  rpkm      three-stage RGBD encoder/decoder through voxel space
  guidance  palette/depth cues, weighted composition, generator backends
  metrics   reconstruction metric suite and set evaluation
  data      synthetic worlds, dataset files, recorded-data ingestion
  cli       operator command line (entry point: dream)
"""

from .core import (BackendUnavailableError, DepthMap, FmriSample, ProtocolError,
                   RgbdImage, RunConfig, SemanticEmbedding, SpatialPalette,
                   ValidationError, child_rng, seeded_rng)

__all__ = [
    "BackendUnavailableError", "DepthMap", "FmriSample", "ProtocolError",
    "RgbdImage", "RunConfig", "SemanticEmbedding", "SpatialPalette",
    "ValidationError", "child_rng", "seeded_rng",
]

__version__ = "0.1.0"
