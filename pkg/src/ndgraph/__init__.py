"""Globally-consistent non-rigid tracking and reconstruction.

Per-frame deformation graphs predicted by a 3D convolutional encoder,
globally optimized connectivity, an embedded-deformation warp field, and a
pose-conditioned multi-MLP implicit surface, trained end to end with
self-supervised geometric losses on sequences of SDF volumes.
"""

__version__ = "0.1.0"
