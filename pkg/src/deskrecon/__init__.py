"""Desk-scale active 3D reconstruction with Gaussian splats.

Coverage-prefiltered next-best-view selection driven by triangulated
self-augmented points, plus residual (full + subset) photometric
supervision, on a CPU rasterizer with analytic gradients.
"""

__version__ = "0.1.0"
