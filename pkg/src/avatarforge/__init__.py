"""Desk-scale stylized 3D avatar pipeline.

Oracle-rendered multi-view dataset synthesis with controlled pose-image
misalignment, a tri-plane 3D-aware GAN with a coarse-to-fine pose-conditioned
discriminator, and a classifier-free-guided diffusion prior in style space.
"""

__version__ = "0.1.0"
