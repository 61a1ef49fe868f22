"""Text-prompted denoising-UNet perception backbone with a training harness.

A desk-scale package: a frozen convolutional latent codec, a toy frozen
text encoder with a learnable residual adapter, a four-resolution
cross-attention UNet used as a feature backbone at timestep zero, explicit
guidance from averaged cross-attention maps, an FPN decoder with
segmentation/depth losses, and a CLI harness for synthetic-data training,
evaluation and ablations.
"""

__version__ = "0.1.0"
