"""wavesplat: compile volumetric scalar fields into Gaussian splat assets.

Pipeline: raw volume -> transfer function -> 3D DWT -> adaptive coefficient
sparsification -> analytic splat construction through a wavelet-to-Gaussian
transition bank -> optional image-space fine-tuning -> PLY export and
PSNR/SSIM evaluation.
"""

__version__ = "0.1.0"
