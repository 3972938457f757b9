"""Burst denoising with spatially-varying kernels and low-rank kernel bases.

The toolkit simulates noisy bursts, estimates per-pixel denoising kernels
classically, compresses them onto a burst-specific basis, filters through
three mathematically equivalent backends (direct, factored, Fourier), and
accounts for the cost of each.
"""

from .core import (
    Burst,
    CoefficientField,
    Image,
    KernelBasis,
    KernelField,
    KernelFieldReport,
    NoiseParams,
    TensorFormatError,
    load_image_png,
    load_tensor,
    save_image_png,
    save_tensor,
    softmax_normalize,
    validate_kernel_field,
)
from .filtering import (
    PlanCache,
    conv2d_uniform,
    filter_direct,
    filter_factored,
    filter_fourier,
    next_fast_len_235,
    per_frame_estimates,
)
from .kernels import (
    basis_rank,
    basis_singular_values,
    cluster_coefficients,
    compress_kernel_field,
    estimate_kernels_nlm,
    overlap_ratio,
    union_rank,
    project_kernel_field,
    reconstruct_kernels,
)
from .metrics import FlopReport, flop_report, loss_terms, prediction_count, psnr
from .sim import (
    GAIN_PRESETS,
    GainPreset,
    MotionConfig,
    add_noise,
    gain_preset,
    make_test_image,
    sample_noise_params,
    synth_motion,
)

__version__ = "0.1.0"

__all__ = [
    "Burst",
    "CoefficientField",
    "FlopReport",
    "GAIN_PRESETS",
    "GainPreset",
    "Image",
    "KernelBasis",
    "KernelField",
    "KernelFieldReport",
    "MotionConfig",
    "NoiseParams",
    "PlanCache",
    "TensorFormatError",
    "add_noise",
    "basis_rank",
    "basis_singular_values",
    "cluster_coefficients",
    "compress_kernel_field",
    "conv2d_uniform",
    "estimate_kernels_nlm",
    "filter_direct",
    "filter_factored",
    "filter_fourier",
    "flop_report",
    "gain_preset",
    "load_image_png",
    "load_tensor",
    "loss_terms",
    "make_test_image",
    "next_fast_len_235",
    "overlap_ratio",
    "union_rank",
    "per_frame_estimates",
    "prediction_count",
    "project_kernel_field",
    "psnr",
    "reconstruct_kernels",
    "sample_noise_params",
    "save_image_png",
    "save_tensor",
    "softmax_normalize",
    "synth_motion",
    "validate_kernel_field",
]
