"""PSF calibration, noise-aware non-local deconvolution, and a verifying simulator.

The package covers the full loop for scanning-electron-microscopy image
restoration: estimate the lateral point-spread function from repeated
acquisitions of a two-intensity calibration sample, restore images by MAP
deconvolution with a non-local smoothness prior under a signal-dependent
correlated noise model, and check every stage quantitatively against a
built-in forward-model simulator.
"""

from .core import (
    BinaryImage2D,
    Image2D,
    Kernel1D,
    Kernel2D,
    Rng,
    StageError,
    load_image,
    save_image,
)
from .metrics import MetricReport, boundary_distance_avg, otsu_threshold, recall
from .noise import NoiseParams, noise_stddev, synthesize_noise, whitening_distance
from .psf_estimate import (
    EdgeProfileSet,
    ProfileConfig,
    PsfEstimate,
    average_profiles,
    average_stack,
    estimate_latent,
    estimate_psf_pipeline,
    extract_profiles,
    fourier_psf_diagnostic,
    register_stack,
    solve_psf,
)
from .psf_model import (
    AiryParams,
    FitResult,
    GaussianParams,
    airy_radial,
    bessel_j1,
    discretize_1d,
    discretize_2d,
    fit_airy,
    fit_gaussian,
    gaussian_radial,
)
from .restore import (
    NlmConfig,
    SolverOptions,
    WeightField,
    compute_weights,
    convolve_circular,
    deconvolve_map,
    energy,
    energy_gradient,
    nlms_filter,
)
from .simulate import AcquisitionSpec, SceneSpec, TextureDefect, acquire, render_scene, scene_mask

__version__ = "0.1.0"

__all__ = [
    "AcquisitionSpec", "AiryParams", "BinaryImage2D", "EdgeProfileSet", "FitResult",
    "GaussianParams", "Image2D", "Kernel1D", "Kernel2D", "MetricReport", "NlmConfig",
    "NoiseParams", "ProfileConfig", "PsfEstimate", "Rng", "SceneSpec", "SolverOptions",
    "StageError", "TextureDefect", "WeightField", "acquire", "airy_radial",
    "average_profiles", "average_stack", "bessel_j1", "boundary_distance_avg",
    "compute_weights", "convolve_circular", "deconvolve_map", "discretize_1d",
    "discretize_2d", "energy", "energy_gradient", "estimate_latent",
    "estimate_psf_pipeline", "extract_profiles", "fit_airy", "fit_gaussian",
    "fourier_psf_diagnostic", "gaussian_radial", "load_image", "nlms_filter",
    "noise_stddev", "otsu_threshold", "recall", "register_stack", "render_scene",
    "save_image", "scene_mask", "solve_psf", "synthesize_noise", "whitening_distance",
]
