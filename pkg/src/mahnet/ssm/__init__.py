"""State-space model math and the differentiable SSM layer."""
from .core import (
    ContinuousSSM,
    DiscreteSSM,
    SSMKernel,
    SelectiveParams,
    SingularMatrixError,
    convolve_causal,
    discretize_bilinear,
    hippo_legs,
    random_stable_ssm,
    scan_recurrent,
    selective_scan,
    spectral_radius,
    ssm_apply,
    ssm_kernel,
)
from .layer import SSM, causal_conv, selective_scan_diag, ssm_kernel_diag
