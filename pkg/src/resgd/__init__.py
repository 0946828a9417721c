"""Residual gradient descent for smoothed (2,1)-norm filter-bank regularized inverse problems."""

from .linops import (
    CallableMap,
    DenseSensingMatrix,
    FidelityProblem,
    LinearMap,
    MaskedFourierOperator,
    estimate_spectral_norm,
    fidelity_gradient,
    fidelity_value,
)
from .regularizer import (
    FilterBank,
    RegularizerBounds,
    SmoothActivation,
    dual_maximizer,
    estimate_bounds,
    g_apply,
    g_jacobian_transpose_apply,
    r_eta_gradient,
    r_eta_value,
    r_value,
)
from .solver import ConfigError, IterateRecord, RunResult, SolverConfig, compute_L_eta, iteration_bound, run
from .kkt import KKTCertificate, KKTReport, construct_certificate, verify_certificate
from .unrolled import NetworkParams, PhaseParams, loss_constraint, loss_total, network_forward, phase_forward
from .problems import ReconstructionInstance, make_fourier_cs, make_gaussian_cs, make_phantom, mse, psnr

__version__ = "0.1.0"
