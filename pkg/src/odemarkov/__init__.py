"""Stability analysis of Markov-modulated stochastic recursions.

Builds the lifted operators ``L_alpha`` / ``Q_alpha`` of a finite chain,
computes their spectra and small-gain derivatives, and checks the results
against Monte Carlo simulation of the linear and nonlinear recursions.
"""
from .chain import (
    ChainModel,
    StationaryInfo,
    ValidationReport,
    build_shift_register,
    load_chain,
    save_chain,
    stationary,
    validate_chain,
)
from .oper import (
    EigenPair,
    LiftedOperator,
    SpectralReport,
    build_L,
    build_Q,
    growth_rate_estimate,
    multiplicative_ergodic_check,
    perron_eigenpair,
    scan_curve,
    spectral_radius,
    stability_region,
)
from .perturb import (
    DerivativeReport,
    clt_covariance,
    derivative_report,
    eta_prime_zero,
    lambda_dprime_zero,
    lambda_prime_zero,
    lms_local_profile,
)
from .simlin import (
    SimConfig,
    TrajectoryStats,
    backward_couple,
    simulate_linear,
    stationarity_convergence,
)
from .nonlin import (
    NonlinearProblem,
    alpha_scaling_experiment,
    average_field,
    integrate_ode,
    linear_embedding,
    scaled_limit_field,
    simulate_nonlinear,
    simulate_sensitivity,
    solve_equilibrium,
    tanh_problem,
)

__version__ = "0.1.0"
