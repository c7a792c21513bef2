//! Particle solver for entropy-regularized stochastic control with
//! measure-valued (relaxed) controls.
//!
//! The control at each time node is an empirical measure over actions,
//! carried by N inner particles per outer Monte Carlo path. The solver
//! evolves these particles in an algorithmic time `s` by Langevin dynamics
//! whose drift is the action-gradient of the flat derivative of the control
//! Hamiltonian, plus a prior potential gradient; the temperature `sigma`
//! matches the entropy penalty in the objective. Stationary clouds
//! approximate the Gibbs-form fixed point, which is the minimizer of the
//! regularized objective.
//!
//! Module map:
//!
//! * [`noise`] - time grid and the outer Brownian increments, shared across
//!   every estimate that is compared against another (common random numbers).
//! * [`problem`] - coefficient interface (drift, costs, their state gradients
//!   and flat derivatives in the measure argument) plus the linear-quadratic
//!   and single-layer-policy builders.
//! * [`measure`] - particle controls, action clouds, Wasserstein metrics,
//!   kernel density estimation and the relative-entropy estimator.
//! * [`fbsde`] - forward Euler state simulation and the two adjoint solvers
//!   (closed-form Riccati for the linear-quadratic family, least-squares
//!   Monte Carlo regression in general).
//! * [`flow`] - the Langevin engine: per-particle updates, refresh and
//!   checkpoint scheduling, trace recording, resumable state.
//! * [`objective`] - Monte Carlo objective evaluation, Hamiltonian values,
//!   and both sides of the directional-derivative identity.
//! * [`diagnostics`] - fixed-point residuals, first-order-condition
//!   flatness, coupling contraction rate, monotonicity and moment reports,
//!   Markov projection of open-loop controls.
//!
//! Determinism: all randomness flows from explicit u64 seeds through
//! counter-mode ChaCha streams, one stream per outer path. Reductions run
//! in fixed index order. Two runs with the same configuration and seeds
//! produce bit-identical results regardless of platform.

pub mod diagnostics;
pub mod error;
pub mod fbsde;
pub mod flow;
pub mod measure;
pub mod noise;
pub mod objective;
pub mod problem;

pub use diagnostics::{
    contraction_estimate, default_action_grid, foc_flatness, gibbs_residual, markov_projection,
    moment_trace, monotonicity_report, project_control, write_contraction_csv,
    ContractionEstimate, GibbsSummary, MomentTrace, MonotonicityReport, NodeProjection,
    DEFAULT_PROBE_QUANTILES,
};
pub use error::{Error, Result};
pub use fbsde::{
    riccati_curve, simulate_forward, solve_adjoint, solve_adjoint_regression,
    solve_adjoint_riccati, AdjointMode, AdjointPaths, ForwardPaths, RiccatiCurve,
};
pub use flow::{
    flat_hamiltonian_gradient, flat_hamiltonian_sigma, init_flow_state, langevin_step,
    refresh_state, resume_flow, run_flow, FlowConfig, FlowState, FlowTrace, TraceRow,
    TRACE_HEADER,
};
pub use measure::{
    cloud_moments, kde_log_density, relative_entropy, rho_q, silverman_bandwidths,
    wasserstein_node, Cloud, InitSampler, ParticleControl,
};
pub use noise::{BrownianPaths, TimeGrid};
pub use objective::{
    directional_derivative_fd, evaluate_objective, hamiltonian_pairing, hamiltonian_value,
    ObjectiveEstimate,
};
pub use problem::{check_flat_derivative, gaussian_potential, LqParams, Problem};
