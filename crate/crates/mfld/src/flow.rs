//! The mean-field Langevin flow over particle controls.
//!
//! The control is a bundle of clouds theta[(j, k, i)] evolving in an
//! algorithmic time s. One step freezes the forward states X and costates
//! Y at the last refresh and moves every particle down the flat gradient
//! of the Hamiltonian, regularized by the prior and stirred by fresh
//! Gaussian noise:
//!
//! ```text
//! theta <- theta - ds [ grad_a dH/dm(X, Y, cloud, theta)
//!                       + (sigma^2/2) grad U(theta) ]
//!          + sigma sqrt(ds) xi
//! ```
//!
//! The noise xi is independent across every particle coordinate, drawn
//! from one counter-based stream per outer path, so a run is reproducible
//! and resumable bitwise: evolving for s1 + s2 equals evolving for s1,
//! then resuming for s2. Checkpoints never consume randomness and never
//! touch the state bundles, so trace cadence cannot perturb the dynamics.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diagnostics::{self, foc_flatness_over, gibbs_residual_over};
use crate::error::{Error, Result};
use crate::fbsde::{simulate_forward, solve_adjoint, AdjointMode, AdjointPaths, ForwardPaths};
use crate::measure::{cloud_moments, fmt17, rho_q, Cloud, ParticleControl};
use crate::noise::BrownianPaths;
use crate::objective::objective_from_traj;
use crate::problem::Problem;

/// Parameters of a flow run.
///
/// `sigma = 0` is accepted so drift-only dynamics can be exercised in
/// isolation; production runs use a positive temperature. The number of
/// Langevin steps is `round(total_s / ds)`.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub sigma: f64,
    pub ds: f64,
    pub total_s: f64,
    /// Langevin steps between refreshes of the forward/backward bundles.
    pub refresh_stride: usize,
    /// Langevin steps between trace rows.
    pub checkpoint_stride: usize,
    pub adjoint: AdjointMode,
    /// Seed of the inner (particle) noise streams; independent of the
    /// outer Brownian seed.
    pub inner_seed: u64,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidParam(format!("sigma must be finite and nonnegative, got {}", self.sigma)));
        }
        if !(self.ds > 0.0) || !self.ds.is_finite() {
            return Err(Error::InvalidParam(format!("ds must be positive, got {}", self.ds)));
        }
        if !(self.total_s >= 0.0) || !self.total_s.is_finite() {
            return Err(Error::InvalidParam(format!("total_s must be nonnegative, got {}", self.total_s)));
        }
        if self.refresh_stride == 0 {
            return Err(Error::InvalidParam("refresh_stride must be at least 1".into()));
        }
        if self.checkpoint_stride == 0 {
            return Err(Error::InvalidParam("checkpoint_stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.total_s / self.ds).round() as usize
    }
}

/// The evolving state of a flow: algorithmic time, the control, the
/// forward/backward bundles from the last refresh, and the per-path inner
/// noise streams.
#[derive(Clone)]
pub struct FlowState {
    pub(crate) s: f64,
    pub(crate) control: ParticleControl,
    pub(crate) traj: ForwardPaths,
    pub(crate) adjoint: AdjointPaths,
    inner_rngs: Vec<ChaCha8Rng>,
}

impl FlowState {
    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn control(&self) -> &ParticleControl {
        &self.control
    }

    pub fn traj(&self) -> &ForwardPaths {
        &self.traj
    }

    pub fn adjoint(&self) -> &AdjointPaths {
        &self.adjoint
    }

    pub fn into_control(self) -> ParticleControl {
        self.control
    }
}

/// One checkpoint of a flow run. Columns that are undefined for the run
/// (the density diagnostics outside scalar actions, or at zero
/// temperature) hold NaN.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub s: f64,
    pub j_sigma: f64,
    pub j_stderr: f64,
    pub moment_q: f64,
    pub foc_spread: f64,
    pub gibbs_residual: f64,
    /// Control distance back to the first checkpoint of this trace.
    pub rho_to_ref: f64,
}

/// The checkpoint series of one run.
#[derive(Debug, Clone, Default)]
pub struct FlowTrace {
    rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "s,J_sigma,J_stderr,moment_q,foc_spread,gibbs_residual,rho_to_ref";

impl FlowTrace {
    #[cfg(test)]
    pub(crate) fn from_rows(rows: Vec<TraceRow>) -> Self {
        FlowTrace { rows }
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    /// Renders the trace as CSV text with lossless float formatting.
    pub fn render_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            for (pos, v) in [r.s, r.j_sigma, r.j_stderr, r.moment_q, r.foc_spread, r.gibbs_residual, r.rho_to_ref]
                .into_iter()
                .enumerate()
            {
                if pos > 0 {
                    out.push(',');
                }
                out.push_str(&fmt17(v));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `render_csv` output to a file.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let out = self.render_csv();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Flat gradient of the temperature-zero Hamiltonian in the action:
/// `(grad_a dPhi/dm) . y + grad_a dF/dm`. The prior term of the Langevin
/// drift is not included here.
pub fn flat_hamiltonian_gradient(
    spec: &Problem,
    t: f64,
    x: &[f64],
    y: &[f64],
    cloud: &Cloud,
    a: &[f64],
    out: &mut [f64],
) {
    let mut scratch = vec![0.0; spec.action_dim() * spec.state_dim()];
    flat_gradient_with(spec, t, x, y, cloud, a, &mut scratch, out);
}

/// The allocation-free form used in the per-particle fallback loop.
/// `scratch` must hold `p * d` values.
fn flat_gradient_with(
    spec: &Problem,
    t: f64,
    x: &[f64],
    y: &[f64],
    cloud: &Cloud,
    a: &[f64],
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let d = spec.state_dim();
    spec.flat_drift_agrad(t, x, cloud, a, scratch);
    spec.flat_cost_agrad(t, x, cloud, a, out);
    for (l, o) in out.iter_mut().enumerate() {
        *o += scratch[l * d..(l + 1) * d].iter().zip(y).map(|(g, yi)| g * yi).sum::<f64>();
    }
}

/// Flat derivative of the temperature-`sigma` Hamiltonian at an action
/// point: `dH/dm + (sigma^2/2)(U(a) + log nu(a) + 1)`, with the cloud's
/// log-density supplied by the caller (kernel estimate or analytic).
/// Constant in `a` exactly at the Gibbs density; the spread over probe
/// points is the first-order-condition diagnostic.
pub fn flat_hamiltonian_sigma(
    spec: &Problem,
    t: f64,
    x: &[f64],
    y: &[f64],
    cloud: &Cloud,
    a: &[f64],
    sigma: f64,
    log_density: impl Fn(&[f64]) -> f64,
) -> f64 {
    let mut flat = vec![0.0; spec.state_dim()];
    spec.flat_drift(t, x, cloud, a, &mut flat);
    let base = flat.iter().zip(y).map(|(f, yi)| f * yi).sum::<f64>() + spec.flat_cost(t, x, cloud, a);
    if sigma == 0.0 {
        return base;
    }
    base + 0.5 * sigma * sigma * (spec.prior_potential(a) + log_density(a) + 1.0)
}

/// Builds the initial state: refreshed bundles at s = 0 and fresh inner
/// noise streams, one per outer path.
pub fn init_flow_state(
    spec: &Problem,
    config: &FlowConfig,
    noise: &BrownianPaths,
    control: ParticleControl,
    xi: &[f64],
) -> Result<FlowState> {
    config.validate()?;
    let traj = simulate_forward(spec, &control, noise, xi)?;
    let adjoint = solve_adjoint(spec, &config.adjoint, &control, &traj, noise)?;
    let inner_rngs = (0..control.outer())
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.inner_seed);
            rng.set_stream(j as u64);
            rng
        })
        .collect();
    Ok(FlowState { s: 0.0, control, traj, adjoint, inner_rngs })
}

/// Recomputes the forward/backward bundles for the current control.
/// Deterministic; consumes no randomness.
pub fn refresh_state(
    state: &mut FlowState,
    spec: &Problem,
    config: &FlowConfig,
    noise: &BrownianPaths,
    xi: &[f64],
) -> Result<()> {
    state.traj = simulate_forward(spec, &state.control, noise, xi)?;
    state.adjoint = solve_adjoint(spec, &config.adjoint, &state.control, &state.traj, noise)?;
    Ok(())
}

/// Advances the control by one Langevin step of size `config.ds` against
/// the state's frozen bundles. Every particle sees the pre-step cloud of
/// its own (j, k) node. Aborts naming the first non-finite particle.
pub fn langevin_step(state: &mut FlowState, spec: &Problem, config: &FlowConfig) -> Result<()> {
    let (m, k_steps, n, p) =
        (state.control.outer(), state.control.steps(), state.control.inner(), state.control.action_dim());
    let ds = config.ds;
    let sigma = config.sigma;
    let noise_scale = sigma * ds.sqrt();
    let half_temp = 0.5 * sigma * sigma;
    let grid = state.traj.grid();

    let mut snap = vec![0.0; n * p];
    let mut grad = vec![0.0; n * p];
    let mut prior = vec![0.0; p];
    let mut scratch = vec![0.0; p * spec.state_dim()];

    let FlowState { control, traj, adjoint, inner_rngs, s } = state;
    let theta = control.theta_mut().as_slice_mut().expect("parameters are standard layout");
    let block = n * p;
    for j in 0..m {
        let rng = &mut inner_rngs[j];
        for k in 0..k_steps {
            let node = &mut theta[(j * k_steps + k) * block..(j * k_steps + k + 1) * block];
            snap.copy_from_slice(node);
            let snap_view = ndarray::ArrayView2::from_shape((n, p), &snap).expect("snapshot is dense");
            let cloud = Cloud::from_points(snap_view);
            let t = grid.node(k);
            let x = traj.state(j, k);
            let y = adjoint.costate(j, k);
            if !spec.bulk_flat_gradient(t, x, y, &cloud, &snap, &mut grad) {
                for i in 0..n {
                    let (a, out) = (&snap[i * p..(i + 1) * p], &mut grad[i * p..(i + 1) * p]);
                    flat_gradient_with(spec, t, x, y, &cloud, a, &mut scratch, out);
                }
            }
            let mut bad = false;
            for i in 0..n {
                spec.prior_grad(&snap[i * p..(i + 1) * p], &mut prior);
                for l in 0..p {
                    let mut v = node[i * p + l] - ds * (grad[i * p + l] + half_temp * prior[l]);
                    if sigma > 0.0 {
                        let xi: f64 = StandardNormal.sample(rng);
                        v += noise_scale * xi;
                    }
                    bad |= !v.is_finite();
                    node[i * p + l] = v;
                }
            }
            if bad {
                let i = node.iter().position(|v| !v.is_finite()).unwrap_or(0) / p;
                return Err(Error::NonFinite(format!("theta[j={j},k={k},i={i}]")));
            }
        }
    }
    *s += ds;
    Ok(())
}

fn with_s_location(err: Error, s: f64) -> Error {
    match err {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at s={s}")),
        other => other,
    }
}

/// One checkpoint row computed from temporary bundles, leaving the state
/// untouched.
fn checkpoint_row(
    spec: &Problem,
    config: &FlowConfig,
    noise: &BrownianPaths,
    xi: &[f64],
    state: &FlowState,
    reference: &ParticleControl,
) -> Result<TraceRow> {
    let control = &state.control;
    let traj = simulate_forward(spec, control, noise, xi)?;
    let adjoint = solve_adjoint(spec, &config.adjoint, control, &traj, noise)?;
    let j = objective_from_traj(spec, control, &traj, config.sigma)?;
    let moment = cloud_moments(control, control.q_metric()).aggregate;
    let scalar_action = control.action_dim() == 1;
    let foc = if scalar_action && config.sigma > 0.0 {
        foc_flatness_over(spec, control, &traj, &adjoint, config.sigma, diagnostics::DEFAULT_PROBE_QUANTILES)?
    } else {
        f64::NAN
    };
    let gibbs = if scalar_action && config.sigma > 0.0 {
        gibbs_residual_over(spec, control, &traj, &adjoint, config.sigma, &diagnostics::default_action_grid())?
            .aggregate
    } else {
        f64::NAN
    };
    let rho = rho_q(control, reference, traj.grid().dt())?;
    Ok(TraceRow {
        s: state.s,
        j_sigma: j.value,
        j_stderr: j.stderr,
        moment_q: moment,
        foc_spread: foc,
        gibbs_residual: gibbs,
        rho_to_ref: rho,
    })
}

fn advance(
    spec: &Problem,
    config: &FlowConfig,
    noise: &BrownianPaths,
    state: &mut FlowState,
    xi: &[f64],
) -> Result<FlowTrace> {
    let steps = config.steps();
    let reference = state.control.clone();
    let mut rows = Vec::with_capacity(steps / config.checkpoint_stride + 2);
    rows.push(checkpoint_row(spec, config, noise, xi, state, &reference).map_err(|e| with_s_location(e, state.s))?);
    for n in 0..steps {
        if n > 0 && n % config.refresh_stride == 0 {
            refresh_state(state, spec, config, noise, xi).map_err(|e| with_s_location(e, state.s))?;
        }
        langevin_step(state, spec, config).map_err(|e| with_s_location(e, state.s))?;
        if (n + 1) % config.checkpoint_stride == 0 || n + 1 == steps {
            rows.push(
                checkpoint_row(spec, config, noise, xi, state, &reference)
                    .map_err(|e| with_s_location(e, state.s))?,
            );
        }
    }
    Ok(FlowTrace { rows })
}

/// Runs the flow from a fresh control for `config.total_s`, returning the
/// checkpoint trace and the final state. The first trace row is the
/// initial control; the last is the final one.
pub fn run_flow(
    spec: &Problem,
    config: &FlowConfig,
    noise: &BrownianPaths,
    init: ParticleControl,
    xi: &[f64],
) -> Result<(FlowTrace, FlowState)> {
    let mut state = init_flow_state(spec, config, noise, init, xi)?;
    let trace = advance(spec, config, noise, &mut state, xi)?;
    Ok((trace, state))
}

/// Continues a finished state for another `config.total_s`, reusing its
/// noise streams; running s1 then s2 this way is bitwise identical to a
/// single run of s1 + s2. The resumed trace measures distances against
/// its own first row.
pub fn resume_flow(
    spec: &Problem,
    config: &FlowConfig,
    noise: &BrownianPaths,
    mut state: FlowState,
    xi: &[f64],
) -> Result<(FlowTrace, FlowState)> {
    config.validate()?;
    let trace = advance(spec, config, noise, &mut state, xi)?;
    Ok((trace, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::InitSampler;
    use crate::noise::TimeGrid;
    use crate::problem::test_problems::{tanh_policy, zero_problem};
    use crate::problem::LqParams;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn unit_costate_params() -> LqParams {
        LqParams { b: 0.0, c: 1.0, q_run: 0.0, r_run: 1.0, g_term_quad: 0.0, g_term_lin: 1.0, gamma: 1.0 }
    }

    fn gaussian_control(m: usize, k: usize, n: usize, seed: u64) -> ParticleControl {
        let init = InitSampler::Gaussian { mean: vec![0.0], sd: 1.0 };
        ParticleControl::sample(&init, m, k, n, 1, 2.0, seed).unwrap()
    }

    fn test_config(sigma: f64, ds: f64, total_s: f64, adjoint: AdjointMode) -> FlowConfig {
        FlowConfig {
            sigma,
            ds,
            total_s,
            refresh_stride: 1,
            checkpoint_stride: 1,
            adjoint,
            inner_seed: 99,
        }
    }

    #[test]
    fn flat_gradient_matches_lq_closed_form() {
        let params = LqParams { b: 0.0, c: 1.0, q_run: 0.0, r_run: 1.0, g_term_quad: 0.0, g_term_lin: 1.0, gamma: 1.0 };
        let spec = Problem::linear_quadratic(params).unwrap();
        let control = gaussian_control(1, 1, 16, 5);
        let cloud = control.cloud(0, 0);
        let mut out = [0.0];
        flat_hamiltonian_gradient(&spec, 0.0, &[0.2], &[1.0], &cloud, &[0.0], &mut out);
        assert_relative_eq!(out[0], 1.0, epsilon = 1e-14); // c y + r a
        flat_hamiltonian_gradient(&spec, 0.0, &[0.2], &[1.0], &cloud, &[0.7], &mut out);
        assert_relative_eq!(out[0], 1.7, epsilon = 1e-14);
    }

    #[test]
    fn flat_gradient_vanishes_without_costate_or_cost() {
        let spec = zero_problem(1, 1);
        let control = gaussian_control(1, 1, 8, 6);
        let cloud = control.cloud(0, 0);
        let mut out = [0.0];
        for a in [-2.0, 0.0, 1.3] {
            flat_hamiltonian_gradient(&spec, 0.3, &[0.5], &[0.0], &cloud, &[a], &mut out);
            assert_eq!(out[0], 0.0);
        }
    }

    #[test]
    fn flat_gradient_matches_finite_differences() {
        let spec = tanh_policy();
        let control = gaussian_control(1, 1, 32, 7);
        let cloud = control.cloud(0, 0);
        let (t, x, y) = (0.4, [0.6], [0.8]);
        let h = 1e-6;
        let mut out = [0.0];
        let mut flat = [0.0];
        for a in [-1.1, -0.3, 0.2, 0.9] {
            flat_hamiltonian_gradient(&spec, t, &x, &y, &cloud, &[a], &mut out);
            let mut value = |a: f64| {
                spec.flat_drift(t, &x, &cloud, &[a], &mut flat);
                flat[0] * y[0] + spec.flat_cost(t, &x, &cloud, &[a])
            };
            let fd = (value(a + h) - value(a - h)) / (2.0 * h);
            assert_relative_eq!(out[0], fd, epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    #[test]
    fn sigma_term_reduces_to_flat_value_at_zero_temperature() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let control = gaussian_control(1, 1, 16, 8);
        let cloud = control.cloud(0, 0);
        let mut flat = [0.0];
        for a in [-1.0, 0.4] {
            let v = flat_hamiltonian_sigma(&spec, 0.0, &[0.1], &[1.0], &cloud, &[a], 0.0, |_| {
                panic!("log-density must not be queried at sigma = 0")
            });
            spec.flat_drift(0.0, &[0.1], &cloud, &[a], &mut flat);
            let want = flat[0] * 1.0 + spec.flat_cost(0.0, &[0.1], &cloud, &[a]);
            assert_eq!(v, want);
        }
    }

    #[test]
    fn sigma_term_is_constant_at_the_gibbs_density() {
        // With costate 1 the Gibbs law for c = r = sigma = 1 is
        // N(-2/3, 1/3); supplying its exact log-density must cancel the
        // action dependence algebraically.
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let control = gaussian_control(1, 1, 64, 9);
        let cloud = control.cloud(0, 0);
        let (mean, var) = (-2.0 / 3.0, 1.0 / 3.0);
        let log_gibbs = move |a: &[f64]| {
            -(a[0] - mean).powi(2) / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
        };
        let probe = |a: f64| {
            flat_hamiltonian_sigma(&spec, 0.0, &[0.3], &[1.0], &cloud, &[a], 1.0, log_gibbs)
        };
        let base = probe(-3.0);
        let mut a = -3.0;
        while a <= 3.0 {
            assert_relative_eq!(probe(a), base, epsilon = 1e-10);
            a += 0.25;
        }
    }

    #[test]
    fn sigma_term_on_prior_is_half_temperature() {
        // U + log gamma = 0 pointwise, so only the +1 survives.
        let spec = zero_problem(1, 1);
        let control = gaussian_control(1, 1, 16, 10);
        let cloud = control.cloud(0, 0);
        let log_prior = |a: &[f64]| -crate::problem::gaussian_potential(a);
        for a in [-1.5, 0.0, 2.0] {
            let v = flat_hamiltonian_sigma(&spec, 0.0, &[0.0], &[0.0], &cloud, &[a], 0.8, log_prior);
            assert_relative_eq!(v, 0.5 * 0.64, epsilon = 1e-14);
        }
    }

    #[test]
    fn drift_free_step_only_advances_time() {
        let spec = zero_problem(1, 1);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = BrownianPaths::sample(grid, 8, 1, 11).unwrap();
        let control = gaussian_control(8, 4, 8, 12);
        let config = test_config(0.0, 1e-3, 1.0, AdjointMode::regression_default());
        let mut state = init_flow_state(&spec, &config, &noise, control.clone(), &[0.0]).unwrap();
        langevin_step(&mut state, &spec, &config).unwrap();
        assert_eq!(state.control.theta(), control.theta());
        assert_relative_eq!(state.s, 1e-3);
    }

    #[test]
    fn displacement_is_linear_in_step_size() {
        // At sigma = 0 the update is exactly theta - ds * drift, so the
        // displacement ratio between two step sizes is their ratio to
        // machine precision.
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = BrownianPaths::sample(grid, 2, 1, 13).unwrap();
        let control = gaussian_control(2, 4, 8, 14);
        let make = |ds: f64| {
            let config = test_config(0.0, ds, 1.0, AdjointMode::Riccati(params));
            let mut state = init_flow_state(&spec, &config, &noise, control.clone(), &[0.0]).unwrap();
            langevin_step(&mut state, &spec, &config).unwrap();
            state
        };
        let coarse = make(1e-6);
        let fine = make(1e-7);
        // Each displacement carries an absolute rounding error of order
        // eps * |theta| from the update's subtraction, so the comparison
        // must be absolute as well.
        let mut seen = 0;
        for ((&before, &after6), &after7) in
            control.theta().iter().zip(coarse.control.theta()).zip(fine.control.theta())
        {
            let (d6, d7) = (after6 - before, after7 - before);
            assert_abs_diff_eq!(d6, 10.0 * d7, epsilon = 1e-12);
            if d7.abs() > 1e-9 {
                seen += 1;
            }
        }
        assert!(seen > 0, "no particle moved measurably");
    }

    #[test]
    fn frozen_costate_flow_reaches_the_gibbs_law() {
        // With Y frozen at 1 each particle is an independent
        // Ornstein-Uhlenbeck chain with rate r + sigma^2/2 = 3/2 and mean
        // -2/3; the discrete stationary variance at this step size is
        // sigma^2 / (lambda (2 - lambda ds)).
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = BrownianPaths::sample(grid, 8, 1, 15).unwrap();
        let control = gaussian_control(8, 4, 64, 16);
        let ds = 2e-3;
        let config = test_config(1.0, ds, 6.0, AdjointMode::Riccati(params));
        let mut state = init_flow_state(&spec, &config, &noise, control, &[0.0]).unwrap();
        for _ in 0..config.steps() {
            langevin_step(&mut state, &spec, &config).unwrap();
        }
        let theta = state.control.theta();
        let count = theta.len() as f64;
        let mean = theta.iter().sum::<f64>() / count;
        let var = theta.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        let lambda = 1.5;
        let want_var = 1.0 / (lambda * (2.0 - lambda * ds));
        assert!((mean + 2.0 / 3.0).abs() < 0.05, "mean {mean}");
        assert!((var - want_var).abs() < 0.04, "var {var} vs {want_var}");
    }

    #[test]
    fn zero_length_run_records_single_row() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = BrownianPaths::sample(grid, 4, 1, 17).unwrap();
        let control = gaussian_control(4, 4, 16, 18);
        let config = test_config(1.0, 1e-3, 0.0, AdjointMode::Riccati(params));
        let (trace, state) = run_flow(&spec, &config, &noise, control, &[0.0]).unwrap();
        assert_eq!(trace.rows().len(), 1);
        assert_eq!(trace.rows()[0].s, 0.0);
        assert_eq!(trace.rows()[0].rho_to_ref, 0.0);
        assert_eq!(state.s(), 0.0);
    }

    #[test]
    fn identical_seeds_reproduce_the_run_bitwise() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = BrownianPaths::sample(grid, 4, 1, 19).unwrap();
        let config = test_config(1.0, 1e-2, 0.1, AdjointMode::Riccati(params));
        let run = || {
            let control = gaussian_control(4, 4, 16, 20);
            run_flow(&spec, &config, &noise, control, &[0.0]).unwrap()
        };
        let (trace_a, state_a) = run();
        let (trace_b, state_b) = run();
        assert_eq!(state_a.control.theta(), state_b.control.theta());
        for (ra, rb) in trace_a.rows().iter().zip(trace_b.rows()) {
            assert_eq!(ra.j_sigma.to_bits(), rb.j_sigma.to_bits());
            assert_eq!(ra.gibbs_residual.to_bits(), rb.gibbs_residual.to_bits());
        }
    }

    #[test]
    fn split_run_matches_single_run_bitwise() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = BrownianPaths::sample(grid, 4, 1, 21).unwrap();
        let control = gaussian_control(4, 4, 16, 22);

        let full = test_config(1.0, 1e-2, 0.2, AdjointMode::Riccati(params));
        let (_, state_full) = run_flow(&spec, &full, &noise, control.clone(), &[0.0]).unwrap();

        let half = FlowConfig { total_s: 0.1, checkpoint_stride: 3, ..full.clone() };
        let (_, mid) = run_flow(&spec, &half, &noise, control, &[0.0]).unwrap();
        let (_, state_split) = resume_flow(&spec, &half, &noise, mid, &[0.0]).unwrap();

        assert_eq!(state_full.control.theta(), state_split.control.theta());
        assert_eq!(state_full.s(), state_split.s());
    }

    #[test]
    fn trace_csv_roundtrips_exactly() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = BrownianPaths::sample(grid, 4, 1, 23).unwrap();
        let control = gaussian_control(4, 4, 16, 24);
        let config = FlowConfig { checkpoint_stride: 4, ..test_config(1.0, 1e-2, 0.08, AdjointMode::Riccati(params)) };
        let (trace, _) = run_flow(&spec, &config, &noise, control, &[0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        trace.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_HEADER);
        for (line, row) in lines.zip(trace.rows()) {
            let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cols.len(), 7);
            assert_eq!(cols[0].to_bits(), row.s.to_bits());
            assert_eq!(cols[1].to_bits(), row.j_sigma.to_bits());
            assert_eq!(cols[5].to_bits(), row.gibbs_residual.to_bits());
        }
    }
}
