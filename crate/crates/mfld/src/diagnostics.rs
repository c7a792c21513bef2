//! Convergence and optimality diagnostics over flow snapshots.
//!
//! Everything in this module is pure over immutable state: how close each
//! node cloud sits to its local stationary density, how flat the
//! first-order condition is across cloud quantiles, how fast two coupled
//! flows contract toward each other, and what a path-dependent control
//! looks like after projecting it onto the state (the Markov projection).
//! Trace post-processing for monotonicity and moment stability lives here
//! too, so a run can be graded from its CSV row stream alone.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fbsde::{AdjointPaths, ForwardPaths};
use crate::flow::{
    flat_hamiltonian_sigma, init_flow_state, langevin_step, refresh_state, FlowConfig, FlowState,
    FlowTrace,
};
use crate::measure::{
    fmt17, kde_density_grid_1d, kde_log_density, quantile_sorted, resample_weighted, rho_q,
    silverman_bandwidths, Cloud, ParticleControl,
};
use crate::noise::BrownianPaths;
use crate::problem::Problem;

/// Quantile levels probed by the first-order-condition spread.
pub const DEFAULT_PROBE_QUANTILES: &[f64] = &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Half-width and node count of the default action quadrature window.
const ACTION_GRID_HALF_WIDTH: f64 = 8.0;
const ACTION_GRID_NODES: usize = 1024;

/// Distances below this are treated as numerical noise by the contraction
/// rate fit.
const RHO_FLOOR: f64 = 1e-12;

/// Outer paths required before a conditional (Nadaraya-Watson) estimate
/// is meaningful.
const PROJECTION_MIN_PATHS: usize = 32;

/// Uniform quadrature grid on [-8, 8] with 1024 nodes, wide enough to hold
/// the stationary densities of every bounded-drift problem in the test
/// battery with sub-1e-9 tail mass outside.
pub fn default_action_grid() -> Vec<f64> {
    let step = 2.0 * ACTION_GRID_HALF_WIDTH / (ACTION_GRID_NODES - 1) as f64;
    (0..ACTION_GRID_NODES).map(|i| -ACTION_GRID_HALF_WIDTH + step * i as f64).collect()
}

/// Total-variation distances between each node cloud's kernel density and
/// the local stationary target.
#[derive(Debug, Clone)]
pub struct GibbsSummary {
    /// `per_node[(j, k)]` is the distance at node k of outer path j.
    pub per_node: Array2<f64>,
    /// Mean over all (j, k) nodes.
    pub aggregate: f64,
}

/// Distance of every node cloud to the stationary density it should settle
/// into: proportional to `exp(-(2/sigma^2) dH/dm(a)) * exp(-U(a))`, with
/// the flat derivative evaluated against the node's own state, costate and
/// cloud. The target is normalized by rectangle quadrature on `grid_points`
/// and compared in total variation to the cloud's Gaussian kernel density
/// on the same grid.
///
/// Scalar actions only: the quadrature grid is one-dimensional. Bandwidths
/// narrower than the grid spacing are invisible to the quadrature, so the
/// kernel bandwidth is floored at one grid step; point-mass clouds then
/// show up as a residual near 1 instead of a silent 0.5.
pub fn gibbs_residual_over(
    spec: &Problem,
    control: &ParticleControl,
    traj: &ForwardPaths,
    adjoint: &AdjointPaths,
    sigma: f64,
    grid_points: &[f64],
) -> Result<GibbsSummary> {
    if spec.action_dim() != 1 || control.action_dim() != 1 {
        return Err(Error::Unsupported(
            "stationary-density quadrature is implemented for scalar actions only".into(),
        ));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParam(format!(
            "stationary density needs sigma > 0, got {sigma}"
        )));
    }
    let g = grid_points.len();
    if g < 2 {
        return Err(Error::InvalidParam("quadrature grid needs at least two nodes".into()));
    }
    let step = grid_points[1] - grid_points[0];
    let span = grid_points[g - 1] - grid_points[0];
    if !(step > 0.0) || (span - step * (g - 1) as f64).abs() > 1e-9 * span.abs().max(1.0) {
        return Err(Error::InvalidParam("quadrature grid must be uniform and ascending".into()));
    }

    let (m, k_steps) = (control.outer(), control.steps());
    let tgrid = traj.grid();
    let beta = 2.0 / (sigma * sigma);
    let mut per_node = Array2::zeros((m, k_steps));
    let mut log_target = vec![0.0; g];
    let mut kde = vec![0.0; g];
    let mut drift = vec![0.0; spec.state_dim()];
    let mut values: Vec<f64> = Vec::new();
    for j in 0..m {
        for k in 0..k_steps {
            let cloud = control.cloud(j, k);
            let t = tgrid.node(k);
            let x = traj.state(j, k);
            let y = adjoint.costate(j, k);
            for (node, lt) in grid_points.iter().zip(log_target.iter_mut()) {
                let a = std::slice::from_ref(node);
                spec.flat_drift(t, x, &cloud, a, &mut drift);
                let dh = drift.iter().zip(y).map(|(f, yi)| f * yi).sum::<f64>()
                    + spec.flat_cost(t, x, &cloud, a);
                *lt = -beta * dh - spec.prior_potential(a);
            }
            let peak = log_target.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut mass = 0.0;
            for lt in log_target.iter_mut() {
                *lt = (*lt - peak).exp();
                mass += *lt;
            }
            mass *= step;

            values.clear();
            values.extend((0..cloud.n()).map(|i| cloud.point(i)[0]));
            let h = silverman_bandwidths(&cloud)[0].max(step);
            kde_density_grid_1d(&values, h, grid_points[0], step, &mut kde);

            let mut tv = 0.0;
            for (kd, target) in kde.iter().zip(&log_target) {
                tv += (kd - target / mass).abs();
            }
            per_node[(j, k)] = 0.5 * tv * step;
        }
    }
    let aggregate = per_node.iter().sum::<f64>() / (m * k_steps) as f64;
    Ok(GibbsSummary { per_node, aggregate })
}

/// [`gibbs_residual_over`] applied to a flow state's own bundles.
pub fn gibbs_residual(
    spec: &Problem,
    state: &FlowState,
    sigma: f64,
    grid_points: &[f64],
) -> Result<GibbsSummary> {
    gibbs_residual_over(spec, state.control(), state.traj(), state.adjoint(), sigma, grid_points)
}

/// Spread of the temperature-`sigma` flat Hamiltonian across cloud
/// quantile probes, averaged over (j, k) nodes. The flat derivative is
/// constant in the action exactly at the stationary density, so this is a
/// direct check of the first-order condition; the cloud's own kernel
/// density estimate supplies the log-density term.
///
/// A cloud collapsed onto a single point has no usable density estimate
/// and poisons the average with an infinite sentinel.
pub fn foc_flatness_over(
    spec: &Problem,
    control: &ParticleControl,
    traj: &ForwardPaths,
    adjoint: &AdjointPaths,
    sigma: f64,
    quantiles: &[f64],
) -> Result<f64> {
    if spec.action_dim() != 1 || control.action_dim() != 1 {
        return Err(Error::Unsupported(
            "quantile probes are implemented for scalar actions only".into(),
        ));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParam(format!(
            "first-order-condition spread needs sigma > 0, got {sigma}"
        )));
    }
    if quantiles.is_empty() {
        return Err(Error::InvalidParam("needs at least one probe quantile".into()));
    }
    if quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(Error::InvalidParam("probe quantiles must lie in [0, 1]".into()));
    }

    let (m, k_steps) = (control.outer(), control.steps());
    let tgrid = traj.grid();
    let np = quantiles.len() as f64;
    let mut sorted: Vec<f64> = Vec::new();
    let mut probe_vals = vec![0.0; quantiles.len()];
    let mut acc = 0.0;
    for j in 0..m {
        for k in 0..k_steps {
            let cloud = control.cloud(j, k);
            sorted.clear();
            sorted.extend((0..cloud.n()).map(|i| cloud.point(i)[0]));
            sorted.sort_by(f64::total_cmp);
            if sorted.first() == sorted.last() {
                acc = f64::INFINITY;
                continue;
            }
            let bw = silverman_bandwidths(&cloud);
            let t = tgrid.node(k);
            let x = traj.state(j, k);
            let y = adjoint.costate(j, k);
            for (v, q) in probe_vals.iter_mut().zip(quantiles) {
                let a = [quantile_sorted(&sorted, *q)];
                *v = flat_hamiltonian_sigma(spec, t, x, y, &cloud, &a, sigma, |pt| {
                    kde_log_density(&cloud, &bw, pt)
                });
            }
            let mean = probe_vals.iter().sum::<f64>() / np;
            let var = probe_vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / np;
            acc += var.sqrt();
        }
    }
    Ok(acc / (m * k_steps) as f64)
}

/// [`foc_flatness_over`] applied to a flow state's own bundles.
pub fn foc_flatness(
    spec: &Problem,
    state: &FlowState,
    sigma: f64,
    quantiles: &[f64],
) -> Result<f64> {
    foc_flatness_over(spec, state.control(), state.traj(), state.adjoint(), sigma, quantiles)
}

/// Coupled-flow distance series and the fitted contraction rate.
#[derive(Debug, Clone)]
pub struct ContractionEstimate {
    /// `(s, rho_q)` rows, starting at s = 0.
    pub series: Vec<(f64, f64)>,
    /// Least-squares slope of `-ln rho_q` against s over the informative
    /// window; NaN when fewer than two rows fall inside it.
    pub rate: f64,
}

/// Runs two flows from `init_a` and `init_b` under the same Brownian
/// sheet and the same inner noise streams (synchronous coupling), records
/// the path-metric distance between their controls at the probe times,
/// and fits the exponential contraction rate.
///
/// Probe times are rounded to the step grid; s = 0 is always recorded.
/// The fit only uses rows with distance in `[1e-6, rho(0)/2]`, dropping
/// both the floor where roundoff dominates and the initial transient.
pub fn contraction_estimate(
    spec: &Problem,
    config: &FlowConfig,
    noise: &BrownianPaths,
    init_a: ParticleControl,
    init_b: ParticleControl,
    xi: &[f64],
    probe_times: &[f64],
) -> Result<ContractionEstimate> {
    config.validate()?;
    init_a.check_compatible(&init_b)?;
    if probe_times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidParam("probe times must be finite and nonnegative".into()));
    }
    let steps = config.steps();
    let probe_steps: BTreeSet<usize> = probe_times
        .iter()
        .map(|&t| ((t / config.ds).round() as usize).min(steps))
        .collect();

    let mut state_a = init_flow_state(spec, config, noise, init_a, xi)?;
    let mut state_b = init_flow_state(spec, config, noise, init_b, xi)?;
    let dt = state_a.traj().grid().dt();

    let mut series = Vec::with_capacity(probe_steps.len() + 1);
    series.push((0.0, rho_q(state_a.control(), state_b.control(), dt)?));
    for n in 0..steps {
        if n > 0 && n % config.refresh_stride == 0 {
            refresh_state(&mut state_a, spec, config, noise, xi)?;
            refresh_state(&mut state_b, spec, config, noise, xi)?;
        }
        langevin_step(&mut state_a, spec, config)?;
        langevin_step(&mut state_b, spec, config)?;
        if probe_steps.contains(&(n + 1)) {
            series.push((state_a.s(), rho_q(state_a.control(), state_b.control(), dt)?));
        }
    }
    let rate = fit_contraction_rate(&series);
    Ok(ContractionEstimate { series, rate })
}

fn fit_contraction_rate(series: &[(f64, f64)]) -> f64 {
    let rho0 = match series.first() {
        Some(&(_, r)) if r > 0.0 => r,
        _ => return f64::NAN,
    };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|&&(_, r)| r >= 1e-6 && r <= 0.5 * rho0 && r > RHO_FLOOR)
        .map(|&(s, r)| (s, r.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let (s_mean, y_mean) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut num, mut den) = (0.0, 0.0);
    for &(s, y) in &pts {
        num += (s - s_mean) * (y - y_mean);
        den += (s - s_mean) * (s - s_mean);
    }
    if den == 0.0 {
        return f64::NAN;
    }
    -(num / den)
}

/// Writes the contraction series as `s,rho_q` with lossless float
/// formatting.
pub fn write_contraction_csv(series: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("s,rho_q\n");
    for &(s, r) in series {
        out.push_str(&fmt17(s));
        out.push(',');
        out.push_str(&fmt17(r));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Objective monotonicity over consecutive checkpoints, judged against a
/// two-standard-error noise band per comparison.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicityReport {
    /// Consecutive checkpoint pairs examined.
    pub pairs: usize,
    /// Pairs where the objective rose by more than the noise band.
    pub violations: usize,
    /// Worst rise above the band; 0 when there are no violations.
    pub max_excess: f64,
}

/// Counts checkpoint pairs where `J(s_{i+1}) > J(s_i) + 2 (se_i + se_{i+1})`.
/// The descent property only holds in expectation, so single-pair noise is
/// absorbed by the band rather than reported.
pub fn monotonicity_report(trace: &FlowTrace) -> MonotonicityReport {
    let rows = trace.rows();
    let mut violations = 0;
    let mut max_excess = 0.0_f64;
    for w in rows.windows(2) {
        let band = 2.0 * (w[0].j_stderr + w[1].j_stderr);
        let excess = w[1].j_sigma - w[0].j_sigma - band;
        if excess > 0.0 {
            violations += 1;
            max_excess = max_excess.max(excess);
        }
    }
    MonotonicityReport { pairs: rows.len().saturating_sub(1), violations, max_excess }
}

/// The q-moment series of a trace with its a-priori stability bound.
#[derive(Debug, Clone)]
pub struct MomentTrace {
    /// `(s, moment)` rows in checkpoint order.
    pub series: Vec<(f64, f64)>,
    /// Twice the larger of the initial value and the early-run plateau
    /// (mean of the first tenth of the rows).
    pub bound: f64,
    /// False when any row exceeds the bound; a diverging flow trips this
    /// long before the particles reach non-finite values.
    pub bounded: bool,
}

/// Extracts the moment column and grades it against the stability bound.
pub fn moment_trace(trace: &FlowTrace) -> MomentTrace {
    let series: Vec<(f64, f64)> = trace.rows().iter().map(|r| (r.s, r.moment_q)).collect();
    if series.is_empty() {
        return MomentTrace { series, bound: f64::NAN, bounded: true };
    }
    let head = series.len().div_ceil(10);
    let plateau = series[..head].iter().map(|r| r.1).sum::<f64>() / head as f64;
    let bound = 2.0 * series[0].1.max(plateau);
    let bounded = !series.iter().any(|r| r.1 > bound);
    MomentTrace { series, bound, bounded }
}

/// Conditional action clouds at one time node: the pooled particles of all
/// outer paths, with one Nadaraya-Watson weight column per query state.
#[derive(Debug, Clone)]
pub struct NodeProjection {
    /// Pooled particles; path j's cloud occupies rows `j*N .. (j+1)*N`.
    pub points: Array2<f64>,
    /// `weights[e][row]`: weight of a pooled row at query e, summing to 1.
    pub weights: Vec<Vec<f64>>,
    /// Per query: every kernel weight underflowed, so the nearest path in
    /// the bandwidth-scaled metric took all the mass.
    pub fallback: Vec<bool>,
}

/// Estimates the control conditioned on the state, `nu(. | X_k = x)`, by
/// Nadaraya-Watson weighting of whole path clouds: paths whose state at
/// node k sits near the query contribute their cloud with Gaussian kernel
/// weight. Returns one [`NodeProjection`] per time node.
///
/// `bandwidth` overrides the per-coordinate Silverman choice computed from
/// the node's state sample when given.
pub fn markov_projection(
    control: &ParticleControl,
    traj: &ForwardPaths,
    bandwidth: Option<f64>,
    queries: ArrayView2<'_, f64>,
) -> Result<Vec<NodeProjection>> {
    let (m, k_steps, n, p) =
        (control.outer(), control.steps(), control.inner(), control.action_dim());
    if m < PROJECTION_MIN_PATHS {
        return Err(Error::InvalidParam(format!(
            "conditional estimate needs at least {PROJECTION_MIN_PATHS} outer paths, got {m}"
        )));
    }
    let d = traj.states().shape()[2];
    if traj.paths() != m || traj.grid().steps() != k_steps {
        return Err(Error::Shape("control and forward paths disagree on (paths, steps)".into()));
    }
    if queries.ncols() != d || queries.nrows() == 0 {
        return Err(Error::Shape(format!(
            "queries must be (n, {d}) with at least one row, got {:?}",
            queries.shape()
        )));
    }
    if let Some(h) = bandwidth {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidParam(format!("bandwidth must be positive, got {h}")));
        }
    }

    let theta = control.theta();
    let mut nodes = Vec::with_capacity(k_steps);
    let mut path_w = vec![0.0; m];
    for k in 0..k_steps {
        let mut points = Array2::zeros((m * n, p));
        for j in 0..m {
            for i in 0..n {
                for l in 0..p {
                    points[(j * n + i, l)] = theta[(j, k, i, l)];
                }
            }
        }
        let mut xs = Array2::zeros((m, d));
        for j in 0..m {
            xs.row_mut(j).iter_mut().zip(traj.state(j, k)).for_each(|(o, v)| *o = *v);
        }
        let hs = match bandwidth {
            Some(h) => vec![h; d],
            None => silverman_bandwidths(&Cloud::from_points(xs.view())),
        };
        let mut weights = Vec::with_capacity(queries.nrows());
        let mut fallback = Vec::with_capacity(queries.nrows());
        for q in queries.rows() {
            let fb = node_weights(xs.view(), &hs, q.as_slice().expect("query row"), &mut path_w);
            let mut row_w = vec![0.0; m * n];
            for j in 0..m {
                let w = path_w[j] / n as f64;
                row_w[j * n..(j + 1) * n].fill(w);
            }
            weights.push(row_w);
            fallback.push(fb);
        }
        nodes.push(NodeProjection { points, weights, fallback });
    }
    Ok(nodes)
}

/// Normalized Gaussian kernel weights of every path's state against one
/// query. Returns true when all kernels underflowed and the nearest path
/// was given the full weight instead.
fn node_weights(xs: ArrayView2<'_, f64>, hs: &[f64], query: &[f64], w: &mut [f64]) -> bool {
    let m = xs.nrows();
    let mut total = 0.0;
    let mut best = (0usize, f64::INFINITY);
    for j in 0..m {
        let mut dist2 = 0.0;
        for (l, q) in query.iter().enumerate() {
            let z = (xs[(j, l)] - q) / hs[l];
            dist2 += z * z;
        }
        if dist2 < best.1 {
            best = (j, dist2);
        }
        w[j] = (-0.5 * dist2).exp();
        total += w[j];
    }
    if total > 0.0 {
        for wj in w.iter_mut() {
            *wj /= total;
        }
        false
    } else {
        w.fill(0.0);
        w[best.0] = 1.0;
        true
    }
}

/// Replaces each path's clouds with draws from the conditional cloud at
/// the path's own state, giving a state-feedback control on the same grid.
/// Returns the projected control and whether any node hit the
/// nearest-path fallback. Resampling uses one ChaCha stream per outer
/// path, so the result does not depend on evaluation order.
pub fn project_control(
    control: &ParticleControl,
    traj: &ForwardPaths,
    bandwidth: Option<f64>,
    seed: u64,
) -> Result<(ParticleControl, bool)> {
    let (m, k_steps, n, p) =
        (control.outer(), control.steps(), control.inner(), control.action_dim());
    if m < PROJECTION_MIN_PATHS {
        return Err(Error::InvalidParam(format!(
            "conditional estimate needs at least {PROJECTION_MIN_PATHS} outer paths, got {m}"
        )));
    }
    if traj.paths() != m || traj.grid().steps() != k_steps {
        return Err(Error::Shape("control and forward paths disagree on (paths, steps)".into()));
    }
    if let Some(h) = bandwidth {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidParam(format!("bandwidth must be positive, got {h}")));
        }
    }
    let d = traj.states().shape()[2];
    let theta = control.theta();
    let mut rngs: Vec<ChaCha8Rng> = (0..m)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            rng
        })
        .collect();

    let mut out = Array4::zeros((m, k_steps, n, p));
    let mut path_w = vec![0.0; m];
    let mut row_w = vec![0.0; m * n];
    let mut any_fallback = false;
    for k in 0..k_steps {
        let mut points = Array2::zeros((m * n, p));
        for j in 0..m {
            for i in 0..n {
                for l in 0..p {
                    points[(j * n + i, l)] = theta[(j, k, i, l)];
                }
            }
        }
        let mut xs = Array2::zeros((m, d));
        for j in 0..m {
            xs.row_mut(j).iter_mut().zip(traj.state(j, k)).for_each(|(o, v)| *o = *v);
        }
        let hs = match bandwidth {
            Some(h) => vec![h; d],
            None => silverman_bandwidths(&Cloud::from_points(xs.view())),
        };
        for j in 0..m {
            any_fallback |= node_weights(xs.view(), &hs, traj.state(j, k), &mut path_w);
            for jj in 0..m {
                row_w[jj * n..(jj + 1) * n].fill(path_w[jj]);
            }
            let draw = resample_weighted(points.view(), &row_w, n, &mut rngs[j]);
            for i in 0..n {
                for l in 0..p {
                    out[(j, k, i, l)] = draw[(i, l)];
                }
            }
        }
    }
    ParticleControl::new(out, control.q_metric()).map(|c| (c, any_fallback))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::{simulate_forward, solve_adjoint, AdjointMode};
    use crate::flow::{run_flow, TraceRow};
    use crate::measure::InitSampler;
    use crate::noise::TimeGrid;
    use crate::objective::evaluate_objective;
    use crate::problem::{test_problems, LqParams};
    use ndarray::Array3;

    /// Costate pinned at 1 everywhere: no state feedback, unit terminal
    /// slope. The stationary law at sigma = 1 is then N(-2/3, 1/3).
    fn unit_costate_params() -> LqParams {
        LqParams {
            b: 0.0,
            c: 1.0,
            q_run: 0.0,
            r_run: 1.0,
            g_term_quad: 0.0,
            g_term_lin: 1.0,
            gamma: 1.0,
        }
    }

    fn zero_params() -> LqParams {
        LqParams {
            b: 0.0,
            c: 0.0,
            q_run: 0.0,
            r_run: 0.0,
            g_term_quad: 0.0,
            g_term_lin: 0.0,
            gamma: 1.0,
        }
    }

    struct Bundle {
        control: ParticleControl,
        traj: ForwardPaths,
        adjoint: AdjointPaths,
    }

    fn bundle(
        spec: &Problem,
        params: LqParams,
        init: &InitSampler,
        m: usize,
        k: usize,
        n: usize,
        seed: u64,
    ) -> Bundle {
        let control = ParticleControl::sample(init, m, k, n, 1, 2.0, seed).unwrap();
        let grid = TimeGrid::new(1.0, k).unwrap();
        let noise = BrownianPaths::sample(grid, m, 1, seed + 1).unwrap();
        let traj = simulate_forward(spec, &control, &noise, &[0.0]).unwrap();
        let adjoint =
            solve_adjoint(spec, &AdjointMode::Riccati(params), &control, &traj, &noise).unwrap();
        Bundle { control, traj, adjoint }
    }

    #[test]
    fn default_grid_is_uniform_over_the_window() {
        let grid = default_action_grid();
        assert_eq!(grid.len(), 1024);
        assert_eq!(grid[0], -8.0);
        assert!((grid[1023] - 8.0).abs() < 1e-12);
        let step = grid[1] - grid[0];
        for w in grid.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_problem_cloud_matches_the_prior_density() {
        let spec = test_problems::zero_problem(1, 1);
        let init = InitSampler::Gaussian { mean: vec![0.0], sd: 1.0 };
        let b = bundle(&spec, zero_params(), &init, 4, 1, 4096, 11);
        let out =
            gibbs_residual_over(&spec, &b.control, &b.traj, &b.adjoint, 1.0, &default_action_grid())
                .unwrap();
        assert_eq!(out.per_node.shape(), [4, 1]);
        assert!(out.aggregate < 0.05, "residual vs prior {}", out.aggregate);
    }

    #[test]
    fn point_mass_cloud_is_flagged_far() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let init = InitSampler::PointMass(vec![3.0]);
        let b = bundle(&spec, params, &init, 4, 2, 64, 13);
        let out =
            gibbs_residual_over(&spec, &b.control, &b.traj, &b.adjoint, 1.0, &default_action_grid())
                .unwrap();
        assert!(out.aggregate > 0.9, "point mass residual {}", out.aggregate);
        assert!(out.aggregate <= 1.0 + 1e-9);
    }

    #[test]
    fn stationary_cloud_passes_both_density_diagnostics() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let init = InitSampler::Gaussian { mean: vec![-2.0 / 3.0], sd: (1.0_f64 / 3.0).sqrt() };
        let b = bundle(&spec, params, &init, 8, 4, 256, 17);
        let gibbs =
            gibbs_residual_over(&spec, &b.control, &b.traj, &b.adjoint, 1.0, &default_action_grid())
                .unwrap();
        assert!(gibbs.aggregate < 0.08, "stationary residual {}", gibbs.aggregate);
        let spread =
            foc_flatness_over(&spec, &b.control, &b.traj, &b.adjoint, 1.0, DEFAULT_PROBE_QUANTILES)
                .unwrap();
        assert!(spread < 0.10, "stationary spread {spread}");
    }

    #[test]
    fn prior_cloud_shows_tenfold_first_order_excess() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let stationary = InitSampler::Gaussian { mean: vec![-2.0 / 3.0], sd: (1.0_f64 / 3.0).sqrt() };
        let prior = InitSampler::Gaussian { mean: vec![0.0], sd: 1.0 };
        let far = bundle(&spec, params, &prior, 8, 2, 256, 19);
        let near = bundle(&spec, params, &stationary, 8, 2, 256, 19);
        let spread_far =
            foc_flatness_over(&spec, &far.control, &far.traj, &far.adjoint, 1.0, DEFAULT_PROBE_QUANTILES)
                .unwrap();
        let spread_near =
            foc_flatness_over(&spec, &near.control, &near.traj, &near.adjoint, 1.0, DEFAULT_PROBE_QUANTILES)
                .unwrap();
        assert!(
            spread_far > 10.0 * spread_near,
            "far {spread_far} vs near {spread_near}"
        );
    }

    #[test]
    fn zero_problem_spread_is_kernel_noise_only() {
        let spec = test_problems::zero_problem(1, 1);
        let init = InitSampler::Gaussian { mean: vec![0.0], sd: 1.0 };
        let b = bundle(&spec, zero_params(), &init, 4, 1, 4096, 23);
        let spread =
            foc_flatness_over(&spec, &b.control, &b.traj, &b.adjoint, 1.0, DEFAULT_PROBE_QUANTILES)
                .unwrap();
        assert!(spread < 0.05, "spread at prior {spread}");
    }

    #[test]
    fn degenerate_cloud_poisons_the_spread() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let init = InitSampler::PointMass(vec![0.5]);
        let b = bundle(&spec, params, &init, 2, 2, 16, 29);
        let spread =
            foc_flatness_over(&spec, &b.control, &b.traj, &b.adjoint, 1.0, DEFAULT_PROBE_QUANTILES)
                .unwrap();
        assert!(spread.is_infinite());
    }

    #[test]
    fn density_diagnostics_reject_bad_inputs() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let init = InitSampler::Gaussian { mean: vec![0.0], sd: 1.0 };
        let b = bundle(&spec, params, &init, 2, 1, 16, 31);
        let grid = default_action_grid();
        assert!(gibbs_residual_over(&spec, &b.control, &b.traj, &b.adjoint, 0.0, &grid).is_err());
        assert!(foc_flatness_over(&spec, &b.control, &b.traj, &b.adjoint, 0.0, DEFAULT_PROBE_QUANTILES)
            .is_err());
        assert!(foc_flatness_over(&spec, &b.control, &b.traj, &b.adjoint, 1.0, &[]).is_err());
        assert!(foc_flatness_over(&spec, &b.control, &b.traj, &b.adjoint, 1.0, &[1.5]).is_err());
        assert!(gibbs_residual_over(&spec, &b.control, &b.traj, &b.adjoint, 1.0, &[0.0]).is_err());
        let wide = test_problems::zero_problem(1, 2);
        let control2 = ParticleControl::sample(
            &InitSampler::Gaussian { mean: vec![0.0, 0.0], sd: 1.0 },
            2,
            1,
            16,
            2,
            2.0,
            31,
        )
        .unwrap();
        let grid1 = TimeGrid::new(1.0, 1).unwrap();
        let noise = BrownianPaths::sample(grid1, 2, 1, 32).unwrap();
        let traj2 = simulate_forward(&wide, &control2, &noise, &[0.0]).unwrap();
        let adj2 =
            solve_adjoint(&wide, &AdjointMode::Riccati(zero_params()), &control2, &traj2, &noise);
        // The scalar Riccati solver rejects p = 2 before the diagnostics
        // even see it; drive them with the p = 1 adjoint arrays instead.
        assert!(adj2.is_err());
        assert!(matches!(
            gibbs_residual_over(&wide, &control2, &traj2, &b.adjoint, 1.0, &grid),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            foc_flatness_over(&wide, &control2, &traj2, &b.adjoint, 1.0, DEFAULT_PROBE_QUANTILES),
            Err(Error::Unsupported(_))
        ));
    }

    fn coupling_config(total_s: f64) -> FlowConfig {
        FlowConfig {
            sigma: 1.0,
            ds: 2e-3,
            total_s,
            refresh_stride: 1,
            checkpoint_stride: 100,
            adjoint: AdjointMode::Riccati(unit_costate_params()),
            inner_seed: 41,
        }
    }

    #[test]
    fn coupled_flows_from_equal_starts_stay_equal() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let init = InitSampler::Gaussian { mean: vec![0.0], sd: 1.0 };
        let a = ParticleControl::sample(&init, 4, 2, 32, 1, 2.0, 43).unwrap();
        let b = ParticleControl::sample(&init, 4, 2, 32, 1, 2.0, 43).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let noise = BrownianPaths::sample(grid, 4, 1, 44).unwrap();
        let est = contraction_estimate(
            &spec,
            &coupling_config(0.05),
            &noise,
            a,
            b,
            &[0.0],
            &[0.0, 0.025, 0.05],
        )
        .unwrap();
        assert_eq!(est.series.len(), 3);
        for &(_, rho) in &est.series {
            assert_eq!(rho, 0.0);
        }
        assert!(est.rate.is_nan());
    }

    #[test]
    fn coupled_flows_contract_at_the_convex_rate() {
        let params = unit_costate_params();
        let spec = Problem::linear_quadratic(params).unwrap();
        let a = ParticleControl::sample(
            &InitSampler::Gaussian { mean: vec![0.0], sd: 1.0 },
            4,
            2,
            32,
            1,
            2.0,
            47,
        )
        .unwrap();
        let b = ParticleControl::sample(
            &InitSampler::Gaussian { mean: vec![3.0], sd: 1.0 },
            4,
            2,
            32,
            1,
            2.0,
            48,
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let noise = BrownianPaths::sample(grid, 4, 1, 49).unwrap();
        let probes: Vec<f64> = (0..=20).map(|i| 0.1 * i as f64).collect();
        let est =
            contraction_estimate(&spec, &coupling_config(2.0), &noise, a, b, &[0.0], &probes)
                .unwrap();
        // Synchronous coupling of the strongly convex problem contracts at
        // r + sigma^2/2 = 1.5; the Euler chain realizes
        // -ln(1 - 1.5 ds)/ds of it.
        assert!((est.rate - 1.5).abs() < 0.225, "fitted rate {}", est.rate);
        let rho0 = est.series[0].1;
        let rho_end = est.series.last().unwrap().1;
        assert!(rho_end / rho0 <= 0.1, "ratio {}", rho_end / rho0);
        for w in est.series.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-10, "rho rose: {} -> {}", w[0].1, w[1].1);
        }
    }

    #[test]
    fn contraction_csv_roundtrips_losslessly() {
        let dir = std::env::temp_dir().join("mfld_contraction_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("series.csv");
        let series = vec![(0.0, 1.5), (0.5, 7.25e-3), (1.0, 1.0e-12)];
        write_contraction_csv(&series, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("s,rho_q"));
        for (&(s, r), line) in series.iter().zip(lines) {
            let mut cols = line.split(',');
            let s_back: f64 = cols.next().unwrap().parse().unwrap();
            let r_back: f64 = cols.next().unwrap().parse().unwrap();
            assert_eq!(s_back.to_bits(), s.to_bits());
            assert_eq!(r_back.to_bits(), r.to_bits());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    fn row(s: f64, j: f64, se: f64, moment: f64) -> TraceRow {
        TraceRow {
            s,
            j_sigma: j,
            j_stderr: se,
            moment_q: moment,
            foc_spread: f64::NAN,
            gibbs_residual: f64::NAN,
            rho_to_ref: 0.0,
        }
    }

    #[test]
    fn monotonicity_report_grades_synthetic_traces() {
        let falling = FlowTrace::from_rows(vec![
            row(0.0, 5.0, 0.0, 1.0),
            row(1.0, 4.0, 0.0, 1.0),
            row(2.0, 3.0, 0.0, 1.0),
        ]);
        let rep = monotonicity_report(&falling);
        assert_eq!((rep.pairs, rep.violations), (2, 0));
        assert_eq!(rep.max_excess, 0.0);

        let flat = FlowTrace::from_rows(vec![
            row(0.0, 2.0, 0.1, 1.0),
            row(1.0, 2.1, 0.1, 1.0),
            row(2.0, 1.95, 0.1, 1.0),
        ]);
        assert_eq!(monotonicity_report(&flat).violations, 0);

        let jump = FlowTrace::from_rows(vec![
            row(0.0, 1.0, 0.01, 1.0),
            row(1.0, 2.0, 0.01, 1.0),
        ]);
        let rep = monotonicity_report(&jump);
        assert_eq!(rep.violations, 1);
        assert!((rep.max_excess - 0.96).abs() < 1e-12);
    }

    #[test]
    fn moment_trace_grades_synthetic_traces() {
        let flat = FlowTrace::from_rows(vec![
            row(0.0, 0.0, 0.0, 1.0),
            row(1.0, 0.0, 0.0, 1.1),
            row(2.0, 0.0, 0.0, 0.9),
        ]);
        let mt = moment_trace(&flat);
        assert!(mt.bounded);
        assert_eq!(mt.bound, 2.0);
        assert_eq!(mt.series.len(), 3);

        let blowup = FlowTrace::from_rows(vec![
            row(0.0, 0.0, 0.0, 1.0),
            row(1.0, 0.0, 0.0, 1.2),
            row(2.0, 0.0, 0.0, 5.0),
        ]);
        assert!(!moment_trace(&blowup).bounded);
    }

    #[test]
    fn unstable_attraction_trips_the_moment_flag() {
        // r + sigma^2/2 < 0 makes the particle attraction repulsive; the
        // moment column must flag the resulting exponential growth.
        let params = LqParams { r_run: -2.0, ..unit_costate_params() };
        let spec = Problem::linear_quadratic(params).unwrap();
        let config = FlowConfig {
            sigma: 1.0,
            ds: 5e-3,
            total_s: 2.0,
            refresh_stride: 1,
            checkpoint_stride: 50,
            adjoint: AdjointMode::Riccati(params),
            inner_seed: 53,
        };
        let init = ParticleControl::sample(
            &InitSampler::Gaussian { mean: vec![0.0], sd: 1.0 },
            4,
            2,
            32,
            1,
            2.0,
            54,
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let noise = BrownianPaths::sample(grid, 4, 1, 55).unwrap();
        let (trace, _) = run_flow(&spec, &config, &noise, init, &[0.0]).unwrap();
        let mt = moment_trace(&trace);
        assert!(!mt.bounded, "series end {:?}", mt.series.last());
    }

    /// Control whose blocks repeat across outer paths while states vary,
    /// so conditioning on the state cannot change the cloud.
    fn vacuous_fixture(m: usize, k: usize, n: usize) -> (ParticleControl, ForwardPaths) {
        let template = ParticleControl::sample(
            &InitSampler::Gaussian { mean: vec![0.4], sd: 0.7 },
            1,
            k,
            n,
            1,
            2.0,
            59,
        )
        .unwrap();
        let mut theta = Array4::zeros((m, k, n, 1));
        for j in 0..m {
            for kk in 0..k {
                for i in 0..n {
                    theta[(j, kk, i, 0)] = template.theta()[(0, kk, i, 0)];
                }
            }
        }
        let control = ParticleControl::new(theta, 2.0).unwrap();
        let grid = TimeGrid::new(1.0, k).unwrap();
        let mut x = Array3::zeros((m, k + 1, 1));
        for j in 0..m {
            for kk in 0..=k {
                x[(j, kk, 0)] = -1.0 + 2.0 * j as f64 / (m - 1) as f64 + 0.1 * kk as f64;
            }
        }
        (control, ForwardPaths::from_states(x, grid))
    }

    #[test]
    fn identical_clouds_make_conditioning_vacuous() {
        let (control, traj) = vacuous_fixture(32, 2, 16);
        let queries = Array2::from_shape_vec((2, 1), vec![0.7, -0.3]).unwrap();
        let nodes = markov_projection(&control, &traj, None, queries.view()).unwrap();
        assert_eq!(nodes.len(), 2);
        for (k, node) in nodes.iter().enumerate() {
            let cloud = control.cloud(0, k);
            for (w, fb) in node.weights.iter().zip(&node.fallback) {
                assert!(!fb);
                let total: f64 = w.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                let mean: f64 =
                    w.iter().enumerate().map(|(r, wi)| wi * node.points[(r, 0)]).sum();
                let m2: f64 = w
                    .iter()
                    .enumerate()
                    .map(|(r, wi)| wi * node.points[(r, 0)] * node.points[(r, 0)])
                    .sum();
                assert!((mean - cloud.mean()[0]).abs() < 1e-12);
                assert!((m2 - cloud.moment2()).abs() < 1e-12);
            }
        }
    }

    /// Half the paths sit at state -1 with clouds at -1, half at +1 with
    /// clouds at +1.
    fn clustered_fixture() -> (ParticleControl, ForwardPaths) {
        let (m, k, n) = (32, 1, 8);
        let mut theta = Array4::zeros((m, k, n, 1));
        let mut x = Array3::zeros((m, k + 1, 1));
        for j in 0..m {
            let side = if j < m / 2 { -1.0 } else { 1.0 };
            for i in 0..n {
                theta[(j, 0, i, 0)] = side;
            }
            for kk in 0..=k {
                x[(j, kk, 0)] = side;
            }
        }
        let control = ParticleControl::new(theta, 2.0).unwrap();
        let grid = TimeGrid::new(1.0, k).unwrap();
        (control, ForwardPaths::from_states(x, grid))
    }

    #[test]
    fn clustered_paths_project_onto_their_cluster() {
        let (control, traj) = clustered_fixture();
        let queries = Array2::from_shape_vec((2, 1), vec![-1.0, 1.0]).unwrap();
        let nodes = markov_projection(&control, &traj, None, queries.view()).unwrap();
        let node = &nodes[0];
        let mean_at = |w: &[f64]| -> f64 {
            w.iter().enumerate().map(|(r, wi)| wi * node.points[(r, 0)]).sum()
        };
        assert!(!node.fallback[0] && !node.fallback[1]);
        assert!(mean_at(&node.weights[0]) < -0.999, "mean at -1: {}", mean_at(&node.weights[0]));
        assert!(mean_at(&node.weights[1]) > 0.999, "mean at +1: {}", mean_at(&node.weights[1]));
    }

    #[test]
    fn distant_query_falls_back_to_the_nearest_path() {
        let (control, traj) = clustered_fixture();
        let queries = Array2::from_shape_vec((1, 1), vec![1.0e6]).unwrap();
        let nodes = markov_projection(&control, &traj, None, queries.view()).unwrap();
        let node = &nodes[0];
        assert!(node.fallback[0]);
        let total: f64 = node.weights[0].iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mean: f64 =
            node.weights[0].iter().enumerate().map(|(r, wi)| wi * node.points[(r, 0)]).sum();
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn projection_rejects_thin_path_samples() {
        let (control, traj) = vacuous_fixture(8, 1, 4);
        let queries = Array2::from_shape_vec((1, 1), vec![0.0]).unwrap();
        assert!(matches!(
            markov_projection(&control, &traj, None, queries.view()),
            Err(Error::InvalidParam(_))
        ));
        assert!(project_control(&control, &traj, None, 1).is_err());
    }

    #[test]
    fn state_feedback_projection_never_raises_the_objective() {
        let params = LqParams {
            b: 0.3,
            c: 0.4,
            q_run: 0.5,
            r_run: 1.0,
            g_term_quad: 1.0,
            g_term_lin: 0.0,
            gamma: 1.0,
        };
        let spec = Problem::linear_quadratic(params).unwrap();
        let init = InitSampler::Gaussian { mean: vec![0.0], sd: 1.0 };
        let control = ParticleControl::sample(&init, 64, 10, 32, 1, 2.0, 61).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let noise = BrownianPaths::sample(grid, 64, 1, 62).unwrap();
        let traj = simulate_forward(&spec, &control, &noise, &[0.0]).unwrap();
        let (projected, fb) = project_control(&control, &traj, None, 63).unwrap();
        assert!(!fb);
        let base = evaluate_objective(&spec, &control, &noise, &[0.0], 0.0).unwrap();
        let cond = evaluate_objective(&spec, &projected, &noise, &[0.0], 0.0).unwrap();
        assert!(
            cond.value <= base.value + 3.0 * (base.stderr + cond.stderr),
            "projected {} vs open-loop {} (se {} / {})",
            cond.value,
            base.value,
            cond.stderr,
            base.stderr
        );
    }
}
