//! Forward state simulation and the adjoint (costate) solvers.
//!
//! The forward process follows the Euler scheme
//! `X_{k+1} = X_k + Phi(t_k, X_k, cloud(j,k)) dt + Gamma dW_k` from a
//! deterministic start `xi`. The adjoint pair `(Y, Z)` solves the backward
//! equation with terminal condition `grad g(X_K)` and driver
//! `grad_x Phi^T Y + grad_x F`; two solvers are provided:
//!
//! * [`solve_adjoint_riccati`] - closed form for the linear-quadratic
//!   family: `Y_k = P(t_k) X_k + p_k` where `P' = -2 b P - q_run` with
//!   `P(T) = g_term_quad`, and `p' = -b p - P c mean_k` with
//!   `p(T) = g_term_lin`; `Z_k = P(t_k) Gamma`. Both ordinary differential
//!   equations are integrated by Runge-Kutta 4 with fixed substeps, so the
//!   values on the grid are accurate to ~1e-12 and stable under grid
//!   refinement to well below 1e-8.
//! * [`solve_adjoint_regression`] - least-squares Monte Carlo: backward in
//!   time, the conditional expectation of `Y_{k+1}` given `X_k` is fit on a
//!   polynomial basis, one explicit Euler step applies the driver, and `Z`
//!   is the regressed `Y_{k+1} dW^T / dt`. A small ridge keeps the normal
//!   equations well posed even on degenerate slices (for example `X_0`
//!   constant); if factorization still fails the ridge is boosted and the
//!   result flagged.

use nalgebra::{Cholesky, DMatrix};
use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::measure::ParticleControl;
use crate::noise::{BrownianPaths, TimeGrid};
use crate::problem::{LqParams, Problem};

/// RK4 substeps per grid interval in the Riccati integration. Eight
/// substeps put the fourth-order error near 1e-12 at desk-scale grids and
/// provide the half-grid nodes the `p` equation's RK4 stages need.
const RICCATI_SUBSTEPS: usize = 8;

/// Simulated forward states: `x[(j, k, i)]` is coordinate i at node k on
/// outer path j, for k = 0..=K.
#[derive(Debug, Clone)]
pub struct ForwardPaths {
    x: Array3<f64>,
    grid: TimeGrid,
}

impl ForwardPaths {
    /// Wraps precomputed states; `x` must be `(paths, steps + 1, d)` on
    /// the given grid.
    #[cfg(test)]
    pub(crate) fn from_states(x: Array3<f64>, grid: TimeGrid) -> Self {
        debug_assert_eq!(x.shape()[1], grid.steps() + 1);
        ForwardPaths { x, grid }
    }

    pub fn paths(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn states(&self) -> &Array3<f64> {
        &self.x
    }

    /// State of path j at node k as a contiguous slice.
    pub fn state(&self, j: usize, k: usize) -> &[f64] {
        let d = self.x.shape()[2];
        let flat = self.x.as_slice().expect("forward states are standard layout");
        let base = (j * (self.grid.steps() + 1) + k) * d;
        &flat[base..base + d]
    }
}

/// Adjoint processes on the same grid. `ridge_fallback` records whether the
/// regression solver had to boost its ridge to factor a normal matrix.
#[derive(Debug, Clone)]
pub struct AdjointPaths {
    pub y: Array3<f64>,
    pub z: Array4<f64>,
    pub ridge_fallback: bool,
}

impl AdjointPaths {
    /// Costate of path j at node k.
    pub fn costate(&self, j: usize, k: usize) -> &[f64] {
        let d = self.y.shape()[2];
        let flat = self.y.as_slice().expect("adjoint states are standard layout");
        let base = (j * self.y.shape()[1] + k) * d;
        &flat[base..base + d]
    }
}

/// Which backward solver produces the adjoint pair.
#[derive(Debug, Clone)]
pub enum AdjointMode {
    /// Closed-form backward ordinary differential equations; only valid
    /// when the problem is the linear-quadratic family with these
    /// parameters.
    Riccati(LqParams),
    /// Least-squares Monte Carlo on a polynomial basis of the state.
    Regression { degree: usize, ridge: f64 },
}

impl AdjointMode {
    /// The regression solver with its customary settings: cubic basis,
    /// ridge 1e-8.
    pub fn regression_default() -> Self {
        AdjointMode::Regression { degree: 3, ridge: 1e-8 }
    }
}

/// Dispatches to the solver selected by `mode`.
pub fn solve_adjoint(
    spec: &Problem,
    mode: &AdjointMode,
    control: &ParticleControl,
    traj: &ForwardPaths,
    noise: &BrownianPaths,
) -> Result<AdjointPaths> {
    match mode {
        AdjointMode::Riccati(params) => solve_adjoint_riccati(params, traj, control),
        AdjointMode::Regression { degree, ridge } => {
            solve_adjoint_regression(spec, control, traj, noise, *degree, *ridge)
        }
    }
}

/// Runs the Euler scheme under the given control. Aborts with the first
/// non-finite state, naming its path and node.
pub fn simulate_forward(
    spec: &Problem,
    control: &ParticleControl,
    noise: &BrownianPaths,
    xi: &[f64],
) -> Result<ForwardPaths> {
    let grid = noise.grid();
    let (m, k_steps, d, w) = (noise.paths(), grid.steps(), spec.state_dim(), spec.noise_dim());
    if xi.len() != d {
        return Err(Error::Shape(format!("xi has dimension {}, state has {d}", xi.len())));
    }
    if control.outer() != m || control.steps() != k_steps {
        return Err(Error::Shape(format!(
            "control is {}x{} (outer x steps), noise is {m}x{k_steps}",
            control.outer(),
            control.steps()
        )));
    }
    if control.action_dim() != spec.action_dim() {
        return Err(Error::Shape("control and problem disagree on the action dimension".into()));
    }
    if noise.dim() != w {
        return Err(Error::Shape("noise bundle and problem disagree on the noise dimension".into()));
    }
    let gamma = spec.diffusion();
    let dt = grid.dt();
    let mut x = Array3::zeros((m, k_steps + 1, d));
    let mut drift = vec![0.0; d];
    for j in 0..m {
        for (i, &v) in xi.iter().enumerate() {
            x[(j, 0, i)] = v;
        }
        for k in 0..k_steps {
            let cloud = control.cloud(j, k);
            let t = grid.node(k);
            // Read the current state through a copy; the borrow checker
            // cannot see the disjointness of rows k and k+1.
            for i in 0..d {
                drift[i] = x[(j, k, i)];
            }
            let cur = drift.clone();
            spec.drift(t, &cur, &cloud, &mut drift);
            for i in 0..d {
                let mut next = x[(j, k, i)] + drift[i] * dt;
                for l in 0..w {
                    next += gamma[(i, l)] * noise.increments()[(j, k, l)];
                }
                if !next.is_finite() {
                    return Err(Error::NonFinite(format!("x[j={j},k={}]", k + 1)));
                }
                x[(j, k + 1, i)] = next;
            }
        }
    }
    Ok(ForwardPaths { x, grid })
}

// === Riccati adjoint ===

/// The scalar backward curve `P(t)` on the grid and half-grid.
pub struct RiccatiCurve {
    /// `P(t_k)` for k = 0..=K.
    pub full: Vec<f64>,
    /// `P(t_k + dt/2)` for k = 0..K.
    pub half: Vec<f64>,
}

/// Integrates `P' = -2 b P - q_run` backward from `P(T) = g_term_quad`
/// by RK4 with [`RICCATI_SUBSTEPS`] substeps per grid interval.
pub fn riccati_curve(params: &LqParams, grid: TimeGrid) -> RiccatiCurve {
    let sub = RICCATI_SUBSTEPS;
    let n = grid.steps() * sub;
    let h = grid.dt() / sub as f64;
    // Backward time tau = T - t: dP/dtau = 2 b P + q_run.
    let f = |p: f64| 2.0 * params.b * p + params.q_run;
    let mut values = vec![0.0; n + 1]; // values[i] = P at t = i * h
    values[n] = params.g_term_quad;
    for i in (0..n).rev() {
        let p = values[i + 1];
        let k1 = f(p);
        let k2 = f(p + 0.5 * h * k1);
        let k3 = f(p + 0.5 * h * k2);
        let k4 = f(p + h * k3);
        values[i] = p + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
    }
    let full = (0..=grid.steps()).map(|k| values[k * sub]).collect();
    let half = (0..grid.steps()).map(|k| values[k * sub + sub / 2]).collect();
    RiccatiCurve { full, half }
}

/// Closed-form adjoint for the linear-quadratic problem. The offset `p`
/// couples to the control only through the per-node cloud means, which the
/// Euler forward scheme treats as constant on each interval; its RK4 stages
/// therefore use the half-grid `P` values and the interval's own mean.
pub fn solve_adjoint_riccati(
    params: &LqParams,
    traj: &ForwardPaths,
    control: &ParticleControl,
) -> Result<AdjointPaths> {
    params.validate()?;
    let grid = traj.grid();
    let (m, k_steps) = (traj.paths(), grid.steps());
    if control.outer() != m || control.steps() != k_steps {
        return Err(Error::Shape("control and trajectory bundle have different shapes".into()));
    }
    if traj.states().shape()[2] != 1 || control.action_dim() != 1 {
        return Err(Error::Unsupported("the closed-form adjoint covers scalar state and action".into()));
    }
    let curve = riccati_curve(params, grid);
    let dt = grid.dt();
    let mut y = Array3::zeros((m, k_steps + 1, 1));
    let mut z = Array4::zeros((m, k_steps + 1, 1, 1));
    for j in 0..m {
        let mut p_off = params.g_term_lin;
        y[(j, k_steps, 0)] = curve.full[k_steps] * traj.state(j, k_steps)[0] + p_off;
        z[(j, k_steps, 0, 0)] = curve.full[k_steps] * params.gamma;
        for k in (0..k_steps).rev() {
            let mean_k = control.cloud(j, k).mean()[0];
            // Backward time: dp/dtau = b p + P(T - tau) c mean_k.
            let f = |p: f64, pc: f64| params.b * p + pc * params.c * mean_k;
            let k1 = f(p_off, curve.full[k + 1]);
            let k2 = f(p_off + 0.5 * dt * k1, curve.half[k]);
            let k3 = f(p_off + 0.5 * dt * k2, curve.half[k]);
            let k4 = f(p_off + dt * k3, curve.full[k]);
            p_off += dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
            let val = curve.full[k] * traj.state(j, k)[0] + p_off;
            if !val.is_finite() {
                return Err(Error::NonFinite(format!("y[j={j},k={k}]")));
            }
            y[(j, k, 0)] = val;
            z[(j, k, 0, 0)] = curve.full[k] * params.gamma;
        }
    }
    Ok(AdjointPaths { y, z, ridge_fallback: false })
}

// === Least-squares Monte Carlo adjoint ===

/// Exponent tuples of all monomials in `d` variables with total degree at
/// most `degree`, constant term first.
fn monomial_exponents(d: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; d];
    fn rec(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, coord: usize, remaining: u32) {
        if coord == cur.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=remaining {
            cur[coord] = e;
            rec(out, cur, coord + 1, remaining - e);
        }
        cur[coord] = 0;
    }
    rec(&mut out, &mut cur, 0, degree as u32);
    out.sort_by_key(|e| e.iter().sum::<u32>());
    out
}

fn eval_features(x: &[f64], exps: &[Vec<u32>], out: &mut [f64]) {
    for (o, e) in out.iter_mut().zip(exps) {
        let mut v = 1.0;
        for (xi, &ei) in x.iter().zip(e) {
            for _ in 0..ei {
                v *= xi;
            }
        }
        *o = v;
    }
}

/// Solves the normal equations `(G + ridge I) beta = rhs` for several right
/// hand sides, boosting the ridge by 1000 if the factorization fails.
/// Returns the coefficient matrix and whether the boost was needed.
fn solve_ridge(g: &DMatrix<f64>, rhs: &DMatrix<f64>, ridge: f64) -> Result<(DMatrix<f64>, bool)> {
    let b = g.nrows();
    let reg = g + DMatrix::identity(b, b) * ridge;
    if let Some(chol) = Cholesky::new(reg) {
        return Ok((chol.solve(rhs), false));
    }
    let boosted = g + DMatrix::identity(b, b) * (ridge * 1000.0);
    match Cholesky::new(boosted) {
        Some(chol) => Ok((chol.solve(rhs), true)),
        None => Err(Error::InvalidParam("regression normal matrix is not positive definite".into())),
    }
}

/// Backward regression solver for the adjoint pair.
///
/// `degree` is the total degree of the polynomial basis in the state
/// (cubic by default at call sites); `ridge` the Tikhonov weight on the
/// mean Gram matrix (1e-8 by default). One explicit Euler step applies the
/// driver per interval, with the driver evaluated at the regressed
/// conditional mean of `Y_{k+1}`; that conditional mean comes from a
/// second fit whose target has the fitted `Z dW` martingale increment
/// subtracted, a zero-mean control variate. The terminal `Z_K` is left at
/// the regression's boundary value zero, which no consumer reads.
pub fn solve_adjoint_regression(
    spec: &Problem,
    control: &ParticleControl,
    traj: &ForwardPaths,
    noise: &BrownianPaths,
    degree: usize,
    ridge: f64,
) -> Result<AdjointPaths> {
    let grid = traj.grid();
    let (m, k_steps, d, w) = (traj.paths(), grid.steps(), spec.state_dim(), spec.noise_dim());
    if noise.paths() != m || noise.grid().steps() != k_steps {
        return Err(Error::Shape("noise bundle and trajectory bundle have different shapes".into()));
    }
    if !(ridge > 0.0) {
        return Err(Error::InvalidParam(format!("ridge must be positive, got {ridge}")));
    }
    let dt = grid.dt();
    let exps = monomial_exponents(d, degree);
    let n_basis = exps.len();
    if m < 2 * n_basis {
        return Err(Error::InvalidParam(format!(
            "{m} paths cannot support {n_basis} basis functions"
        )));
    }

    let mut y = Array3::zeros((m, k_steps + 1, d));
    let mut z = Array4::zeros((m, k_steps + 1, d, w));
    let mut fallback = false;

    let mut term = vec![0.0; d];
    for j in 0..m {
        spec.terminal_grad(traj.state(j, k_steps), &mut term);
        for i in 0..d {
            y[(j, k_steps, i)] = term[i];
        }
    }

    let mut features = DMatrix::zeros(m, n_basis);
    let mut phi = vec![0.0; n_basis];
    let mut gxd = vec![0.0; d * d];
    let mut gxc = vec![0.0; d];
    for k in (0..k_steps).rev() {
        for j in 0..m {
            eval_features(traj.state(j, k), &exps, &mut phi);
            for (b, &v) in phi.iter().enumerate() {
                features[(j, b)] = v;
            }
        }
        let gram = features.transpose() * &features / m as f64;

        // Right-hand sides: d columns for Y_{k+1}, then d*w for Y_{k+1} dW^T / dt.
        let mut rhs = DMatrix::zeros(n_basis, d + d * w);
        for j in 0..m {
            for b in 0..n_basis {
                let f = features[(j, b)] / m as f64;
                for i in 0..d {
                    let yi = y[(j, k + 1, i)];
                    rhs[(b, i)] += f * yi;
                    for l in 0..w {
                        rhs[(b, d + i * w + l)] += f * yi * noise.increments()[(j, k, l)] / dt;
                    }
                }
            }
        }
        let (beta, boosted) = solve_ridge(&gram, &rhs, ridge)?;
        fallback |= boosted;

        // Refit the Y columns against the target with a fitted martingale
        // increment removed: E[Z dW | X_k] = 0, so the conditional mean is
        // untouched while the O(sqrt(dt)) part of the regression residual
        // cancels, which keeps the costate noise flat in the number of
        // time steps. The increment coefficients are cross-fitted on the
        // opposite half of the paths; reusing the same paths would let the
        // fit absorb sample noise correlated with the target and bias the
        // result by O(1/m).
        let use_cv = m >= 4 * n_basis;
        let mut beta_cv: [DMatrix<f64>; 2] =
            [DMatrix::zeros(n_basis, d * w), DMatrix::zeros(n_basis, d * w)];
        if use_cv {
            for fold in 0..2 {
                let rows: Vec<usize> = (fold..m).step_by(2).collect();
                let mf = rows.len() as f64;
                let mut gram_f = DMatrix::zeros(n_basis, n_basis);
                let mut rhs_f = DMatrix::zeros(n_basis, d * w);
                for &j in &rows {
                    let row = features.row(j);
                    for a in 0..n_basis {
                        for b in a..n_basis {
                            gram_f[(a, b)] += row[a] * row[b] / mf;
                        }
                        for i in 0..d {
                            for l in 0..w {
                                rhs_f[(a, i * w + l)] +=
                                    row[a] * y[(j, k + 1, i)] * noise.increments()[(j, k, l)] / dt / mf;
                            }
                        }
                    }
                }
                for a in 0..n_basis {
                    for b in 0..a {
                        gram_f[(a, b)] = gram_f[(b, a)];
                    }
                }
                let (bf, boosted_f) = solve_ridge(&gram_f, &rhs_f, ridge)?;
                fallback |= boosted_f;
                beta_cv[fold] = bf;
            }
        }
        let beta_y = if use_cv {
            let mut cv_vals = DMatrix::zeros(m, d);
            for j in 0..m {
                let row = features.row(j);
                let bcv = &beta_cv[1 - j % 2];
                for i in 0..d {
                    let mut zdw = 0.0;
                    for l in 0..w {
                        let zh: f64 =
                            (0..n_basis).map(|b| row[b] * bcv[(b, i * w + l)]).sum();
                        zdw += zh * noise.increments()[(j, k, l)];
                    }
                    cv_vals[(j, i)] = zdw;
                }
            }
            // Load the variate by the least-squares coefficient of the plain
            // fit's residuals on it. Targets the basis represents exactly
            // leave zero residuals and hence a zero loading, so the plain
            // fit is reproduced; a noisy increment fit shrinks the loading
            // below one, which keeps the refit from ever adding variance.
            let mut loading = vec![0.0; d];
            for i in 0..d {
                let mut num = 0.0;
                let mut den = 0.0;
                for j in 0..m {
                    let row = features.row(j);
                    let fit: f64 = (0..n_basis).map(|b| row[b] * beta[(b, i)]).sum();
                    num += (y[(j, k + 1, i)] - fit) * cv_vals[(j, i)];
                    den += cv_vals[(j, i)] * cv_vals[(j, i)];
                }
                if den > 0.0 && (num / den).is_finite() {
                    loading[i] = num / den;
                }
            }
            let mut rhs_y = DMatrix::zeros(n_basis, d);
            for j in 0..m {
                for i in 0..d {
                    let target = y[(j, k + 1, i)] - loading[i] * cv_vals[(j, i)];
                    for b in 0..n_basis {
                        rhs_y[(b, i)] += features[(j, b)] / m as f64 * target;
                    }
                }
            }
            let (refit, boosted_y) = solve_ridge(&gram, &rhs_y, ridge)?;
            fallback |= boosted_y;
            refit
        } else {
            beta.columns(0, d).into_owned()
        };

        let t = grid.node(k);
        let mut y_hat = vec![0.0; d];
        for j in 0..m {
            let row = features.row(j);
            for i in 0..d {
                y_hat[i] = (0..n_basis).map(|b| row[b] * beta_y[(b, i)]).sum();
                for l in 0..w {
                    z[(j, k, i, l)] = (0..n_basis).map(|b| row[b] * beta[(b, d + i * w + l)]).sum();
                }
            }
            let cloud = control.cloud(j, k);
            let xk = traj.state(j, k);
            spec.grad_x_drift(t, xk, &cloud, &mut gxd);
            spec.grad_x_cost(t, xk, &cloud, &mut gxc);
            for i in 0..d {
                // driver_i = sum_r dPhi_r/dx_i * Y_r + dF/dx_i
                let drive: f64 = (0..d).map(|r| gxd[r * d + i] * y_hat[r]).sum::<f64>() + gxc[i];
                let val = y_hat[i] + dt * drive;
                if !val.is_finite() {
                    return Err(Error::NonFinite(format!("y[j={j},k={k}]")));
                }
                y[(j, k, i)] = val;
            }
        }
    }
    Ok(AdjointPaths { y, z, ridge_fallback: fallback })
}
