//! Monte Carlo evaluation of the control objective and its directional
//! derivatives.
//!
//! The objective of a particle control at temperature `sigma` is the path
//! average of running cost plus the entropic penalty, plus terminal cost:
//!
//! ```text
//! J(nu) = E[ sum_k (F(t_k, X_k, nu_jk) + (sigma^2/2) Ent(nu_jk)) dt + g(X_K) ]
//! ```
//!
//! where `Ent` is relative entropy against the problem's prior. Two
//! derivative estimators are provided and agree up to Monte Carlo noise:
//!
//! * [`directional_derivative_fd`] - a finite difference of the
//!   temperature-zero objective along the mixture `nu + eps (mu - nu)`,
//!   with common random numbers throughout so the O(eps) signal survives;
//! * [`hamiltonian_pairing`] - the first-variation formula: the flat
//!   derivative of the Hamiltonian along the adjoint state, integrated
//!   against `mu - nu`.
//!
//! The mixture is not an N-particle measure, so the finite difference
//! realizes it by resampling onto an enlarged support of `N/eps` slots per
//! node: every slot copies a uniformly chosen base particle, and with
//! probability `eps` the same index is read from the other control
//! instead. The baseline chain uses the identical slots with the mask off,
//! so equal controls cancel exactly.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fbsde::{simulate_forward, solve_adjoint, AdjointMode};
use crate::measure::{relative_entropy, Cloud, ParticleControl};
use crate::noise::BrownianPaths;
use crate::problem::Problem;

/// Salt applied to the noise seed to derive the mixture-resampling stream,
/// so a run is reproducible from its noise seed alone.
const MIX_SEED_SALT: u64 = 0x4D49_5845;

/// A Monte Carlo estimate with its spread over outer paths. `degenerate`
/// is set when an entropy sentinel (an all-identical cloud) pushed the
/// value to infinity.
#[derive(Debug, Clone)]
pub struct ObjectiveEstimate {
    pub value: f64,
    pub stderr: f64,
    pub per_path: Vec<f64>,
    pub degenerate: bool,
}

impl ObjectiveEstimate {
    fn from_per_path(per_path: Vec<f64>) -> Self {
        let m = per_path.len();
        if per_path.iter().any(|v| !v.is_finite()) {
            return ObjectiveEstimate {
                value: f64::INFINITY,
                stderr: f64::INFINITY,
                per_path,
                degenerate: true,
            };
        }
        let value = per_path.iter().sum::<f64>() / m as f64;
        let stderr = if m > 1 {
            let var =
                per_path.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (m as f64 - 1.0);
            (var / m as f64).sqrt()
        } else {
            0.0
        };
        ObjectiveEstimate { value, stderr, per_path, degenerate: false }
    }
}

/// Pointwise Hamiltonian `Phi . y + tr(Gamma^T z) + F + (sigma^2/2) Ent`.
///
/// `z` is the d x w costate block in row-major order. The entropy term is
/// skipped entirely at `sigma = 0`; otherwise the cloud needs at least two
/// particles, and an all-identical cloud propagates as `+inf`.
pub fn hamiltonian_value(
    spec: &Problem,
    t: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    cloud: &Cloud,
    sigma: f64,
) -> Result<f64> {
    let (d, w) = (spec.state_dim(), spec.noise_dim());
    if x.len() != d || y.len() != d || z.len() != d * w {
        return Err(Error::Shape("hamiltonian arguments disagree with the problem dimensions".into()));
    }
    let mut drift = vec![0.0; d];
    spec.drift(t, x, cloud, &mut drift);
    let mut h = drift.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let gamma = spec.diffusion();
    for i in 0..d {
        for l in 0..w {
            h += gamma[(i, l)] * z[i * w + l];
        }
    }
    h += spec.running_cost(t, x, cloud);
    if sigma > 0.0 {
        h += 0.5 * sigma * sigma * relative_entropy(cloud, |a| spec.prior_potential(a))?;
    }
    Ok(h)
}

/// Estimates the objective of `control` at temperature `sigma` by
/// simulating the forward states and averaging over outer paths.
pub fn evaluate_objective(
    spec: &Problem,
    control: &ParticleControl,
    noise: &BrownianPaths,
    xi: &[f64],
    sigma: f64,
) -> Result<ObjectiveEstimate> {
    let traj = simulate_forward(spec, control, noise, xi)?;
    objective_from_traj(spec, control, &traj, sigma)
}

/// The objective of already-simulated forward states; lets callers that
/// hold a refreshed bundle skip the re-simulation.
pub(crate) fn objective_from_traj(
    spec: &Problem,
    control: &ParticleControl,
    traj: &crate::fbsde::ForwardPaths,
    sigma: f64,
) -> Result<ObjectiveEstimate> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParam(format!("sigma must be finite and nonnegative, got {sigma}")));
    }
    let grid = traj.grid();
    let (m, k_steps) = (traj.paths(), grid.steps());
    let dt = grid.dt();
    let half_temp = 0.5 * sigma * sigma;
    let mut per_path = Vec::with_capacity(m);
    for j in 0..m {
        let mut acc = 0.0;
        for k in 0..k_steps {
            let cloud = control.cloud(j, k);
            let t = grid.node(k);
            let mut step_cost = spec.running_cost(t, traj.state(j, k), &cloud);
            if sigma > 0.0 {
                step_cost += half_temp * relative_entropy(&cloud, |a| spec.prior_potential(a))?;
            }
            acc += step_cost * dt;
        }
        acc += spec.terminal_cost(traj.state(j, k_steps));
        per_path.push(acc);
    }
    Ok(ObjectiveEstimate::from_per_path(per_path))
}

/// Finite difference `(J0(nu + eps (mu - nu)) - J0(nu)) / eps` at
/// temperature zero, with common random numbers between the two chains.
///
/// Both chains run on enlarged clouds of `ceil(N / eps)` slots per node so
/// the eps-fraction of the mixture is actually represented; see the module
/// notes for the coupling. The resampling stream is seeded from the noise
/// bundle's seed.
pub fn directional_derivative_fd(
    spec: &Problem,
    nu: &ParticleControl,
    mu: &ParticleControl,
    noise: &BrownianPaths,
    xi: &[f64],
    epsilon: f64,
) -> Result<ObjectiveEstimate> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParam(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    nu.check_compatible(mu)?;
    let grid = noise.grid();
    let (m, k_steps, d, w) = (noise.paths(), grid.steps(), spec.state_dim(), spec.noise_dim());
    if nu.outer() != m || nu.steps() != k_steps {
        return Err(Error::Shape("controls and noise bundle have different shapes".into()));
    }
    if nu.action_dim() != spec.action_dim() {
        return Err(Error::Shape("control and problem disagree on the action dimension".into()));
    }
    if xi.len() != d {
        return Err(Error::Shape(format!("xi has dimension {}, state has {d}", xi.len())));
    }
    if noise.dim() != w {
        return Err(Error::Shape("noise bundle and problem disagree on the noise dimension".into()));
    }
    let dt = grid.dt();
    let p = nu.action_dim();
    let n = nu.inner();
    let n_mix = (n as f64 / epsilon).ceil() as usize;
    let gamma = spec.diffusion();

    let mut base_pts = Array2::zeros((n_mix, p));
    let mut eps_pts = Array2::zeros((n_mix, p));
    let mut x_base = vec![0.0; d];
    let mut x_eps = vec![0.0; d];
    let mut drift = vec![0.0; d];
    let mut per_path = Vec::with_capacity(m);

    for j in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed() ^ MIX_SEED_SALT);
        rng.set_stream(j as u64);
        x_base.copy_from_slice(xi);
        x_eps.copy_from_slice(xi);
        let mut diff = 0.0;
        for k in 0..k_steps {
            let nu_cloud = nu.cloud(j, k);
            let mu_cloud = mu.cloud(j, k);
            for i in 0..n_mix {
                let idx = rng.random_range(0..n);
                let masked = rng.random::<f64>() < epsilon;
                let from_nu = nu_cloud.point(idx);
                let from_eps = if masked { mu_cloud.point(idx) } else { from_nu };
                for l in 0..p {
                    base_pts[(i, l)] = from_nu[l];
                    eps_pts[(i, l)] = from_eps[l];
                }
            }
            let base_cloud = Cloud::from_points(base_pts.view());
            let eps_cloud = Cloud::from_points(eps_pts.view());
            let t = grid.node(k);

            diff += (spec.running_cost(t, &x_eps, &eps_cloud)
                - spec.running_cost(t, &x_base, &base_cloud))
                * dt;

            spec.drift(t, &x_base, &base_cloud, &mut drift);
            for i in 0..d {
                x_base[i] += drift[i] * dt;
            }
            spec.drift(t, &x_eps, &eps_cloud, &mut drift);
            for i in 0..d {
                x_eps[i] += drift[i] * dt;
                for l in 0..w {
                    let dw = gamma[(i, l)] * noise.increments()[(j, k, l)];
                    x_base[i] += dw;
                    x_eps[i] += dw;
                }
            }
            if x_base.iter().chain(&x_eps).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("x[j={j},k={}]", k + 1)));
            }
        }
        diff += spec.terminal_cost(&x_eps) - spec.terminal_cost(&x_base);
        per_path.push(diff / epsilon);
    }
    Ok(ObjectiveEstimate::from_per_path(per_path))
}

/// First-variation estimate: the flat derivative of the temperature-zero
/// Hamiltonian along the adjoint state under `nu`, averaged against
/// `mu - nu` and Riemann-summed over the grid.
pub fn hamiltonian_pairing(
    spec: &Problem,
    nu: &ParticleControl,
    mu: &ParticleControl,
    noise: &BrownianPaths,
    xi: &[f64],
    mode: &AdjointMode,
) -> Result<ObjectiveEstimate> {
    nu.check_compatible(mu)?;
    let traj = simulate_forward(spec, nu, noise, xi)?;
    let adjoint = solve_adjoint(spec, mode, nu, &traj, noise)?;
    let grid = traj.grid();
    let (m, k_steps, d) = (traj.paths(), grid.steps(), spec.state_dim());
    let dt = grid.dt();
    let mut flat = vec![0.0; d];
    let mut per_path = Vec::with_capacity(m);
    for j in 0..m {
        let mut acc = 0.0;
        for k in 0..k_steps {
            let nu_cloud = nu.cloud(j, k);
            let mu_cloud = mu.cloud(j, k);
            let t = grid.node(k);
            let x = traj.state(j, k);
            let y = adjoint.costate(j, k);
            let mut delta = |a: &[f64]| -> f64 {
                spec.flat_drift(t, x, &nu_cloud, a, &mut flat);
                flat.iter().zip(y).map(|(f, yi)| f * yi).sum::<f64>()
                    + spec.flat_cost(t, x, &nu_cloud, a)
            };
            let mu_mean = mu_cloud.mean_of(&mut delta);
            let nu_mean = nu_cloud.mean_of(&mut delta);
            acc += (mu_mean - nu_mean) * dt;
        }
        per_path.push(acc);
    }
    Ok(ObjectiveEstimate::from_per_path(per_path))
}
