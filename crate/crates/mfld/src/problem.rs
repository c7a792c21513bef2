//! Coefficient interface of the control problem, and the two concrete
//! problem families the solver is verified against.
//!
//! A problem supplies the drift `Phi(t, x, m)`, running cost `F(t, x, m)`,
//! terminal cost `g(x)`, a constant diffusion matrix, a prior potential `U`
//! over actions, and the derivatives the solver consumes:
//!
//! * gradients in the state `x` (for the adjoint driver), and
//! * flat derivatives in the measure argument `m`, evaluated at an extra
//!   action `a` and normalized to integrate to zero against `m`, together
//!   with their action gradients (which drive the particle flow).
//!
//! The flat derivative of a functional `G` is the density in the identity
//! `G(m') - G(m) = int_0^1 int dG/dm((1-l) m + l m', a) (m' - m)(da) dl`;
//! [`check_flat_derivative`] verifies exactly this with a midpoint rule in
//! `l`, and is used in tests to guard every hand-derived formula below.
//!
//! Convention: `exp(-U)` must integrate to one. The builders here use the
//! standard Gaussian potential `U(a) = |a|^2/2 + (p/2) ln(2 pi)`, so the
//! entropy reported by [`crate::measure::relative_entropy`] is a genuine
//! KL divergence. Only `grad U` enters the dynamics; the constant matters
//! for entropy values and for the stationarity diagnostics.

use ndarray::Array2;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::Cloud;

pub type VectorField = Box<dyn Fn(f64, &[f64], &Cloud, &mut [f64]) + Send + Sync>;
pub type ScalarField = Box<dyn Fn(f64, &[f64], &Cloud) -> f64 + Send + Sync>;
pub type FlatVectorField = Box<dyn Fn(f64, &[f64], &Cloud, &[f64], &mut [f64]) + Send + Sync>;
pub type FlatScalarField = Box<dyn Fn(f64, &[f64], &Cloud, &[f64]) -> f64 + Send + Sync>;
type BulkGradient = Box<dyn Fn(f64, &[f64], &[f64], &Cloud, &[f64], &mut [f64]) + Send + Sync>;

/// All callables of a problem. Output layouts:
/// `grad_x_drift` writes the `d x d` Jacobian row-major (`[i*d + j] = d
/// drift_i / d x_j`); `flat_drift_agrad` writes `p x d` row-major
/// (`[l*d + i] = d/d a_l of (flat drift)_i`).
pub struct Coefficients {
    pub drift: VectorField,
    pub running_cost: ScalarField,
    pub terminal_cost: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub terminal_grad: Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    pub grad_x_drift: VectorField,
    pub grad_x_cost: VectorField,
    pub flat_drift: FlatVectorField,
    pub flat_cost: FlatScalarField,
    pub flat_drift_agrad: FlatVectorField,
    pub flat_cost_agrad: FlatVectorField,
    pub prior_potential: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub prior_grad: Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    /// Optional fused evaluation of the flow drift (excluding the prior
    /// term) for a whole cloud: given `(t, x, y, cloud, thetas)` with
    /// `thetas` the `n*p` flat particle block, writes `grad_a dH0/dm` for
    /// every particle into `out` (`n*p`). Equivalent to assembling
    /// `flat_drift_agrad . y + flat_cost_agrad` per particle, but without
    /// `n` boxed calls; the Langevin hot loop uses it when present.
    pub bulk_flat_gradient: Option<BulkGradient>,
}

/// A control problem with constant diffusion.
pub struct Problem {
    state_dim: usize,
    action_dim: usize,
    noise_dim: usize,
    diffusion: Array2<f64>,
    coeffs: Coefficients,
}

impl Problem {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        noise_dim: usize,
        diffusion: Array2<f64>,
        coeffs: Coefficients,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 || noise_dim == 0 {
            return Err(Error::InvalidParam("problem dimensions must be positive".into()));
        }
        if diffusion.shape() != [state_dim, noise_dim] {
            return Err(Error::Shape(format!(
                "diffusion is {:?}, expected [{state_dim}, {noise_dim}]",
                diffusion.shape()
            )));
        }
        if diffusion.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidParam("diffusion entries must be finite".into()));
        }
        Ok(Problem { state_dim, action_dim, noise_dim, diffusion, coeffs })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn diffusion(&self) -> &Array2<f64> {
        &self.diffusion
    }

    pub fn drift(&self, t: f64, x: &[f64], m: &Cloud, out: &mut [f64]) {
        (self.coeffs.drift)(t, x, m, out)
    }

    pub fn running_cost(&self, t: f64, x: &[f64], m: &Cloud) -> f64 {
        (self.coeffs.running_cost)(t, x, m)
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        (self.coeffs.terminal_cost)(x)
    }

    pub fn terminal_grad(&self, x: &[f64], out: &mut [f64]) {
        (self.coeffs.terminal_grad)(x, out)
    }

    pub fn grad_x_drift(&self, t: f64, x: &[f64], m: &Cloud, out: &mut [f64]) {
        (self.coeffs.grad_x_drift)(t, x, m, out)
    }

    pub fn grad_x_cost(&self, t: f64, x: &[f64], m: &Cloud, out: &mut [f64]) {
        (self.coeffs.grad_x_cost)(t, x, m, out)
    }

    pub fn flat_drift(&self, t: f64, x: &[f64], m: &Cloud, a: &[f64], out: &mut [f64]) {
        (self.coeffs.flat_drift)(t, x, m, a, out)
    }

    pub fn flat_cost(&self, t: f64, x: &[f64], m: &Cloud, a: &[f64]) -> f64 {
        (self.coeffs.flat_cost)(t, x, m, a)
    }

    pub fn flat_drift_agrad(&self, t: f64, x: &[f64], m: &Cloud, a: &[f64], out: &mut [f64]) {
        (self.coeffs.flat_drift_agrad)(t, x, m, a, out)
    }

    pub fn flat_cost_agrad(&self, t: f64, x: &[f64], m: &Cloud, a: &[f64], out: &mut [f64]) {
        (self.coeffs.flat_cost_agrad)(t, x, m, a, out)
    }

    pub fn prior_potential(&self, a: &[f64]) -> f64 {
        (self.coeffs.prior_potential)(a)
    }

    pub fn prior_grad(&self, a: &[f64], out: &mut [f64]) {
        (self.coeffs.prior_grad)(a, out)
    }

    /// Fused per-cloud flow gradient; returns false when the problem has no
    /// bulk path and the caller must assemble per particle.
    pub fn bulk_flat_gradient(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        m: &Cloud,
        thetas: &[f64],
        out: &mut [f64],
    ) -> bool {
        match &self.coeffs.bulk_flat_gradient {
            Some(f) => {
                f(t, x, y, m, thetas, out);
                true
            }
            None => false,
        }
    }
}

/// Parameters of the linear-quadratic family (scalar state and action):
/// drift `b x + c mean(m)`, running cost `(q_run/2) x^2 + (r_run/2) E|a|^2`,
/// terminal cost `(g_term_quad/2) x^2 + g_term_lin x`, diffusion `gamma`,
/// standard Gaussian prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LqParams {
    pub b: f64,
    pub c: f64,
    pub q_run: f64,
    pub r_run: f64,
    pub g_term_quad: f64,
    pub g_term_lin: f64,
    pub gamma: f64,
}

impl LqParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.b, self.c, self.q_run, self.r_run, self.g_term_quad, self.g_term_lin, self.gamma];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("linear-quadratic parameters must be finite".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::InvalidParam(format!("diffusion gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Standard Gaussian prior potential in `p` dimensions, normalized so that
/// `exp(-U)` integrates to one.
pub fn gaussian_potential(a: &[f64]) -> f64 {
    0.5 * a.iter().map(|x| x * x).sum::<f64>() + 0.5 * a.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

impl Problem {
    /// The linear-quadratic problem. All derivative formulas are
    /// closed-form; the flat derivatives are centered so they integrate to
    /// zero against the cloud:
    /// `dPhi/dm(a) = c (a - mean)`, `dF/dm(a) = (r_run/2)(a^2 - E a^2)`.
    pub fn linear_quadratic(params: LqParams) -> Result<Self> {
        params.validate()?;
        let LqParams { b, c, q_run, r_run, g_term_quad, g_term_lin, gamma } = params;
        let coeffs = Coefficients {
            drift: Box::new(move |_t, x, m, out| {
                out[0] = b * x[0] + c * m.mean()[0];
            }),
            running_cost: Box::new(move |_t, x, m| 0.5 * q_run * x[0] * x[0] + 0.5 * r_run * m.moment2()),
            terminal_cost: Box::new(move |x| 0.5 * g_term_quad * x[0] * x[0] + g_term_lin * x[0]),
            terminal_grad: Box::new(move |x, out| {
                out[0] = g_term_quad * x[0] + g_term_lin;
            }),
            grad_x_drift: Box::new(move |_t, _x, _m, out| {
                out[0] = b;
            }),
            grad_x_cost: Box::new(move |_t, x, _m, out| {
                out[0] = q_run * x[0];
            }),
            flat_drift: Box::new(move |_t, _x, m, a, out| {
                out[0] = c * (a[0] - m.mean()[0]);
            }),
            flat_cost: Box::new(move |_t, _x, m, a| 0.5 * r_run * (a[0] * a[0] - m.moment2())),
            flat_drift_agrad: Box::new(move |_t, _x, _m, _a, out| {
                out[0] = c;
            }),
            flat_cost_agrad: Box::new(move |_t, _x, _m, a, out| {
                out[0] = r_run * a[0];
            }),
            prior_potential: Box::new(gaussian_potential),
            prior_grad: Box::new(|a, out| {
                out.copy_from_slice(a);
            }),
            bulk_flat_gradient: Some(Box::new(move |_t, _x, y, _m, thetas, out| {
                let drive = c * y[0];
                for (o, &th) in out.iter_mut().zip(thetas) {
                    *o = drive + r_run * th;
                }
            })),
        };
        Problem::new(1, 1, 1, Array2::from_elem((1, 1), gamma), coeffs)
    }
}

// === Single-layer policy problem ===

/// State coupling of the drift through the averaged policy output:
/// drift `= f(x, alpha_bar)` with `alpha_bar = int phi(x; theta) m(dtheta)`.
pub struct DriftLink {
    pub eval: Box<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>,
    /// Jacobian in x at fixed alpha, `d x d` row-major.
    pub jac_x: Box<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>,
    /// Partial in alpha, length d.
    pub grad_alpha: Box<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>,
}

/// Running cost through the averaged policy output: `F = h(x, alpha_bar)`.
pub struct CostLink {
    pub eval: Box<dyn Fn(&[f64], f64) -> f64 + Send + Sync>,
    pub grad_x: Box<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>,
    pub grad_alpha: Box<dyn Fn(&[f64], f64) -> f64 + Send + Sync>,
}

pub struct TerminalCost {
    pub eval: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub grad: Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

/// The policy unit `phi(x; theta)` with its gradients in the parameter and
/// in the state. `grad_theta` is checked against finite differences at
/// construction; a mismatch rejects the problem.
pub struct Activation {
    pub eval: Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
    pub grad_theta: Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>,
    pub grad_x: Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>,
}

fn validate_activation(act: &Activation, state_dim: usize, action_dim: usize) -> Result<()> {
    let probes_x: [f64; 3] = [0.3, -0.7, 1.1];
    let probes_th: [f64; 3] = [0.2, -0.5, 0.9];
    let h = 1e-5;
    let mut grad = vec![0.0; action_dim];
    for &px in &probes_x {
        let x = vec![px; state_dim];
        for &pt in &probes_th {
            let mut th = vec![pt; action_dim];
            for l in 0..action_dim {
                th[l] += 0.1 * l as f64; // break symmetry across coordinates
            }
            let v = (act.eval)(&x, &th);
            if !v.is_finite() {
                return Err(Error::InvalidParam(format!("activation is non-finite at probe ({px}, {pt})")));
            }
            (act.grad_theta)(&x, &th, &mut grad);
            for l in 0..action_dim {
                let mut thp = th.clone();
                let mut thm = th.clone();
                thp[l] += h;
                thm[l] -= h;
                let fd = ((act.eval)(&x, &thp) - (act.eval)(&x, &thm)) / (2.0 * h);
                let err = (grad[l] - fd).abs();
                if err > 1e-3 * (1.0 + fd.abs()) {
                    return Err(Error::InvalidParam(format!(
                        "activation grad_theta[{l}] = {} disagrees with finite differences {} at probe ({px}, {pt})",
                        grad[l], fd
                    )));
                }
            }
        }
    }
    Ok(())
}

impl Problem {
    /// A control whose particles parameterize a single policy unit: the
    /// drift and running cost see the measure only through the scalar
    /// channel `alpha_bar(x, m) = int phi(x; theta) m(dtheta)`, so the flat
    /// derivatives follow by the chain rule:
    /// `dPhi/dm(a) = grad_alpha f . (phi(x; a) - alpha_bar)` and
    /// `grad_a dPhi/dm = grad_alpha f (x) grad_theta phi`.
    /// Prior: standard Gaussian over parameters.
    pub fn single_layer_policy(
        state_dim: usize,
        action_dim: usize,
        diffusion: Array2<f64>,
        drift: DriftLink,
        cost: CostLink,
        terminal: TerminalCost,
        activation: Activation,
    ) -> Result<Self> {
        validate_activation(&activation, state_dim, action_dim)?;
        let act = Arc::new(activation);
        let d = state_dim;
        let p = action_dim;

        let alpha_bar = {
            let act = act.clone();
            move |x: &[f64], m: &Cloud| m.mean_of(|th| (act.eval)(x, th))
        };
        // Mean of grad_x phi over the cloud, for the x-gradients.
        let grad_x_alpha_bar = {
            let act = act.clone();
            move |x: &[f64], m: &Cloud, out: &mut [f64]| {
                out.fill(0.0);
                let mut g = vec![0.0; out.len()];
                for i in 0..m.n() {
                    (act.grad_x)(x, m.point(i), &mut g);
                    let w = m.weight(i);
                    for (o, &gi) in out.iter_mut().zip(&g) {
                        *o += w * gi;
                    }
                }
            }
        };

        let drift = Arc::new(drift);
        let cost = Arc::new(cost);

        let coeffs = Coefficients {
            drift: {
                let (drift, ab) = (drift.clone(), alpha_bar.clone());
                Box::new(move |_t, x, m, out| (drift.eval)(x, ab(x, m), out))
            },
            running_cost: {
                let (cost, ab) = (cost.clone(), alpha_bar.clone());
                Box::new(move |_t, x, m| (cost.eval)(x, ab(x, m)))
            },
            terminal_cost: terminal.eval,
            terminal_grad: terminal.grad,
            grad_x_drift: {
                let (drift, ab, gxab) = (drift.clone(), alpha_bar.clone(), grad_x_alpha_bar.clone());
                Box::new(move |_t, x, m, out| {
                    let a = ab(x, m);
                    (drift.jac_x)(x, a, out);
                    let mut ga = vec![0.0; d];
                    (drift.grad_alpha)(x, a, &mut ga);
                    let mut gx = vec![0.0; d];
                    gxab(x, m, &mut gx);
                    for i in 0..d {
                        for j in 0..d {
                            out[i * d + j] += ga[i] * gx[j];
                        }
                    }
                })
            },
            grad_x_cost: {
                let (cost, ab, gxab) = (cost.clone(), alpha_bar.clone(), grad_x_alpha_bar.clone());
                Box::new(move |_t, x, m, out| {
                    let a = ab(x, m);
                    (cost.grad_x)(x, a, out);
                    let ga = (cost.grad_alpha)(x, a);
                    let mut gx = vec![0.0; d];
                    gxab(x, m, &mut gx);
                    for (o, &g) in out.iter_mut().zip(&gx) {
                        *o += ga * g;
                    }
                })
            },
            flat_drift: {
                let (drift, act, ab) = (drift.clone(), act.clone(), alpha_bar.clone());
                Box::new(move |_t, x, m, a, out| {
                    let bar = ab(x, m);
                    let mut ga = vec![0.0; d];
                    (drift.grad_alpha)(x, bar, &mut ga);
                    let dev = (act.eval)(x, a) - bar;
                    for (o, &g) in out.iter_mut().zip(&ga) {
                        *o = g * dev;
                    }
                })
            },
            flat_cost: {
                let (cost, act, ab) = (cost.clone(), act.clone(), alpha_bar.clone());
                Box::new(move |_t, x, m, a| {
                    let bar = ab(x, m);
                    (cost.grad_alpha)(x, bar) * ((act.eval)(x, a) - bar)
                })
            },
            flat_drift_agrad: {
                let (drift, act, ab) = (drift.clone(), act.clone(), alpha_bar.clone());
                Box::new(move |_t, x, m, a, out| {
                    let bar = ab(x, m);
                    let mut ga = vec![0.0; d];
                    (drift.grad_alpha)(x, bar, &mut ga);
                    let mut gth = vec![0.0; p];
                    (act.grad_theta)(x, a, &mut gth);
                    for l in 0..p {
                        for i in 0..d {
                            out[l * d + i] = gth[l] * ga[i];
                        }
                    }
                })
            },
            flat_cost_agrad: {
                let (cost, act, ab) = (cost.clone(), act.clone(), alpha_bar.clone());
                Box::new(move |_t, x, m, a, out| {
                    let bar = ab(x, m);
                    let ga = (cost.grad_alpha)(x, bar);
                    (act.grad_theta)(x, a, out);
                    for o in out.iter_mut() {
                        *o *= ga;
                    }
                })
            },
            prior_potential: Box::new(gaussian_potential),
            prior_grad: Box::new(|a, out| {
                out.copy_from_slice(a);
            }),
            bulk_flat_gradient: {
                let (drift, cost, act, ab) = (drift.clone(), cost.clone(), act.clone(), alpha_bar.clone());
                Some(Box::new(move |_t, x, y, m, thetas, out| {
                    let bar = ab(x, m);
                    let mut ga = vec![0.0; d];
                    (drift.grad_alpha)(x, bar, &mut ga);
                    // scalar sensitivity of dH0/dm to phi(x; theta)
                    let drive: f64 =
                        ga.iter().zip(y).map(|(g, yi)| g * yi).sum::<f64>() + (cost.grad_alpha)(x, bar);
                    let n = thetas.len() / p;
                    let mut gth = vec![0.0; p];
                    for i in 0..n {
                        (act.grad_theta)(x, &thetas[i * p..(i + 1) * p], &mut gth);
                        for l in 0..p {
                            out[i * p + l] = drive * gth[l];
                        }
                    }
                }))
            },
        };
        Problem::new(state_dim, action_dim, diffusion.shape()[1], diffusion, coeffs)
    }
}

// === Flat-derivative verification ===

/// Residuals of the fundamental theorem of calculus for the measure
/// argument, one per drift coordinate plus one for the running cost.
#[derive(Debug)]
pub struct FlatResiduals {
    pub drift: Vec<f64>,
    pub cost: f64,
}

impl FlatResiduals {
    pub fn max(&self) -> f64 {
        self.drift.iter().fold(self.cost, |m, &v| m.max(v))
    }
}

/// Verifies `G(m') - G(m) = mean_l int dG/dm(m_l, a) (m' - m)(da)` with a
/// midpoint rule over `n_lambda` mixtures `m_l = (1 - l) m + l m'`,
/// realized as weighted unions of the two clouds. Returns the absolute
/// defect for the drift (per coordinate) and the running cost.
pub fn check_flat_derivative(
    spec: &Problem,
    m: &Cloud,
    m_prime: &Cloud,
    t: f64,
    x: &[f64],
    n_lambda: usize,
) -> Result<FlatResiduals> {
    if n_lambda == 0 {
        return Err(Error::InvalidParam("n_lambda must be positive".into()));
    }
    if m.dim() != spec.action_dim() || m_prime.dim() != spec.action_dim() {
        return Err(Error::Shape("cloud dimension differs from the problem's action dimension".into()));
    }
    let d = spec.state_dim();

    // Union support, reused for every mixture; only the weights change.
    let (na, nb) = (m.n(), m_prime.n());
    let mut union = Array2::zeros((na + nb, spec.action_dim()));
    for i in 0..na {
        union.row_mut(i).assign(&m.points().row(i));
    }
    for i in 0..nb {
        union.row_mut(na + i).assign(&m_prime.points().row(i));
    }
    let mut weights = vec![0.0; na + nb];

    let mut rhs_drift = vec![0.0; d];
    let mut rhs_cost = 0.0;
    let mut buf = vec![0.0; d];
    for step in 0..n_lambda {
        let lambda = (step as f64 + 0.5) / n_lambda as f64;
        for (i, w) in weights.iter_mut().take(na).enumerate() {
            *w = (1.0 - lambda) * m.weight(i);
        }
        for (i, w) in weights.iter_mut().skip(na).enumerate() {
            *w = lambda * m_prime.weight(i);
        }
        let mix = Cloud::with_weights(union.view(), ndarray::ArrayView1::from(&weights))?;

        // int dG/dm(mix, a) d(m' - m) = mean over m' minus mean over m.
        for i in 0..nb {
            let w = m_prime.weight(i) / n_lambda as f64;
            spec.flat_drift(t, x, &mix, m_prime.point(i), &mut buf);
            for (r, &v) in rhs_drift.iter_mut().zip(&buf) {
                *r += w * v;
            }
            rhs_cost += w * spec.flat_cost(t, x, &mix, m_prime.point(i));
        }
        for i in 0..na {
            let w = m.weight(i) / n_lambda as f64;
            spec.flat_drift(t, x, &mix, m.point(i), &mut buf);
            for (r, &v) in rhs_drift.iter_mut().zip(&buf) {
                *r -= w * v;
            }
            rhs_cost -= w * spec.flat_cost(t, x, &mix, m.point(i));
        }
    }

    let mut lhs_a = vec![0.0; d];
    let mut lhs_b = vec![0.0; d];
    spec.drift(t, x, m_prime, &mut lhs_b);
    spec.drift(t, x, m, &mut lhs_a);
    let drift = (0..d).map(|i| ((lhs_b[i] - lhs_a[i]) - rhs_drift[i]).abs()).collect();
    let cost = ((spec.running_cost(t, x, m_prime) - spec.running_cost(t, x, m)) - rhs_cost).abs();
    Ok(FlatResiduals { drift, cost })
}


#[cfg(test)]
mod tests {
    use super::test_problems::{tanh_policy, zero_problem};
    use super::*;
    use crate::measure::{InitSampler, ParticleControl};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn lq() -> Problem {
        Problem::linear_quadratic(LqParams {
            b: 0.3,
            c: 1.0,
            q_run: 0.5,
            r_run: 1.0,
            g_term_quad: 1.0,
            g_term_lin: 0.0,
            gamma: 1.0,
        })
        .unwrap()
    }

    fn gaussian_cloud(mean: f64, sd: f64, n: usize, seed: u64) -> ParticleControl {
        let init = InitSampler::Gaussian { mean: vec![mean], sd };
        ParticleControl::sample(&init, 1, 1, n, 1, 2.0, seed).unwrap()
    }

    #[test]
    fn lq_formulas_at_hand_inputs() {
        let p = lq();
        let holder = gaussian_cloud(0.5, 0.0, 4, 0); // point mass at 0.5
        let m = holder.cloud(0, 0);
        let mut out = [0.0];
        p.drift(0.0, &[2.0], &m, &mut out);
        assert_relative_eq!(out[0], 0.3 * 2.0 + 0.5);
        assert_relative_eq!(p.running_cost(0.0, &[2.0], &m), 0.5 * 0.5 * 4.0 + 0.5 * 0.25);
        assert_relative_eq!(p.terminal_cost(&[2.0]), 2.0);
        p.flat_drift(0.0, &[0.0], &m, &[1.5], &mut out);
        assert_relative_eq!(out[0], 1.0);
        assert_relative_eq!(p.flat_cost(0.0, &[0.0], &m, &[1.5]), 0.5 * (2.25 - 0.25));
        p.flat_drift_agrad(0.0, &[0.0], &m, &[1.5], &mut out);
        assert_relative_eq!(out[0], 1.0);
        p.flat_cost_agrad(0.0, &[0.0], &m, &[1.5], &mut out);
        assert_relative_eq!(out[0], 1.5);
    }

    #[test]
    fn lq_rejects_bad_parameters() {
        let mut params =
            LqParams { b: 0.0, c: 1.0, q_run: 0.0, r_run: 1.0, g_term_quad: 0.0, g_term_lin: 1.0, gamma: 0.0 };
        assert!(Problem::linear_quadratic(params).is_err());
        params.gamma = 1.0;
        params.b = f64::NAN;
        assert!(Problem::linear_quadratic(params).is_err());
    }

    #[test]
    fn gaussian_prior_is_normalized() {
        // Simpson quadrature of exp(-U) over [-10, 10] in one dimension.
        let n = 4000;
        let (lo, hi) = (-10.0, 10.0);
        let h = (hi - lo) / n as f64;
        let f = |x: f64| (-gaussian_potential(&[x])).exp();
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        assert_relative_eq!(acc * h / 3.0, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn flat_derivative_identity_exact_for_lq() {
        let p = lq();
        let a_holder = gaussian_cloud(0.0, 1.0, 64, 1);
        let b_holder = gaussian_cloud(0.8, 0.5, 48, 2);
        let res =
            check_flat_derivative(&p, &a_holder.cloud(0, 0), &b_holder.cloud(0, 0), 0.0, &[0.4], 8).unwrap();
        assert!(res.max() < 1e-12, "lq residual {:?}", res);
    }

    #[test]
    fn flat_derivative_detects_scaled_derivative() {
        // Replace the flat cost derivative by kappa times the truth; the
        // defect must equal |kappa - 1| |F(m') - F(m)| for any kappa, which
        // pins both the identity and its linearity in the derivative.
        for kappa in [2.0, 0.5] {
            let coeffs = Coefficients {
                drift: Box::new(|_, _, _, out| out.fill(0.0)),
                running_cost: Box::new(|_, _, m| 0.5 * m.moment2()),
                terminal_cost: Box::new(|_| 0.0),
                terminal_grad: Box::new(|_, out| out.fill(0.0)),
                grad_x_drift: Box::new(|_, _, _, out| out.fill(0.0)),
                grad_x_cost: Box::new(|_, _, _, out| out.fill(0.0)),
                flat_drift: Box::new(|_, _, _, _, out| out.fill(0.0)),
                flat_cost: Box::new(move |_, _, m, a| kappa * 0.5 * (a[0] * a[0] - m.moment2())),
                flat_drift_agrad: Box::new(|_, _, _, _, out| out.fill(0.0)),
                flat_cost_agrad: Box::new(move |_, _, _, a, out| out[0] = kappa * a[0]),
                prior_potential: Box::new(gaussian_potential),
                prior_grad: Box::new(|a, out| out.copy_from_slice(a)),
                bulk_flat_gradient: None,
            };
            let p = Problem::new(1, 1, 1, Array2::from_elem((1, 1), 1.0), coeffs).unwrap();
            let a_holder = gaussian_cloud(0.0, 1.0, 64, 3);
            let b_holder = gaussian_cloud(1.0, 0.7, 64, 4);
            let (ma, mb) = (a_holder.cloud(0, 0), b_holder.cloud(0, 0));
            let df = p.running_cost(0.0, &[0.0], &mb) - p.running_cost(0.0, &[0.0], &ma);
            let res = check_flat_derivative(&p, &ma, &mb, 0.0, &[0.0], 8).unwrap();
            assert_relative_eq!(res.cost, (kappa - 1.0f64).abs() * df.abs(), max_relative = 1e-10);
        }
    }

    #[test]
    fn flat_derivative_identity_for_policy_problem() {
        // Nonlinear in the mixture weight, so the midpoint rule is only
        // O(n_lambda^-2) exact; 16 nodes leave a defect far below the
        // functional's scale.
        let p = tanh_policy();
        let a_holder = gaussian_cloud(0.0, 1.0, 48, 5);
        let b_holder = gaussian_cloud(1.2, 0.6, 48, 6);
        let res =
            check_flat_derivative(&p, &a_holder.cloud(0, 0), &b_holder.cloud(0, 0), 0.0, &[0.8], 16).unwrap();
        assert!(res.max() < 1e-6, "policy residual {:?}", res);
    }

    #[test]
    fn policy_x_gradients_match_finite_differences() {
        let p = tanh_policy();
        let holder = gaussian_cloud(0.4, 0.8, 64, 7);
        let m = holder.cloud(0, 0);
        let h = 1e-6;
        for x0 in [-0.9, 0.2, 1.3] {
            let mut g = [0.0];
            p.grad_x_drift(0.0, &[x0], &m, &mut g);
            let mut dp = [0.0];
            let mut dm = [0.0];
            p.drift(0.0, &[x0 + h], &m, &mut dp);
            p.drift(0.0, &[x0 - h], &m, &mut dm);
            assert_relative_eq!(g[0], (dp[0] - dm[0]) / (2.0 * h), epsilon = 1e-6);

            p.grad_x_cost(0.0, &[x0], &m, &mut g);
            let fd = (p.running_cost(0.0, &[x0 + h], &m) - p.running_cost(0.0, &[x0 - h], &m)) / (2.0 * h);
            assert_relative_eq!(g[0], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn policy_builder_rejects_wrong_gradient() {
        let bad = Problem::single_layer_policy(
            1,
            1,
            Array2::from_elem((1, 1), 1.0),
            DriftLink {
                eval: Box::new(|_x, a, out| out[0] = a),
                jac_x: Box::new(|_x, _a, out| out[0] = 0.0),
                grad_alpha: Box::new(|_x, _a, out| out[0] = 1.0),
            },
            CostLink {
                eval: Box::new(|_x, a| 0.5 * a * a),
                grad_x: Box::new(|_x, _a, out| out[0] = 0.0),
                grad_alpha: Box::new(|_x, a| a),
            },
            TerminalCost { eval: Box::new(|_| 0.0), grad: Box::new(|_, out| out[0] = 0.0) },
            Activation {
                eval: Box::new(|x, th| (th[0] * x[0]).tanh()),
                // doubled: must be caught by the finite-difference probe
                grad_theta: Box::new(|x, th, out| {
                    let t = (th[0] * x[0]).tanh();
                    out[0] = 2.0 * x[0] * (1.0 - t * t);
                }),
                grad_x: Box::new(|x, th, out| {
                    let t = (th[0] * x[0]).tanh();
                    out[0] = th[0] * (1.0 - t * t);
                }),
            },
        );
        assert!(matches!(bad, Err(Error::InvalidParam(_))));
    }

    #[test]
    fn bulk_gradient_matches_per_particle_assembly() {
        for p in [lq(), tanh_policy()] {
            let holder = gaussian_cloud(0.2, 0.9, 32, 8);
            let m = holder.cloud(0, 0);
            let thetas = m.points().to_slice().unwrap().to_vec();
            let (x, y) = ([0.7], [1.3]);
            let mut bulk = vec![0.0; 32];
            if !p.bulk_flat_gradient(0.0, &x, &y, &m, &thetas, &mut bulk) {
                continue;
            }
            let mut agd = [0.0];
            let mut agc = [0.0];
            for i in 0..32 {
                let a = m.point(i);
                p.flat_drift_agrad(0.0, &x, &m, a, &mut agd);
                p.flat_cost_agrad(0.0, &x, &m, a, &mut agc);
                let reference = agd[0] * y[0] + agc[0];
                assert_relative_eq!(bulk[i], reference, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn zero_problem_has_zero_fields() {
        let p = zero_problem(2, 1);
        let holder = gaussian_cloud(0.0, 1.0, 8, 9);
        let m = holder.cloud(0, 0);
        let mut out = [9.0, 9.0];
        p.drift(0.0, &[1.0, 2.0], &m, &mut out);
        assert_eq!(out, [0.0, 0.0]);
        assert_eq!(p.running_cost(0.0, &[1.0, 2.0], &m), 0.0);
    }

    proptest! {
        #[test]
        fn lq_flat_gradients_match_finite_differences(a0 in -3.0f64..3.0, x0 in -2.0f64..2.0) {
            let p = lq();
            let holder = gaussian_cloud(0.1, 1.1, 32, 10);
            let m = holder.cloud(0, 0);
            let h = 1e-6;
            let fd_cost = (p.flat_cost(0.0, &[x0], &m, &[a0 + h]) - p.flat_cost(0.0, &[x0], &m, &[a0 - h])) / (2.0 * h);
            let mut g = [0.0];
            p.flat_cost_agrad(0.0, &[x0], &m, &[a0], &mut g);
            prop_assert!((g[0] - fd_cost).abs() < 1e-5);

            let mut fp = [0.0];
            let mut fm = [0.0];
            p.flat_drift(0.0, &[x0], &m, &[a0 + h], &mut fp);
            p.flat_drift(0.0, &[x0], &m, &[a0 - h], &mut fm);
            let fd_drift = (fp[0] - fm[0]) / (2.0 * h);
            p.flat_drift_agrad(0.0, &[x0], &m, &[a0], &mut g);
            prop_assert!((g[0] - fd_drift).abs() < 1e-5);
        }
    }
}
