//! Particle representation of measure-valued controls, with the metrics and
//! density estimates used throughout the solver.
//!
//! A control assigns to every outer path `j` and time node `k` a probability
//! measure over actions, carried as a cloud of `N` inner particles in `R^p`.
//! Distances between controls are path-space Wasserstein distances:
//! for one outer path, `W_path(j) = (sum_k W_q(cloud_a, cloud_b)^q * dt)^{1/q}`
//! with the node distance exact in one dimension (sorted coupling) and
//! sliced over fixed random projections otherwise; across outer paths,
//! `rho_q = (mean_j W_path(j)^q)^{1/q}`.
//!
//! Relative entropy against the prior `gamma = exp(-U)` is estimated by
//! leave-one-out Gaussian kernel density estimation:
//! `Ent(m) ~= mean_i [ log m_hat_{-i}(a_i) + U(a_i) ]`,
//! which is the KL divergence KL(m || gamma) provided `exp(-U)` integrates
//! to one. The builders in [`crate::problem`] include the normalizing
//! constant in `U` for exactly this reason.

use ndarray::{s, Array2, Array4, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::cell::OnceCell;
use std::io::Write;

use crate::error::{Error, Result};

/// Number of random projections used by the sliced Wasserstein distance
/// when actions have more than one coordinate.
const SLICED_DIRECTIONS: usize = 64;
/// Seed of the fixed projection set; never varied, so distances are
/// reproducible across runs and processes.
const SLICED_SEED: u64 = 0x534C_4943;
/// Lower clamp for log densities, far below any value a healthy cloud
/// produces but finite, so downstream means stay finite.
const LOG_FLOOR: f64 = -690.0;
/// Gaussian kernels are cut off beyond this many bandwidths; the neglected
/// mass is below 1e-14 per sample.
const KERNEL_CUTOFF: f64 = 8.0;

/// Formats a float with 17 significant digits, enough for a lossless
/// f64 roundtrip through text.
pub(crate) fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// One action cloud: a borrowed `(N, p)` block of particles, optionally
/// weighted. Weights are stored raw and normalized on access; uniform
/// clouds (the common case) carry no weight vector at all.
///
/// Mean and second moment are cached on first use; a `Cloud` is a cheap
/// short-lived view constructed per `(j, k)` visit.
pub struct Cloud<'a> {
    pts: ArrayView2<'a, f64>,
    weights: Option<ArrayView1<'a, f64>>,
    weight_sum: f64,
    mean: OnceCell<Vec<f64>>,
    moment2: OnceCell<f64>,
}

impl<'a> Cloud<'a> {
    pub fn from_points(pts: ArrayView2<'a, f64>) -> Self {
        Cloud { pts, weights: None, weight_sum: pts.nrows() as f64, mean: OnceCell::new(), moment2: OnceCell::new() }
    }

    /// A weighted cloud. Weights must be finite, nonnegative, not all zero;
    /// they are normalized internally.
    pub fn with_weights(pts: ArrayView2<'a, f64>, weights: ArrayView1<'a, f64>) -> Result<Self> {
        if weights.len() != pts.nrows() {
            return Err(Error::Shape(format!(
                "{} weights for {} particles",
                weights.len(),
                pts.nrows()
            )));
        }
        let mut sum = 0.0;
        for &w in weights.iter() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidParam(format!("cloud weight {w}")));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(Error::InvalidParam("cloud weights sum to zero".into()));
        }
        Ok(Cloud { pts, weights: Some(weights), weight_sum: sum, mean: OnceCell::new(), moment2: OnceCell::new() })
    }

    pub fn n(&self) -> usize {
        self.pts.nrows()
    }

    pub fn dim(&self) -> usize {
        self.pts.ncols()
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.is_some()
    }

    pub fn points(&self) -> ArrayView2<'a, f64> {
        self.pts
    }

    /// The i-th particle as a contiguous slice. Requires unit stride in the
    /// coordinate axis, which every view this crate constructs satisfies.
    pub fn point(&self, i: usize) -> &'a [f64] {
        self.pts
            .index_axis_move(ndarray::Axis(0), i)
            .to_slice()
            .expect("cloud rows are contiguous")
    }

    /// Normalized weight of particle i.
    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i] / self.weight_sum,
            None => 1.0 / self.weight_sum,
        }
    }

    /// Weighted mean action, cached.
    pub fn mean(&self) -> &[f64] {
        self.mean.get_or_init(|| {
            let p = self.dim();
            let mut m = vec![0.0; p];
            // Unweighted contiguous clouds are the refresh hot path; sum
            // them without the per-particle weight lookup.
            if let (None, Some(flat)) = (&self.weights, self.pts.as_slice()) {
                for row in flat.chunks_exact(p) {
                    for (ml, &al) in m.iter_mut().zip(row) {
                        *ml += al;
                    }
                }
                let inv = 1.0 / self.n() as f64;
                for ml in &mut m {
                    *ml *= inv;
                }
                return m;
            }
            for i in 0..self.n() {
                let w = self.weight(i);
                for (ml, &al) in m.iter_mut().zip(self.point(i)) {
                    *ml += w * al;
                }
            }
            m
        })
    }

    /// Weighted mean of the squared Euclidean norm, cached.
    pub fn moment2(&self) -> f64 {
        *self.moment2.get_or_init(|| {
            if let (None, Some(flat)) = (&self.weights, self.pts.as_slice()) {
                return flat.iter().map(|a| a * a).sum::<f64>() / self.n() as f64;
            }
            (0..self.n()).map(|i| self.weight(i) * self.point(i).iter().map(|a| a * a).sum::<f64>()).sum()
        })
    }

    /// Weighted mean of an arbitrary function of the action.
    pub fn mean_of(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        (0..self.n()).map(|i| self.weight(i) * f(self.point(i))).sum()
    }
}

/// How initial particles are drawn.
#[derive(Clone, Debug)]
pub enum InitSampler {
    /// Every particle starts at the same action.
    PointMass(Vec<f64>),
    /// Particles drawn i.i.d. from N(mean, sd^2 I).
    Gaussian { mean: Vec<f64>, sd: f64 },
}

impl InitSampler {
    fn dim(&self) -> usize {
        match self {
            InitSampler::PointMass(v) => v.len(),
            InitSampler::Gaussian { mean, .. } => mean.len(),
        }
    }
}

/// The full particle control: `theta[(j, k, i, l)]` is coordinate `l` of
/// inner particle `i` of the cloud at outer path `j`, time node `k`.
///
/// `q_metric` is the exponent of the path-space metric the control is
/// measured in; it travels with the control so that distances, moments and
/// trace columns all use the same q.
#[derive(Clone)]
pub struct ParticleControl {
    theta: Array4<f64>,
    q_metric: f64,
}

impl ParticleControl {
    pub fn new(theta: Array4<f64>, q_metric: f64) -> Result<Self> {
        if theta.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("empty control axis in {:?}", theta.shape())));
        }
        if !(q_metric >= 1.0) {
            return Err(Error::InvalidParam(format!("q_metric must be >= 1, got {q_metric}")));
        }
        Ok(ParticleControl { theta, q_metric })
    }

    /// Draws an initial control: path `j` uses stream `j` of a ChaCha
    /// generator over `seed`, coordinates in (k, i, l) order, so path
    /// clouds do not depend on how many outer paths exist.
    pub fn sample(
        init: &InitSampler,
        outer: usize,
        steps: usize,
        inner: usize,
        action_dim: usize,
        q_metric: f64,
        seed: u64,
    ) -> Result<Self> {
        if init.dim() != action_dim {
            return Err(Error::Shape(format!(
                "init sampler has dimension {}, control has {}",
                init.dim(),
                action_dim
            )));
        }
        let mut theta = Array4::zeros((outer, steps, inner, action_dim));
        match init {
            InitSampler::PointMass(v) => {
                for mut row in theta.rows_mut() {
                    for (t, &c) in row.iter_mut().zip(v) {
                        *t = c;
                    }
                }
            }
            InitSampler::Gaussian { mean, sd } => {
                if !(sd.is_finite() && *sd >= 0.0) {
                    return Err(Error::InvalidParam(format!("init sd {sd}")));
                }
                for j in 0..outer {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(j as u64);
                    for k in 0..steps {
                        for i in 0..inner {
                            for l in 0..action_dim {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                theta[(j, k, i, l)] = mean[l] + sd * z;
                            }
                        }
                    }
                }
            }
        }
        ParticleControl::new(theta, q_metric)
    }

    pub fn outer(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn inner(&self) -> usize {
        self.theta.shape()[2]
    }

    pub fn action_dim(&self) -> usize {
        self.theta.shape()[3]
    }

    pub fn q_metric(&self) -> f64 {
        self.q_metric
    }

    pub fn theta(&self) -> &Array4<f64> {
        &self.theta
    }

    pub(crate) fn theta_mut(&mut self) -> &mut Array4<f64> {
        &mut self.theta
    }

    /// The action cloud at (outer path j, time node k).
    pub fn cloud(&self, j: usize, k: usize) -> Cloud<'_> {
        Cloud::from_points(self.theta.slice(s![j, k, .., ..]))
    }

    /// A copy with every particle shifted by `delta`.
    pub fn translated(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.action_dim() {
            return Err(Error::Shape(format!(
                "delta has dimension {}, control has {}",
                delta.len(),
                self.action_dim()
            )));
        }
        let mut out = self.clone();
        for mut row in out.theta.rows_mut() {
            for (t, &d) in row.iter_mut().zip(delta) {
                *t += d;
            }
        }
        Ok(out)
    }

    /// Same shape check used before any pairwise metric.
    pub(crate) fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.theta.shape() != other.theta.shape() {
            return Err(Error::Shape(format!(
                "controls have shapes {:?} and {:?}",
                self.theta.shape(),
                other.theta.shape()
            )));
        }
        if self.q_metric != other.q_metric {
            return Err(Error::InvalidParam(format!(
                "controls carry different metric exponents {} and {}",
                self.q_metric, other.q_metric
            )));
        }
        Ok(())
    }
}

// === Wasserstein distances ===

/// Exact 1-d W_q^q between equally sized samples: sort both, average the
/// q-th powers of coordinate gaps of the monotone coupling.
fn wasserstein_1d_pow(xs: &mut [f64], ys: &mut [f64], q: f64) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    ys.sort_unstable_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().zip(ys.iter()).map(|(x, y)| (x - y).abs().powf(q)).sum::<f64>() / n
}

/// W_q(a, b)^q between two clouds of equal size.
///
/// One-dimensional actions use the exact sorted coupling. Higher dimensions
/// use the sliced distance over [`SLICED_DIRECTIONS`] fixed unit projections,
/// which is itself a metric and contracts under the same couplings; it is an
/// approximation of W_q and documented as such.
pub fn wasserstein_node_pow(a: &Cloud, b: &Cloud, q: f64) -> Result<f64> {
    if a.is_weighted() || b.is_weighted() {
        return Err(Error::Unsupported("wasserstein distance of weighted clouds".into()));
    }
    if a.n() != b.n() || a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "clouds of sizes {}x{} and {}x{}",
            a.n(),
            a.dim(),
            b.n(),
            b.dim()
        )));
    }
    if !(q >= 1.0) {
        return Err(Error::InvalidParam(format!("wasserstein exponent {q}")));
    }
    let (n, p) = (a.n(), a.dim());
    let mut xs = vec![0.0; n];
    let mut ys = vec![0.0; n];
    if p == 1 {
        for i in 0..n {
            xs[i] = a.point(i)[0];
            ys[i] = b.point(i)[0];
        }
        return Ok(wasserstein_1d_pow(&mut xs, &mut ys, q));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SLICED_SEED);
    let mut acc = 0.0;
    let mut dir = vec![0.0f64; p];
    for _ in 0..SLICED_DIRECTIONS {
        let mut norm = 0.0;
        for d in dir.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *d = z;
            norm += z * z;
        }
        let norm = norm.sqrt().max(1e-300);
        for d in dir.iter_mut() {
            *d /= norm;
        }
        for i in 0..n {
            xs[i] = a.point(i).iter().zip(&dir).map(|(x, d)| x * d).sum();
            ys[i] = b.point(i).iter().zip(&dir).map(|(y, d)| y * d).sum();
        }
        acc += wasserstein_1d_pow(&mut xs, &mut ys, q);
    }
    Ok(acc / SLICED_DIRECTIONS as f64)
}

pub fn wasserstein_node(a: &Cloud, b: &Cloud, q: f64) -> Result<f64> {
    Ok(wasserstein_node_pow(a, b, q)?.powf(1.0 / q))
}

/// Path-space distance for one outer path: left Riemann sum of the node
/// distances to the q over the K intervals, q-th root.
pub fn wasserstein_path(a: &ParticleControl, b: &ParticleControl, j: usize, dt: f64) -> Result<f64> {
    a.check_compatible(b)?;
    let q = a.q_metric();
    let mut acc = 0.0;
    for k in 0..a.steps() {
        acc += wasserstein_node_pow(&a.cloud(j, k), &b.cloud(j, k), q)? * dt;
    }
    Ok(acc.powf(1.0 / q))
}

/// The metric the contraction theory is stated in: q-th root of the mean
/// over outer paths of the path distance to the q.
pub fn rho_q(a: &ParticleControl, b: &ParticleControl, dt: f64) -> Result<f64> {
    a.check_compatible(b)?;
    let q = a.q_metric();
    let mut acc = 0.0;
    for j in 0..a.outer() {
        acc += wasserstein_path(a, b, j, dt)?.powf(q);
    }
    Ok((acc / a.outer() as f64).powf(1.0 / q))
}

// === Moments ===

/// Per-node and pooled q-th moments of the action norm.
pub struct MomentSummary {
    /// `per_node[(j, k)]` = mean over the cloud of |theta|^q.
    pub per_node: Array2<f64>,
    /// Mean of `per_node`, i.e. the pooled moment over (j, k, i).
    pub aggregate: f64,
}

pub fn cloud_moments(control: &ParticleControl, q: f64) -> MomentSummary {
    let (m, k) = (control.outer(), control.steps());
    let mut per_node = Array2::zeros((m, k));
    for j in 0..m {
        for t in 0..k {
            let c = control.cloud(j, t);
            per_node[(j, t)] = c.mean_of(|a| a.iter().map(|x| x * x).sum::<f64>().sqrt().powf(q));
        }
    }
    let aggregate = per_node.iter().sum::<f64>() / (m * k) as f64;
    MomentSummary { per_node, aggregate }
}

// === Kernel density estimation and entropy ===

/// Empirical quantile with linear interpolation between order statistics
/// (the convention most statistics packages default to).
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Silverman rule-of-thumb bandwidth for one coordinate:
/// `0.9 * min(sd, IQR/1.34) * n^(-1/5)`, floored at 1e-6 so a collapsed
/// coordinate cannot produce a zero bandwidth.
fn silverman_1d(samples: &mut Vec<f64>) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    samples.sort_unstable_by(f64::total_cmp);
    let iqr = quantile_sorted(samples, 0.75) - quantile_sorted(samples, 0.25);
    let spread = var.sqrt().min(iqr / 1.34);
    (0.9 * spread * n.powf(-0.2)).max(1e-6)
}

/// Per-coordinate Silverman bandwidths of a cloud (weights, if any, are
/// ignored for bandwidth selection).
pub fn silverman_bandwidths(cloud: &Cloud) -> Vec<f64> {
    let (n, p) = (cloud.n(), cloud.dim());
    let mut col = Vec::with_capacity(n);
    (0..p)
        .map(|l| {
            col.clear();
            col.extend((0..n).map(|i| cloud.point(i)[l]));
            silverman_1d(&mut col)
        })
        .collect()
}

/// Log of the Gaussian product-kernel density of `cloud` at `a`, using
/// Silverman bandwidths, floored at the global log floor.
pub fn kde_log_density(cloud: &Cloud, bandwidths: &[f64], a: &[f64]) -> f64 {
    let (n, p) = (cloud.n(), cloud.dim());
    debug_assert_eq!(bandwidths.len(), p);
    debug_assert_eq!(a.len(), p);
    let mut dens = 0.0;
    for i in 0..n {
        let pt = cloud.point(i);
        let mut e = 0.0;
        for l in 0..p {
            let u = (a[l] - pt[l]) / bandwidths[l];
            e += u * u;
        }
        dens += cloud.weight(i) * (-0.5 * e).exp();
    }
    let log_norm: f64 =
        bandwidths.iter().map(|h| h.ln()).sum::<f64>() + 0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln();
    (dens.ln() - log_norm).max(LOG_FLOOR)
}

/// Evaluates the kernel density of 1-d `values` (uniform weights, bandwidth
/// `h`) on the uniform grid `lo + step * idx`, writing into `out`.
///
/// Kernels are truncated beyond [`KERNEL_CUTOFF`] bandwidths; the mass
/// dropped per sample is below 1e-14, far below the total-variation
/// tolerances this feeds into.
pub(crate) fn kde_density_grid_1d(values: &[f64], h: f64, lo: f64, step: f64, out: &mut [f64]) {
    out.fill(0.0);
    let n_grid = out.len() as isize;
    let reach = KERNEL_CUTOFF * h;
    // Consecutive kernel values along a uniform grid differ by a factor
    // that is itself geometric in the index, so each particle costs three
    // exponentials and two multiplies per grid node. The multiplicative
    // drift over a window stays below 1e-13.
    let delta = step / h;
    let decay = (-delta * delta).exp();
    for &x in values {
        let first = (((x - reach) - lo) / step).ceil() as isize;
        let last = (((x + reach) - lo) / step).floor() as isize;
        let (first, last) = (first.max(0), last.min(n_grid - 1));
        if first > last {
            continue;
        }
        let e0 = (lo + step * first as f64 - x) / h;
        let mut kern = (-0.5 * e0 * e0).exp();
        let mut ratio = (-(e0 * delta + 0.5 * delta * delta)).exp();
        for o in &mut out[first as usize..=last as usize] {
            *o += kern;
            kern *= ratio;
            ratio *= decay;
        }
    }
    let norm = values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt();
    for v in out.iter_mut() {
        *v /= norm;
    }
}

/// Leave-one-out KL divergence of the cloud against the prior `exp(-U)`:
/// `mean_i [ log m_hat_{-i}(a_i) + U(a_i) ]`.
///
/// `U` must be a normalized potential (`exp(-U)` integrates to one) for the
/// result to be the KL divergence; the problem builders guarantee this.
/// A fully degenerate cloud (all particles identical) returns `+inf` as a
/// sentinel. Per-point log densities are floored at -690.
pub fn relative_entropy(cloud: &Cloud, prior: impl Fn(&[f64]) -> f64) -> Result<f64> {
    if cloud.is_weighted() {
        return Err(Error::Unsupported("entropy of a weighted cloud".into()));
    }
    let (n, p) = (cloud.n(), cloud.dim());
    if n < 2 {
        return Err(Error::InvalidParam("entropy needs at least 2 particles".into()));
    }
    let pts = cloud.points().to_slice().expect("cloud views are contiguous");
    let degenerate = (0..p).all(|l| {
        let first = pts[l];
        (1..n).all(|i| pts[i * p + l] == first)
    });
    if degenerate {
        return Ok(f64::INFINITY);
    }

    let bw = silverman_bandwidths(cloud);
    let inv_h: Vec<f64> = bw.iter().map(|h| 1.0 / h).collect();
    // Pair kernels are symmetric; accumulate each un-ordered pair once.
    let mut row_sum = vec![0.0; n];
    for i in 0..n {
        let pi = &pts[i * p..(i + 1) * p];
        for j in (i + 1)..n {
            let pj = &pts[j * p..(j + 1) * p];
            let mut e = 0.0;
            for l in 0..p {
                let u = (pi[l] - pj[l]) * inv_h[l];
                e += u * u;
            }
            let k = (-0.5 * e).exp();
            row_sum[i] += k;
            row_sum[j] += k;
        }
    }
    let log_norm: f64 = bw.iter().map(|h| h.ln()).sum::<f64>()
        + 0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln()
        + ((n - 1) as f64).ln();
    let mut acc = 0.0;
    for i in 0..n {
        let log_dens = (row_sum[i].ln() - log_norm).max(LOG_FLOOR);
        acc += log_dens + prior(&pts[i * p..(i + 1) * p]);
    }
    Ok(acc / n as f64)
}

// === Resampling ===

/// Systematic resampling of a weighted cloud down to `n_out` uniform
/// particles. Uses a single uniform draw, so the output is a deterministic
/// function of (cloud, rng state).
pub fn resample_weighted(points: ArrayView2<'_, f64>, weights: &[f64], n_out: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    debug_assert_eq!(weights.len(), n);
    let total: f64 = weights.iter().sum();
    let mut out = Array2::zeros((n_out, points.ncols()));
    let u0: f64 = rng.random::<f64>();
    let mut cum = weights[0];
    let mut src = 0usize;
    for i in 0..n_out {
        let target = total * (i as f64 + u0) / n_out as f64;
        while cum < target && src + 1 < n {
            src += 1;
            cum += weights[src];
        }
        out.row_mut(i).assign(&points.row(src));
    }
    out
}

// === CSV export ===

/// Writes the cloud snapshot CSV: columns `j,k,i,a_1..a_p`, rows ordered by
/// (j, k, i), floats with 17 significant digits.
pub fn write_clouds_csv<W: Write>(control: &ParticleControl, out: &mut W) -> std::io::Result<()> {
    write!(out, "j,k,i")?;
    for l in 1..=control.action_dim() {
        write!(out, ",a_{l}")?;
    }
    writeln!(out)?;
    let th = control.theta();
    for j in 0..control.outer() {
        for k in 0..control.steps() {
            for i in 0..control.inner() {
                write!(out, "{j},{k},{i}")?;
                for l in 0..control.action_dim() {
                    write!(out, ",{}", fmt17(th[(j, k, i, l)]))?;
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}
