//! Time discretization and driving Brownian increments.
//!
//! Every simulation in this crate runs on a fixed uniform grid over `[0, T]`.
//! The Brownian increments are sampled once per experiment and shared by all
//! controls that are compared against each other, so differences between
//! estimates are common-random-number differences rather than fresh noise.
//!
//! Path `j` draws from its own counter stream: the increments of path `j`
//! do not depend on how many paths the bundle holds, and a bundle can be
//! regenerated from `(seed, grid, dim)` alone.

use ndarray::{Array3, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Uniform grid `0 = t_0 < t_1 < ... < t_K = T` with `dt = T/K`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParam(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidParam("steps must be at least 1".into()));
        }
        Ok(TimeGrid { horizon, steps, dt: horizon / steps as f64 })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of intervals K; the grid has K+1 nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Node `t_k`. Computed as `T * (k/K)` so that `node(K) == T` exactly.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.horizon * (k as f64 / self.steps as f64)
    }
}

/// Increments of the outer (physical) Brownian motion W.
///
/// Layout: `dw[(j, k, l)]` is the l-th coordinate of `W_{t_{k+1}} - W_{t_k}`
/// on path j, distributed N(0, dt).
pub struct BrownianPaths {
    dw: Array3<f64>,
    grid: TimeGrid,
    seed: u64,
}

impl BrownianPaths {
    /// Samples `paths` independent d-dimensional paths on `grid`.
    ///
    /// Path j uses stream j of a ChaCha generator seeded with `seed`, with
    /// draws in (k, coordinate) order, so the realization of any given path
    /// is independent of `paths`.
    pub fn sample(grid: TimeGrid, paths: usize, dim: usize, seed: u64) -> Result<Self> {
        if paths == 0 {
            return Err(Error::InvalidParam("paths must be at least 1".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidParam("noise dimension must be at least 1".into()));
        }
        let sqrt_dt = grid.dt().sqrt();
        let mut dw = Array3::zeros((paths, grid.steps(), dim));
        for j in 0..paths {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            for k in 0..grid.steps() {
                for l in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    dw[(j, k, l)] = sqrt_dt * z;
                }
            }
        }
        Ok(BrownianPaths { dw, grid, seed })
    }

    pub fn paths(&self) -> usize {
        self.dw.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.dw.shape()[2]
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> ArrayView3<'_, f64> {
        self.dw.view()
    }

    /// Increments of path j, shape (K, dim).
    pub fn path(&self, j: usize) -> ArrayView2<'_, f64> {
        self.dw.index_axis(ndarray::Axis(0), j)
    }

    /// Writes the bundle as little-endian binary: a header of four u64
    /// (paths, steps, dim, seed) followed by the increments in (j, k, l) order.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        let file = File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let hdr = [self.paths() as u64, self.grid.steps() as u64, self.dim() as u64, self.seed];
        let io_err = |e| Error::io(p.display().to_string(), e);
        for v in hdr {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        for &x in self.dw.iter() {
            w.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Reads a bundle written by [`BrownianPaths::write`]. The grid supplies
    /// the horizon (the dump stores only step counts); its step count must
    /// match the header.
    pub fn read(path: impl AsRef<Path>, grid: TimeGrid) -> Result<Self> {
        let p = path.as_ref();
        let display = p.display().to_string();
        let file = File::open(p).map_err(|e| Error::io(display.clone(), e))?;
        let mut r = BufReader::new(file);

        let mut u = [0u8; 8];
        let mut hdr = [0u64; 4];
        for h in hdr.iter_mut() {
            r.read_exact(&mut u).map_err(|e| Error::io(display.clone(), e))?;
            *h = u64::from_le_bytes(u);
        }
        let [m, k, d, seed] = hdr;
        if k as usize != grid.steps() {
            return Err(Error::Format {
                path: display,
                reason: format!("header has {} steps, grid has {}", k, grid.steps()),
            });
        }
        let (m, k, d) = (m as usize, k as usize, d as usize);
        let mut dw = Array3::zeros((m, k, d));
        for x in dw.iter_mut() {
            r.read_exact(&mut u).map_err(|e| Error::Format {
                path: display.clone(),
                reason: format!("truncated data section: {e}"),
            })?;
            *x = f64::from_le_bytes(u);
        }
        if r.read(&mut u).map_err(|e| Error::io(display.clone(), e))? != 0 {
            return Err(Error::Format { path: display, reason: "trailing bytes after data section".into() });
        }
        Ok(BrownianPaths { dw, grid, seed })
    }
}
