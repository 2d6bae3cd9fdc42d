//! Picard iteration `(U, V, J) -> Phi(U, V, J)`, where `Phi` solves the BSDE
//! whose driver is frozen at the previous iterate.

use crate::calculus::{beta_norm, NormWeight};
use crate::dividend::DividendSpec;
use crate::error::{Error, Result};
use crate::scenario::ScenarioBatch;
use crate::stats::PathMatrix;

use super::driver::Driver;
use super::lsmc::{backward_sweep, BsdeSolution, LsmcOptions};

/// `(xi, beta_w)` for which the Picard map halves the squared beta-norm
/// distance: `xi = 1 / (2 (T+1) (p+2) C^2)` and `beta_w = 2 (p+2)^2 (T+1) C^2`.
pub fn contraction_weights(p: usize, horizon: f64, c: f64) -> (f64, f64) {
    let q = (p + 2) as f64;
    if c <= 0.0 {
        return (f64::INFINITY, 0.0);
    }
    (1.0 / (2.0 * (horizon + 1.0) * q * c * c), 2.0 * q * q * (horizon + 1.0) * c * c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PicardTrace {
    pub beta_w: f64,
    pub xi: f64,
    /// Distance between iterate `j` and iterate `j - 1`, starting at `j = 1`
    /// (iterate 0 is zero).
    pub distances: Vec<f64>,
    /// `distances[j] / distances[j - 1]`.
    pub ratios: Vec<f64>,
    pub y0: Vec<f64>,
}

impl PicardTrace {
    /// Largest ratio from the second iteration on.
    pub fn worst_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(0.0, f64::max)
    }
}

struct Iterate {
    y: PathMatrix,
    z: PathMatrix,
    k: Vec<PathMatrix>,
}

impl Iterate {
    fn zero(m: usize, n: usize, p: usize) -> Self {
        Self { y: PathMatrix::zeros(m, n + 1), z: PathMatrix::zeros(m, n), k: vec![PathMatrix::zeros(m, n); p] }
    }

    fn of(sol: &BsdeSolution, batch: &ScenarioBatch) -> Self {
        Self { y: sol.y.clone(), z: sol.z_matrix(batch), k: (0..batch.p()).map(|i| sol.k_matrix(batch, i)).collect() }
    }
}

fn diff(a: &PathMatrix, b: &PathMatrix) -> PathMatrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    PathMatrix::from_vec(a.paths(), a.cols(), data)
}

/// `||dY||^2_beta + ||dZ||^2_beta + sum_i ||dK^i||^2_{lambda^i, beta}`.
fn distance(batch: &ScenarioBatch, a: &Iterate, b: &Iterate, beta_w: f64) -> Result<f64> {
    let mut d = beta_norm(batch, &diff(&a.y, &b.y), beta_w, NormWeight::Plain)?.mean;
    d += beta_norm(batch, &diff(&a.z, &b.z), beta_w, NormWeight::Plain)?.mean;
    for i in 0..batch.p() {
        d += beta_norm(batch, &diff(&a.k[i], &b.k[i]), beta_w, NormWeight::Intensity(i))?.mean;
    }
    Ok(d)
}

/// Runs `iterations` Picard steps from zero. `beta_w` defaults to the
/// contraction weight of the driver's Lipschitz constant.
pub fn solve_picard(
    batch: &ScenarioBatch,
    driver: &dyn Driver,
    terminal: &[f64],
    dividend: &DividendSpec,
    opts: &LsmcOptions,
    iterations: usize,
    beta_w: Option<f64>,
) -> Result<(BsdeSolution, PicardTrace)> {
    if iterations < 2 {
        return Err(Error::Invalid("Picard iteration needs at least two iterations".into()));
    }
    if driver.p() != batch.p() {
        return Err(Error::Invalid(format!("driver has {} levels, batch has {}", driver.p(), batch.p())));
    }
    let (xi, default_beta) = contraction_weights(batch.p(), batch.grid().horizon(), driver.lipschitz());
    let beta_w = beta_w.unwrap_or(if default_beta > 0.0 { default_beta } else { 1.0 });
    let (m, n, p) = (batch.paths(), batch.grid().steps(), batch.p());
    let mut prev = Iterate::zero(m, n, p);
    let mut trace = PicardTrace { beta_w, xi, distances: Vec::new(), ratios: Vec::new(), y0: Vec::new() };
    let mut last = None;
    for _ in 0..iterations {
        let frozen = &prev;
        let sol = backward_sweep(batch, terminal, dividend, opts, &|k, j, s, lam, _, _, _| {
            let kv: Vec<f64> = frozen.k.iter().map(|m| m.get(j, k)).collect();
            driver.eval(s, lam, frozen.y.get(j, k), frozen.z.get(j, k), &kv)
        })?;
        let cur = Iterate::of(&sol, batch);
        let d = distance(batch, &cur, &prev, beta_w)?;
        if let Some(&before) = trace.distances.last() {
            trace.ratios.push(if before > 0.0 { d / before } else { 0.0 });
        }
        trace.distances.push(d);
        trace.y0.push(sol.y0.mean);
        prev = cur;
        last = Some(sol);
    }
    Ok((last.expect("at least two iterations ran"), trace))
}
