//! Backward least-squares Monte Carlo scheme.
//!
//! At every step the state is `(t_k, W_{t_k}, N_{t_k})` together with the
//! default times that already occurred. Conditional expectations are
//! projections on Hermite polynomials of `u = W_{t_k} / sqrt(t_k)` and on
//! Legendre polynomials of `2 tau_i / t_k - 1` for the fired levels, fitted
//! separately on each stratum of the default count. `Y_k` is the projection
//! of the multi-step target `eta + D_T - D_{t_k} + sum_{l > k} g_l dt` plus
//! `g_k dt`, with `g_k` implicit in `y`; `Z_k` and `K_k` are projections of
//! the one-step residual `Y_{k+1} + dD_k - E_k[.]` against `dW_k` and `dM_k`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dividend::DividendSpec;
use crate::error::{Error, Result};
use crate::func::State;
use crate::scenario::ScenarioBatch;
use crate::stats::{Estimate, PathMatrix, CHUNK};

use super::driver::{intensities, Driver};

/// How the jump coefficient `K` is estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KEstimator {
    /// `E_k[r dM] / E_k[dLambda]`.
    #[default]
    Projection,
    /// Difference of the fitted values on the post- and pre-default strata
    /// plus the default payout; falls back to the projection when the
    /// post-default stratum is too sparse.
    ValueJump,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsmcOptions {
    /// Maximal polynomial degree in `u`.
    pub degree: usize,
    /// Maximal polynomial degree in each fired default time.
    pub time_degree: usize,
    pub k_estimator: KEstimator,
    /// Fixed-point passes for the implicit `y` argument.
    pub inner_iterations: usize,
    /// Minimal number of paths per basis function before the basis is cut.
    pub min_per_basis: usize,
}

impl Default for LsmcOptions {
    fn default() -> Self {
        Self { degree: 3, time_degree: 2, k_estimator: KEstimator::Projection, inner_iterations: 2, min_per_basis: 10 }
    }
}

/// Layout of the full feature vector: `He_0..He_degree(u)` followed, for
/// every level `i`, by `P_1..P_time_degree(2 tau_i / t - 1)`. Time features of
/// levels that have not defaulted are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Basis {
    pub degree: usize,
    pub time_degree: usize,
    pub p: usize,
}

impl Basis {
    pub fn new(opts: &LsmcOptions, p: usize) -> Self {
        Self { degree: opts.degree, time_degree: opts.time_degree, p }
    }

    /// Length of the full feature vector.
    pub fn size(&self) -> usize {
        self.degree + 1 + self.p * self.time_degree
    }

    /// Number of features that can be non-zero on stratum `s`.
    fn active(&self, s: usize) -> usize {
        self.degree + 1 + s * self.time_degree
    }

    /// Fills `out` (length `size()`) at grid time `t`.
    pub fn features(&self, t: f64, w: f64, tau: &[f64], s: usize, out: &mut [f64]) {
        let u = if t > 0.0 { w / t.sqrt() } else { 0.0 };
        hermite(u, &mut out[..=self.degree]);
        out[self.degree + 1..].iter_mut().for_each(|x| *x = 0.0);
        for (i, &ti) in tau.iter().enumerate().take(s.min(self.p)) {
            self.set_time(i, 2.0 * ti / t - 1.0, out);
        }
    }

    fn set_time(&self, i: usize, x: f64, out: &mut [f64]) {
        let base = self.degree + 1 + i * self.time_degree;
        legendre(x, &mut out[base..base + self.time_degree]);
    }

    /// Features right after level `s` defaults at `t`.
    fn after_default(&self, s: usize, out: &mut [f64]) {
        if s < self.p {
            self.set_time(s, 1.0, out);
        }
    }

    /// Feature indices of a fit on stratum `s` with `count` paths at step `k`.
    /// Time features are dropped before the degree in `u` is lowered.
    fn select(&self, k: usize, s: usize, count: usize, min_per_basis: usize) -> Vec<usize> {
        if k == 0 {
            return vec![0];
        }
        let budget = count / min_per_basis;
        let q = (0..=self.time_degree).rev().find(|q| budget >= self.degree + 1 + s * q);
        let (degree, q) = match q {
            Some(q) => (self.degree, q),
            None => (budget.saturating_sub(1).min(self.degree), 0),
        };
        let mut idx: Vec<usize> = (0..=degree).collect();
        for i in 0..s {
            let base = self.degree + 1 + i * self.time_degree;
            idx.extend(base..base + q);
        }
        idx
    }
}

/// `P_1..P_len` on `x` in `[-1, 1]`.
fn legendre(x: f64, out: &mut [f64]) {
    let (mut p0, mut p1) = (1.0, x);
    for (a, o) in out.iter_mut().enumerate() {
        if a == 0 {
            *o = x;
            continue;
        }
        let n = (a + 1) as f64;
        let p2 = ((2.0 * n - 1.0) * x * p1 - (n - 1.0) * p0) / n;
        p0 = p1;
        p1 = p2;
        *o = p2;
    }
}

fn hermite(u: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = u;
    }
    for a in 2..out.len() {
        out[a] = u * out[a - 1] - (a - 1) as f64 * out[a - 2];
    }
}

/// Regression output on one stratum at one step. Coefficients refer to the
/// features listed in `basis`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StratumFit {
    /// Indices into the full feature vector.
    pub basis: Vec<usize>,
    pub count: usize,
    /// Projection of the multi-step target.
    pub y: Vec<f64>,
    /// Projection of the one-step target.
    pub c: Vec<f64>,
    pub z: Vec<f64>,
    /// Numerator and denominator of the projected jump coefficient.
    pub kn: Vec<f64>,
    pub kd: Vec<f64>,
    /// Mean compensator increment on the stratum.
    pub kd_mean: f64,
    /// `K` is the jump of the fitted one-step value into the next stratum.
    pub value_jump: bool,
    pub ridge: bool,
    pub condition: f64,
}

impl StratumFit {
    pub fn eval(&self, coef: &[f64], phi: &[f64]) -> f64 {
        self.basis.iter().zip(coef).map(|(&i, c)| c * phi[i]).sum()
    }

    pub fn z_at(&self, phi: &[f64]) -> f64 {
        self.eval(&self.z, phi)
    }

    /// Projected jump coefficient `E_k[r dM] / E_k[dLambda]`.
    pub fn k_projection(&self, phi: &[f64]) -> f64 {
        if !(self.kd_mean > 0.0) {
            return 0.0;
        }
        let den = self.eval(&self.kd, phi).max(0.1 * self.kd_mean);
        self.eval(&self.kn, phi) / den
    }
}

/// Jump coefficient of the active level `s`; `payout` is the default payout
/// of that level at the current state and `buf` is scratch of the feature
/// length.
fn jump_coefficient(basis: &Basis, fits: &[StratumFit], s: usize, phi: &[f64], payout: f64, buf: &mut [f64]) -> f64 {
    let f = &fits[s];
    if !f.value_jump {
        return f.k_projection(phi);
    }
    buf.copy_from_slice(phi);
    basis.after_default(s, buf);
    fits[s + 1].eval(&fits[s + 1].c, buf) - f.eval(&f.c, phi) + payout
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub basis_size: usize,
    pub ridge_fallbacks: usize,
    pub max_condition: f64,
    pub value_jump_fallbacks: usize,
}

/// Solution of a BSDE on a batch.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    pub y0: Estimate,
    /// `Y` on the grid; column `n` is the terminal condition.
    pub y: PathMatrix,
    /// Regression fits indexed by step and default count.
    pub fits: Vec<Vec<StratumFit>>,
    /// Per-path samples `eta + D_T + sum_k g_k dt` whose mean is `Y_0`.
    pub forward: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub basis: Basis,
    dividend: DividendSpec,
}

impl BsdeSolution {
    pub fn p(&self) -> usize {
        self.basis.p
    }

    pub fn dividend(&self) -> &DividendSpec {
        &self.dividend
    }

    /// Fit, state and feature vector of path `j` at step `k`.
    pub fn fit(&self, batch: &ScenarioBatch, j: usize, k: usize) -> (&StratumFit, State, Vec<f64>) {
        let s = batch.state(j, k);
        let mut phi = vec![0.0; self.basis.size()];
        self.basis.features(s.t, s.w, batch.tau(j), s.defaults, &mut phi);
        (&self.fits[k][s.defaults], s, phi)
    }

    pub fn z_at(&self, batch: &ScenarioBatch, j: usize, k: usize) -> f64 {
        let (f, _, phi) = self.fit(batch, j, k);
        f.z_at(&phi)
    }

    /// `(level, K^level)` of the active level at `t_k`, if any level is active.
    pub fn k_at(&self, batch: &ScenarioBatch, j: usize, k: usize) -> Option<(usize, f64)> {
        let (_, s, phi) = self.fit(batch, j, k);
        if s.defaults >= self.p() {
            return None;
        }
        let payout = self.dividend.theta(s.defaults, &s);
        let mut buf = vec![0.0; phi.len()];
        Some((s.defaults, jump_coefficient(&self.basis, &self.fits[k], s.defaults, &phi, payout, &mut buf)))
    }

    /// `Z` at the left end of every step (`n` columns).
    pub fn z_matrix(&self, batch: &ScenarioBatch) -> PathMatrix {
        let n = batch.grid().steps();
        let mut out = PathMatrix::zeros(batch.paths(), n);
        out.rows_mut().enumerate().for_each(|(j, row)| {
            for (k, x) in row.iter_mut().enumerate() {
                *x = self.z_at(batch, j, k);
            }
        });
        out
    }

    /// `K^i` at the left end of every step (`n` columns), zero where level `i`
    /// is inactive.
    pub fn k_matrix(&self, batch: &ScenarioBatch, i: usize) -> PathMatrix {
        let n = batch.grid().steps();
        let mut out = PathMatrix::zeros(batch.paths(), n);
        out.rows_mut().enumerate().for_each(|(j, row)| {
            for (k, x) in row.iter_mut().enumerate() {
                *x = match self.k_at(batch, j, k) {
                    Some((l, v)) if l == i => v,
                    _ => 0.0,
                };
            }
        });
        out
    }
}

/// Driver evaluation inside a sweep: `(k, j, state, lambda, y, z, k-vector)`.
pub type DriveFn<'a> = dyn Fn(usize, usize, &State, &[f64], f64, f64, &[f64]) -> f64 + Sync + 'a;

#[derive(Clone, Copy, Default)]
struct Obs {
    s: usize,
    w: f64,
    dw: f64,
    dm: f64,
    dlam: f64,
    dd: f64,
}

#[derive(Clone)]
struct Accum {
    count: usize,
    gram: Vec<f64>,
    rhs: Vec<f64>,
}

/// Per-stratum normal equations over all paths, reduced in chunk order.
/// `phi` holds `bmax` features per path.
fn accumulate(obs: &[Obs], phi: &[f64], basis: &Basis, nrhs: usize, rhs: impl Fn(usize, &Obs, &mut [f64]) + Sync) -> Vec<Accum> {
    let bmax = basis.size();
    let strata = basis.p + 1;
    let empty = Accum { count: 0, gram: vec![0.0; bmax * bmax], rhs: vec![0.0; nrhs * bmax] };
    let chunks: Vec<Vec<Accum>> = (0..obs.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![empty.clone(); strata];
            let mut r = vec![0.0; nrhs];
            for j in c * CHUNK..((c + 1) * CHUNK).min(obs.len()) {
                let o = &obs[j];
                let h = &phi[j * bmax..(j + 1) * bmax];
                rhs(j, o, &mut r);
                let a = &mut acc[o.s];
                a.count += 1;
                let len = basis.active(o.s);
                for x in 0..len {
                    for y in x..len {
                        a.gram[x * bmax + y] += h[x] * h[y];
                    }
                    for (q, rq) in r.iter().enumerate() {
                        a.rhs[q * bmax + x] += h[x] * rq;
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![empty; strata];
    for part in chunks {
        for (t, a) in total.iter_mut().zip(part) {
            t.count += a.count;
            for (x, y) in t.gram.iter_mut().zip(&a.gram) {
                *x += y;
            }
            for (x, y) in t.rhs.iter_mut().zip(&a.rhs) {
                *x += y;
            }
        }
    }
    total
}

struct Solved {
    coefs: Vec<Vec<f64>>,
    ridge: bool,
    condition: f64,
}

/// Solves the normal equations restricted to the features `idx`. Only the
/// upper triangle of the Gram matrix is filled.
fn solve(a: &Accum, bmax: usize, idx: &[usize], nrhs: usize) -> Result<Solved> {
    let b = idx.len();
    let g = DMatrix::from_fn(b, b, |x, y| {
        let (lo, hi) = (idx[x].min(idx[y]), idx[x].max(idx[y]));
        a.gram[lo * bmax + hi]
    });
    let eig = g.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), e| (lo.min(*e), hi.max(*e)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let mut ridge = false;
    let chol = match (condition < 1e12).then(|| g.clone().cholesky()).flatten() {
        Some(c) => c,
        None => {
            ridge = true;
            let eps = 1e-10 * g.trace().max(f64::MIN_POSITIVE) / b as f64;
            let r = &g + DMatrix::identity(b, b) * eps;
            r.cholesky().ok_or_else(|| Error::Regression(format!("normal equations singular with {} paths", a.count)))?
        }
    };
    let coefs = (0..nrhs)
        .map(|q| {
            let v = DVector::from_fn(b, |x, _| a.rhs[q * bmax + idx[x]]);
            chol.solve(&v).iter().copied().collect()
        })
        .collect();
    Ok(Solved { coefs, ridge, condition })
}

/// Backward sweep for the driver evaluation `drive`.
pub fn backward_sweep(
    batch: &ScenarioBatch,
    terminal: &[f64],
    dividend: &DividendSpec,
    opts: &LsmcOptions,
    drive: &DriveFn<'_>,
) -> Result<BsdeSolution> {
    let m = batch.paths();
    let grid = batch.grid();
    let n = grid.steps();
    let p = batch.p();
    let dt = grid.dt();
    if terminal.len() != m {
        return Err(Error::Invalid(format!("terminal condition has {} values for {m} paths", terminal.len())));
    }
    if let Some(j) = terminal.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("terminal condition on path {j}")));
    }
    if opts.min_per_basis == 0 {
        return Err(Error::Invalid("min_per_basis must be positive".into()));
    }
    dividend.validate(grid, p)?;
    let schedule = dividend.schedule();
    let has_dividend = !dividend.is_zero();
    let basis = Basis::new(opts, p);
    let bmax = basis.size();

    let mut y = PathMatrix::zeros(m, n + 1);
    y.rows_mut().enumerate().for_each(|(j, row)| row[n] = terminal[j]);
    let mut acc = terminal.to_vec();
    let mut obs = vec![Obs::default(); m];
    let mut phi = vec![0.0; m * bmax];
    let mut next = terminal.to_vec();
    let mut fits = vec![Vec::new(); n];
    let mut diag = Diagnostics { basis_size: bmax, ..Default::default() };

    for k in (0..n).rev() {
        let t = grid.t(k);
        obs.par_iter_mut().zip(phi.par_chunks_mut(bmax)).enumerate().try_for_each(|(j, (o, h))| {
            let inc = batch.step(j, k);
            let dd = if has_dividend { dividend.increment(batch, &schedule, j, k)?.total() } else { 0.0 };
            basis.features(t, inc.w, batch.tau(j), inc.defaults, h);
            *o = Obs { s: inc.defaults, w: inc.w, dw: inc.dw, dm: inc.dm(), dlam: inc.dlam, dd };
            Ok::<(), Error>(())
        })?;
        acc.par_iter_mut().zip(&obs).for_each(|(a, o)| *a += o.dd);

        // Continuation values.
        let first = accumulate(&obs, &phi, &basis, 2, |j, o, r| {
            r[0] = acc[j];
            r[1] = next[j] + o.dd;
        });
        let mut step_fits = Vec::with_capacity(p + 1);
        for (s, a) in first.iter().enumerate() {
            if a.count == 0 {
                step_fits.push(StratumFit::default());
                continue;
            }
            let idx = basis.select(k, s, a.count, opts.min_per_basis);
            let sv = solve(a, bmax, &idx, 2)?;
            diag.ridge_fallbacks += sv.ridge as usize;
            diag.max_condition = diag.max_condition.max(sv.condition);
            step_fits.push(StratumFit {
                basis: idx,
                count: a.count,
                y: sv.coefs[0].clone(),
                c: sv.coefs[1].clone(),
                ridge: sv.ridge,
                condition: sv.condition,
                ..Default::default()
            });
        }

        // Martingale coefficients from the one-step residual.
        let second = accumulate(&obs, &phi, &basis, 3, |j, o, r| {
            let f = &step_fits[o.s];
            let res = next[j] + o.dd - f.eval(&f.c, &phi[j * bmax..(j + 1) * bmax]);
            r[0] = res * o.dw;
            r[1] = res * o.dm;
            r[2] = o.dlam;
        });
        for (s, a) in second.iter().enumerate() {
            if a.count == 0 {
                continue;
            }
            let sv = solve(a, bmax, &step_fits[s].basis, 3)?;
            let f = &mut step_fits[s];
            f.z = sv.coefs[0].iter().map(|x| x / dt).collect();
            if s < p {
                f.kn = sv.coefs[1].clone();
                f.kd = sv.coefs[2].clone();
                f.kd_mean = a.rhs[2 * bmax] / a.count as f64;
            }
        }
        if opts.k_estimator == KEstimator::ValueJump {
            for s in 0..p {
                if step_fits[s].count == 0 {
                    continue;
                }
                if step_fits[s + 1].count >= opts.min_per_basis {
                    step_fits[s].value_jump = true;
                } else {
                    diag.value_jump_fallbacks += 1;
                }
            }
        }

        // Implicit step for Y and the driver contribution to the target.
        let fits_ref = &step_fits;
        let rows: Vec<Result<(f64, f64)>> = (0..m)
            .into_par_iter()
            .map_init(
                || (vec![0.0; p], vec![0.0; p], vec![0.0; bmax]),
                |(lam, kv, buf), j| {
                    let o = &obs[j];
                    let h = &phi[j * bmax..(j + 1) * bmax];
                    let f = &fits_ref[o.s];
                    let st = State::new(t, o.w, o.s);
                    intensities(batch, &st, lam);
                    kv.iter_mut().for_each(|x| *x = 0.0);
                    if o.s < p {
                        kv[o.s] = jump_coefficient(&basis, fits_ref, o.s, h, dividend.theta(o.s, &st), buf);
                    }
                    let z = f.z_at(h);
                    let c = f.eval(&f.y, h);
                    let mut yk = c;
                    let mut g = drive(k, j, &st, lam, yk, z, kv);
                    for _ in 0..opts.inner_iterations {
                        yk = c + dt * g;
                        g = drive(k, j, &st, lam, yk, z, kv);
                    }
                    if !(yk.is_finite() && g.is_finite()) {
                        return Err(Error::NonFinite(format!("solution on path {j} at step {k}")));
                    }
                    Ok((yk, g))
                },
            )
            .collect();
        let mut col = Vec::with_capacity(m);
        for (j, r) in rows.into_iter().enumerate() {
            let (yk, g) = r?;
            acc[j] += dt * g;
            col.push(yk);
        }
        y.rows_mut().zip(&col).for_each(|(row, v)| row[k] = *v);
        next = col;
        fits[k] = step_fits;
    }

    let y0 = Estimate::from_samples(&acc);
    Ok(BsdeSolution { y0, y, fits, forward: acc, diagnostics: diag, basis, dividend: dividend.clone() })
}

/// Solves `-dY = g dt + dD - Z dW - sum K^i dM^i`, `Y_T = eta`.
pub fn solve_backward_lsmc(
    batch: &ScenarioBatch,
    driver: &dyn Driver,
    terminal: &[f64],
    dividend: &DividendSpec,
    opts: &LsmcOptions,
) -> Result<BsdeSolution> {
    if driver.p() != batch.p() {
        return Err(Error::Invalid(format!("driver has {} levels, batch has {}", driver.p(), batch.p())));
    }
    backward_sweep(batch, terminal, dividend, opts, &|_, _, s, lam, y, z, k| driver.eval(s, lam, y, z, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_recursions() {
        let mut h = [0.0; 5];
        hermite(1.3, &mut h);
        assert!((h[3] - (1.3f64.powi(3) - 3.0 * 1.3)).abs() < 1e-12);
        let mut l = [0.0; 3];
        legendre(0.4, &mut l);
        assert!((l[1] - (3.0 * 0.16 - 1.0) / 2.0).abs() < 1e-12);
        assert!((l[2] - (5.0 * 0.064 - 3.0 * 0.4) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_strata_drop_time_features_first() {
        let b = Basis { degree: 3, time_degree: 2, p: 2 };
        assert_eq!(b.select(5, 2, 1000, 10), vec![0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(b.select(5, 2, 60, 10), vec![0, 1, 2, 3, 4, 6]);
        assert_eq!(b.select(5, 2, 30, 10), vec![0, 1, 2]);
        assert_eq!(b.select(0, 0, 1000, 10), vec![0]);
    }
}
