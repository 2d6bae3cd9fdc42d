//! Stochastic exponentials along simulated paths.
//!
//! The adjoint process of a linear driver solves
//! `dG = G_- (alpha ds + beta dW + sum_i gamma^i dM^i)` and has the closed form
//! `exp(int alpha + int beta dW - 1/2 int beta^2 - int sum gamma^i lambda^i) * prod_i (1 + gamma^i_{tau_i})`.
//! Deterministic integrals use the trapezoid rule on pieces split at default
//! times, `dW` integrals use left-point sums, and jumps are applied exactly at
//! the default times.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::func::{Func, State};
use crate::scenario::{IntensityModel, Piece, ScenarioBatch, StepEvent};
use crate::stats::{Estimate, PathMatrix};

/// Coefficients `(alpha, beta, gamma^1..gamma^p, delta)` of a linear driver.
pub trait Coefficients: Send + Sync {
    fn p(&self) -> usize;
    fn alpha(&self, s: &State) -> f64;
    fn beta(&self, s: &State) -> f64;
    /// Coefficient of level `i` (zero based).
    fn gamma(&self, i: usize, s: &State) -> f64;
    fn delta(&self, _s: &State) -> f64 {
        0.0
    }
    fn bounds(&self) -> CoefBounds {
        CoefBounds::default()
    }
}

/// Declared bounds on `|alpha|`, `|beta|` and `|gamma^i| sqrt(lambda^i)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefBounds {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub gamma_sqrt_lambda: Option<f64>,
}

/// Parametric coefficient set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSet {
    #[serde(default)]
    pub alpha: Func,
    #[serde(default)]
    pub beta: Func,
    #[serde(default)]
    pub gamma: Vec<Func>,
    #[serde(default)]
    pub delta: Func,
    #[serde(default)]
    pub bounds: CoefBounds,
}

impl CoefficientSet {
    pub fn zero(p: usize) -> Self {
        Self { gamma: vec![Func::default(); p], ..Default::default() }
    }

    pub fn constant(alpha: f64, beta: f64, gamma: &[f64], delta: f64) -> Self {
        Self {
            alpha: alpha.into(),
            beta: beta.into(),
            gamma: gamma.iter().map(|g| Func::constant(*g)).collect(),
            delta: delta.into(),
            bounds: CoefBounds::default(),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.gamma.len() != p {
            return Err(Error::Invalid(format!("expected {p} gamma coefficients, got {}", self.gamma.len())));
        }
        Ok(())
    }
}

impl Coefficients for CoefficientSet {
    fn p(&self) -> usize {
        self.gamma.len()
    }

    fn alpha(&self, s: &State) -> f64 {
        self.alpha.eval(s)
    }

    fn beta(&self, s: &State) -> f64 {
        self.beta.eval(s)
    }

    fn gamma(&self, i: usize, s: &State) -> f64 {
        self.gamma[i].eval(s)
    }

    fn delta(&self, s: &State) -> f64 {
        self.delta.eval(s)
    }

    fn bounds(&self) -> CoefBounds {
        self.bounds
    }
}

/// Checks one evaluated coefficient against its declared bound.
fn within(bound: Option<f64>, value: f64, what: &str, s: &State) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{what} at t={} w={}", s.t, s.w)));
    }
    if let Some(b) = bound {
        if value.abs() > b * (1.0 + 1e-12) {
            return Err(Error::Bound(format!("|{what}| = {} > {b} at t={} w={}", value.abs(), s.t, s.w)));
        }
    }
    Ok(value)
}

pub(crate) fn alpha_checked(c: &dyn Coefficients, s: &State) -> Result<f64> {
    within(c.bounds().alpha, c.alpha(s), "alpha", s)
}

pub(crate) fn beta_checked(c: &dyn Coefficients, s: &State) -> Result<f64> {
    within(c.bounds().beta, c.beta(s), "beta", s)
}

pub(crate) fn gamma_checked(c: &dyn Coefficients, model: &IntensityModel, i: usize, s: &State) -> Result<f64> {
    let g = c.gamma(i, s);
    if !g.is_finite() {
        return Err(Error::NonFinite(format!("gamma{} at t={}", i + 1, s.t)));
    }
    if let Some(b) = c.bounds().gamma_sqrt_lambda {
        let lam = model.hazard(i, s.t, s.w);
        if g.abs() * lam.sqrt() > b * (1.0 + 1e-12) {
            return Err(Error::Bound(format!("|gamma{}| sqrt(lambda) = {} > {b}", i + 1, g.abs() * lam.sqrt())));
        }
    }
    Ok(g)
}

/// Log-increment of the continuous part of the adjoint over one piece.
pub(crate) fn piece_exponent(c: &dyn Coefficients, model: &IntensityModel, pc: &Piece) -> Result<f64> {
    let (sa, sb) = (pc.start(), pc.end());
    let h = pc.len();
    let (aa, ab) = (alpha_checked(c, &sa)?, alpha_checked(c, &sb)?);
    let (ba, bb) = (beta_checked(c, &sa)?, beta_checked(c, &sb)?);
    let mut x = 0.5 * (aa + ab) * h - 0.25 * (ba * ba + bb * bb) * h + ba * (pc.wb - pc.wa);
    if pc.defaults < c.p() && pc.rate > 0.0 {
        let (ga, gb) = (gamma_checked(c, model, pc.defaults, &sa)?, gamma_checked(c, model, pc.defaults, &sb)?);
        x -= 0.5 * (ga + gb) * pc.dlam();
    }
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("adjoint exponent on [{}, {}]", pc.a, pc.b)));
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointJump {
    pub level: usize,
    pub tau: f64,
    pub left: f64,
    pub right: f64,
}

/// `Gamma_{t, s}` for `t = t_start` and grid points `s >= t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointPath {
    pub start: usize,
    /// Values at grid indices `start..=n`.
    pub values: Vec<f64>,
    /// Left and right values at default times in `(t, T]`.
    pub jumps: Vec<AdjointJump>,
}

impl AdjointPath {
    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("adjoint path is never empty")
    }

    pub fn at(&self, k: usize) -> f64 {
        self.values[k - self.start]
    }
}

pub fn closed_form_path(batch: &ScenarioBatch, c: &dyn Coefficients, j: usize, start: usize) -> Result<AdjointPath> {
    let n = batch.grid().steps();
    let model = batch.model();
    let mut expo = 0.0;
    let mut prod = 1.0;
    let mut values = Vec::with_capacity(n + 1 - start);
    let mut jumps = Vec::new();
    values.push(1.0);
    let mut err = None;
    for k in start..n {
        batch.walk_step(j, k, &[], |ev| {
            if err.is_some() {
                return;
            }
            match ev {
                StepEvent::Piece(pc) => match piece_exponent(c, model, &pc) {
                    Ok(x) => expo += x,
                    Err(e) => err = Some(e),
                },
                StepEvent::Default { level, tau, w } => {
                    let left = expo.exp() * prod;
                    match gamma_checked(c, model, level, &State::new(tau, w, level)) {
                        Ok(g) => prod *= 1.0 + g,
                        Err(e) => err = Some(e),
                    }
                    jumps.push(AdjointJump { level, tau, left, right: expo.exp() * prod });
                }
                StepEvent::Mark { .. } => {}
            }
        });
        if let Some(e) = err.take() {
            return Err(e);
        }
        values.push(expo.exp() * prod);
    }
    Ok(AdjointPath { start, values, jumps })
}

/// Recursive product scheme for the adjoint SDE. Coefficients are frozen at
/// the left end of each piece; the `1/2 beta^2 (dW^2 - dt)` term keeps the
/// scheme first order in the presence of Brownian noise.
pub fn euler_path(batch: &ScenarioBatch, c: &dyn Coefficients, j: usize, start: usize) -> Result<AdjointPath> {
    let n = batch.grid().steps();
    let model = batch.model();
    let mut g = 1.0;
    let mut values = Vec::with_capacity(n + 1 - start);
    let mut jumps = Vec::new();
    values.push(1.0);
    let mut err = None;
    for k in start..n {
        batch.walk_step(j, k, &[], |ev| {
            if err.is_some() {
                return;
            }
            let r: Result<()> = (|| {
                match ev {
                    StepEvent::Piece(pc) => {
                        let s = pc.start();
                        let a = alpha_checked(c, &s)?;
                        let b = beta_checked(c, &s)?;
                        let dw = pc.wb - pc.wa;
                        let h = pc.len();
                        let mut f = 1.0 + a * h + b * dw + 0.5 * b * b * (dw * dw - h);
                        if pc.defaults < c.p() && pc.rate > 0.0 {
                            f -= gamma_checked(c, model, pc.defaults, &s)? * pc.dlam();
                        }
                        g *= f;
                    }
                    StepEvent::Default { level, tau, w } => {
                        let left = g;
                        g *= 1.0 + gamma_checked(c, model, level, &State::new(tau, w, level))?;
                        jumps.push(AdjointJump { level, tau, left, right: g });
                    }
                    StepEvent::Mark { .. } => {}
                }
                Ok(())
            })();
            if let Err(e) = r {
                err = Some(e);
            }
        });
        if let Some(e) = err.take() {
            return Err(e);
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("euler adjoint on path {j}")));
        }
        values.push(g);
    }
    Ok(AdjointPath { start, values, jumps })
}

pub fn stochastic_exponential_closed_form(batch: &ScenarioBatch, c: &dyn Coefficients, start: usize) -> Result<Vec<AdjointPath>> {
    check_start(batch, c, start)?;
    (0..batch.paths()).into_par_iter().map(|j| closed_form_path(batch, c, j, start)).collect()
}

pub fn stochastic_exponential_euler(batch: &ScenarioBatch, c: &dyn Coefficients, start: usize) -> Result<Vec<AdjointPath>> {
    check_start(batch, c, start)?;
    (0..batch.paths()).into_par_iter().map(|j| euler_path(batch, c, j, start)).collect()
}

fn check_start(batch: &ScenarioBatch, c: &dyn Coefficients, start: usize) -> Result<()> {
    if start > batch.grid().steps() {
        return Err(Error::Invalid(format!("start index {start} beyond the grid")));
    }
    if c.p() != batch.p() {
        return Err(Error::Invalid(format!("coefficients carry {} levels, batch has {}", c.p(), batch.p())));
    }
    Ok(())
}

/// Mean over paths of `sup_s |closed - euler|`.
pub fn mean_sup_error(closed: &[AdjointPath], euler: &[AdjointPath]) -> f64 {
    let total: f64 =
        closed.iter().zip(euler).map(|(a, b)| a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)).sum();
    total / closed.len() as f64
}

/// Coefficients `(0, 2 beta, 2 gamma + gamma^2)` of the process `zeta` in the
/// squared-exponential identity.
struct Squared<'a>(&'a dyn Coefficients);

impl Coefficients for Squared<'_> {
    fn p(&self) -> usize {
        self.0.p()
    }
    fn alpha(&self, _s: &State) -> f64 {
        0.0
    }
    fn beta(&self, s: &State) -> f64 {
        2.0 * self.0.beta(s)
    }
    fn gamma(&self, i: usize, s: &State) -> f64 {
        let g = self.0.gamma(i, s);
        2.0 * g + g * g
    }
}

/// Largest relative gap on path `j` between `Gamma^2` and
/// `zeta * exp(int (2 alpha + beta^2 + sum gamma^2 lambda))`.
pub fn squared_exponential_gap(batch: &ScenarioBatch, c: &dyn Coefficients, j: usize) -> Result<f64> {
    let gamma = closed_form_path(batch, c, j, 0)?;
    let zeta = closed_form_path(batch, &Squared(c), j, 0)?;
    let mut extra = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..batch.grid().steps() {
        batch.walk_step(j, k, &[], |ev| {
            if let StepEvent::Piece(pc) = ev {
                let (sa, sb) = (pc.start(), pc.end());
                let h = pc.len();
                extra += (c.alpha(&sa) + c.alpha(&sb)) * h;
                extra += 0.5 * (c.beta(&sa).powi(2) + c.beta(&sb).powi(2)) * h;
                if pc.defaults < c.p() && pc.rate > 0.0 {
                    let (ga, gb) = (c.gamma(pc.defaults, &sa), c.gamma(pc.defaults, &sb));
                    extra += 0.5 * (ga * ga + gb * gb) * pc.dlam();
                }
            }
        });
        let lhs = gamma.values[k + 1].powi(2);
        let rhs = zeta.values[k + 1] * extra.exp();
        let scale = lhs.abs().max(rhs.abs()).max(1e-300);
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Ok(worst)
}

/// How a process is weighted inside a beta-norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormWeight {
    Plain,
    /// Weight by the intensity of the given level (zero based).
    Intensity(usize),
}

/// Monte Carlo estimate of `E int_0^T e^{beta t} phi_t^2 dt` (optionally with
/// an intensity weight). A process with `n + 1` columns is integrated by the
/// trapezoid rule; one with `n` columns is treated as constant on each step.
pub fn beta_norm(batch: &ScenarioBatch, process: &PathMatrix, beta_w: f64, weight: NormWeight) -> Result<Estimate> {
    let grid = batch.grid();
    let n = grid.steps();
    if process.paths() != batch.paths() || (process.cols() != n + 1 && process.cols() != n) {
        return Err(Error::Invalid("process shape does not match the batch".into()));
    }
    if !(beta_w > 0.0) {
        return Err(Error::Invalid(format!("beta weight must be positive, got {beta_w}")));
    }
    let dt = grid.dt();
    let trapezoid = process.cols() == n + 1;
    let per_path: Vec<f64> = (0..batch.paths())
        .into_par_iter()
        .map(|j| {
            let row = process.row(j);
            let term = |k: usize| {
                let lam = match weight {
                    NormWeight::Plain => 1.0,
                    NormWeight::Intensity(i) => batch.lambda(j, k, i),
                };
                (beta_w * grid.t(k)).exp() * row[k] * row[k] * lam
            };
            if trapezoid {
                (0..n).map(|k| 0.5 * (term(k) + term(k + 1)) * dt).sum()
            } else {
                (0..n).map(|k| term(k) * dt).sum()
            }
        })
        .collect();
    Ok(Estimate::from_samples(&per_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{simulate_batch, TimeGrid};

    fn batch(rates: &[f64], m: usize, n: usize) -> ScenarioBatch {
        simulate_batch(TimeGrid::new(1.0, n).unwrap(), &IntensityModel::constant(rates), m, 17).unwrap()
    }

    #[test]
    fn zero_coefficients_give_one() {
        let b = batch(&[1.0, 1.0], 200, 10);
        let c = CoefficientSet::zero(2);
        for path in stochastic_exponential_closed_form(&b, &c, 0).unwrap() {
            assert!(path.values.iter().all(|v| *v == 1.0));
        }
        for path in stochastic_exponential_euler(&b, &c, 0).unwrap() {
            assert!(path.values.iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn minus_one_jump_kills_the_exponential() {
        let b = batch(&[1.0], 300, 10);
        let c = CoefficientSet::constant(0.0, 0.0, &[-1.0], 0.0);
        let paths = stochastic_exponential_closed_form(&b, &c, 0).unwrap();
        for (j, path) in paths.iter().enumerate() {
            let tau = b.tau(j)[0];
            for k in 0..=10 {
                let s = b.grid().t(k);
                if tau <= s {
                    assert_eq!(path.values[k], 0.0);
                } else {
                    assert!((path.values[k] - s.exp()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_drift_is_exact() {
        let b = batch(&[0.5], 20, 8);
        let c = CoefficientSet::constant(0.3, 0.0, &[0.0], 0.0);
        for path in stochastic_exponential_closed_form(&b, &c, 2).unwrap() {
            for (i, v) in path.values.iter().enumerate() {
                let dt = b.grid().t(i + 2) - b.grid().t(2);
                assert!((v - (0.3 * dt).exp()).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn declared_bound_is_enforced() {
        let b = batch(&[1.0], 5, 4);
        let mut c = CoefficientSet::constant(2.0, 0.0, &[0.0], 0.0);
        c.bounds.alpha = Some(1.0);
        assert!(matches!(stochastic_exponential_closed_form(&b, &c, 0), Err(Error::Bound(_))));
    }

    #[test]
    fn squared_identity_holds_pathwise() {
        let b = batch(&[1.5, 0.7], 100, 20);
        let c = CoefficientSet {
            alpha: Func::Affine { c: 0.1, t: 0.2, w: 0.0, lo: None, hi: None },
            beta: Func::Tanh { c: 0.2, amp: 0.3, scale: 1.0 },
            gamma: vec![Func::constant(-0.4), Func::PerCount { values: vec![0.0, 0.5] }],
            ..Default::default()
        };
        for j in 0..100 {
            assert!(squared_exponential_gap(&b, &c, j).unwrap() < 1e-10);
        }
    }

    #[test]
    fn beta_norm_of_one_is_e_minus_one() {
        let b = batch(&[1.0], 50, 200);
        let one = PathMatrix::from_vec(50, 201, vec![1.0; 50 * 201]);
        let e = beta_norm(&b, &one, 1.0, NormWeight::Plain).unwrap();
        assert!((e.mean - (1f64.exp() - 1.0)).abs() < 1e-5);
        let zero_rate = simulate_batch(TimeGrid::new(1.0, 10).unwrap(), &IntensityModel::constant(&[0.0]), 10, 1).unwrap();
        let ones = PathMatrix::from_vec(10, 11, vec![1.0; 110]);
        assert_eq!(beta_norm(&zero_rate, &ones, 1.0, NormWeight::Intensity(0)).unwrap().mean, 0.0);
    }
}
