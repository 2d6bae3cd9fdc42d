//! Empirical checks of the a priori estimates and of the comparison theorem
//! at `t = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calculus::{beta_norm, NormWeight};
use crate::dividend::{dominates, DividendSpec, DominanceReport};
use crate::error::{Error, Result};
use crate::func::State;
use crate::scenario::ScenarioBatch;
use crate::stats::{Estimate, PathMatrix};

use super::driver::{intensities, Driver};
use super::lsmc::BsdeSolution;

/// A BSDE: driver, terminal values on the batch and dividend process.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub driver: &'a dyn Driver,
    pub terminal: &'a [f64],
    pub dividend: &'a DividendSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inequality {
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of `lhs - rhs`.
    pub se: f64,
    pub holds: bool,
}

impl Inequality {
    fn new(lhs: Estimate, rhs: Estimate) -> Self {
        let se = (lhs.se * lhs.se + rhs.se * rhs.se).sqrt();
        Self { lhs: lhs.mean, rhs: rhs.mean, se, holds: lhs.mean <= rhs.mean + 3.0 * se }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AprioriParams {
    pub xi: f64,
    pub beta_w: f64,
}

impl AprioriParams {
    /// `xi = 1 / (2 C^2)`, `beta_w = (p + 2) / xi + 2 C`; for `C = 0`,
    /// `xi = 1` and `beta_w = p + 2`.
    pub fn for_constant(c: f64, p: usize) -> Self {
        let q = (p + 2) as f64;
        if c > 0.0 {
            let xi = 1.0 / (2.0 * c * c);
            Self { xi, beta_w: q / xi + 2.0 * c }
        } else {
            Self { xi: 1.0, beta_w: q }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateReport {
    pub xi: f64,
    pub beta_w: f64,
    pub lipschitz: f64,
    /// `Ybar_0^2 <= e^{beta T} E[etabar^2] + xi ||gbar||^2_beta`.
    pub first: Inequality,
    /// `||Ybar||^2_beta <= T (e^{beta T} E[etabar^2] + xi ||gbar||^2_beta)`.
    pub second: Inequality,
    /// `||Zbar||^2_beta + ||Kbar||^2_{lambda, beta} <= (...) / (1 - C^2 xi)`.
    pub third: Inequality,
}

impl EstimateReport {
    pub fn passed(&self) -> bool {
        self.first.holds && self.second.holds && self.third.holds
    }
}

fn k_vector(sol: &BsdeSolution, batch: &ScenarioBatch, j: usize, k: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    if let Some((i, v)) = sol.k_at(batch, j, k) {
        out[i] = v;
    }
}

/// Checks the three a priori inequalities for problems `a` and `b` sharing
/// the dividend process, with `C` the Lipschitz constant of `a`'s driver.
pub fn check_apriori(
    batch: &ScenarioBatch,
    a: &Problem,
    b: &Problem,
    sa: &BsdeSolution,
    sb: &BsdeSolution,
    params: AprioriParams,
) -> Result<EstimateReport> {
    if a.dividend != b.dividend {
        return Err(Error::Invalid("a priori estimates need both problems to share the dividend process".into()));
    }
    let c = a.driver.lipschitz();
    let AprioriParams { xi, beta_w } = params;
    let q = (batch.p() + 2) as f64;
    if !(xi > 0.0 && beta_w >= q / xi + 2.0 * c - 1e-12 && c * c * xi < 1.0) {
        return Err(Error::Invalid(format!("xi = {xi}, beta = {beta_w} violate the hypotheses for C = {c}")));
    }
    let grid = batch.grid();
    let (n, p, dt, horizon) = (grid.steps(), batch.p(), grid.dt(), grid.horizon());
    let growth = (beta_w * horizon).exp();

    // Per path: e^{beta T} etabar^2 + xi int e^{beta s} gbar^2 ds, and the Z/K norm integrand.
    let per_path: Vec<(f64, f64)> = (0..batch.paths())
        .into_par_iter()
        .map(|j| {
            let mut lam = vec![0.0; p];
            let (mut kh, mut ka) = (vec![0.0; p], vec![0.0; p]);
            let eb = a.terminal[j] - b.terminal[j];
            let mut gsum = 0.0;
            let mut zk = 0.0;
            for k in 0..n {
                let s = batch.state(j, k);
                intensities(batch, &s, &mut lam);
                k_vector(sb, batch, j, k, &mut kh);
                k_vector(sa, batch, j, k, &mut ka);
                let (yh, zh) = (sb.y.get(j, k), sb.z_at(batch, j, k));
                let gbar = a.driver.eval(&s, &lam, yh, zh, &kh) - b.driver.eval(&s, &lam, yh, zh, &kh);
                let w = (beta_w * s.t).exp() * dt;
                gsum += w * gbar * gbar;
                let dz = sa.z_at(batch, j, k) - zh;
                let mut v = dz * dz;
                for i in 0..p {
                    v += (ka[i] - kh[i]).powi(2) * lam[i];
                }
                zk += w * v;
            }
            (growth * eb * eb + xi * gsum, zk)
        })
        .collect();
    let rhs: Vec<f64> = per_path.iter().map(|x| x.0).collect();
    let zk: Vec<f64> = per_path.iter().map(|x| x.1).collect();
    let r = Estimate::from_samples(&rhs);

    let ydiff: Vec<f64> = sa.forward.iter().zip(&sb.forward).map(|(x, y)| x - y).collect();
    let yd = Estimate::from_samples(&ydiff);
    let lhs1 = Estimate { mean: yd.mean * yd.mean, se: 2.0 * yd.mean.abs() * yd.se + yd.se * yd.se };
    let first = Inequality::new(lhs1, r);

    let ybar = PathMatrix::from_vec(batch.paths(), n + 1, sa.y.data().iter().zip(sb.y.data()).map(|(x, y)| x - y).collect());
    let lhs2 = beta_norm(batch, &ybar, beta_w, NormWeight::Plain)?;
    let second = Inequality::new(lhs2, Estimate { mean: horizon * r.mean, se: horizon * r.se });

    let factor = 1.0 / (1.0 - c * c * xi);
    let third = Inequality::new(Estimate::from_samples(&zk), Estimate { mean: factor * r.mean, se: factor * r.se });
    Ok(EstimateReport { xi, beta_w, lipschitz: c, first, second, third })
}

/// Coefficients `gamma^i(t, state)` used by the comparison hypotheses.
pub type GammaMap<'a> = dyn Fn(usize, &State) -> f64 + Sync + 'a;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpConditionReport {
    /// Defaults before the horizon at which `1 + gamma` was evaluated.
    pub checked: usize,
    pub violations: usize,
    pub violating_paths: usize,
    pub min_one_plus_gamma: f64,
}

impl JumpConditionReport {
    /// On every `A_k`, `1 + gamma^i_{tau_i} >= 0` for `i <= k`.
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Evaluates `1 + gamma^i_{tau_i}` at every default before the horizon; the
/// sets `A_k = {tau_k <= T < tau_{k+1}}` partition the paths by default count.
pub fn check_jump_condition(batch: &ScenarioBatch, gamma: &GammaMap) -> JumpConditionReport {
    let horizon = batch.grid().horizon();
    let per_path: Vec<(usize, usize, f64)> = (0..batch.paths())
        .into_par_iter()
        .map(|j| {
            let (mut checked, mut bad, mut lo) = (0, 0, f64::INFINITY);
            for (i, tau) in batch.tau(j).iter().enumerate() {
                if *tau > horizon {
                    break;
                }
                let v = 1.0 + gamma(i, &State::new(*tau, batch.w_at(j, *tau), i));
                checked += 1;
                lo = lo.min(v);
                if !(v >= 0.0) {
                    bad += 1;
                }
            }
            (checked, bad, lo)
        })
        .collect();
    let mut r = JumpConditionReport { checked: 0, violations: 0, violating_paths: 0, min_one_plus_gamma: f64::INFINITY };
    for (c, b, lo) in per_path {
        r.checked += c;
        r.violations += b;
        r.violating_paths += (b > 0) as usize;
        r.min_one_plus_gamma = r.min_one_plus_gamma.min(lo);
    }
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProbeOutcome {
    pub probes: usize,
    pub violations: usize,
    /// Largest shortfall `rhs - lhs`.
    pub worst: f64,
}

impl ProbeOutcome {
    fn record(&mut self, lhs: f64, rhs: f64) {
        self.probes += 1;
        let gap = rhs - lhs;
        if gap > 1e-10 * (1.0 + lhs.abs() + rhs.abs()) {
            self.violations += 1;
        }
        self.worst = self.worst.max(gap);
    }

    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrictReport {
    pub terminal_equal: bool,
    pub dividend_constant: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub jump_condition: JumpConditionReport,
    pub terminal_ordered: bool,
    pub terminal_violations: usize,
    pub dividend: DominanceReport,
    /// `g(Yh, Zh, K) - g(Yh, Zh, Kh) >= sum gamma^i (K^i - Kh^i) lambda^i`.
    pub k_condition: ProbeOutcome,
    /// `g(Yh, Zh, Kh) >= gh(Yh, Zh, Kh)`.
    pub driver_ordered: ProbeOutcome,
    pub y0: f64,
    pub y0_hat: f64,
    /// Standard error of the pathwise difference.
    pub se: f64,
    /// `Y_0 >= Yh_0 - 3 se`.
    pub ordered: bool,
    /// Present when every `1 + gamma^i_{tau_i} > 0` and the two values agree.
    pub strict: Option<StrictReport>,
}

impl ComparisonReport {
    pub fn hypotheses_hold(&self) -> bool {
        self.jump_condition.holds()
            && self.terminal_ordered
            && self.dividend.dominates
            && self.k_condition.holds()
            && self.driver_ordered.holds()
    }
}

/// Checks the comparison hypotheses for `a` over `b` and the resulting order
/// of `Y_0`. The driver conditions are probed at `probes` solved points and
/// at as many random arguments.
#[allow(clippy::too_many_arguments)]
pub fn check_comparison(
    batch: &ScenarioBatch,
    a: &Problem,
    b: &Problem,
    sa: &BsdeSolution,
    sb: &BsdeSolution,
    gamma: &GammaMap,
    probes: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    let p = batch.p();
    let n = batch.grid().steps();
    let jump_condition = check_jump_condition(batch, gamma);
    let terminal_violations = a.terminal.iter().zip(b.terminal).filter(|(x, y)| x < y).count();
    let dividend = dominates(a.dividend, b.dividend, batch)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k_condition = ProbeOutcome::default();
    let mut driver_ordered = ProbeOutcome::default();
    let mut lam = vec![0.0; p];
    let (mut kh, mut ka) = (vec![0.0; p], vec![0.0; p]);
    for probe in 0..2 * probes {
        let j = rng.random_range(0..batch.paths());
        let k = rng.random_range(0..n);
        let s = batch.state(j, k);
        intensities(batch, &s, &mut lam);
        let (yh, zh);
        if probe < probes {
            yh = sb.y.get(j, k);
            zh = sb.z_at(batch, j, k);
            k_vector(sb, batch, j, k, &mut kh);
            k_vector(sa, batch, j, k, &mut ka);
        } else {
            let scale = 10f64.powf(rng.random_range(-1.0..1.0));
            yh = scale * (2.0 * rng.random::<f64>() - 1.0);
            zh = scale * (2.0 * rng.random::<f64>() - 1.0);
            for i in 0..p {
                kh[i] = scale * (2.0 * rng.random::<f64>() - 1.0);
                ka[i] = scale * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        let base = a.driver.eval(&s, &lam, yh, zh, &kh);
        let moved = a.driver.eval(&s, &lam, yh, zh, &ka);
        let lin: f64 = (0..p).map(|i| gamma(i, &s) * (ka[i] - kh[i]) * lam[i]).sum();
        k_condition.record(moved - base, lin);
        driver_ordered.record(base, b.driver.eval(&s, &lam, yh, zh, &kh));
    }

    let diff: Vec<f64> = sa.forward.iter().zip(&sb.forward).map(|(x, y)| x - y).collect();
    let d = Estimate::from_samples(&diff);
    let (y0, y0_hat) = (sa.y0.mean, sb.y0.mean);
    let ordered = y0 >= y0_hat - 3.0 * d.se;
    let strict = (jump_condition.min_one_plus_gamma > 0.0 && (y0 - y0_hat).abs() <= 3.0 * d.se).then(|| StrictReport {
        terminal_equal: a.terminal.iter().zip(b.terminal).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs())),
        dividend_constant: dividend.constant_difference,
    });
    Ok(ComparisonReport {
        jump_condition,
        terminal_ordered: terminal_violations == 0,
        terminal_violations,
        dividend,
        k_condition,
        driver_ordered,
        y0,
        y0_hat,
        se: d.se,
        ordered,
        strict,
    })
}
