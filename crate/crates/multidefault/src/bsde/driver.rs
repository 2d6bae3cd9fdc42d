//! Drivers `g(t, y, z, k^1..k^p)` and their admissibility probes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calculus::Coefficients;
use crate::error::{Error, Result};
use crate::func::State;
use crate::scenario::ScenarioBatch;

/// A driver evaluated at a state with the intensities `lambda[i]` of every
/// level (zero for inactive levels).
pub trait Driver: Send + Sync {
    fn p(&self) -> usize;
    fn eval(&self, s: &State, lambda: &[f64], y: f64, z: f64, k: &[f64]) -> f64;
    /// Declared constant `C` with
    /// `|g(y1,z1,k1) - g(y2,z2,k2)| <= C (|dy| + |dz| + sum_i sqrt(lambda^i) |dk^i|)`.
    fn lipschitz(&self) -> f64;
    /// Linear coefficients, when the driver is linear.
    fn linear(&self) -> Option<&dyn Coefficients> {
        None
    }
}

/// `alpha y + beta z + sum_i gamma^i k^i lambda^i + delta`.
#[derive(Clone)]
pub struct LinearDriver {
    coeffs: Arc<dyn Coefficients>,
    lipschitz: f64,
}

impl LinearDriver {
    pub fn new(coeffs: Arc<dyn Coefficients>, lipschitz: f64) -> Self {
        Self { coeffs, lipschitz }
    }

    /// Uses the declared coefficient bounds as the Lipschitz constant.
    pub fn from_bounds(coeffs: Arc<dyn Coefficients>) -> Result<Self> {
        let b = coeffs.bounds();
        match (b.alpha, b.beta, b.gamma_sqrt_lambda) {
            (Some(a), Some(be), Some(g)) => {
                let c = a.max(be).max(g);
                Ok(Self { coeffs, lipschitz: c })
            }
            _ => Err(Error::Invalid("linear driver needs declared bounds on alpha, beta and gamma sqrt(lambda)".into())),
        }
    }

    /// Lipschitz constant read off the coefficients along the batch.
    pub fn from_batch(coeffs: Arc<dyn Coefficients>, batch: &ScenarioBatch) -> Self {
        let c = coefficient_sup(&*coeffs, batch);
        Self { coeffs, lipschitz: c }
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coeffs
    }
}

/// Largest of `|alpha|`, `|beta|`, `|gamma^i| sqrt(lambda^i)` over the grid
/// points and default times of the batch.
pub fn coefficient_sup(c: &dyn Coefficients, batch: &ScenarioBatch) -> f64 {
    let n = batch.grid().steps();
    let model = batch.model();
    let per_path = crate::stats::par_map(batch.paths(), |j| {
        let mut m: f64 = 0.0;
        let mut visit = |s: &State| {
            m = m.max(c.alpha(s).abs()).max(c.beta(s).abs());
            if s.defaults < c.p() {
                let lam = model.hazard(s.defaults, s.t, s.w);
                m = m.max(c.gamma(s.defaults, s).abs() * lam.sqrt());
            }
        };
        for k in 0..=n {
            visit(&batch.state(j, k));
        }
        for (i, tau) in batch.tau(j).iter().enumerate() {
            if *tau <= batch.grid().horizon() {
                visit(&State::new(*tau, batch.w_at(j, *tau), i));
            }
        }
        m
    });
    per_path.into_iter().fold(0.0, f64::max)
}

impl Driver for LinearDriver {
    fn p(&self) -> usize {
        self.coeffs.p()
    }

    fn eval(&self, s: &State, lambda: &[f64], y: f64, z: f64, k: &[f64]) -> f64 {
        let c = &*self.coeffs;
        let mut g = c.alpha(s) * y + c.beta(s) * z + c.delta(s);
        for (i, (ki, li)) in k.iter().zip(lambda).enumerate() {
            if *li != 0.0 {
                g += c.gamma(i, s) * ki * li;
            }
        }
        g
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn linear(&self) -> Option<&dyn Coefficients> {
        Some(&*self.coeffs)
    }
}

type DriverFn = dyn Fn(&State, &[f64], f64, f64, &[f64]) -> f64 + Send + Sync;

/// Driver given by a closure.
#[derive(Clone)]
pub struct FnDriver {
    p: usize,
    lipschitz: f64,
    f: Arc<DriverFn>,
}

impl FnDriver {
    pub fn new(p: usize, lipschitz: f64, f: impl Fn(&State, &[f64], f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { p, lipschitz, f: Arc::new(f) }
    }

    /// The driver `g = 0`.
    pub fn zero(p: usize) -> Self {
        Self::new(p, 0.0, |_, _, _, _, _| 0.0)
    }
}

impl Driver for FnDriver {
    fn p(&self) -> usize {
        self.p
    }

    fn eval(&self, s: &State, lambda: &[f64], y: f64, z: f64, k: &[f64]) -> f64 {
        (self.f)(s, lambda, y, z, k)
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// Intensities of all levels in state `s`.
pub fn intensities(batch: &ScenarioBatch, s: &State, out: &mut [f64]) {
    let model = batch.model();
    for (i, o) in out.iter_mut().enumerate() {
        *o = model.intensity(i, s);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub probes: usize,
    /// Largest observed `|dg| / (C (|dy| + |dz| + sum sqrt(lambda) |dk|))`.
    pub worst_ratio: f64,
    pub lipschitz_ok: bool,
    /// The driver ignores `k^i` for levels that already defaulted.
    pub frozen_after_default: bool,
    /// Empirical second moment of `g(t, 0, 0, 0)` along the batch.
    pub zero_second_moment: f64,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.lipschitz_ok && self.frozen_after_default && self.zero_second_moment.is_finite()
    }
}

/// Randomized admissibility check at states drawn from the batch.
pub fn probe_admissibility(driver: &dyn Driver, batch: &ScenarioBatch, probes: usize, seed: u64) -> ProbeReport {
    let p = driver.p();
    let n = batch.grid().steps();
    let c = driver.lipschitz();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut frozen = true;
    let mut lam = vec![0.0; p];
    let (mut k1, mut k2) = (vec![0.0; p], vec![0.0; p]);
    let mut moment = 0.0;
    for _ in 0..probes {
        let j = rng.random_range(0..batch.paths());
        let k = rng.random_range(0..=n);
        let s = batch.state(j, k);
        intensities(batch, &s, &mut lam);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let mut draw = || scale * (2.0 * rng.random::<f64>() - 1.0);
        let (y1, y2, z1, z2) = (draw(), draw(), draw(), draw());
        for i in 0..p {
            k1[i] = draw();
            k2[i] = draw();
        }
        let g1 = driver.eval(&s, &lam, y1, z1, &k1);
        let g2 = driver.eval(&s, &lam, y2, z2, &k2);
        let mut dist = (y1 - y2).abs() + (z1 - z2).abs();
        for i in 0..p {
            dist += lam[i].sqrt() * (k1[i] - k2[i]).abs();
        }
        let dg = (g1 - g2).abs();
        let ratio = if c > 0.0 && dist > 0.0 {
            dg / (c * dist)
        } else if dg > 1e-12 * (1.0 + g1.abs()) {
            f64::INFINITY
        } else {
            0.0
        };
        worst = worst.max(if ratio.is_nan() { f64::INFINITY } else { ratio });
        // Perturbing positions of defaulted levels must not move g.
        if s.defaults > 0 {
            let mut k3 = k1.clone();
            for x in k3.iter_mut().take(s.defaults.min(p)) {
                *x += scale;
            }
            let g3 = driver.eval(&s, &lam, y1, z1, &k3);
            if (g3 - g1).abs() > 1e-12 * (1.0 + g1.abs()) {
                frozen = false;
            }
        }
        let zero = vec![0.0; p];
        let g0 = driver.eval(&s, &lam, 0.0, 0.0, &zero);
        moment += g0 * g0;
    }
    ProbeReport {
        probes,
        worst_ratio: worst,
        lipschitz_ok: worst <= 1.0 + 1e-9,
        frozen_after_default: frozen,
        zero_second_moment: moment / probes.max(1) as f64,
    }
}

/// Runs the probe and turns a failure into an error.
pub fn require_admissible(driver: &dyn Driver, batch: &ScenarioBatch, probes: usize, seed: u64) -> Result<ProbeReport> {
    if driver.p() != batch.p() {
        return Err(Error::Invalid(format!("driver has {} levels, batch has {}", driver.p(), batch.p())));
    }
    let r = probe_admissibility(driver, batch, probes, seed);
    if !r.passed() {
        return Err(Error::Probe(format!(
            "worst Lipschitz ratio {:.4}, frozen after default: {}, g(0) second moment {}",
            r.worst_ratio, r.frozen_after_default, r.zero_second_moment
        )));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::CoefficientSet;
    use crate::scenario::{simulate_batch, IntensityModel, TimeGrid};

    fn batch() -> ScenarioBatch {
        simulate_batch(TimeGrid::new(1.0, 10).unwrap(), &IntensityModel::constant(&[1.0, 2.0]), 200, 3).unwrap()
    }

    #[test]
    fn linear_driver_passes_probe() {
        let b = batch();
        let c = Arc::new(CoefficientSet::constant(-0.5, 0.3, &[-0.4, 0.6], 0.1));
        let d = LinearDriver::from_batch(c, &b);
        assert!((d.lipschitz() - 0.6 * 2f64.sqrt()).abs() < 1e-12);
        let r = require_admissible(&d, &b, 200, 1).unwrap();
        assert!(r.worst_ratio <= 1.0);
    }

    #[test]
    fn understated_constant_is_caught() {
        let b = batch();
        let d = FnDriver::new(2, 0.5, |_, _, y, _, _| 2.0 * y);
        assert!(require_admissible(&d, &b, 200, 1).is_err());
    }

    #[test]
    fn dependence_on_defaulted_level_is_caught() {
        let b = batch();
        let d = FnDriver::new(2, 10.0, |_, _, _, _, k| 0.1 * k[0]);
        let r = probe_admissibility(&d, &b, 400, 2);
        assert!(!r.frozen_after_default);
    }
}
