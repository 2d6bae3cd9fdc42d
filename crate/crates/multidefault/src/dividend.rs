//! Cumulative dividend processes `D = D' + sum_i int theta^i dN^i`.
//!
//! The predictable part `D'` is an absolutely continuous rate plus jumps at
//! scheduled dates; `theta^i` is paid at `tau_i` when it falls before the
//! horizon.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::func::{Func, State};
use crate::scenario::{ScenarioBatch, StepEvent, TimeGrid};
use crate::stats::PathMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledPayment {
    pub t: f64,
    pub amount: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DividendSpec {
    /// Rate `d'(t, state)` of the absolutely continuous part.
    #[serde(default)]
    pub rate: Func,
    #[serde(default)]
    pub scheduled: Vec<ScheduledPayment>,
    /// Default payouts `theta^1..theta^p`; missing levels pay nothing.
    #[serde(default)]
    pub payouts: Vec<Func>,
}

/// Increment of `D` over one step, split into its two components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DividendIncrement {
    pub predictable: f64,
    pub payout: f64,
}

impl DividendIncrement {
    pub fn total(&self) -> f64 {
        self.predictable + self.payout
    }
}

impl DividendSpec {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn validate(&self, grid: &TimeGrid, p: usize) -> Result<()> {
        for s in &self.scheduled {
            if !(s.t > 0.0 && s.t <= grid.horizon()) {
                return Err(Error::Invalid(format!("scheduled payment at t={} outside (0, T]", s.t)));
            }
            if !s.amount.is_finite() {
                return Err(Error::Invalid("scheduled payment amount is not finite".into()));
            }
        }
        if self.payouts.len() > p {
            return Err(Error::Invalid(format!("{} payouts given for {p} default levels", self.payouts.len())));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.rate.is_zero() && self.scheduled.iter().all(|s| s.amount == 0.0) && self.payouts.iter().all(Func::is_zero)
    }

    /// Whether `D` has no default payouts, i.e. is predictable.
    pub fn is_predictable(&self) -> bool {
        self.payouts.iter().all(Func::is_zero)
    }

    pub fn theta(&self, i: usize, s: &State) -> f64 {
        self.payouts.get(i).map_or(0.0, |f| f.eval(s))
    }

    /// Scheduled dates and amounts sorted by date.
    pub fn schedule(&self) -> (Vec<f64>, Vec<f64>) {
        let mut items = self.scheduled.clone();
        items.sort_by(|a, b| a.t.total_cmp(&b.t));
        (items.iter().map(|s| s.t).collect(), items.iter().map(|s| s.amount).collect())
    }

    /// Increment of `D` over `(t_k, t_{k+1}]` on path `j`.
    pub fn increment(&self, batch: &ScenarioBatch, schedule: &(Vec<f64>, Vec<f64>), j: usize, k: usize) -> Result<DividendIncrement> {
        let mut inc = DividendIncrement::default();
        batch.walk_step(j, k, &schedule.0, |ev| match ev {
            StepEvent::Piece(pc) => {
                inc.predictable += 0.5 * (self.rate.eval(&pc.start()) + self.rate.eval(&pc.end())) * pc.len();
            }
            StepEvent::Mark { index, .. } => inc.predictable += schedule.1[index],
            StepEvent::Default { level, tau, w } => inc.payout += self.theta(level, &State::new(tau, w, level)),
        });
        if !(inc.predictable.is_finite() && inc.payout.is_finite()) {
            return Err(Error::NonFinite(format!("dividend increment on path {j} step {k}")));
        }
        Ok(inc)
    }
}

/// `(D', sum_i int theta^i dN^i)` on the grid, row per path.
pub fn evaluate_parts(batch: &ScenarioBatch, spec: &DividendSpec) -> Result<(PathMatrix, PathMatrix)> {
    spec.validate(batch.grid(), batch.p())?;
    let n = batch.grid().steps();
    let schedule = spec.schedule();
    let mut pred = PathMatrix::zeros(batch.paths(), n + 1);
    let mut pay = PathMatrix::zeros(batch.paths(), n + 1);
    pred.rows_mut().zip(pay.rows_mut()).enumerate().try_for_each(|(j, (a, b))| {
        for k in 0..n {
            let inc = spec.increment(batch, &schedule, j, k)?;
            a[k + 1] = a[k] + inc.predictable;
            b[k + 1] = b[k] + inc.payout;
        }
        Ok::<(), Error>(())
    })?;
    Ok((pred, pay))
}

/// `D_t` on the grid, row per path.
pub fn evaluate_d(batch: &ScenarioBatch, spec: &DividendSpec) -> Result<PathMatrix> {
    let (pred, pay) = evaluate_parts(batch, spec)?;
    let data = pred.data().iter().zip(pay.data()).map(|(a, b)| a + b).collect();
    Ok(PathMatrix::from_vec(pred.paths(), pred.cols(), data))
}

/// Splits a specification into its predictable part and its default payouts.
pub fn decompose(spec: &DividendSpec) -> (DividendSpec, Vec<Func>) {
    let predictable = DividendSpec { rate: spec.rate.clone(), scheduled: spec.scheduled.clone(), payouts: Vec::new() };
    (predictable, spec.payouts.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// `D - D_hat` decreases.
    Total,
    /// `D' - D'_hat` decreases.
    Predictable,
    /// `theta^i_{tau_i} < theta_hat^i_{tau_i}` at a default before the horizon.
    Payout(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Violation {
    pub path: usize,
    pub t: f64,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DominanceReport {
    /// `D - D_hat` is non-decreasing on every path.
    pub dominates: bool,
    pub predictable_nondecreasing: bool,
    pub payouts_ordered: bool,
    /// `D - D_hat` is constant on every path.
    pub constant_difference: bool,
    pub violating_paths: usize,
    /// First few violations, in path order.
    pub violations: Vec<Violation>,
}

const MAX_LISTED: usize = 20;

/// Checks whether `D_a - D_b` is non-decreasing, together with the component
/// conditions on the predictable parts and on the default payouts.
pub fn dominates(a: &DividendSpec, b: &DividendSpec, batch: &ScenarioBatch) -> Result<DominanceReport> {
    let (pa, qa) = evaluate_parts(batch, a)?;
    let (pb, qb) = evaluate_parts(batch, b)?;
    let n = batch.grid().steps();
    let grid = batch.grid();
    let per_path: Vec<(Vec<Violation>, bool)> = (0..batch.paths())
        .into_par_iter()
        .map(|j| {
            let mut v = Vec::new();
            let mut constant = true;
            for k in 0..n {
                let dp = (pa.get(j, k + 1) - pa.get(j, k)) - (pb.get(j, k + 1) - pb.get(j, k));
                let dq = (qa.get(j, k + 1) - qa.get(j, k)) - (qb.get(j, k + 1) - qb.get(j, k));
                let scale = 1e-12 * (1.0 + pa.get(j, k + 1).abs() + pb.get(j, k + 1).abs());
                if dp + dq < -scale {
                    v.push(Violation { path: j, t: grid.t(k + 1), kind: ViolationKind::Total });
                }
                if dp < -scale {
                    v.push(Violation { path: j, t: grid.t(k + 1), kind: ViolationKind::Predictable });
                }
                if (dp + dq).abs() > scale {
                    constant = false;
                }
            }
            for (i, tau) in batch.tau(j).iter().enumerate() {
                if *tau <= grid.horizon() {
                    let s = State::new(*tau, batch.w_at(j, *tau), i);
                    if a.theta(i, &s) < b.theta(i, &s) {
                        v.push(Violation { path: j, t: *tau, kind: ViolationKind::Payout(i) });
                    }
                }
            }
            (v, constant)
        })
        .collect();
    let mut report = DominanceReport {
        dominates: true,
        predictable_nondecreasing: true,
        payouts_ordered: true,
        constant_difference: true,
        violating_paths: 0,
        violations: Vec::new(),
    };
    for (v, constant) in per_path {
        report.constant_difference &= constant;
        if v.is_empty() {
            continue;
        }
        report.violating_paths += 1;
        for x in v {
            match x.kind {
                ViolationKind::Total => report.dominates = false,
                ViolationKind::Predictable => report.predictable_nondecreasing = false,
                ViolationKind::Payout(_) => report.payouts_ordered = false,
            }
            if report.violations.len() < MAX_LISTED {
                report.violations.push(x);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{simulate_batch, IntensityModel};

    fn batch() -> ScenarioBatch {
        simulate_batch(TimeGrid::new(1.0, 16).unwrap(), &IntensityModel::constant(&[1.0, 1.0]), 400, 5).unwrap()
    }

    #[test]
    fn zero_spec_is_zero() {
        let d = evaluate_d(&batch(), &DividendSpec::zero()).unwrap();
        assert!(d.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn unit_rate_pays_horizon() {
        let spec = DividendSpec { rate: Func::constant(1.0), ..Default::default() };
        let d = evaluate_d(&batch(), &spec).unwrap();
        for j in 0..d.paths() {
            assert!((d.get(j, 16) - 1.0).abs() < 1e-12);
            assert_eq!(d.get(j, 0), 0.0);
        }
    }

    #[test]
    fn scheduled_payment_lands_in_its_step() {
        let spec = DividendSpec { scheduled: vec![ScheduledPayment { t: 0.3, amount: 2.0 }], ..Default::default() };
        let d = evaluate_d(&batch(), &spec).unwrap();
        // 0.3 lies in (4/16, 5/16].
        assert_eq!(d.get(0, 4), 0.0);
        assert_eq!(d.get(0, 5), 2.0);
        assert!(spec.validate(&TimeGrid::new(0.2, 4).unwrap(), 2).is_err());
    }

    #[test]
    fn parts_sum_to_total_bit_exact() {
        let b = batch();
        let spec = DividendSpec {
            rate: Func::Tanh { c: 0.3, amp: 0.2, scale: 1.0 },
            scheduled: vec![ScheduledPayment { t: 0.5, amount: 1.5 }],
            payouts: vec![Func::constant(2.0), Func::Affine { c: 1.0, t: 0.5, w: 0.0, lo: None, hi: None }],
        };
        let total = evaluate_d(&b, &spec).unwrap();
        let (pred, pays) = decompose(&spec);
        let p = evaluate_d(&b, &pred).unwrap();
        let only_pay = DividendSpec { payouts: pays, ..Default::default() };
        let q = evaluate_d(&b, &only_pay).unwrap();
        for (i, x) in total.data().iter().enumerate() {
            assert_eq!(x.to_bits(), (p.data()[i] + q.data()[i]).to_bits());
        }
    }

    #[test]
    fn payout_ordering_is_reported() {
        let b = batch();
        let a = DividendSpec { payouts: vec![Func::constant(0.0)], ..Default::default() };
        let bb = DividendSpec { payouts: vec![Func::constant(1.0)], ..Default::default() };
        let r = dominates(&a, &bb, &b).unwrap();
        assert!(!r.dominates && !r.payouts_ordered && r.predictable_nondecreasing);
        let higher = DividendSpec { rate: Func::constant(1.0), ..Default::default() };
        let r = dominates(&higher, &DividendSpec::zero(), &b).unwrap();
        assert!(r.dominates && !r.constant_difference);
        let r = dominates(&a, &a, &b).unwrap();
        assert!(r.dominates && r.constant_difference);
    }
}
