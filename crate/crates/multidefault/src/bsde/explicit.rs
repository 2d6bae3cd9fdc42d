//! Explicit representation of linear BSDEs through the adjoint process.
//!
//! For the driver `alpha y + beta z + sum gamma^i k^i lambda^i + delta` and
//! `D = D' + sum_i int theta^i dN^i`,
//! `Y_0 = E[Gamma_T eta + int Gamma_{s-} (dD'_s + delta_s ds) + sum_i Gamma_{tau_i} theta^i_{tau_i} 1{tau_i <= T}]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{gamma_checked, piece_exponent, Coefficients};
use crate::dividend::DividendSpec;
use crate::error::{Error, Result};
use crate::func::State;
use crate::scenario::{ScenarioBatch, StepEvent};
use crate::stats::Estimate;

/// How default payouts enter the estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionalForm {
    /// `Gamma_{tau_i} theta^i_{tau_i}`.
    #[default]
    AtDefault,
    /// `Gamma_{tau_i-} theta^i_{tau_i} (1 + gamma^i_{tau_i})`.
    LeftLimit,
    /// `int Gamma_{s-} theta^i_s (1 + gamma^i_s) lambda^i_s ds`, the
    /// compensator of the left-limit form.
    Compensated,
}

#[derive(Clone, Debug)]
pub struct ExplicitSolution {
    pub estimate: Estimate,
    pub samples: Vec<f64>,
}

/// Per-path value of the representation on path `j`.
pub fn explicit_path(
    batch: &ScenarioBatch,
    c: &dyn Coefficients,
    eta: f64,
    dividend: &DividendSpec,
    schedule: &(Vec<f64>, Vec<f64>),
    form: OptionalForm,
    j: usize,
) -> Result<f64> {
    let model = batch.model();
    let p = c.p();
    let mut expo: f64 = 0.0;
    let mut prod: f64 = 1.0;
    let mut total: f64 = 0.0;
    let mut err = None;
    let rate = |s: &State| dividend.rate.eval(s) + c.delta(s);
    for k in 0..batch.grid().steps() {
        batch.walk_step(j, k, &schedule.0, |ev| {
            if err.is_some() {
                return;
            }
            let r: Result<()> = (|| {
                match ev {
                    StepEvent::Piece(pc) => {
                        let (sa, sb) = (pc.start(), pc.end());
                        let ga = expo.exp() * prod;
                        expo += piece_exponent(c, model, &pc)?;
                        let gb = expo.exp() * prod;
                        total += 0.5 * (ga * rate(&sa) + gb * rate(&sb)) * pc.len();
                        if form == OptionalForm::Compensated && pc.defaults < p && pc.rate > 0.0 {
                            let i = pc.defaults;
                            let fa = ga * dividend.theta(i, &sa) * (1.0 + gamma_checked(c, model, i, &sa)?);
                            let fb = gb * dividend.theta(i, &sb) * (1.0 + gamma_checked(c, model, i, &sb)?);
                            total += 0.5 * (fa + fb) * pc.dlam();
                        }
                    }
                    StepEvent::Mark { index, .. } => total += expo.exp() * prod * schedule.1[index],
                    StepEvent::Default { level, tau, w } => {
                        let s = State::new(tau, w, level);
                        let left = expo.exp() * prod;
                        let g = gamma_checked(c, model, level, &s)?;
                        prod *= 1.0 + g;
                        let theta = dividend.theta(level, &s);
                        match form {
                            OptionalForm::AtDefault => total += expo.exp() * prod * theta,
                            OptionalForm::LeftLimit => total += left * theta * (1.0 + g),
                            OptionalForm::Compensated => {}
                        }
                    }
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
    }
    let v = expo.exp() * prod * eta + total;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("explicit representation on path {j}")));
    }
    Ok(v)
}

/// `Y_0` of a linear BSDE from its explicit representation.
pub fn solve_linear_explicit(
    batch: &ScenarioBatch,
    c: &dyn Coefficients,
    terminal: &[f64],
    dividend: &DividendSpec,
    form: OptionalForm,
) -> Result<ExplicitSolution> {
    if c.p() != batch.p() {
        return Err(Error::Invalid(format!("coefficients carry {} levels, batch has {}", c.p(), batch.p())));
    }
    if terminal.len() != batch.paths() {
        return Err(Error::Invalid("terminal condition does not match the batch".into()));
    }
    dividend.validate(batch.grid(), batch.p())?;
    let schedule = dividend.schedule();
    let samples: Vec<f64> = (0..batch.paths())
        .into_par_iter()
        .map(|j| explicit_path(batch, c, terminal[j], dividend, &schedule, form, j))
        .collect::<Result<_>>()?;
    Ok(ExplicitSolution { estimate: Estimate::from_samples(&samples), samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::CoefficientSet;
    use crate::func::Func;
    use crate::scenario::{simulate_batch, IntensityModel, TimeGrid};

    #[test]
    fn constant_claim_without_coefficients() {
        let b = simulate_batch(TimeGrid::new(1.0, 8).unwrap(), &IntensityModel::constant(&[1.0]), 100, 1).unwrap();
        let r =
            solve_linear_explicit(&b, &CoefficientSet::zero(1), &vec![2.5; 100], &DividendSpec::zero(), OptionalForm::AtDefault).unwrap();
        assert_eq!(r.estimate.mean, 2.5);
        assert_eq!(r.estimate.se, 0.0);
    }

    #[test]
    fn discounting_is_deterministic() {
        let b = simulate_batch(TimeGrid::new(2.0, 50).unwrap(), &IntensityModel::constant(&[1.0]), 50, 1).unwrap();
        let c = CoefficientSet::constant(-0.3, 0.0, &[0.0], 0.0);
        let r = solve_linear_explicit(&b, &c, &vec![1.0; 50], &DividendSpec::zero(), OptionalForm::AtDefault).unwrap();
        assert!((r.estimate.mean - (-0.6f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn payout_forms_agree_pathwise() {
        let b = simulate_batch(TimeGrid::new(1.0, 20).unwrap(), &IntensityModel::constant(&[1.0, 1.5]), 300, 4).unwrap();
        let c = CoefficientSet::constant(-0.1, 0.2, &[-0.5, 0.4], 0.0);
        let d = DividendSpec { payouts: vec![Func::constant(1.0), Func::constant(2.0)], ..Default::default() };
        let eta = vec![0.0; 300];
        let a = solve_linear_explicit(&b, &c, &eta, &d, OptionalForm::AtDefault).unwrap();
        let l = solve_linear_explicit(&b, &c, &eta, &d, OptionalForm::LeftLimit).unwrap();
        for (x, y) in a.samples.iter().zip(&l.samples) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
