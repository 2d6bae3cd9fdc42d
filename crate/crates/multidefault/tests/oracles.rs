//! Independent closed-form oracles with frozen values.

use std::sync::Arc;

use multidefault::bsde::{solve_backward_lsmc, solve_linear_explicit, FnDriver, LinearDriver, LsmcOptions, OptionalForm};
use multidefault::calculus::{CoefBounds, CoefficientSet};
use multidefault::claim::{ClaimKind, TerminalClaim};
use multidefault::dividend::DividendSpec;
use multidefault::market::{
    extract_strategy, gd_evaluation, linear_pricing_driver, price_linear, replicate, AssetParams, Feedback, FeedbackSpec,
    LargeSellerDriver, MarketParams, MarketSpec,
};
use multidefault::scenario::{simulate_batch, IntensityModel, ScenarioBatch, TimeGrid};
use multidefault::stats::Estimate;

/// `-e^{-1} (e^2 - 1) / 2 = -sinh(1)`.
const COUNTEREXAMPLE: f64 = -1.1752011936438014;

fn batch(rates: &[f64], n: usize, m: usize, seed: u64) -> ScenarioBatch {
    simulate_batch(TimeGrid::new(1.0, n).unwrap(), &IntensityModel::constant(rates), m, seed).unwrap()
}

fn asset(mu: f64, sigma: f64, jump: f64) -> AssetParams {
    AssetParams { mu: mu.into(), sigma: sigma.into(), jump: jump.into() }
}

/// Market whose coefficients do not depend on `W`.
fn flat_market(r: f64, rates: &[f64]) -> Arc<MarketSpec> {
    let params = MarketParams {
        rate: r.into(),
        stock: asset(r + 0.05, 0.2, 0.0),
        defaultable: vec![asset(r + 0.04, 0.3, -0.4), asset(r + 0.06, 0.25, -0.6)],
        bounds: CoefBounds::default(),
    };
    Arc::new(MarketSpec::new(params, IntensityModel::constant(rates)).unwrap())
}

#[test]
fn counterexample_oracle_matches_quadrature() {
    // -int_0^1 e^{-t} e^{2t} e^{-(1-t)} dt by Simpson's rule.
    let n = 1000;
    let h = 1.0 / n as f64;
    let f = |t: f64| -(-t + 2.0 * t - (1.0 - t)).exp();
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    assert!((s * h / 3.0 - COUNTEREXAMPLE).abs() < 1e-10);
}

#[test]
fn counterexample_explicit_value() {
    let b = batch(&[1.0, 1.0], 10, 100_000, 99);
    let c = CoefficientSet::constant(0.0, 0.0, &[-2.0, 0.0], 0.0);
    let eta = TerminalClaim::from(ClaimKind::DefaultCount { count: 1, value: 1.0 }).values(&b).unwrap();
    let r = solve_linear_explicit(&b, &c, &eta, &DividendSpec::zero(), OptionalForm::AtDefault).unwrap();
    assert!((r.estimate.mean - COUNTEREXAMPLE).abs() <= 3.0 * r.estimate.se, "{:?}", r.estimate);
}

/// Price of `c0 + n1 N^1_T + n2 N^2_T` when only the defaults carry risk:
/// `e^{-rT} (c0 + n1 Q(tau_1 <= T) + n2 Q(tau_2 <= T))` with pricing
/// intensities `a = lambda^1 (1 - Theta^1)`, `b = lambda^2 (1 - Theta^2)`.
fn flat_price(r: f64, a: f64, b: f64, c0: f64, n1: f64, n2: f64) -> f64 {
    let q1 = 1.0 - (-a).exp();
    let q2 = 1.0 - (b * (-a).exp() - a * (-b).exp()) / (b - a);
    (-r).exp() * (c0 + n1 * q1 + n2 * q2)
}

#[test]
fn flat_market_price_matches_closed_form() {
    let r = 0.5;
    let m = flat_market(r, &[0.8, 1.2]);
    let s = multidefault::State::new(0.0, 0.0, 0);
    let a = 0.8 * (1.0 - m.theta(0, &s));
    let s1 = multidefault::State::new(0.0, 0.0, 1);
    let bq = 1.2 * (1.0 - m.theta(1, &s1));
    let exact = flat_price(r, a, bq, 10.0, -1.0, 0.5);
    assert!((exact - 5.826_737_029).abs() < 1e-8, "{exact}");

    let b = batch(&[0.8, 1.2], 200, 30_000, 5);
    let claim = TerminalClaim::from(ClaimKind::Polynomial { w: vec![10.0], n: vec![-1.0, 0.5] });
    let eta = claim.values(&b).unwrap();
    let q = multidefault::market::price_linear_q(&b, &m, &eta, &DividendSpec::zero()).unwrap().controlled();
    assert!((q.mean - exact).abs() <= 3.0 * q.se, "{q:?} vs {exact}");
    // The backward scheme is first order in dt: budget twice the gap to the half grid.
    let opts = LsmcOptions { degree: 0, ..Default::default() };
    let lsmc = |b: &ScenarioBatch| {
        let d = linear_pricing_driver(&m, b).unwrap();
        solve_backward_lsmc(b, &d, &claim.values(b).unwrap(), &DividendSpec::zero(), &opts).unwrap().y0
    };
    let fine = lsmc(&b);
    let coarse = lsmc(&b.coarsen(2).unwrap());
    let budget = 2.0 * (fine.mean - coarse.mean).abs();
    assert!(budget < 0.02, "{fine:?} {coarse:?}");
    assert!((fine.mean - exact).abs() <= 3.0 * fine.se + budget, "{fine:?} vs {exact}");
}

#[test]
fn discounted_unit_claim() {
    let m = flat_market(0.04, &[0.8, 1.2]);
    let b = batch(&[0.8, 1.2], 20, 40_000, 8);
    let r = price_linear(&b, &m, &vec![1.0; b.paths()], &DividendSpec::zero()).unwrap();
    let exact = (-0.04f64).exp();
    assert!((r.estimate.mean - exact).abs() <= 3.0 * r.estimate.se, "{:?}", r.estimate);
}

#[test]
fn constant_feedback_matches_shifted_linear_price() {
    let m = flat_market(0.05, &[0.8, 1.2]);
    let b = batch(&[0.8, 1.2], 50, 40_000, 21);
    let fb = FeedbackSpec { levels: vec![1], feedback: Feedback::Constant { value: 0.3 } };
    let (seller, report) = LargeSellerDriver::new(m.clone(), fb, &b, 200).unwrap();
    assert!(report.passed());
    let eta = TerminalClaim::from(ClaimKind::Call { strike: 0.0, scale: 1.0 }).values(&b).unwrap();
    let d = DividendSpec { rate: 0.1.into(), payouts: vec![0.2.into(), 0.1.into()], ..Default::default() };
    let shifted = seller.shifted_coefficients().unwrap();
    let explicit = solve_linear_explicit(&b, &shifted, &eta, &d, OptionalForm::AtDefault).unwrap().estimate;
    let opts = LsmcOptions::default();
    let nonlinear = solve_backward_lsmc(&b, &seller, &eta, &d, &opts).unwrap().y0;
    let linear = solve_backward_lsmc(&b, &LinearDriver::from_batch(Arc::new(shifted), &b), &eta, &d, &opts).unwrap().y0;
    assert!((nonlinear.mean - linear.mean).abs() < 1e-10);
    let se = (explicit.se.powi(2) + nonlinear.se.powi(2)).sqrt();
    assert!((nonlinear.mean - explicit.mean).abs() <= 3.0 * se, "{nonlinear:?} vs {explicit:?}");
}

#[test]
fn zero_feedback_reduces_to_linear_pricing() {
    let m = flat_market(0.05, &[0.8, 1.2]);
    let b = batch(&[0.8, 1.2], 20, 5_000, 3);
    let fb = FeedbackSpec { levels: vec![1, 2], feedback: Feedback::Constant { value: 0.0 } };
    let (seller, _) = LargeSellerDriver::new(m.clone(), fb, &b, 100).unwrap();
    let lin = linear_pricing_driver(&m, &b).unwrap();
    let eta = TerminalClaim::from(ClaimKind::Call { strike: 0.0, scale: 1.0 }).values(&b).unwrap();
    let opts = LsmcOptions::default();
    let a = solve_backward_lsmc(&b, &seller, &eta, &DividendSpec::zero(), &opts).unwrap();
    let l = solve_backward_lsmc(&b, &lin, &eta, &DividendSpec::zero(), &opts).unwrap();
    assert!((a.y0.mean - l.y0.mean).abs() < 1e-12);
}

#[test]
fn zero_driver_evaluation_is_the_mean() {
    let b = batch(&[1.0, 0.5], 20, 10_000, 4);
    let eta = TerminalClaim::from(ClaimKind::Polynomial { w: vec![0.3, 1.0], n: vec![0.5, -0.5] }).values(&b).unwrap();
    let (sol, flow) = gd_evaluation(&b, &FnDriver::zero(2), &DividendSpec::zero(), &eta, 20, &LsmcOptions::default()).unwrap();
    let mean = Estimate::from_samples(&eta).mean;
    assert!((sol.y0.mean - mean).abs() < 1e-12);
    assert!(flow.gap() < 1e-12);
}

#[test]
fn flow_through_midpoint_is_consistent() {
    let b = batch(&[0.8, 1.2], 40, 20_000, 6);
    let c = Arc::new(CoefficientSet::constant(-0.05, 0.1, &[0.2, -0.3], 0.0));
    let d = LinearDriver::from_batch(c, &b);
    let eta = TerminalClaim::from(ClaimKind::Call { strike: 0.0, scale: 1.0 }).values(&b).unwrap();
    let div = DividendSpec { rate: 0.1.into(), ..Default::default() };
    let (_, flow) = gd_evaluation(&b, &d, &div, &eta, 20, &LsmcOptions::default()).unwrap();
    assert!(flow.gap() <= 3.0 * (flow.full.se + flow.restricted.se), "{flow:?}");
}

#[test]
fn nonnegative_claims_have_nonnegative_prices() {
    let m = flat_market(0.05, &[0.8, 1.2]);
    let b = batch(&[0.8, 1.2], 30, 20_000, 12);
    let eta = TerminalClaim::from(ClaimKind::Call { strike: 0.5, scale: 1.0 }).values(&b).unwrap();
    let d = DividendSpec { rate: 0.05.into(), payouts: vec![0.1.into(), 0.0.into()], ..Default::default() };
    for fb in [Feedback::Constant { value: 0.4 }, Feedback::Tanh { amp: 0.5, scale: 2.0 }] {
        let (seller, _) = LargeSellerDriver::new(m.clone(), FeedbackSpec { levels: vec![1, 2], feedback: fb }, &b, 100).unwrap();
        let y0 = solve_backward_lsmc(&b, &seller, &eta, &d, &LsmcOptions::default()).unwrap().y0;
        assert!(y0.mean >= -3.0 * y0.se, "{y0:?}");
    }
}

#[test]
fn extra_initial_wealth_carries_to_maturity() {
    // r = 0 and Theta = 0: a unit of extra wealth sits in the bank account.
    let params = MarketParams {
        rate: 0.0.into(),
        stock: asset(0.0, 0.2, 0.0),
        defaultable: vec![asset(0.0, 0.3, -0.4)],
        bounds: CoefBounds::default(),
    };
    // mu0 == r is rejected, so give S^0 a drift and check the shift is exact anyway.
    assert!(MarketSpec::new(params.clone(), IntensityModel::constant(&[1.0])).is_err());
    let mut params = params;
    params.stock.mu = 0.01.into();
    params.defaultable[0].mu = (0.3 * 0.05).into();
    let m = MarketSpec::new(params, IntensityModel::constant(&[1.0])).unwrap();
    assert!(m.theta(0, &multidefault::State::new(0.0, 0.0, 0)).abs() < 1e-15);
    let m = Arc::new(m);
    let b = batch(&[1.0], 20, 2_000, 13);
    let eta = TerminalClaim::from(ClaimKind::Call { strike: 0.0, scale: 1.0 }).values(&b).unwrap();
    let sol =
        solve_backward_lsmc(&b, &linear_pricing_driver(&m, &b).unwrap(), &eta, &DividendSpec::zero(), &LsmcOptions::default()).unwrap();
    let st = extract_strategy(&sol, &m);
    let base = replicate(&b, &st, sol.y0.mean, &DividendSpec::zero(), &eta).unwrap();
    let shifted = replicate(&b, &st, sol.y0.mean + 1.0, &DividendSpec::zero(), &eta).unwrap();
    assert!((shifted.error.mean - base.error.mean - 1.0).abs() < 1e-12);
}

#[test]
fn funded_withdrawals_leave_no_shortfall() {
    // Deterministic withdrawals with no claim and no defaults: the price
    // funds every payment exactly up to the bank-account discretization.
    let params = MarketParams {
        rate: 0.0.into(),
        stock: asset(0.05, 0.2, 0.0),
        defaultable: vec![asset(0.06, 0.3, -0.4)],
        bounds: CoefBounds::default(),
    };
    let m = Arc::new(MarketSpec::new(params, IntensityModel::constant(&[0.0])).unwrap());
    let b = simulate_batch(TimeGrid::new(1.0, 20).unwrap(), &m.intensity, 1_000, 14).unwrap();
    let d = DividendSpec {
        rate: 0.3.into(),
        scheduled: vec![multidefault::dividend::ScheduledPayment { t: 0.5, amount: 0.2 }],
        ..Default::default()
    };
    let eta = vec![0.0; b.paths()];
    let sol = solve_backward_lsmc(&b, &linear_pricing_driver(&m, &b).unwrap(), &eta, &d, &LsmcOptions::default()).unwrap();
    assert!((sol.y0.mean - 0.5).abs() < 1e-12);
    let rep = replicate(&b, &extract_strategy(&sol, &m), sol.y0.mean, &d, &eta).unwrap();
    assert!(rep.max_abs < 1e-9, "{rep:?}");
}
