//! Markets with a default-free asset `S^0` and defaultable assets
//! `dS^i = S^i_- (mu^i dt + sigma^i dW + b^i dM^i)`: Sharpe ratios, linear
//! pricing, hedging and large-seller drivers.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::driver::{coefficient_sup, require_admissible, Driver, LinearDriver, ProbeReport};
use crate::bsde::explicit::{solve_linear_explicit, ExplicitSolution, OptionalForm};
use crate::bsde::lsmc::{solve_backward_lsmc, BsdeSolution, LsmcOptions};
use crate::calculus::{closed_form_path, CoefBounds, Coefficients};
use crate::dividend::{DividendSpec, ScheduledPayment};
use crate::error::{Error, Result};
use crate::func::{Func, State};
use crate::scenario::{IntensityModel, ScenarioBatch, StepEvent};
use crate::stats::{Estimate, PathMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetParams {
    pub mu: Func,
    pub sigma: Func,
    /// Relative jump `b^i` at the asset's default; unused for `S^0`.
    #[serde(default)]
    pub jump: Func,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    /// Short rate `r`.
    pub rate: Func,
    /// Default-free risky asset `S^0`.
    pub stock: AssetParams,
    /// Defaultable assets `S^1..S^p`.
    pub defaultable: Vec<AssetParams>,
    /// Declared bounds on `|r|`, `|Theta^0|` and `|Theta^i| sqrt(lambda^i)`.
    #[serde(default)]
    pub bounds: CoefBounds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarketSpec {
    pub params: MarketParams,
    pub intensity: IntensityModel,
}

impl MarketSpec {
    pub fn new(params: MarketParams, intensity: IntensityModel) -> Result<Self> {
        if params.defaultable.len() != intensity.p() {
            return Err(Error::Invalid(format!("{} defaultable assets for {} default levels", params.defaultable.len(), intensity.p())));
        }
        let assets = std::iter::once(&params.stock).chain(&params.defaultable);
        for (i, a) in assets.enumerate() {
            if a.sigma.inf(f64::INFINITY).is_some_and(|v| v <= 0.0) {
                return Err(Error::Invalid(format!("volatility of asset {i} must be positive")));
            }
        }
        for (i, a) in params.defaultable.iter().enumerate() {
            if let Func::Const { value } = a.jump {
                if value == 0.0 || value < -1.0 {
                    return Err(Error::Invalid(format!("jump size of asset {} must be >= -1 and nonzero, got {value}", i + 1)));
                }
            }
        }
        if let (Func::Const { value: mu }, Func::Const { value: r }) = (&params.stock.mu, &params.rate) {
            if mu == r {
                return Err(Error::Invalid("drift of the default-free asset must differ from the short rate".into()));
            }
        }
        Ok(Self { params, intensity })
    }

    pub fn p(&self) -> usize {
        self.params.defaultable.len()
    }

    pub fn rate(&self, s: &State) -> f64 {
        self.params.rate.eval(s)
    }

    pub fn theta0(&self, s: &State) -> f64 {
        (self.params.stock.mu.eval(s) - self.rate(s)) / self.params.stock.sigma.eval(s)
    }

    pub fn jump(&self, i: usize, s: &State) -> f64 {
        self.params.defaultable[i].jump.eval(s)
    }

    /// `Theta^i = (mu^i - r - sigma^i Theta^0) / (b^i lambda^i)` on `{b^i lambda^i != 0}`, else 0.
    pub fn theta(&self, i: usize, s: &State) -> f64 {
        let a = &self.params.defaultable[i];
        let bl = a.jump.eval(s) * self.intensity.intensity(i, s);
        if bl == 0.0 {
            return 0.0;
        }
        (a.mu.eval(s) - self.rate(s) - a.sigma.eval(s) * self.theta0(s)) / bl
    }

    /// `|mu^i - r - sigma^i Theta^0 - b^i lambda^i Theta^i|` on `{b^i lambda^i != 0}`.
    pub fn sharpe_residual(&self, i: usize, s: &State) -> f64 {
        let a = &self.params.defaultable[i];
        let bl = a.jump.eval(s) * self.intensity.intensity(i, s);
        if bl == 0.0 {
            return 0.0;
        }
        (a.mu.eval(s) - self.rate(s) - a.sigma.eval(s) * self.theta0(s) - bl * self.theta(i, s)).abs()
    }

    /// Checks the standing assumptions at one state.
    pub fn check_state(&self, s: &State) -> Result<()> {
        let sig0 = self.params.stock.sigma.eval(s);
        if !(sig0 > 0.0) {
            return Err(Error::Bound(format!("sigma0 = {sig0} at t={}", s.t)));
        }
        if self.params.stock.mu.eval(s) == self.rate(s) {
            return Err(Error::Bound(format!("mu0 equals r at t={}", s.t)));
        }
        for (i, a) in self.params.defaultable.iter().enumerate() {
            let (sig, b) = (a.sigma.eval(s), a.jump.eval(s));
            if !(sig > 0.0) {
                return Err(Error::Bound(format!("sigma{} = {sig} at t={}", i + 1, s.t)));
            }
            if !(b >= -1.0) || b == 0.0 {
                return Err(Error::Bound(format!("jump size b{} = {b} at t={}", i + 1, s.t)));
            }
        }
        Ok(())
    }

    /// Checks the standing assumptions at every grid point of the batch.
    pub fn check_batch(&self, batch: &ScenarioBatch) -> Result<()> {
        (0..batch.paths()).into_par_iter().try_for_each(|j| {
            for k in 0..=batch.grid().steps() {
                self.check_state(&batch.state(j, k))?;
            }
            Ok(())
        })
    }

    /// Amounts `(phi^0, .., phi^p)` from `(Z, K)`: `phi^i = K^i / b^i`,
    /// `phi^0 = (Z - sum K^i sigma^i / b^i) / sigma^0`.
    pub fn strategy(&self, s: &State, z: f64, k: &[f64], out: &mut [f64]) {
        let mut rest = z;
        for (i, a) in self.params.defaultable.iter().enumerate() {
            let phi = if k[i] == 0.0 { 0.0 } else { k[i] / a.jump.eval(s) };
            out[i + 1] = phi;
            rest -= phi * a.sigma.eval(s);
        }
        out[0] = rest / self.params.stock.sigma.eval(s);
    }
}

/// Coefficients `(alpha, beta, gamma^i) = (-r, -Theta^0, -Theta^i)` of the
/// linear pricing driver.
#[derive(Clone, Debug)]
pub struct MarketCoefficients(pub Arc<MarketSpec>);

impl Coefficients for MarketCoefficients {
    fn p(&self) -> usize {
        self.0.p()
    }
    fn alpha(&self, s: &State) -> f64 {
        -self.0.rate(s)
    }
    fn beta(&self, s: &State) -> f64 {
        -self.0.theta0(s)
    }
    fn gamma(&self, i: usize, s: &State) -> f64 {
        -self.0.theta(i, s)
    }
    fn bounds(&self) -> CoefBounds {
        self.0.params.bounds
    }
}

/// Price dynamics of one asset as a stochastic exponential.
struct AssetCoefficients<'a> {
    market: &'a MarketSpec,
    /// `None` for `S^0`, `Some(i)` for the defaultable asset `i`.
    level: Option<usize>,
}

impl Coefficients for AssetCoefficients<'_> {
    fn p(&self) -> usize {
        self.market.p()
    }
    fn alpha(&self, s: &State) -> f64 {
        match self.level {
            None => self.market.params.stock.mu.eval(s),
            Some(i) => self.market.params.defaultable[i].mu.eval(s),
        }
    }
    fn beta(&self, s: &State) -> f64 {
        match self.level {
            None => self.market.params.stock.sigma.eval(s),
            Some(i) => self.market.params.defaultable[i].sigma.eval(s),
        }
    }
    fn gamma(&self, i: usize, s: &State) -> f64 {
        if self.level == Some(i) {
            self.market.jump(i, s)
        } else {
            0.0
        }
    }
}

/// Price paths `S^0..S^p` with unit initial values, one matrix per asset.
pub fn simulate_assets(batch: &ScenarioBatch, market: &MarketSpec) -> Result<Vec<PathMatrix>> {
    if market.p() != batch.p() {
        return Err(Error::Invalid("market and batch disagree on the number of defaults".into()));
    }
    market.check_batch(batch)?;
    let n = batch.grid().steps();
    std::iter::once(None)
        .chain((0..market.p()).map(Some))
        .map(|level| {
            let c = AssetCoefficients { market, level };
            let rows: Vec<Vec<f64>> =
                (0..batch.paths()).into_par_iter().map(|j| closed_form_path(batch, &c, j, 0).map(|a| a.values)).collect::<Result<_>>()?;
            Ok(PathMatrix::from_vec(batch.paths(), n + 1, rows.concat()))
        })
        .collect()
}

/// The linear pricing driver `-r y - Theta^0 z - sum Theta^i lambda^i k^i`
/// with its constant read off the batch.
pub fn linear_pricing_driver(market: &Arc<MarketSpec>, batch: &ScenarioBatch) -> Result<LinearDriver> {
    let c = Arc::new(MarketCoefficients(market.clone()));
    let sup = coefficient_sup(&*c, batch);
    if !sup.is_finite() {
        return Err(Error::Bound("Sharpe ratios are unbounded along the batch".into()));
    }
    Ok(LinearDriver::new(c, sup))
}

/// Hedging price from the explicit representation with the adjoint `e^{-int r} zeta`.
pub fn price_linear(
    batch: &ScenarioBatch,
    market: &Arc<MarketSpec>,
    terminal: &[f64],
    dividend: &DividendSpec,
) -> Result<ExplicitSolution> {
    market.check_batch(batch)?;
    solve_linear_explicit(batch, &MarketCoefficients(market.clone()), terminal, dividend, OptionalForm::AtDefault)
}

#[derive(Clone, Debug)]
pub struct QPrice {
    pub estimate: Estimate,
    pub samples: Vec<f64>,
    /// Density `zeta_{0,T}` per path.
    pub density: Vec<f64>,
    /// Sample mean of the density, 1 up to sampling error.
    pub density_mean: Estimate,
}

impl QPrice {
    /// Price with the density as control variate, using `E[zeta_{0,T}] = 1`.
    pub fn controlled(&self) -> Estimate {
        let (mx, mz) = (self.estimate.mean, self.density_mean.mean);
        let (mut cov, mut var) = (0.0, 0.0);
        for (x, z) in self.samples.iter().zip(&self.density) {
            cov += (x - mx) * (z - mz);
            var += (z - mz) * (z - mz);
        }
        let slope = if var > 0.0 { cov / var } else { 0.0 };
        let adjusted: Vec<f64> = self.samples.iter().zip(&self.density).map(|(x, z)| x - slope * (z - 1.0)).collect();
        Estimate::from_samples(&adjusted)
    }
}

/// Hedging price as a `Q`-expectation of discounted cash flows, estimated
/// under `P` with the density process `zeta` taken at each cash-flow time.
pub fn price_linear_q(batch: &ScenarioBatch, market: &MarketSpec, terminal: &[f64], dividend: &DividendSpec) -> Result<QPrice> {
    if market.p() != batch.p() || terminal.len() != batch.paths() {
        return Err(Error::Invalid("market, claim and batch do not match".into()));
    }
    market.check_batch(batch)?;
    dividend.validate(batch.grid(), batch.p())?;
    let schedule = dividend.schedule();
    let p = market.p();
    let rows: Vec<(f64, f64)> = (0..batch.paths())
        .into_par_iter()
        .map(|j| {
            let mut log_disc = 0.0f64;
            let mut log_zeta = 0.0f64;
            let mut jumps = 1.0f64;
            let mut value = 0.0;
            let mut err = None;
            for k in 0..batch.grid().steps() {
                batch.walk_step(j, k, &schedule.0, |ev| match ev {
                    StepEvent::Piece(pc) => {
                        let (sa, sb) = (pc.start(), pc.end());
                        let before = log_disc.exp() * log_zeta.exp() * jumps;
                        let (ta, tb) = (market.theta0(&sa), market.theta0(&sb));
                        log_disc -= 0.5 * (market.rate(&sa) + market.rate(&sb)) * pc.len();
                        log_zeta += -ta * (pc.wb - pc.wa) - 0.25 * (ta * ta + tb * tb) * pc.len();
                        if pc.defaults < p && pc.rate > 0.0 {
                            let i = pc.defaults;
                            log_zeta += 0.5 * (market.theta(i, &sa) + market.theta(i, &sb)) * pc.dlam();
                        }
                        let after = log_disc.exp() * log_zeta.exp() * jumps;
                        value += 0.5 * (before * dividend.rate.eval(&sa) + after * dividend.rate.eval(&sb)) * pc.len();
                    }
                    StepEvent::Mark { index, .. } => value += log_disc.exp() * log_zeta.exp() * jumps * schedule.1[index],
                    StepEvent::Default { level, tau, w } => {
                        let s = State::new(tau, w, level);
                        let factor = 1.0 - market.theta(level, &s);
                        if !(factor > 0.0) && err.is_none() {
                            err = Some(Error::MeasureChange(format!("1 - Theta{} = {factor} at tau = {tau} on path {j}", level + 1)));
                        }
                        jumps *= factor;
                        value += log_disc.exp() * log_zeta.exp() * jumps * dividend.theta(level, &s);
                    }
                });
            }
            if let Some(e) = err {
                return Err(e);
            }
            let zeta = log_zeta.exp() * jumps;
            let v = value + log_disc.exp() * zeta * terminal[j];
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("Q-price cash flows on path {j}")));
            }
            Ok((v, zeta))
        })
        .collect::<Result<_>>()?;
    let samples: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let zeta: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok(QPrice { estimate: Estimate::from_samples(&samples), samples, density_mean: Estimate::from_samples(&zeta), density: zeta })
}

/// Hedging strategy read from a solved BSDE.
pub struct Strategy<'a> {
    pub solution: &'a BsdeSolution,
    pub market: &'a MarketSpec,
}

/// Strategy view of a solution; amounts are computed on demand.
pub fn extract_strategy<'a>(solution: &'a BsdeSolution, market: &'a MarketSpec) -> Strategy<'a> {
    Strategy { solution, market }
}

impl Strategy<'_> {
    /// Amounts `(phi^0, .., phi^p)` held over step `k` of path `j`.
    pub fn at(&self, batch: &ScenarioBatch, j: usize, k: usize, out: &mut [f64]) {
        let p = self.market.p();
        let s = batch.state(j, k);
        let z = self.solution.z_at(batch, j, k);
        let mut kv = vec![0.0; p];
        if let Some((i, v)) = self.solution.k_at(batch, j, k) {
            kv[i] = v;
        }
        self.market.strategy(&s, z, &kv, out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationReport {
    /// Mean of `|V_T - eta|`.
    pub mae: f64,
    pub mean_abs_eta: f64,
    /// Mean and standard error of `V_T - eta`.
    pub error: Estimate,
    pub max_abs: f64,
}

/// Runs the self-financing wealth equation with withdrawals `dD` from the
/// initial wealth `x`, holding the strategy fixed over each step.
pub fn replicate(
    batch: &ScenarioBatch,
    strategy: &Strategy,
    x: f64,
    dividend: &DividendSpec,
    terminal: &[f64],
) -> Result<ReplicationReport> {
    let market = strategy.market;
    let p = market.p();
    let n = batch.grid().steps();
    let dt = batch.grid().dt();
    let schedule = dividend.schedule();
    let errors: Vec<f64> = (0..batch.paths())
        .into_par_iter()
        .map(|j| {
            let mut phi = vec![0.0; p + 1];
            let mut v = x;
            for k in 0..n {
                strategy.at(batch, j, k, &mut phi);
                let s = batch.state(j, k);
                let dw = batch.dw(j, k);
                let r = market.rate(&s);
                let invested: f64 = phi.iter().sum();
                let mut dv = (v - invested) * r * dt;
                dv += phi[0] * (market.params.stock.mu.eval(&s) * dt + market.params.stock.sigma.eval(&s) * dw);
                for i in 0..p {
                    if phi[i + 1] == 0.0 {
                        continue;
                    }
                    let a = &market.params.defaultable[i];
                    let tau = batch.tau(j)[i];
                    let fired = (tau > s.t && tau <= batch.grid().t(k + 1)) as u8 as f64;
                    let dm = fired - batch.dlam(j, k, i);
                    dv += phi[i + 1] * (a.mu.eval(&s) * dt + a.sigma.eval(&s) * dw + a.jump.eval(&s) * dm);
                }
                dv -= dividend.increment(batch, &schedule, j, k)?.total();
                v += dv;
            }
            let e = v - terminal[j];
            if !e.is_finite() {
                return Err(Error::NonFinite(format!("wealth on path {j}")));
            }
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let m = errors.len() as f64;
    Ok(ReplicationReport {
        mae: errors.iter().map(|e| e.abs()).sum::<f64>() / m,
        mean_abs_eta: terminal.iter().map(|e| e.abs()).sum::<f64>() / m,
        error: Estimate::from_samples(&errors),
        max_abs: errors.iter().fold(0.0, |a, e| a.max(e.abs())),
    })
}

/// Feedback `gamma^i(t, y, phi)` of the seller's strategy on the default
/// intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Feedback {
    Constant {
        value: f64,
    },
    /// `amp * tanh(scale * phi^i)` on the seller's own position in asset `i`.
    Tanh {
        amp: f64,
        scale: f64,
    },
}

impl Feedback {
    pub fn eval(&self, phi_i: f64) -> f64 {
        match self {
            Feedback::Constant { value } => *value,
            Feedback::Tanh { amp, scale } => amp * (scale * phi_i).tanh(),
        }
    }

    /// Bound on `|d/dk (gamma(k / b) k)|`.
    fn slope(&self) -> f64 {
        match self {
            Feedback::Constant { value } => value.abs(),
            // sup_u (tanh u + u sech^2 u) < 1.2
            Feedback::Tanh { amp, .. } => 1.2 * amp.abs(),
        }
    }

    fn validate(&self) -> Result<()> {
        let lo = match self {
            Feedback::Constant { value } => *value,
            Feedback::Tanh { amp, .. } => -amp.abs(),
        };
        if !(lo > -1.0) {
            return Err(Error::Invalid(format!("feedback must stay above -1, lower bound {lo}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackSpec {
    /// Affected default levels, counted from 1.
    pub levels: Vec<usize>,
    pub feedback: Feedback,
}

/// `g = -r y - Theta^0 z - sum Theta^i lambda^i k^i - sum_{i affected} gamma^i(t, y, phi(z, k)) lambda^i k^i`.
#[derive(Clone)]
pub struct LargeSellerDriver {
    market: Arc<MarketSpec>,
    feedback: FeedbackSpec,
    lipschitz: f64,
}

impl LargeSellerDriver {
    /// Builds the driver, reads its constant off the batch and probes admissibility.
    pub fn new(market: Arc<MarketSpec>, feedback: FeedbackSpec, batch: &ScenarioBatch, probes: usize) -> Result<(Self, ProbeReport)> {
        feedback.feedback.validate()?;
        if feedback.levels.iter().any(|l| *l == 0 || *l > market.p()) {
            return Err(Error::Invalid(format!("feedback levels must lie in 1..={}", market.p())));
        }
        let slope = feedback.feedback.slope();
        let lipschitz = (0..batch.paths())
            .into_par_iter()
            .map(|j| {
                let mut c: f64 = 0.0;
                for k in 0..=batch.grid().steps() {
                    let s = batch.state(j, k);
                    c = c.max(market.rate(&s).abs()).max(market.theta0(&s).abs());
                    if s.defaults < market.p() {
                        let i = s.defaults;
                        let lam = market.intensity.intensity(i, &s);
                        let fb = if feedback.levels.contains(&(i + 1)) { slope } else { 0.0 };
                        c = c.max((market.theta(i, &s).abs() + fb) * lam.sqrt());
                    }
                }
                c
            })
            .reduce(|| 0.0, f64::max);
        // Margin for states between grid points.
        let d = Self { market, feedback, lipschitz: lipschitz * 1.05 };
        let report = require_admissible(&d, batch, probes, batch.seed() ^ 0x9e37_79b9)?;
        Ok((d, report))
    }

    pub fn market(&self) -> &Arc<MarketSpec> {
        &self.market
    }

    /// For constant feedback, the equivalent linear coefficients
    /// `(-r, -Theta^0, -(Theta^i + c))`.
    pub fn shifted_coefficients(&self) -> Option<ShiftedCoefficients> {
        match self.feedback.feedback {
            Feedback::Constant { value } => {
                Some(ShiftedCoefficients { market: self.market.clone(), levels: self.feedback.levels.clone(), shift: value })
            }
            Feedback::Tanh { .. } => None,
        }
    }
}

impl Driver for LargeSellerDriver {
    fn p(&self) -> usize {
        self.market.p()
    }

    fn eval(&self, s: &State, lambda: &[f64], y: f64, z: f64, k: &[f64]) -> f64 {
        let m = &*self.market;
        let p = m.p();
        let mut g = -m.rate(s) * y - m.theta0(s) * z;
        for i in 0..p {
            if lambda[i] != 0.0 {
                g -= m.theta(i, s) * lambda[i] * k[i];
            }
        }
        if self.feedback.levels.iter().any(|l| lambda[l - 1] != 0.0) {
            let mut phi = vec![0.0; p + 1];
            m.strategy(s, z, k, &mut phi);
            for l in &self.feedback.levels {
                let i = l - 1;
                if lambda[i] != 0.0 {
                    g -= self.feedback.feedback.eval(phi[i + 1]) * lambda[i] * k[i];
                }
            }
        }
        g
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// Linear coefficients of a constant-feedback large seller.
#[derive(Clone, Debug)]
pub struct ShiftedCoefficients {
    market: Arc<MarketSpec>,
    levels: Vec<usize>,
    shift: f64,
}

impl Coefficients for ShiftedCoefficients {
    fn p(&self) -> usize {
        self.market.p()
    }
    fn alpha(&self, s: &State) -> f64 {
        -self.market.rate(s)
    }
    fn beta(&self, s: &State) -> f64 {
        -self.market.theta0(s)
    }
    fn gamma(&self, i: usize, s: &State) -> f64 {
        let extra = if self.levels.contains(&(i + 1)) { self.shift } else { 0.0 };
        -(self.market.theta(i, s) + extra)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowReport {
    /// `Y_0` of the problem on `[0, T]`.
    pub full: Estimate,
    /// `Y_0` of the problem on `[0, S]` with terminal condition `Y_S`.
    pub restricted: Estimate,
    pub horizon: f64,
}

impl FlowReport {
    pub fn gap(&self) -> f64 {
        (self.full.mean - self.restricted.mean).abs()
    }
}

/// `(g, D)`-evaluation up to grid point `s_index`, together with the flow
/// diagnostic that compares it with the evaluation on `[0, T]`.
pub fn gd_evaluation(
    batch: &ScenarioBatch,
    driver: &dyn Driver,
    dividend: &DividendSpec,
    terminal: &[f64],
    s_index: usize,
    opts: &LsmcOptions,
) -> Result<(BsdeSolution, FlowReport)> {
    let full = solve_backward_lsmc(batch, driver, terminal, dividend, opts)?;
    let short = batch.truncate(s_index)?;
    let horizon = short.grid().horizon();
    let restricted_dividend = DividendSpec {
        rate: dividend.rate.clone(),
        scheduled: dividend.scheduled.iter().filter(|x| x.t <= horizon).copied().collect::<Vec<ScheduledPayment>>(),
        payouts: dividend.payouts.clone(),
    };
    let ys = full.y.column(s_index);
    let part = solve_backward_lsmc(&short, driver, &ys, &restricted_dividend, opts)?;
    let report = FlowReport { full: full.y0, restricted: part.y0, horizon };
    Ok((part, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{simulate_batch, TimeGrid};

    pub(crate) fn market(p: usize) -> Arc<MarketSpec> {
        let asset = |mu: f64, sigma: f64, jump: f64| AssetParams { mu: mu.into(), sigma: sigma.into(), jump: jump.into() };
        let params = MarketParams {
            rate: 0.02.into(),
            stock: asset(0.06, 0.2, 0.0),
            defaultable: (0..p).map(|i| asset(0.05 + 0.01 * i as f64, 0.25, -0.5)).collect(),
            bounds: CoefBounds::default(),
        };
        Arc::new(MarketSpec::new(params, IntensityModel::constant(&vec![0.8; p])).unwrap())
    }

    #[test]
    fn sharpe_identity_is_exact() {
        let m = market(2);
        for d in 0..3 {
            let s = State::new(0.3, 0.1, d);
            for i in 0..2 {
                assert!(m.sharpe_residual(i, &s) < 1e-15);
            }
        }
    }

    #[test]
    fn zero_jump_is_rejected() {
        let mut params = market(1).params.clone();
        params.defaultable[0].jump = 0.0.into();
        assert!(MarketSpec::new(params, IntensityModel::constant(&[1.0])).is_err());
    }

    #[test]
    fn p_and_q_prices_agree() {
        let m = market(2);
        let b = simulate_batch(TimeGrid::new(1.0, 20).unwrap(), &m.intensity, 500, 3).unwrap();
        let eta: Vec<f64> = (0..500).map(|j| 1.0 + b.w_at_step(j, 20).max(0.0)).collect();
        let d = DividendSpec { rate: 0.1.into(), payouts: vec![0.5.into(), 0.25.into()], ..Default::default() };
        let a = price_linear(&b, &m, &eta, &d).unwrap();
        let q = price_linear_q(&b, &m, &eta, &d).unwrap();
        assert!((a.estimate.mean - q.estimate.mean).abs() <= 1e-12 * a.estimate.mean.abs());
    }

    #[test]
    fn strategy_inverts_change_of_variables() {
        let m = market(2);
        let s = State::new(0.2, 0.0, 1);
        let mut phi = [0.0; 3];
        m.strategy(&s, 0.3, &[0.0, -0.5], &mut phi);
        assert_eq!(phi[2], 1.0);
        let z = phi[0] * 0.2 + phi[2] * 0.25;
        assert!((z - 0.3).abs() < 1e-15);
    }
}
