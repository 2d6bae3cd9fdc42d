//! Run configuration: one JSON document with named sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsde::{KEstimator, LsmcOptions, OptionalForm};
use crate::calculus::CoefficientSet;
use crate::claim::ClaimKind;
use crate::dividend::DividendSpec;
use crate::error::{Error, Result};
use crate::market::{FeedbackSpec, MarketParams};
use crate::scenario::{IntensityModel, TimeGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    pub market: MarketSection,
    pub claim: ClaimKind,
    #[serde(default)]
    pub dividend: DividendSpec,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub intensity: IntensityModel,
}

/// Driver of the BSDE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketSection {
    /// Linear driver `alpha y + beta z + sum gamma^i lambda^i k^i + delta`.
    Linear { coefficients: CoefficientSet },
    /// Hedging price in a complete market with default-free and defaultable assets.
    Financial { params: MarketParams },
    /// Large seller whose strategy feeds back on the default intensities.
    LargeSeller { params: MarketParams, feedback: FeedbackSpec },
}

impl MarketSection {
    pub fn p(&self) -> usize {
        match self {
            MarketSection::Linear { coefficients } => coefficients.gamma.len(),
            MarketSection::Financial { params } | MarketSection::LargeSeller { params, .. } => params.defaultable.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Explicit,
    #[default]
    Lsmc,
    Picard,
    /// Expectation of discounted cash flows under the pricing measure.
    QMeasure,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Explicit => "explicit",
            Method::Lsmc => "lsmc",
            Method::Picard => "picard",
            Method::QMeasure => "q_measure",
        }
    }
}

fn default_degree() -> usize {
    3
}
fn default_time_degree() -> usize {
    2
}
fn default_inner() -> usize {
    2
}
fn default_min_per_basis() -> usize {
    10
}
fn default_picard() -> usize {
    6
}
fn default_probes() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_time_degree")]
    pub time_degree: usize,
    #[serde(default)]
    pub k_estimator: KEstimator,
    #[serde(default = "default_inner")]
    pub inner_iterations: usize,
    #[serde(default = "default_min_per_basis")]
    pub min_per_basis: usize,
    #[serde(default = "default_picard")]
    pub picard_iterations: usize,
    /// Override of `xi` in the a priori estimates.
    #[serde(default)]
    pub xi: Option<f64>,
    /// Override of the beta-norm weight.
    #[serde(default)]
    pub beta_w: Option<f64>,
    /// Payout form of the explicit estimator.
    #[serde(default)]
    pub form: OptionalForm,
    /// Admissibility probes for non-linear drivers.
    #[serde(default = "default_probes")]
    pub probes: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            method: Method::default(),
            degree: default_degree(),
            time_degree: default_time_degree(),
            k_estimator: KEstimator::default(),
            inner_iterations: default_inner(),
            min_per_basis: default_min_per_basis(),
            picard_iterations: default_picard(),
            xi: None,
            beta_w: None,
            form: OptionalForm::default(),
            probes: default_probes(),
        }
    }
}

impl SolverSection {
    pub fn lsmc(&self) -> LsmcOptions {
        LsmcOptions {
            degree: self.degree,
            time_degree: self.time_degree,
            k_estimator: self.k_estimator,
            inner_iterations: self.inner_iterations,
            min_per_basis: self.min_per_basis,
        }
    }
}

/// Second problem of a pair, sharing the scenario and the dividend process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSection {
    pub market: MarketSection,
    pub claim: ClaimKind,
    /// Dividend of the second problem; defaults to the shared one.
    #[serde(default)]
    pub dividend: Option<DividendSpec>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    #[default]
    Pass,
    /// The comparison hypotheses are expected to fail, together with the order.
    HypothesesViolated,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default)]
    pub pair: Option<PairSection>,
    /// Number of randomized admissible pairs in the comparison suite.
    #[serde(default)]
    pub random_pairs: usize,
    #[serde(default)]
    pub expect: Expectation,
    /// Grid time `S` of the flow diagnostic.
    #[serde(default)]
    pub flow_time: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Write per-grid-point solution summaries.
    #[serde(default)]
    pub solution_csv: bool,
    #[serde(default = "yes")]
    pub include_runtime: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: None, solution_csv: false, include_runtime: true }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.scenario.horizon, self.scenario.steps).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn p(&self) -> usize {
        self.scenario.intensity.p()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.scenario;
        self.grid()?;
        if s.paths < 2 {
            return bad(format!("scenario.paths must be at least 2, got {}", s.paths));
        }
        s.intensity.validate().map_err(|e| Error::Config(e.to_string()))?;
        let p = self.p();
        let check_market = |m: &MarketSection, what: &str| {
            if m.p() != p {
                return bad(format!("{what} describes {} default levels, the scenario has {p}", m.p()));
            }
            Ok(())
        };
        check_market(&self.market, "market")?;
        check_claim(&self.claim, p)?;
        self.dividend.validate(&self.grid()?, p).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(pair) = &self.verify.pair {
            check_market(&pair.market, "verify.pair.market")?;
            check_claim(&pair.claim, p)?;
            if let Some(d) = &pair.dividend {
                d.validate(&self.grid()?, p).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        let sv = &self.solver;
        if sv.min_per_basis == 0 {
            return bad("solver.min_per_basis must be positive".into());
        }
        if sv.picard_iterations < 2 {
            return bad("solver.picard_iterations must be at least 2".into());
        }
        for (name, v) in [("solver.xi", sv.xi), ("solver.beta_w", sv.beta_w)] {
            if v.is_some_and(|x| !(x.is_finite() && x > 0.0)) {
                return bad(format!("{name} must be positive"));
            }
        }
        if let Some(t) = self.verify.flow_time {
            let k = t / self.grid()?.dt();
            if !(t > 0.0 && t <= s.horizon) || (k - k.round()).abs() > 1e-9 {
                return bad(format!("verify.flow_time = {t} is not a grid time"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output section.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("configuration serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

fn check_claim(claim: &ClaimKind, p: usize) -> Result<()> {
    let msg = match claim {
        ClaimKind::Polynomial { n, .. } if n.len() > p => Some(format!("claim has {} default weights for {p} levels", n.len())),
        ClaimKind::DefaultCount { count, .. } if *count > p => Some(format!("claim counts {count} defaults out of {p}")),
        ClaimKind::DefaultTime { level, .. } if *level == 0 || *level > p => Some(format!("claim level {level} outside 1..={p}")),
        _ => None,
    };
    msg.map_or(Ok(()), |m| Err(Error::Config(m)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "scenario": {"horizon": 1.0, "steps": 10, "paths": 100, "seed": 1,
                     "intensity": {"levels": [{"kind": "const", "value": 1.0}]}},
        "market": {"kind": "linear", "coefficients": {"gamma": [{"kind": "const", "value": 0.0}]}},
        "claim": {"kind": "constant", "value": 1.0}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.solver.method, Method::Lsmc);
        assert!(c.output.include_runtime);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"colour\": 2");
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn level_mismatch_is_rejected() {
        let text = MINIMAL.replace("\"gamma\": [{\"kind\": \"const\", \"value\": 0.0}]", "\"gamma\": []");
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output() {
        let a = RunConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output.include_runtime = false;
        b.output.dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.scenario.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
