//! Terminal conditions `eta(W_T, tau_1..tau_p)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::ScenarioBatch;

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClaimKind {
    Constant {
        value: f64,
    },
    /// `value` on the event that exactly `count` defaults occurred by `T`.
    DefaultCount {
        count: usize,
        #[serde(default = "one")]
        value: f64,
    },
    /// `sum_j w[j] W_T^j + sum_i n[i] N^i_T`.
    Polynomial {
        #[serde(default)]
        w: Vec<f64>,
        #[serde(default)]
        n: Vec<f64>,
    },
    /// `scale * max(W_T - strike, 0)`.
    Call {
        strike: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `(a + b tau_level) 1{tau_level <= T}`, `level` counted from 1.
    DefaultTime {
        level: usize,
        a: f64,
        b: f64,
    },
}

type ClaimFn = dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync;

#[derive(Clone)]
enum Repr {
    Kind(ClaimKind),
    Custom(Arc<ClaimFn>),
}

/// Terminal condition of a BSDE.
#[derive(Clone)]
pub struct TerminalClaim(Repr);

impl fmt::Debug for TerminalClaim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Repr::Kind(k) => k.fmt(f),
            Repr::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl From<ClaimKind> for TerminalClaim {
    fn from(k: ClaimKind) -> Self {
        TerminalClaim(Repr::Kind(k))
    }
}

impl TerminalClaim {
    pub fn constant(value: f64) -> Self {
        ClaimKind::Constant { value }.into()
    }

    /// Claim given by an arbitrary function of `(W_T, taus, T)`.
    pub fn custom(f: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        TerminalClaim(Repr::Custom(Arc::new(f)))
    }

    pub fn kind(&self) -> Option<&ClaimKind> {
        match &self.0 {
            Repr::Kind(k) => Some(k),
            Repr::Custom(_) => None,
        }
    }

    pub fn eval(&self, w: f64, tau: &[f64], horizon: f64) -> f64 {
        let fired = |i: usize| tau.get(i).is_some_and(|t| *t <= horizon);
        match &self.0 {
            Repr::Custom(f) => f(w, tau, horizon),
            Repr::Kind(k) => match k {
                ClaimKind::Constant { value } => *value,
                ClaimKind::DefaultCount { count, value } => {
                    let c = (0..tau.len()).filter(|i| fired(*i)).count();
                    if c == *count {
                        *value
                    } else {
                        0.0
                    }
                }
                ClaimKind::Polynomial { w: cw, n } => {
                    let poly = cw.iter().rev().fold(0.0, |acc, c| acc * w + c);
                    poly + n.iter().enumerate().map(|(i, c)| if fired(i) { *c } else { 0.0 }).sum::<f64>()
                }
                ClaimKind::Call { strike, scale } => scale * (w - strike).max(0.0),
                ClaimKind::DefaultTime { level, a, b } => {
                    let i = level.saturating_sub(1);
                    if fired(i) {
                        a + b * tau[i]
                    } else {
                        0.0
                    }
                }
            },
        }
    }

    /// `eta` on every path of the batch.
    pub fn values(&self, batch: &ScenarioBatch) -> Result<Vec<f64>> {
        if let Some(ClaimKind::DefaultTime { level, .. }) = self.kind() {
            if *level == 0 || *level > batch.p() {
                return Err(Error::Invalid(format!("claim refers to default level {level} of {}", batch.p())));
            }
        }
        let n = batch.grid().steps();
        let horizon = batch.grid().horizon();
        let out: Vec<f64> = (0..batch.paths()).map(|j| self.eval(batch.w_at_step(j, n), batch.tau(j), horizon)).collect();
        if let Some(j) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("terminal claim on path {j}")));
        }
        Ok(out)
    }
}
