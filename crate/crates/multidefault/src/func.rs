//! Small parametric family of scalar functions of `(t, w, defaults)`.
//!
//! Hazards, driver coefficients, dividend rates and payouts are all built from
//! these, which keeps configurations serialisable and bounds easy to read off.

use serde::{Deserialize, Serialize};

/// Evaluation point: time, current Brownian value and number of defaults so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State {
    pub t: f64,
    pub w: f64,
    pub defaults: usize,
}

impl State {
    pub fn new(t: f64, w: f64, defaults: usize) -> Self {
        Self { t, w, defaults }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Func {
    Const {
        value: f64,
    },
    /// `c + a t + b w`, clipped to `[lo, hi]`.
    Affine {
        #[serde(default)]
        c: f64,
        #[serde(default)]
        t: f64,
        #[serde(default)]
        w: f64,
        #[serde(default)]
        lo: Option<f64>,
        #[serde(default)]
        hi: Option<f64>,
    },
    /// `min(cap, scale * exp(a t + b w))`.
    ExpAffine {
        scale: f64,
        #[serde(default)]
        t: f64,
        #[serde(default)]
        w: f64,
        cap: f64,
    },
    /// `c + amp * tanh(scale * w)`.
    Tanh {
        c: f64,
        amp: f64,
        scale: f64,
    },
    /// One value per number of defaults already observed.
    PerCount {
        values: Vec<f64>,
    },
}

impl Default for Func {
    fn default() -> Self {
        Func::Const { value: 0.0 }
    }
}

impl From<f64> for Func {
    fn from(value: f64) -> Self {
        Func::Const { value }
    }
}

impl Func {
    pub fn constant(value: f64) -> Self {
        Func::Const { value }
    }

    pub fn eval(&self, s: &State) -> f64 {
        match self {
            Func::Const { value } => *value,
            Func::Affine { c, t, w, lo, hi } => {
                let v = c + t * s.t + w * s.w;
                let v = lo.map_or(v, |lo| v.max(lo));
                hi.map_or(v, |hi| v.min(hi))
            }
            Func::ExpAffine { scale, t, w, cap } => (scale * (t * s.t + w * s.w).exp()).min(*cap),
            Func::Tanh { c, amp, scale } => c + amp * (scale * s.w).tanh(),
            Func::PerCount { values } => {
                if values.is_empty() {
                    0.0
                } else {
                    values[s.defaults.min(values.len() - 1)]
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Func::Const { value } => *value == 0.0,
            Func::PerCount { values } => values.iter().all(|v| *v == 0.0),
            _ => false,
        }
    }

    /// Supremum of `|f|` over `[0, horizon] x R`, when it can be read off the parameters.
    pub fn sup_abs(&self, horizon: f64) -> Option<f64> {
        match self {
            Func::Const { value } => Some(value.abs()),
            Func::Affine { c, t, w, lo, hi } => {
                if *w == 0.0 {
                    let ends = [c, &(c + t * horizon)];
                    let clip = |v: f64| {
                        let v = lo.map_or(v, |lo| v.max(lo));
                        hi.map_or(v, |hi| v.min(hi))
                    };
                    Some(ends.iter().map(|v| clip(**v).abs()).fold(0.0, f64::max))
                } else {
                    match (lo, hi) {
                        (Some(lo), Some(hi)) => Some(lo.abs().max(hi.abs())),
                        _ => None,
                    }
                }
            }
            Func::ExpAffine { scale, t, w, cap } => {
                if *w == 0.0 {
                    let m = scale.abs() * (t * horizon).exp().max(1.0);
                    Some(if *scale >= 0.0 { m.min(cap.abs()) } else { m })
                } else if *scale >= 0.0 {
                    Some(cap.abs())
                } else {
                    None
                }
            }
            Func::Tanh { c, amp, .. } => Some(c.abs() + amp.abs()),
            Func::PerCount { values } => Some(values.iter().fold(0.0, |m, v| m.max(v.abs()))),
        }
    }

    /// Lower bound of `f` over the domain when available.
    pub fn inf(&self, horizon: f64) -> Option<f64> {
        match self {
            Func::Const { value } => Some(*value),
            Func::Affine { c, t, w, lo, .. } => {
                if *w == 0.0 {
                    Some((*c).min(c + t * horizon).max(lo.unwrap_or(f64::NEG_INFINITY)))
                } else {
                    *lo
                }
            }
            Func::ExpAffine { scale, .. } if *scale >= 0.0 => Some(0.0),
            Func::ExpAffine { .. } => None,
            Func::Tanh { c, amp, .. } => Some(c - amp.abs()),
            Func::PerCount { values } => values.iter().cloned().reduce(f64::min),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_clips() {
        let f = Func::Affine { c: 0.0, t: 0.0, w: 1.0, lo: Some(-1.0), hi: Some(2.0) };
        assert_eq!(f.eval(&State::new(0.0, 5.0, 0)), 2.0);
        assert_eq!(f.eval(&State::new(0.0, -5.0, 0)), -1.0);
        assert_eq!(f.sup_abs(1.0), Some(2.0));
    }

    #[test]
    fn per_count_saturates() {
        let f = Func::PerCount { values: vec![1.0, 2.0] };
        assert_eq!(f.eval(&State::new(0.0, 0.0, 5)), 2.0);
    }

    #[test]
    fn json_round_trip_and_unknown_key() {
        let f: Func = serde_json::from_str(r#"{"kind":"exp_affine","scale":0.5,"w":0.2,"cap":3.0}"#).unwrap();
        assert_eq!(f, Func::ExpAffine { scale: 0.5, t: 0.0, w: 0.2, cap: 3.0 });
        assert!(serde_json::from_str::<Func>(r#"{"kind":"const","value":1.0,"x":2}"#).is_err());
    }
}
