//! Joint simulation of a Brownian path and `p` strictly ordered default times.
//!
//! Defaults follow a sequential Cox construction: level `i` (zero based) is
//! active on `(tau_{i-1}, tau_i]` with hazard `h_i(t, W_t)`, and fires when its
//! integrated hazard crosses an independent `Exp(1)` threshold. Inside a grid
//! step the hazard integral is the trapezoid value, so the compensator is
//! piecewise linear and the threshold crossing is found by linear root finding.
//! Default times are never snapped to the grid.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::func::{Func, State};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Invalid("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }
}

/// Per-level base hazards `h_i(t, w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityModel {
    pub levels: Vec<Func>,
    /// Declared upper bound on every hazard, checked during simulation.
    #[serde(default)]
    pub bound: Option<f64>,
}

impl IntensityModel {
    pub fn constant(rates: &[f64]) -> Self {
        Self { levels: rates.iter().map(|r| Func::constant(*r)).collect(), bound: None }
    }

    pub fn p(&self) -> usize {
        self.levels.len()
    }

    /// Base hazard of level `i` (zero based).
    pub fn hazard(&self, i: usize, t: f64, w: f64) -> f64 {
        self.levels[i].eval(&State::new(t, w, i))
    }

    /// Intensity of level `i` in state `s` under the sequential convention.
    pub fn intensity(&self, i: usize, s: &State) -> f64 {
        if s.defaults == i {
            self.hazard(i, s.t, s.w)
        } else {
            0.0
        }
    }

    /// Largest hazard value, from the declared bound or the parameters.
    pub fn sup(&self, horizon: f64) -> Option<f64> {
        if let Some(b) = self.bound {
            return Some(b);
        }
        self.levels.iter().map(|f| f.sup_abs(horizon)).try_fold(0.0f64, |m, v| v.map(|v| m.max(v)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Invalid("intensity model needs at least one level".into()));
        }
        if let Some(b) = self.bound {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::Invalid(format!("hazard bound must be finite and nonnegative, got {b}")));
            }
        }
        Ok(())
    }

    fn checked(&self, i: usize, t: f64, w: f64, path: usize) -> Result<f64> {
        let h = self.hazard(i, t, w);
        let over = self.bound.is_some_and(|b| h > b);
        if !h.is_finite() || h < 0.0 || over {
            return Err(Error::Hazard { level: i + 1, path, t, value: h });
        }
        Ok(h)
    }
}

/// A piece of a grid step on which the number of defaults is constant.
#[derive(Clone, Copy, Debug)]
pub struct Piece {
    pub k: usize,
    pub a: f64,
    pub b: f64,
    pub wa: f64,
    pub wb: f64,
    pub defaults: usize,
    /// Hazard rate of the active level on this piece (0 once all levels fired).
    pub rate: f64,
}

impl Piece {
    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn is_empty(&self) -> bool {
        self.b <= self.a
    }

    pub fn dlam(&self) -> f64 {
        self.rate * self.len()
    }

    pub fn start(&self) -> State {
        State::new(self.a, self.wa, self.defaults)
    }

    pub fn end(&self) -> State {
        State::new(self.b, self.wb, self.defaults)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum StepEvent {
    Piece(Piece),
    /// Level `level` (zero based) defaults; `w` is the Brownian value at `tau`.
    Default {
        level: usize,
        tau: f64,
        w: f64,
    },
    /// A caller supplied time inside the step.
    Mark {
        index: usize,
        t: f64,
        w: f64,
    },
}

/// Quantities of one grid step seen from its left end.
#[derive(Clone, Copy, Debug)]
pub struct StepIncrement {
    /// Defaults observed at `t_k`; the active level index.
    pub defaults: usize,
    pub w: f64,
    pub dw: f64,
    /// Whether the active level fires inside the step.
    pub fired: bool,
    /// Compensator increment of the active level over the step.
    pub dlam: f64,
    /// Intensity of the active level at `t_k`.
    pub lambda: f64,
}

impl StepIncrement {
    pub fn dm(&self) -> f64 {
        (self.fired as u8 as f64) - self.dlam
    }
}

/// Simulated paths on a uniform grid.
#[derive(Clone, Debug)]
pub struct ScenarioBatch {
    grid: TimeGrid,
    model: IntensityModel,
    seed: u64,
    paths: usize,
    w: Vec<f64>,
    tau: Vec<f64>,
    thresholds: Vec<f64>,
    resampled: u64,
}

fn interp(t0: f64, t1: f64, w0: f64, w1: f64, s: f64) -> f64 {
    w0 + (w1 - w0) * (s - t0) / (t1 - t0)
}

/// Threshold sampler. Fills `tau` for one path and returns the number of redraws.
fn sample_defaults(
    grid: &TimeGrid,
    model: &IntensityModel,
    w: &[f64],
    thresholds: &mut [f64],
    tau: &mut [f64],
    path: usize,
    redraw: &mut dyn FnMut() -> f64,
) -> Result<u64> {
    let p = model.p();
    let mut redraws = 0;
    tau.iter_mut().for_each(|x| *x = f64::INFINITY);
    let mut level = 0;
    let mut start = 0.0;
    let mut cum = 0.0;
    for k in 0..grid.steps() {
        let (t0, t1) = (grid.t(k), grid.t(k + 1));
        while level < p {
            let a = t0.max(start);
            let wa = interp(t0, t1, w[k], w[k + 1], a);
            let rate = 0.5 * (model.checked(level, a, wa, path)? + model.checked(level, t1, w[k + 1], path)?);
            let inc = rate * (t1 - a);
            let e = thresholds[level];
            if rate > 0.0 && cum + inc >= e {
                let s = (a + (e - cum) / rate).min(t1);
                if s <= start {
                    // Tie with the previous default: draw a fresh threshold.
                    thresholds[level] = redraw();
                    redraws += 1;
                    continue;
                }
                tau[level] = s;
                start = s;
                cum = 0.0;
                level += 1;
            } else {
                cum += inc;
                break;
            }
        }
    }
    Ok(redraws)
}

fn positive_exp(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let e: f64 = rng.sample(Exp1);
        if e > 0.0 {
            return e;
        }
    }
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Draws `m` paths. Path `j` depends only on `(seed, j)`.
pub fn simulate_batch(grid: TimeGrid, model: &IntensityModel, m: usize, seed: u64) -> Result<ScenarioBatch> {
    if m == 0 {
        return Err(Error::Invalid("number of paths must be positive".into()));
    }
    model.validate()?;
    let n1 = grid.steps() + 1;
    let p = model.p();
    let sd = grid.dt().sqrt();
    let mut w = vec![0.0; m * n1];
    let mut tau = vec![f64::INFINITY; m * p];
    let mut thresholds = vec![0.0; m * p];
    let redraws: Vec<Result<u64>> = w
        .par_chunks_mut(n1)
        .zip(tau.par_chunks_mut(p))
        .zip(thresholds.par_chunks_mut(p))
        .enumerate()
        .map(|(j, ((wj, tj), ej))| {
            let mut rng = path_rng(seed, j);
            for k in 0..grid.steps() {
                let z: f64 = rng.sample(StandardNormal);
                wj[k + 1] = wj[k] + sd * z;
            }
            for e in ej.iter_mut() {
                *e = positive_exp(&mut rng);
            }
            sample_defaults(&grid, model, wj, ej, tj, j, &mut || positive_exp(&mut rng))
        })
        .collect();
    let mut resampled = 0;
    for r in redraws {
        resampled += r?;
    }
    Ok(ScenarioBatch { grid, model: model.clone(), seed, paths: m, w, tau, thresholds, resampled })
}

impl ScenarioBatch {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn model(&self) -> &IntensityModel {
        &self.model
    }

    pub fn p(&self) -> usize {
        self.model.p()
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of tie redraws performed by the sampler.
    pub fn resampled(&self) -> u64 {
        self.resampled
    }

    /// Brownian values of path `j` on the grid.
    pub fn w(&self, j: usize) -> &[f64] {
        let n1 = self.grid.steps() + 1;
        &self.w[j * n1..(j + 1) * n1]
    }

    pub fn w_at_step(&self, j: usize, k: usize) -> f64 {
        self.w[j * (self.grid.steps() + 1) + k]
    }

    pub fn dw(&self, j: usize, k: usize) -> f64 {
        let base = j * (self.grid.steps() + 1) + k;
        self.w[base + 1] - self.w[base]
    }

    /// Default times of path `j`; `INFINITY` means no default before the horizon.
    pub fn tau(&self, j: usize) -> &[f64] {
        &self.tau[j * self.p()..(j + 1) * self.p()]
    }

    pub fn thresholds(&self, j: usize) -> &[f64] {
        &self.thresholds[j * self.p()..(j + 1) * self.p()]
    }

    /// Number of defaults with `tau <= t`.
    pub fn defaults_at(&self, j: usize, t: f64) -> usize {
        self.tau(j).iter().take_while(|x| **x <= t).count()
    }

    pub fn defaults_at_step(&self, j: usize, k: usize) -> usize {
        self.defaults_at(j, self.grid.t(k))
    }

    /// Brownian value at an arbitrary time, linear between grid points.
    pub fn w_at(&self, j: usize, t: f64) -> f64 {
        let n = self.grid.steps();
        let k = ((t / self.grid.dt()).floor() as usize).min(n - 1);
        let w = self.w(j);
        interp(self.grid.t(k), self.grid.t(k + 1), w[k], w[k + 1], t)
    }

    pub fn state(&self, j: usize, k: usize) -> State {
        State::new(self.grid.t(k), self.w_at_step(j, k), self.defaults_at_step(j, k))
    }

    pub fn indicator(&self, j: usize, k: usize, i: usize) -> f64 {
        if self.tau(j)[i] <= self.grid.t(k) {
            1.0
        } else {
            0.0
        }
    }

    /// Intensity of level `i` at grid point `k` of path `j`.
    pub fn lambda(&self, j: usize, k: usize, i: usize) -> f64 {
        self.model.intensity(i, &self.state(j, k))
    }

    /// Trapezoid rate of level `i` on the part of step `k` after its activation.
    fn level_rate(&self, j: usize, k: usize, i: usize) -> f64 {
        let (t0, t1) = (self.grid.t(k), self.grid.t(k + 1));
        let start = if i == 0 { 0.0 } else { self.tau(j)[i - 1] };
        if start >= t1 || self.tau(j)[i] <= t0 {
            return 0.0;
        }
        let a = t0.max(start);
        let (w0, w1) = (self.w_at_step(j, k), self.w_at_step(j, k + 1));
        let wa = interp(t0, t1, w0, w1, a);
        0.5 * (self.model.hazard(i, a, wa) + self.model.hazard(i, t1, w1))
    }

    /// Compensator increment of level `i` over step `k`.
    pub fn dlam(&self, j: usize, k: usize, i: usize) -> f64 {
        let (t0, t1) = (self.grid.t(k), self.grid.t(k + 1));
        let start = if i == 0 { 0.0 } else { self.tau(j)[i - 1] };
        let a = t0.max(start);
        let b = t1.min(self.tau(j)[i]);
        if b <= a {
            return 0.0;
        }
        self.level_rate(j, k, i) * (b - a)
    }

    pub fn step(&self, j: usize, k: usize) -> StepIncrement {
        let s = self.state(j, k);
        let p = self.p();
        let dw = self.dw(j, k);
        if s.defaults >= p {
            return StepIncrement { defaults: s.defaults, w: s.w, dw, fired: false, dlam: 0.0, lambda: 0.0 };
        }
        let i = s.defaults;
        StepIncrement {
            defaults: i,
            w: s.w,
            dw,
            fired: self.tau(j)[i] <= self.grid.t(k + 1),
            dlam: self.dlam(j, k, i),
            lambda: self.model.hazard(i, s.t, s.w),
        }
    }

    /// Walks step `k` of path `j`, splitting it at default times and at the
    /// sorted `marks` falling in `(t_k, t_{k+1}]`.
    pub fn walk_step(&self, j: usize, k: usize, marks: &[f64], mut f: impl FnMut(StepEvent)) {
        let (t0, t1) = (self.grid.t(k), self.grid.t(k + 1));
        let (w0, w1) = (self.w_at_step(j, k), self.w_at_step(j, k + 1));
        let tau = self.tau(j);
        let p = self.p();
        let mut d = tau.iter().take_while(|x| **x <= t0).count();
        let mut mi = marks.partition_point(|m| *m <= t0);
        let mut a = t0;
        let mut wa = w0;
        let mut rate = if d < p { self.level_rate(j, k, d) } else { 0.0 };
        loop {
            let next_default = if d < p && tau[d] <= t1 { Some(tau[d]) } else { None };
            let next_mark = if mi < marks.len() && marks[mi] <= t1 { Some(marks[mi]) } else { None };
            let (e, is_default) = match (next_default, next_mark) {
                (None, None) => break,
                (Some(x), None) => (x, true),
                (None, Some(y)) => (y, false),
                (Some(x), Some(y)) => {
                    if x <= y {
                        (x, true)
                    } else {
                        (y, false)
                    }
                }
            };
            let we = interp(t0, t1, w0, w1, e);
            if e > a {
                f(StepEvent::Piece(Piece { k, a, b: e, wa, wb: we, defaults: d, rate }));
            }
            if is_default {
                f(StepEvent::Default { level: d, tau: e, w: we });
                d += 1;
                rate = if d < p { self.level_rate(j, k, d) } else { 0.0 };
            } else {
                f(StepEvent::Mark { index: mi, t: e, w: we });
                mi += 1;
            }
            a = e;
            wa = we;
        }
        if t1 > a {
            f(StepEvent::Piece(Piece { k, a, b: t1, wa, wb: w1, defaults: d, rate }));
        }
    }

    /// Integrated compensator of level `i` on the grid of path `j`.
    pub fn compensator(&self, j: usize, i: usize) -> Vec<f64> {
        let n = self.grid.steps();
        let mut out = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for k in 0..n {
            acc += self.dlam(j, k, i);
            out.push(acc);
        }
        out
    }

    /// Refines the time step by taking every `factor`-th grid point of this
    /// batch and re-running the default sampler with the same thresholds.
    pub fn coarsen(&self, factor: usize) -> Result<ScenarioBatch> {
        let n = self.grid.steps();
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(Error::Invalid(format!("cannot coarsen {n} steps by {factor}")));
        }
        let grid = TimeGrid::new(self.grid.horizon(), n / factor)?;
        let n1 = grid.steps() + 1;
        let p = self.p();
        let mut w = vec![0.0; self.paths * n1];
        let mut tau = vec![f64::INFINITY; self.paths * p];
        let mut thresholds = self.thresholds.clone();
        let redraws: Vec<Result<u64>> = w
            .par_chunks_mut(n1)
            .zip(tau.par_chunks_mut(p))
            .zip(thresholds.par_chunks_mut(p))
            .enumerate()
            .map(|(j, ((wj, tj), ej))| {
                let fine = self.w(j);
                for (k, x) in wj.iter_mut().enumerate() {
                    *x = fine[k * factor];
                }
                let mut rng = path_rng(self.seed ^ 0x5bd1_e995_u64, j);
                sample_defaults(&grid, &self.model, wj, ej, tj, j, &mut || positive_exp(&mut rng))
            })
            .collect();
        let mut resampled = self.resampled;
        for r in redraws {
            resampled += r?;
        }
        Ok(ScenarioBatch { grid, model: self.model.clone(), seed: self.seed, paths: self.paths, w, tau, thresholds, resampled })
    }

    /// Restricts the batch to `[0, t_k]`.
    pub fn truncate(&self, k: usize) -> Result<ScenarioBatch> {
        let n = self.grid.steps();
        if k == 0 || k > n {
            return Err(Error::Invalid(format!("truncation index {k} outside 1..={n}")));
        }
        let grid = TimeGrid::new(self.grid.t(k), k)?;
        let mut w = Vec::with_capacity(self.paths * (k + 1));
        for j in 0..self.paths {
            w.extend_from_slice(&self.w(j)[..=k]);
        }
        Ok(ScenarioBatch {
            grid,
            model: self.model.clone(),
            seed: self.seed,
            paths: self.paths,
            w,
            tau: self.tau.clone(),
            thresholds: self.thresholds.clone(),
            resampled: self.resampled,
        })
    }

    /// Writes one CSV row per (path, grid point): `path,t,W,N1..Np,lambda1..lambdap`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let p = self.p();
        let mut header = String::from("path,t,W");
        for i in 1..=p {
            header.push_str(&format!(",N{i}"));
        }
        for i in 1..=p {
            header.push_str(&format!(",lambda{i}"));
        }
        writeln!(out, "{header}")?;
        for j in 0..self.paths {
            for k in 0..=self.grid.steps() {
                let mut row = format!("{j},{},{}", self.grid.t(k), self.w_at_step(j, k));
                for i in 0..p {
                    row.push_str(&format!(",{}", self.indicator(j, k, i)));
                }
                for i in 0..p {
                    row.push_str(&format!(",{}", self.lambda(j, k, i)));
                }
                writeln!(out, "{row}")?;
            }
        }
        Ok(())
    }
}

/// `M^i = N^i - Lambda^i` on the grid, one row per path (row-major, `n + 1` columns).
pub fn compensated_martingale(batch: &ScenarioBatch, i: usize) -> Result<Vec<f64>> {
    if i >= batch.p() {
        return Err(Error::Invalid(format!("level {} out of range 1..={}", i + 1, batch.p())));
    }
    let n1 = batch.grid().steps() + 1;
    let mut out = vec![0.0; batch.paths() * n1];
    out.par_chunks_mut(n1).enumerate().for_each(|(j, row)| {
        let lam = batch.compensator(j, i);
        for k in 0..n1 {
            row[k] = batch.indicator(j, k, i) - lam[k];
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints() {
        let g = TimeGrid::new(0.3, 7).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(7), 0.3);
        assert!(g.points().windows(2).all(|x| x[0] < x[1]));
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn zero_hazard_never_defaults() {
        let b = simulate_batch(TimeGrid::new(1.0, 10).unwrap(), &IntensityModel::constant(&[0.0]), 500, 1).unwrap();
        assert!((0..500).all(|j| b.tau(j)[0].is_infinite()));
        let m = compensated_martingale(&b, 0).unwrap();
        assert!(m.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn compensator_hits_threshold_at_default() {
        let model =
            IntensityModel { levels: vec![Func::ExpAffine { scale: 1.0, t: 0.0, w: 0.5, cap: 5.0 }, Func::constant(2.0)], bound: None };
        let b = simulate_batch(TimeGrid::new(1.0, 20).unwrap(), &model, 300, 9).unwrap();
        for j in 0..300 {
            let tau = b.tau(j);
            if tau[0].is_finite() {
                // Integrate the piecewise-linear compensator up to tau_1.
                let mut acc = 0.0;
                for k in 0..20 {
                    b.walk_step(j, k, &[], |ev| {
                        if let StepEvent::Piece(pc) = ev {
                            if pc.defaults == 0 {
                                acc += pc.dlam();
                            }
                        }
                    });
                }
                assert!((acc - b.thresholds(j)[0]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn negative_hazard_is_rejected() {
        let model = IntensityModel { levels: vec![Func::constant(-1.0)], bound: None };
        assert!(simulate_batch(TimeGrid::new(1.0, 4).unwrap(), &model, 3, 0).is_err());
        assert!(simulate_batch(TimeGrid::new(1.0, 4).unwrap(), &IntensityModel::constant(&[1.0]), 0, 0).is_err());
    }

    #[test]
    fn coarsen_keeps_constant_hazard_defaults() {
        let b = simulate_batch(TimeGrid::new(1.0, 8).unwrap(), &IntensityModel::constant(&[1.0, 2.0]), 200, 3).unwrap();
        let c = b.coarsen(2).unwrap();
        for j in 0..200 {
            assert_eq!(c.w(j)[4], b.w(j)[8]);
            for (x, y) in b.tau(j).iter().zip(c.tau(j)) {
                assert!((x - y).abs() < 1e-12 || (x.is_infinite() && y.is_infinite()));
            }
        }
    }
}
