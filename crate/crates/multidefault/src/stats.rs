//! Deterministic reductions. Parallel work is always split into fixed-size
//! chunks whose partial results are combined in chunk order, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;

pub const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn exact(mean: f64) -> Self {
        Self { mean, se: 0.0 }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Self { mean, se: (var / n as f64).sqrt() }
    }
}

/// Sum of `f(i)` for `i < n`, reproducible across thread counts.
pub fn par_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK)).into_par_iter().map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).sum()).collect();
    partials.iter().sum()
}

/// Evaluates `f` on every index in parallel and returns the values in order.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Per-path values on a grid, stored path-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PathMatrix {
    paths: usize,
    cols: usize,
    data: Vec<f64>,
}

impl PathMatrix {
    pub fn zeros(paths: usize, cols: usize) -> Self {
        Self { paths, cols, data: vec![0.0; paths * cols] }
    }

    pub fn from_vec(paths: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), paths * cols);
        Self { paths, cols, data }
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.data[j * self.cols + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.cols..(j + 1) * self.cols]
    }

    pub fn rows_mut(&mut self) -> rayon::slice::ChunksMut<'_, f64> {
        self.data.par_chunks_mut(self.cols)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.paths).map(|j| self.get(j, k)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_of_constant_has_zero_se() {
        let e = Estimate::from_samples(&[2.0; 10]);
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn par_sum_matches_across_pools() {
        let f = |i: usize| ((i as f64) * 0.37).sin();
        let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| par_sum(100_000, f));
        let b = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| par_sum(100_000, f));
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
