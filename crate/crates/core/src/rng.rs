//! Counter-based random streams.
//!
//! A stream is identified by a 64-bit key derived from the run seed and a
//! path of integers (purpose, iteration, time index, sample index, ...).
//! Output `k` of a stream is a pure function of `(key, k)`, so any sample's
//! draws are independent of how many other samples exist or in which order
//! they are generated.

use std::f64::consts::PI;

use crate::autodiff::Matrix;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded root from which keyed streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    key: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed ^ 0x5DEE_CE66_D1CE_5EED),
        }
    }

    /// Child key for one more path component.
    pub fn child(&self, component: u64) -> Self {
        Self {
            key: mix64(self.key.wrapping_add(mix64(component.wrapping_add(GOLDEN)))),
        }
    }

    pub fn derive(&self, path: &[u64]) -> Self {
        path.iter().fold(*self, |r, &c| r.child(c))
    }

    pub fn stream(&self) -> Stream {
        Stream {
            key: self.key,
            counter: 0,
            spare: None,
        }
    }

    /// `rows x cols` standard normals; row `i` comes from child stream `i`.
    pub fn normal_matrix(&self, rows: usize, cols: usize) -> Matrix {
        let mut out = Matrix::zeros((rows, cols));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let mut s = self.child(i as u64).stream();
            for v in row.iter_mut() {
                *v = s.normal();
            }
        }
        out
    }

    /// `rows x cols` uniforms on `[lo, hi)`; row `i` from child stream `i`.
    pub fn uniform_matrix(&self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let mut out = Matrix::zeros((rows, cols));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let mut s = self.child(i as u64).stream();
            for v in row.iter_mut() {
                *v = lo + (hi - lo) * s.uniform();
            }
        }
        out
    }
}

/// Sequential view of one keyed stream.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
    spare: Option<f64>,
}

impl Stream {
    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key ^ mix64(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates prefix: `count` distinct indices from `0..n`.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..count.min(n) {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(count.min(n));
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = {
            let mut s = Rng::new(7).derive(&[1, 2]).stream();
            (0..5).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = Rng::new(7).derive(&[1, 2]).stream();
            (0..5).map(|_| s.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut c = Rng::new(7).derive(&[2, 1]).stream();
        assert_ne!(a[0], c.next_u64());
    }

    #[test]
    fn rows_do_not_depend_on_batch_size() {
        let r = Rng::new(3).child(11);
        let small = r.normal_matrix(4, 3);
        let large = r.normal_matrix(40, 3);
        assert_eq!(small, large.slice(ndarray::s![0..4, ..]));
    }

    #[test]
    fn normal_moments() {
        let mut s = Rng::new(5).stream();
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        // Var of the sample variance of a normal is 2/n.
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn sample_indices_are_distinct() {
        let mut s = Rng::new(1).stream();
        let mut idx = s.sample_indices(50, 20);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 20);
        assert!(idx.iter().all(|&i| i < 50));
    }
}
