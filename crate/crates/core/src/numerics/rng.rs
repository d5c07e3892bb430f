use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Matrix, Scalar};

/// Standard deviation of a standard normal truncated to `[-2, 2]`.
pub const TRUNC_STD: f64 = 0.879_625_661_034_239_8;

/// Seeded ChaCha8 stream. `split` derives independent streams from the
/// same seed by selecting a different ChaCha stream id, so consumers that
/// need their own randomness never perturb each other's sequences.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator on stream `stream` of this seed, positioned at its start.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self { seed: self.seed, inner }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.gen::<bool>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Standard normal conditioned on `|x| ≤ 2`, rescaled so the result has
    /// standard deviation `std`.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let x = self.normal();
            if x.abs() <= 2.0 {
                return x * std / TRUNC_STD;
            }
        }
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        xs.shuffle(&mut self.inner);
    }

    pub fn normal_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::of(self.normal() * std))
    }

    pub fn uniform_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::of(self.uniform_in(lo, hi)))
    }

    pub fn trunc_normal_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::of(self.trunc_normal(std)))
    }

    /// Haar-distributed orthogonal `n×n` matrix (QR of a Gaussian matrix).
    pub fn orthogonal<T: Scalar>(&mut self, n: usize) -> Matrix<T> {
        let g: Matrix<T> = self.normal_matrix(n, n, 1.0);
        super::orthonormal_columns(&g).expect("square Gaussian matrix has full rank")
    }
}
