//! Symmetric positive-definite factorization with a jitter ladder.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::{Error, Result};

/// Diagonal increments tried in order until the Cholesky factorization
/// succeeds. The first rung adds nothing.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

#[derive(Clone, Debug)]
pub struct SpdFactor {
    pub chol: Cholesky<f64, Dyn>,
    /// Diagonal increment that was needed.
    pub jitter: f64,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ B` for the lower factor `L`.
    pub fn solve_lower(&self, b: &mut DMatrix<f64>) {
        const BLOCK: usize = 64;
        let l = self.chol.l_dirty();
        let n = l.nrows();
        if n == 0 {
            return;
        }
        // Forward substitution over blocks of right-hand sides so each column
        // of L is reused while it is in cache.
        for chunk in b.as_mut_slice().chunks_mut(n * BLOCK) {
            for j in 0..n {
                let ljj = l[(j, j)];
                let ls = &l.as_slice()[j * n + j + 1..(j + 1) * n];
                for xs in chunk.chunks_mut(n) {
                    let v = xs[j] / ljj;
                    xs[j] = v;
                    if v != 0.0 {
                        for (xi, &lij) in xs[j + 1..].iter_mut().zip(ls) {
                            *xi -= lij * v;
                        }
                    }
                }
            }
        }
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

pub fn cholesky_with_jitter(m: &DMatrix<f64>, ladder: &[f64]) -> Result<SpdFactor> {
    for &jitter in ladder {
        let mut a = m.clone();
        if jitter > 0.0 {
            for i in 0..a.nrows() {
                a[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(a) {
            return Ok(SpdFactor { chol, jitter });
        }
    }
    Err(Error::IllConditioned {
        min_eigenvalue: min_eigenvalue(m),
    })
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NAN;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
