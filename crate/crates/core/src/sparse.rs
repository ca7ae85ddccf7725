//! Sparse direct solves for stencil-structured Jacobians (faer LU).
//!
//! The sparsity pattern of a stencil operator is fixed by the grid, so the
//! symbolic analysis is done once per pattern and reused for every numeric
//! factorization.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::Mat;

use crate::error::{KrfError, Result};

/// A square sparsity pattern with a cached symbolic LU analysis.
///
/// Entries are given as `(row, col)` pairs; values passed to
/// [`SparsePattern::factorize`] must follow the same order. Repeated pairs are summed.
#[derive(Debug, Clone)]
pub struct SparsePattern {
    size: usize,
    entries: usize,
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    lu: SymbolicLu<usize>,
}

impl SparsePattern {
    pub fn new(size: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let idx: Vec<Pair<usize, usize>> = pairs.iter().map(|&(row, col)| Pair { row, col }).collect();
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(size, size, &idx)
            .map_err(|e| KrfError::Invariant(format!("sparse pattern: {e:?}")))?;
        let lu = SymbolicLu::try_new(symbolic.as_ref())
            .map_err(|e| KrfError::Invariant(format!("symbolic LU: {e:?}")))?;
        Ok(Self {
            size,
            entries: pairs.len(),
            symbolic,
            argsort,
            lu,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn factorize(&self, values: &[f64]) -> Result<SparseLu> {
        if values.len() != self.entries {
            return Err(KrfError::Argument("value count does not match sparse pattern".into()));
        }
        let mat = SparseColMat::new_from_argsort(self.symbolic.clone(), &self.argsort, values)
            .map_err(|e| KrfError::Invariant(format!("sparse assembly: {e:?}")))?;
        let lu = Lu::try_new_with_symbolic(self.lu.clone(), mat.as_ref()).map_err(|e| KrfError::Solver {
            message: format!("sparse LU failed: {e:?}"),
            history: vec![],
        })?;
        Ok(SparseLu { size: self.size, lu })
    }
}

/// A numeric LU factorization ready for repeated solves.
pub struct SparseLu {
    size: usize,
    lu: Lu<usize, f64>,
}

impl SparseLu {
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.size {
            return Err(KrfError::Argument("right-hand side has wrong length".into()));
        }
        let b = Mat::from_fn(self.size, 1, |i, _| rhs[i]);
        let x = self.lu.solve(&b);
        let out: Vec<f64> = (0..self.size).map(|i| x[(i, 0)]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(KrfError::Solver {
                message: "singular linear system".into(),
                history: vec![],
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_periodic_tridiagonal_system() {
        // (2 + 1/4) on the diagonal, -1 to the periodic neighbours.
        let n = 50;
        let mut pairs = vec![];
        let mut vals = vec![];
        for i in 0..n {
            pairs.push((i, i));
            vals.push(2.25);
            pairs.push((i, (i + 1) % n));
            vals.push(-1.0);
            pairs.push((i, (i + n - 1) % n));
            vals.push(-1.0);
        }
        let pattern = SparsePattern::new(n, &pairs).unwrap();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let x = pattern.factorize(&vals).unwrap().solve(&rhs).unwrap();
        for i in 0..n {
            let ax = 2.25 * x[i] - x[(i + 1) % n] - x[(i + n - 1) % n];
            assert!((ax - rhs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_entries_are_summed() {
        let pattern = SparsePattern::new(1, &[(0, 0), (0, 0)]).unwrap();
        let x = pattern.factorize(&[1.5, 2.5]).unwrap().solve(&[8.0]).unwrap();
        assert_eq!(x, vec![2.0]);
    }
}
