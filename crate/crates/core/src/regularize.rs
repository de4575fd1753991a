//! Deterministic repairs of the matrix logarithm of a TPM: diagonal
//! adjustment, weighted adjustment and the Euclidean projection onto the
//! generator set (QOG).

use nalgebra::DMatrix;

use crate::error::Result;
use crate::linalg;
use crate::model::{GeneratorMatrix, TransitionMatrix};

/// Real part of the principal logarithm of a TPM. Not necessarily a valid
/// generator.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLogMatrix(DMatrix<f64>);

impl RawLogMatrix {
    pub fn from_tpm(p: &TransitionMatrix) -> Result<Self> {
        Ok(RawLogMatrix(linalg::logm_real(p.matrix())?))
    }

    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        linalg::check_square(&m, "log matrix")?;
        linalg::check_finite(&m, "log matrix")?;
        Ok(RawLogMatrix(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Largest deviation of a row sum from zero.
    pub fn row_sum_residual(&self) -> f64 {
        self.0.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max)
    }

    /// Frobenius distance to a generator.
    pub fn distance(&self, q: &GeneratorMatrix) -> f64 {
        (&self.0 - q.matrix()).norm()
    }
}

/// Finalises a repaired matrix: last row absorbing, diagonal rebalanced.
fn finish(mut q: DMatrix<f64>) -> GeneratorMatrix {
    let h = q.nrows();
    for j in 0..h {
        q[(h - 1, j)] = 0.0;
    }
    GeneratorMatrix::from_rates(q).expect("repaired matrix is a generator")
}

pub fn diagonal_adjustment(l: &RawLogMatrix) -> GeneratorMatrix {
    let h = l.dim();
    let q = DMatrix::from_fn(h, h, |i, j| {
        let x = l.0[(i, j)];
        if i != j {
            x.max(0.0)
        } else {
            0.0
        }
    });
    finish(q)
}

pub fn weighted_adjustment(l: &RawLogMatrix) -> GeneratorMatrix {
    let h = l.dim();
    let mut q = l.0.clone();
    for i in 0..h {
        let row = l.0.row(i);
        let pos: f64 = (0..h).filter(|&j| j != i).map(|j| row[j].max(0.0)).sum();
        let neg: f64 = (0..h).filter(|&j| j != i).map(|j| (-row[j]).max(0.0)).sum();
        let g = row[i].abs() + pos;
        for j in 0..h {
            let x = row[j];
            q[(i, j)] = if i != j && x < 0.0 {
                0.0
            } else if g > 0.0 {
                x - neg * x.abs() / g
            } else {
                x
            };
            // Rows that are not zero-sum with a non-positive diagonal can
            // push an entry below zero.
            if i != j && q[(i, j)] < 0.0 {
                q[(i, j)] = 0.0;
            }
        }
    }
    finish(q)
}

/// Euclidean projection of `x` onto `{g : Σ g = 0, g_j ≥ 0 for j ≠ free}`.
///
/// Active-set iteration: project the active coordinates onto the zero-sum
/// hyperplane, drop every constrained coordinate that went negative, and
/// repeat. The active set only shrinks, so this stops after at most
/// `len - 1` passes.
pub fn project_row(x: &[f64], free: usize) -> Vec<f64> {
    let n = x.len();
    let mut active = vec![true; n];
    let mut g = vec![0.0; n];
    loop {
        let k = active.iter().filter(|&&a| a).count() as f64;
        let shift = (0..n).filter(|&j| active[j]).map(|j| x[j]).sum::<f64>() / k;
        let mut dropped = false;
        for j in 0..n {
            if active[j] {
                g[j] = x[j] - shift;
                if j != free && g[j] < 0.0 {
                    active[j] = false;
                    g[j] = 0.0;
                    dropped = true;
                }
            } else {
                g[j] = 0.0;
            }
        }
        if !dropped {
            return g;
        }
    }
}

pub fn qog(l: &RawLogMatrix) -> GeneratorMatrix {
    let h = l.dim();
    let mut q = DMatrix::zeros(h, h);
    for i in 0..h.saturating_sub(1) {
        let row: Vec<f64> = l.0.row(i).iter().copied().collect();
        for (j, v) in project_row(&row, i).into_iter().enumerate() {
            q[(i, j)] = v;
        }
    }
    finish(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use approx::assert_relative_eq;

    fn row_matrix(row: [f64; 3]) -> RawLogMatrix {
        // The test row sits in the first row; the last row is absorbing.
        RawLogMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[row[0], row[1], row[2], 0.1, -0.2, 0.1, 0.0, 0.0, 0.0],
        ))
        .unwrap()
    }

    /// Exhaustive active-set oracle: for every subset of constrained
    /// coordinates forced to zero, solve the equality-constrained
    /// projection and keep the closest feasible point.
    fn qp_oracle(x: &[f64], free: usize) -> Vec<f64> {
        let n = x.len();
        let others: Vec<usize> = (0..n).filter(|&j| j != free).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0..(1u32 << others.len()) {
            let zeroed: Vec<usize> = others
                .iter()
                .enumerate()
                .filter(|(b, _)| mask & (1 << b) != 0)
                .map(|(_, &j)| j)
                .collect();
            let kept: Vec<usize> = (0..n).filter(|j| !zeroed.contains(j)).collect();
            let lambda = kept.iter().map(|&j| x[j]).sum::<f64>() / kept.len() as f64;
            let mut g = vec![0.0; n];
            for &j in &kept {
                g[j] = x[j] - lambda;
            }
            if others.iter().any(|&j| g[j] < -1e-15) {
                continue;
            }
            let d: f64 = (0..n).map(|j| (g[j] - x[j]).powi(2)).sum();
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, g));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn valid_generator_is_fixed_point_of_all_three() {
        let q = reference::unstable_generator();
        let l = RawLogMatrix::new(q.matrix().clone()).unwrap();
        for out in [diagonal_adjustment(&l), weighted_adjustment(&l), qog(&l)] {
            assert!((out.matrix() - q.matrix()).amax() < 1e-15);
        }
    }

    #[test]
    fn diagonal_adjustment_clamps_and_rebalances() {
        let out = diagonal_adjustment(&row_matrix([-0.9, 1.0, -0.1]));
        let r: Vec<f64> = out.matrix().row(0).iter().copied().collect();
        assert_eq!(r, vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn weighted_adjustment_displayed_formula() {
        // G = 0.9 + 1.0 = 1.9, B = 0.1.
        let out = weighted_adjustment(&row_matrix([-0.9, 1.0, -0.1]));
        let g = 1.9;
        let b = 0.1;
        assert_relative_eq!(out.rate(0, 0), -0.9 - b * 0.9 / g, epsilon = 1e-15);
        assert_relative_eq!(out.rate(0, 1), 1.0 - b * 1.0 / g, epsilon = 1e-15);
        assert_relative_eq!(out.rate(0, 1), 0.947368, epsilon = 1e-6);
        assert_eq!(out.rate(0, 2), 0.0);
        assert!(out.row_sum_residual() < 1e-15);
    }

    #[test]
    fn weighted_adjustment_without_negatives_is_identity_on_row() {
        let out = weighted_adjustment(&row_matrix([-0.3, 0.2, 0.1]));
        assert_relative_eq!(out.rate(0, 1), 0.2, epsilon = 1e-16);
        let zero = weighted_adjustment(&row_matrix([0.0, 0.0, 0.0]));
        assert_eq!(zero.rate(0, 1), 0.0);
    }

    #[test]
    fn qog_row_matches_exhaustive_oracle() {
        let row = [-0.9, 1.0, -0.1];
        let got = project_row(&row, 0);
        let want = qp_oracle(&row, 0);
        for (a, b) in got.iter().zip(&want) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
        let out = qog(&row_matrix(row));
        assert_relative_eq!(out.rate(0, 1), want[1], epsilon = 1e-9);
    }

    #[test]
    fn qog_handles_nonzero_row_sum() {
        let row = [-0.5, 0.3, 0.4, -0.05, 0.02];
        let got = project_row(&row, 1);
        let want = qp_oracle(&row, 1);
        for (a, b) in got.iter().zip(&want) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert!(got.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn sparse_observed_tpm_repairs() {
        let l = RawLogMatrix::from_tpm(&reference::sparse_observed_tpm()).unwrap();
        assert!(l.row_sum_residual() < 1e-8);
        let da = diagonal_adjustment(&l);
        let wa = weighted_adjustment(&l);
        let qg = qog(&l);
        // AAA never defaults in the observed matrix, yet the logarithm has a
        // small positive AAA -> D entry that DA keeps; the negative AAA -> C
        // entry is clamped.
        assert!(l.matrix()[(0, 7)] > 0.0);
        assert_eq!(da.rate(0, 7), l.matrix()[(0, 7)]);
        assert_eq!(da.rate(0, 6), 0.0);
        for q in [&da, &wa, &qg] {
            assert!(q.row_sum_residual() < 1e-12);
        }
        let dq = l.distance(&qg);
        assert!(dq <= l.distance(&da) + 1e-15);
        assert!(dq <= l.distance(&wa) + 1e-15);
        // Projection zeroes AA -> C although the observed entry is positive.
        assert_eq!(qg.rate(1, 6), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn projection_matches_oracle(row in proptest::collection::vec(-1.0f64..1.0, 2..7), free_seed in 0usize..100) {
            let free = free_seed % row.len();
            let got = project_row(&row, free);
            let want = qp_oracle(&row, free);
            for (a, b) in got.iter().zip(&want) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn row_permutation_commutes(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let h = 5;
            let mut m = DMatrix::from_fn(h, h, |_, _| rng.random_range(-0.2..0.3));
            for j in 0..h { m[(h - 1, j)] = 0.0; }
            let perm = [2usize, 0, 3, 1];
            // Permuting rows and the columns consistently relabels states.
            let mut pm = m.clone();
            for (a, &b) in perm.iter().enumerate() {
                for (c, &d) in perm.iter().enumerate() {
                    pm[(a, c)] = m[(b, d)];
                }
                pm[(a, h - 1)] = m[(b, h - 1)];
            }
            let q1 = qog(&RawLogMatrix::new(m).unwrap());
            let q2 = qog(&RawLogMatrix::new(pm).unwrap());
            for (a, &b) in perm.iter().enumerate() {
                for (c, &d) in perm.iter().enumerate() {
                    proptest::prop_assert!((q2.rate(a, c) - q1.rate(b, d)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn wa_stays_valid_on_rows_that_are_not_log_like() {
        // positive diagonal and mostly negative off-diagonals
        let l = RawLogMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[0.05, 0.01, -0.2, -0.3, -0.1, 0.02, 0.0, 0.0, 0.0],
        ))
        .unwrap();
        let q = weighted_adjustment(&l);
        assert!(q.row_sum_residual() < 1e-15);
        assert!((0..3).all(|i| (0..3).all(|j| i == j || q.rate(i, j) >= 0.0)));
    }
}
