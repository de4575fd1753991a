//! Reference rating scale, generators and observed matrix used throughout
//! the benchmarks and tests.

use nalgebra::DMatrix;

use crate::model::{GeneratorMatrix, TransitionMatrix};

pub const RATINGS: [&str; 8] = ["AAA", "AA", "A", "BBB", "BB", "B", "C", "D"];

#[rustfmt::skip]
const UNSTABLE: [f64; 64] = [
    -0.146371, 0.085881, 0.04549, 0.015, 0.0, 0.0, 0.0, 0.0,
    0.018506, -0.166337, 0.114831, 0.033, 0.0, 0.0, 0.0, 0.0,
    0.0276, 0.047012, -0.198043, 0.09043, 0.023001, 0.01, 0.0, 0.0,
    0.011469, 0.010734, 0.088133, -0.243046, 0.077569, 0.044407, 0.010734, 0.0,
    0.0, 0.0, 0.019159, 0.184699, -0.323077, 0.106166, 0.013053, 0.0,
    0.0, 0.0, 0.012280, 0.034822, 0.093489, -0.296265, 0.134273, 0.022401,
    0.0, 0.0, 0.0, 0.0, 0.02, 0.140209, -0.600939, 0.440730,
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
];

#[rustfmt::skip]
const STABLE: [f64; 64] = [
    -0.061371, 0.055881, 0.005490, 0.0, 0.0, 0.0, 0.0, 0.0,
    0.013506, -0.096337, 0.074831, 0.008, 0.0, 0.0, 0.0, 0.0,
    0.0, 0.037012, -0.097442, 0.06043, 0.0, 0.0, 0.0, 0.0,
    0.0, 0.000734, 0.058133, -0.120843, 0.057569, 0.004407, 0.0, 0.0,
    0.0, 0.0, 0.009159, 0.104699, -0.190024, 0.076166, 0.0, 0.0,
    0.0, 0.0, 0.0, 0.024822, 0.083489, -0.174985, 0.064273, 0.002401,
    0.0, 0.0, 0.0, 0.0, 0.0, 0.080209, -0.300939, 0.220730,
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
];

#[rustfmt::skip]
const SPARSE_OBSERVED: [f64; 64] = [
    0.8824, 0.1176, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    0.0064, 0.9111, 0.0813, 0.0008, 0.0001, 0.0, 0.0003, 0.0,
    0.0003, 0.0559, 0.8836, 0.0499, 0.0079, 0.0015, 0.0002, 0.0007,
    0.0, 0.0116, 0.1585, 0.7640, 0.0528, 0.0070, 0.0, 0.0061,
    0.0, 0.0, 0.0213, 0.1193, 0.7746, 0.0623, 0.0099, 0.0127,
    0.0, 0.0, 0.0062, 0.0199, 0.1669, 0.7017, 0.0730, 0.0322,
    0.0, 0.0, 0.0, 0.0, 0.0417, 0.2083, 0.4544, 0.2956,
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
];

/// High-intensity ("stressed") generator. The published B row lists a
/// diagonal of -0.296265 against off-diagonal rates summing to 0.297265; the
/// diagonal is rebuilt from the rates.
pub fn unstable_generator() -> GeneratorMatrix {
    GeneratorMatrix::from_rates(unstable_published())
        .expect("reference generator is valid")
}

/// The high-intensity generator exactly as published, including the
/// inconsistent B diagonal.
pub fn unstable_published() -> DMatrix<f64> {
    DMatrix::from_row_slice(8, 8, &UNSTABLE)
}

/// Low-intensity ("calm") generator.
pub fn stable_generator() -> GeneratorMatrix {
    GeneratorMatrix::new(DMatrix::from_row_slice(8, 8, &STABLE))
        .expect("reference generator is valid")
}

/// A one-year observed TPM that is not embeddable. Rows are published to
/// four decimals, so they are renormalised on load.
pub fn sparse_observed_tpm() -> TransitionMatrix {
    TransitionMatrix::renormalized(DMatrix::from_row_slice(8, 8, &SPARSE_OBSERVED), 1.0)
        .expect("reference TPM is valid")
}

/// The published rows of [`sparse_observed_tpm`] before renormalisation.
pub fn sparse_observed_raw() -> DMatrix<f64> {
    DMatrix::from_row_slice(8, 8, &SPARSE_OBSERVED)
}

/// Obligors per rating assumed when the sparse observed TPM is turned into
/// counts.
pub const SPARSE_OBSERVED_OBLIGORS: u64 = 250;

/// Annual bond yields per non-default rating.
pub const RATING_YIELDS: [f64; 7] = [0.0265, 0.0269, 0.0278, 0.0293, 0.0318, 0.0545, 0.1239];
