//! Generators, transition matrices and observation sets.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result, Violation};
use crate::linalg;

/// Row sums of a generator must vanish to this absolute tolerance.
pub const GENERATOR_ROW_TOL: f64 = 1e-12;
/// Row sums of an observed TPM must equal one to this tolerance.
pub const TPM_ROW_TOL: f64 = 1e-9;
/// Negative roundoff tolerated (and clamped) in computed stochastic matrices.
pub const STOCHASTIC_CLAMP_TOL: f64 = 1e-14;

/// Stable-conservative intensity matrix whose last state is absorbing.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix(DMatrix<f64>);

/// Lists every way `q` fails to be a generator with an absorbing last state.
pub fn generator_violations(q: &DMatrix<f64>) -> Vec<Violation> {
    let h = q.nrows();
    let mut out = Vec::new();
    for i in 0..h {
        let mut finite_row = true;
        for j in 0..q.ncols() {
            let x = q[(i, j)];
            if !x.is_finite() {
                out.push(Violation::NonFinite { row: i, col: j });
                finite_row = false;
                continue;
            }
            if i != j && x < 0.0 {
                out.push(Violation::NegativeOffDiagonal { row: i, col: j, value: x });
            }
            if i == j && x > 0.0 {
                out.push(Violation::PositiveDiagonal { row: i, value: x });
            }
        }
        if finite_row {
            let sum: f64 = q.row(i).sum();
            if sum.abs() > GENERATOR_ROW_TOL {
                out.push(Violation::NonzeroRowSum { row: i, sum });
            }
        }
    }
    if h > 0 {
        for j in 0..q.ncols() {
            let x = q[(h - 1, j)];
            if x != 0.0 && x.is_finite() {
                out.push(Violation::NonAbsorbingLastRow { col: j, value: x });
            }
        }
    }
    out
}

/// Checks the generator conditions and wraps the matrix.
pub fn validate_generator(q: DMatrix<f64>) -> Result<GeneratorMatrix> {
    GeneratorMatrix::new(q)
}

impl GeneratorMatrix {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        linalg::check_square(&q, "generator")?;
        if q.nrows() < 2 {
            return Err(Error::DimensionError("generator needs at least 2 states".into()));
        }
        let v = generator_violations(&q);
        if v.is_empty() {
            Ok(GeneratorMatrix(q))
        } else {
            Err(Error::InvalidGenerator(v))
        }
    }

    /// Builds a generator from its off-diagonal rates; the diagonal of the
    /// input is ignored and replaced by the negated off-diagonal row sum.
    pub fn from_rates(mut q: DMatrix<f64>) -> Result<Self> {
        let h = q.nrows();
        for i in 0..h {
            let off: f64 = (0..q.ncols()).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
            if i < q.ncols() {
                q[(i, i)] = -off;
            }
        }
        Self::new(q)
    }

    pub fn zeros(h: usize) -> Self {
        GeneratorMatrix(DMatrix::zeros(h, h))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Total exit intensity `q_i`.
    pub fn intensity(&self, i: usize) -> f64 {
        -self.0[(i, i)]
    }

    /// Euclidean (Frobenius) distance to another generator.
    pub fn distance(&self, other: &GeneratorMatrix) -> f64 {
        (&self.0 - &other.0).norm()
    }

    /// Largest absolute row sum; zero up to rounding for every valid
    /// generator.
    pub fn row_sum_residual(&self) -> f64 {
        self.0
            .row_iter()
            .map(|r| r.sum().abs())
            .fold(0.0, f64::max)
    }
}

fn serialize_rows<S: serde::Serializer>(
    m: &DMatrix<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

impl Serialize for GeneratorMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        serialize_rows(&self.0, s)
    }
}

impl Serialize for TransitionMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        serialize_rows(&self.matrix, s)
    }
}

/// Row-stochastic matrix over a fixed horizon with an absorbing last state.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    matrix: DMatrix<f64>,
    horizon: f64,
}

impl TransitionMatrix {
    pub fn new(p: DMatrix<f64>, horizon: f64) -> Result<Self> {
        linalg::check_square(&p, "transition matrix")?;
        linalg::check_finite(&p, "transition matrix")?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidTransitionMatrix(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let h = p.nrows();
        for i in 0..h {
            for j in 0..h {
                let x = p[(i, j)];
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::InvalidTransitionMatrix(format!(
                        "entry ({},{}) = {x} is outside [0, 1]",
                        i + 1,
                        j + 1
                    )));
                }
            }
            let s: f64 = p.row(i).sum();
            if (s - 1.0).abs() > TPM_ROW_TOL {
                return Err(Error::InvalidTransitionMatrix(format!(
                    "row {} sums to {s}",
                    i + 1
                )));
            }
        }
        for j in 0..h {
            let expect = if j == h - 1 { 1.0 } else { 0.0 };
            if (p[(h - 1, j)] - expect).abs() > TPM_ROW_TOL {
                return Err(Error::InvalidTransitionMatrix(
                    "last row is not absorbing".into(),
                ));
            }
        }
        Ok(TransitionMatrix { matrix: p, horizon })
    }

    /// Rescales every row to sum to one before validating. Rows that sum to
    /// zero are rejected.
    pub fn renormalized(mut p: DMatrix<f64>, horizon: f64) -> Result<Self> {
        for i in 0..p.nrows() {
            let s: f64 = p.row(i).sum();
            if !(s > 0.0) {
                return Err(Error::InvalidTransitionMatrix(format!(
                    "row {} has nonpositive sum {s}",
                    i + 1
                )));
            }
            for j in 0..p.ncols() {
                p[(i, j)] /= s;
            }
        }
        Self::new(p, horizon)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
}

/// `P(t) = e^{Qt}`.
pub fn transition_matrix(q: &GeneratorMatrix, t: f64) -> Result<TransitionMatrix> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {t}")));
    }
    let p = linalg::expm(q.matrix(), t)?;
    let p = linalg::clean_stochastic(p, STOCHASTIC_CLAMP_TOL)?;
    TransitionMatrix::new(p, t)
}

/// Probability of having defaulted by each grid time, starting from `rating`.
pub fn pd_curve(q: &GeneratorMatrix, rating: usize, grid: &[f64]) -> Result<Vec<f64>> {
    let h = q.dim();
    if rating + 1 == h {
        return Err(Error::AbsorbingStateQuery(rating));
    }
    if rating >= h {
        return Err(Error::InvalidArgument(format!("rating index {rating} out of range")));
    }
    let mut prev = 0.0;
    for &t in grid {
        if !(t.is_finite() && t >= 0.0) || t < prev {
            return Err(Error::InvalidArgument(
                "grid times must be nonnegative and ascending".into(),
            ));
        }
        prev = t;
    }
    grid.iter()
        .map(|&t| {
            if t == 0.0 {
                Ok(0.0)
            } else {
                Ok(linalg::expm(q.matrix(), t)?[(rating, h - 1)].clamp(0.0, 1.0))
            }
        })
        .collect()
}

/// Crude identifiability certificate: `min_i (e^{Qt})_{ii} > 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentifiabilityDiagnostic {
    pub min_diagonal: f64,
    pub argmin: usize,
    pub passes: bool,
}

pub fn identifiability_check(q: &GeneratorMatrix, t: f64) -> IdentifiabilityDiagnostic {
    let p = linalg::expm(q.matrix(), t.max(0.0)).unwrap_or_else(|_| q.matrix().clone());
    let (argmin, min_diagonal) = (0..q.dim())
        .map(|i| (i, p[(i, i)]))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    IdentifiabilityDiagnostic {
        min_diagonal,
        argmin,
        passes: min_diagonal > 0.5,
    }
}

/// Splits `total` into integer parts proportional to `weights` by the
/// largest-remainder rule. Ties go to the lower index.
pub fn largest_remainder(total: u64, weights: &[f64]) -> Vec<u64> {
    let wsum: f64 = weights.iter().sum();
    if total == 0 || wsum <= 0.0 {
        return vec![0; weights.len()];
    }
    let raw: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut out: Vec<u64> = raw.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned) as usize) {
        out[k] += 1;
    }
    out
}

/// A sequence of TPMs observed at a common spacing, with the transition
/// counts behind them.
///
/// Counts are stored as reals. They are integers when built from obligor
/// numbers, and may be fractional weights `M_i · P_ij` when built with
/// [`ObservationSet::from_probabilities`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    dt: f64,
    tpms: Vec<TransitionMatrix>,
    counts: Vec<DMatrix<f64>>,
}

impl ObservationSet {
    /// Integer counts from obligor numbers per rating, shared by every TPM.
    pub fn from_tpms(dt: f64, tpms: Vec<TransitionMatrix>, obligors: &[u64]) -> Result<Self> {
        let per = vec![obligors.to_vec(); tpms.len()];
        Self::from_tpms_per_period(dt, tpms, per)
    }

    /// Integer counts from obligor numbers that may differ between periods.
    pub fn from_tpms_per_period(
        dt: f64,
        tpms: Vec<TransitionMatrix>,
        obligors: Vec<Vec<u64>>,
    ) -> Result<Self> {
        Self::check_tpms(dt, &tpms)?;
        if obligors.len() != tpms.len() {
            return Err(Error::InvalidObservations(format!(
                "{} obligor vectors for {} TPMs",
                obligors.len(),
                tpms.len()
            )));
        }
        let h = tpms[0].dim();
        let mut counts = Vec::with_capacity(tpms.len());
        for (p, m) in tpms.iter().zip(&obligors) {
            if m.len() != h {
                return Err(Error::InvalidObservations(format!(
                    "obligor vector has length {}, expected {h}",
                    m.len()
                )));
            }
            let mut c = DMatrix::zeros(h, h);
            for i in 0..h {
                let row: Vec<f64> = p.matrix().row(i).iter().copied().collect();
                for (j, n) in largest_remainder(m[i], &row).into_iter().enumerate() {
                    c[(i, j)] = n as f64;
                }
            }
            counts.push(c);
        }
        Ok(ObservationSet { dt, tpms, counts })
    }

    /// Exact fractional weights `M_i · P_ij`; the weighting used when the
    /// TPM itself is treated as data.
    pub fn from_probabilities(dt: f64, tpms: Vec<TransitionMatrix>, obligors: &[f64]) -> Result<Self> {
        Self::check_tpms(dt, &tpms)?;
        let h = tpms[0].dim();
        if obligors.len() != h || obligors.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidObservations(
                "obligor weights must be h nonnegative numbers".into(),
            ));
        }
        let counts = tpms
            .iter()
            .map(|p| {
                DMatrix::from_fn(h, h, |i, j| obligors[i] * p.matrix()[(i, j)])
            })
            .collect();
        Ok(ObservationSet { dt, tpms, counts })
    }

    /// Builds TPMs from transition counts. Rows without obligors become
    /// unit rows.
    pub fn from_counts(dt: f64, counts: Vec<DMatrix<f64>>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidObservations("no observations".into()));
        }
        let h = counts[0].nrows();
        let mut tpms = Vec::with_capacity(counts.len());
        for c in &counts {
            if c.shape() != (h, h) {
                return Err(Error::InvalidObservations("count matrices differ in shape".into()));
            }
            if c.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::InvalidObservations("counts must be nonnegative".into()));
            }
            let mut p = DMatrix::zeros(h, h);
            for i in 0..h {
                let m: f64 = c.row(i).sum();
                if m > 0.0 {
                    for j in 0..h {
                        p[(i, j)] = c[(i, j)] / m;
                    }
                } else {
                    p[(i, i)] = 1.0;
                }
            }
            tpms.push(TransitionMatrix::new(p, dt)?);
        }
        Self::check_tpms(dt, &tpms)?;
        Ok(ObservationSet { dt, tpms, counts })
    }

    fn check_tpms(dt: f64, tpms: &[TransitionMatrix]) -> Result<()> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidObservations(format!("dt must be positive, got {dt}")));
        }
        let Some(first) = tpms.first() else {
            return Err(Error::InvalidObservations("no observations".into()));
        };
        let h = first.dim();
        if h < 2 {
            return Err(Error::InvalidObservations("need at least 2 states".into()));
        }
        for p in tpms {
            if p.dim() != h {
                return Err(Error::InvalidObservations("TPMs differ in dimension".into()));
            }
            if (p.horizon() - dt).abs() > 1e-12 * dt.max(1.0) {
                return Err(Error::InvalidObservations(format!(
                    "TPM horizon {} differs from dt {dt}",
                    p.horizon()
                )));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.tpms[0].dim()
    }

    pub fn len(&self) -> usize {
        self.tpms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tpms.is_empty()
    }

    pub fn tpms(&self) -> &[TransitionMatrix] {
        &self.tpms
    }

    pub fn counts(&self) -> &[DMatrix<f64>] {
        &self.counts
    }

    /// Obligors per rating in period `u` (count row sums).
    pub fn obligors(&self, u: usize) -> DVector<f64> {
        let c = &self.counts[u];
        DVector::from_iterator(c.nrows(), c.row_iter().map(|r| r.sum()))
    }

    /// Counts summed over periods. All periods share `dt`, so every
    /// likelihood computation only needs this total.
    pub fn total_counts(&self) -> DMatrix<f64> {
        let h = self.dim();
        self.counts
            .iter()
            .fold(DMatrix::zeros(h, h), |acc, c| acc + c)
    }

    /// Element-wise mean of the observed TPMs.
    pub fn average_tpm(&self) -> Result<TransitionMatrix> {
        let h = self.dim();
        let sum = self
            .tpms
            .iter()
            .fold(DMatrix::zeros(h, h), |acc, p| acc + p.matrix());
        TransitionMatrix::renormalized(sum / self.tpms.len() as f64, self.dt)
    }

    /// Keeps only the first `n` periods.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {n} of {} periods",
                self.len()
            )));
        }
        Ok(ObservationSet {
            dt: self.dt,
            tpms: self.tpms[..n].to_vec(),
            counts: self.counts[..n].to_vec(),
        })
    }

    /// Reorders the periods.
    pub fn permuted(&self, order: &[usize]) -> Self {
        ObservationSet {
            dt: self.dt,
            tpms: order.iter().map(|&k| self.tpms[k].clone()).collect(),
            counts: order.iter().map(|&k| self.counts[k].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use approx::assert_relative_eq;

    #[test]
    fn reference_generators_are_valid() {
        assert_eq!(reference::unstable_generator().dim(), 8);
        assert!(reference::stable_generator().row_sum_residual() < 1e-15);
        let published = reference::unstable_published();
        assert!((published.row(5).sum() - 1e-3).abs() < 1e-12);
        assert!((reference::unstable_generator().rate(5, 5) + 0.297265).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix_is_a_generator() {
        assert!(validate_generator(DMatrix::zeros(3, 3)).is_ok());
    }

    #[test]
    fn negated_entry_is_reported_with_position() {
        let mut q = reference::unstable_generator().into_matrix();
        q[(0, 1)] = -q[(0, 1)];
        let Err(Error::InvalidGenerator(v)) = validate_generator(q) else {
            panic!("expected violation");
        };
        assert!(v.contains(&Violation::NegativeOffDiagonal {
            row: 0,
            col: 1,
            value: -0.085881
        }));
        assert!(v.iter().any(|x| matches!(x, Violation::NonzeroRowSum { row: 0, .. })));
    }

    #[test]
    fn non_absorbing_last_row_is_reported() {
        let q = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.5, -0.5]);
        let Err(Error::InvalidGenerator(v)) = validate_generator(q) else {
            panic!("expected violation");
        };
        assert!(v.iter().any(|x| matches!(x, Violation::NonAbsorbingLastRow { .. })));
    }

    #[test]
    fn zero_generator_gives_identity() {
        let p = transition_matrix(&GeneratorMatrix::zeros(4), 2.0).unwrap();
        assert_eq!(p.matrix(), &DMatrix::identity(4, 4));
    }

    fn taylor_expm(q: &DMatrix<f64>, t: f64, terms: usize) -> DMatrix<f64> {
        let n = q.nrows();
        let mut term = DMatrix::identity(n, n);
        let mut sum = term.clone();
        for k in 1..terms {
            term = &term * q * (t / k as f64);
            sum += &term;
        }
        sum
    }

    #[test]
    fn stable_transition_matches_taylor_series() {
        let q = reference::stable_generator();
        let p = transition_matrix(&q, 1.0).unwrap();
        let oracle = taylor_expm(q.matrix(), 1.0, 200);
        for r in p.matrix().row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert_relative_eq!(p.matrix()[(6, 7)], oracle[(6, 7)], epsilon = 1e-10);
        assert!((p.matrix() - &oracle).amax() < 1e-12);
    }

    #[test]
    fn semigroup_half_step() {
        let q = reference::unstable_generator();
        let half = transition_matrix(&q, 0.5).unwrap();
        let full = transition_matrix(&q, 1.0).unwrap();
        let sq = half.matrix() * half.matrix();
        assert!((sq - full.matrix()).amax() < 1e-10);
    }

    #[test]
    fn pd_curve_edges() {
        let q = reference::unstable_generator();
        let pd = pd_curve(&q, 0, &[0.0]).unwrap();
        assert_eq!(pd, vec![0.0]);
        let grid = [0.0, 0.25, 0.5, 1.0];
        for r in 0..7 {
            let c = pd_curve(&q, r, &grid).unwrap();
            assert!(c.windows(2).all(|w| w[1] >= w[0]));
            assert!(c.iter().all(|&x| x <= 1.0));
        }
        assert!(matches!(pd_curve(&q, 7, &grid), Err(Error::AbsorbingStateQuery(7))));
        assert!(pd_curve(&q, 0, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn pd_curve_matches_taylor_at_c() {
        let q = reference::stable_generator();
        let oracle = taylor_expm(q.matrix(), 1.0, 200);
        let pd = pd_curve(&q, 6, &[1.0]).unwrap();
        assert_relative_eq!(pd[0], oracle[(6, 7)], epsilon = 1e-10);
    }

    #[test]
    fn identifiability_cases() {
        let d = identifiability_check(&GeneratorMatrix::zeros(3), 1.0);
        assert_eq!(d.min_diagonal, 1.0);
        assert!(d.passes);
        let q = reference::stable_generator();
        let oracle = taylor_expm(q.matrix(), 1.0, 200);
        let d = identifiability_check(&q, 1.0);
        let min_oracle = (0..8).map(|i| oracle[(i, i)]).fold(f64::INFINITY, f64::min);
        assert_relative_eq!(d.min_diagonal, min_oracle, epsilon = 1e-12);
        assert!(d.passes);
        let fast = GeneratorMatrix::from_rates(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 0.0, 0.0, 0.0],
        ))
        .unwrap();
        assert!(!identifiability_check(&fast, 1.0).passes);
    }

    #[test]
    fn largest_remainder_preserves_totals() {
        assert_eq!(largest_remainder(10, &[0.333, 0.333, 0.334]), vec![3, 3, 4]);
        assert_eq!(largest_remainder(3, &[0.5, 0.5]), vec![2, 1]);
        assert_eq!(largest_remainder(0, &[1.0]), vec![0]);
    }

    #[test]
    fn observation_counts_follow_obligors() {
        let p = reference::sparse_observed_tpm();
        let obs = ObservationSet::from_tpms(1.0, vec![p.clone(), p], &[250; 8]).unwrap();
        for u in 0..2 {
            let m = obs.obligors(u);
            assert!(m.iter().all(|&x| x == 250.0));
        }
        let c = obs.total_counts();
        assert_eq!(c[(0, 1)], 2.0 * (0.1176f64 * 250.0).round());
    }

    #[test]
    fn from_counts_builds_tpms() {
        let c = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 0.0, 5.0]);
        let obs = ObservationSet::from_counts(1.0, vec![c]).unwrap();
        assert_eq!(obs.tpms()[0].matrix()[(0, 1)], 0.25);
    }

    #[test]
    fn mismatched_tpm_dims_rejected() {
        let a = TransitionMatrix::new(DMatrix::identity(2, 2), 1.0).unwrap();
        let b = TransitionMatrix::new(DMatrix::identity(3, 3), 1.0).unwrap();
        assert!(ObservationSet::from_tpms(1.0, vec![a, b], &[1, 1]).is_err());
    }
}
