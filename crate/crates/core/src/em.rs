//! EM estimation of a generator from discretely observed TPMs.
//!
//! The E-step uses a single Van Loan integral for all pairs: with weights
//! `W_sr = n_sr / P_sr`,
//!
//! ```text
//! Σ_sr W_sr (∫ e^{(t-u)Q} e_i e_jᵀ e^{uQ} du)_sr = (∫ e^{(t-u)Qᵀ} W e^{uQᵀ} du)_ij
//! ```
//!
//! so `E[K_ij] = q_ij M_ij` and `E[S_i] = M_ii` with `M` the top-right block
//! of `exp([[Qᵀ, W], [0, Qᵀ]] t)`. Every period shares `dt`, so only the
//! total count matrix matters.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{GeneratorMatrix, ObservationSet, TransitionMatrix};
use crate::regularize::{self, RawLogMatrix};

/// Entries of the real-mapped logarithm at or below this magnitude are
/// treated as structural zeros and are not floored.
pub const ROUNDOFF_ZERO: f64 = 1e-10;

/// Smallest model probability accepted for an observed transition.
pub const MIN_MODEL_PROB: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmConfig {
    pub eps_band: f64,
    pub max_entry: f64,
    pub tol_param: f64,
    pub tol_loglik: f64,
    pub max_iter: usize,
    pub zero_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            eps_band: 1e-6,
            max_entry: 1e6,
            tol_param: 1e-7,
            tol_loglik: 1e-10,
            max_iter: 500,
            zero_floor: 1e-5,
        }
    }
}

impl EmConfig {
    /// Config with the given ε and the matching `1/ε` cap.
    pub fn with_eps(eps: f64) -> Self {
        EmConfig {
            eps_band: eps,
            max_entry: 1.0 / eps,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("EmConfig: {what}")));
        if !(self.eps_band > 0.0 && self.eps_band < 1.0) {
            return bad("eps_band must lie in (0, 1)");
        }
        if !(self.max_entry > 0.0) {
            return bad("max_entry must be positive");
        }
        if !(self.tol_param > 0.0 && self.tol_loglik > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.zero_floor >= 0.0 && self.zero_floor.is_finite()) {
            return bad("zero_floor must be nonnegative");
        }
        Ok(())
    }
}

/// Conditional expectations of jump counts and holding times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectedStats {
    /// `E[K_ij]`, zero on the diagonal.
    pub jumps: DMatrix<f64>,
    /// `E[S_i]`.
    pub holds: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryEntry {
    /// An off-diagonal entry exceeded `max_entry`.
    AboveCap { row: usize, col: usize },
    /// A tri-diagonal entry fell below `eps_band`.
    BelowBand { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EmStatus {
    Converged,
    MaxIter,
    BoundaryHit { entry: BoundaryEntry },
}

/// Count-level restatement of the expectation bounds, checked at the
/// final iterate. Advisory only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaDiagnostics {
    /// Effective ε: the smallest tri-diagonal rate, capped by the inverse
    /// of the largest rate.
    pub eps_eff: f64,
    /// False when the band condition fails, in which case no bound applies.
    pub applicable: bool,
    /// Pairs whose expected jumps fall below `max_u n^u_ij · ε q_ij / h`.
    pub jump_violations: Vec<(usize, usize)>,
    /// States whose expected holding time falls below
    /// `max_u n^u_ii · dt · exp(-h dt / ε)`.
    pub hold_violations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmReport {
    pub estimate: GeneratorMatrix,
    pub loglik_trace: Vec<f64>,
    pub status: EmStatus,
    pub iterations: usize,
    pub stats: ExpectedStats,
    /// Off-diagonal entries fixed at zero for every iteration.
    pub pinned: Vec<(usize, usize)>,
    /// Non-absorbing states with no expected occupancy; their rows keep the
    /// initial values.
    pub degenerate_rows: Vec<usize>,
    pub lemma: LemmaDiagnostics,
}

/// Logarithm of a TPM mapped to a real matrix entrywise by
/// `z ↦ sign(Re z)·|z|`.
fn signed_modulus_log(p: &TransitionMatrix) -> Result<DMatrix<f64>> {
    let l = linalg::logm(p.matrix())?;
    Ok(l.map(|z| {
        let m = z.norm();
        if z.re < 0.0 {
            -m
        } else {
            m
        }
    }))
}

/// Starting generator from a single TPM: real-mapped logarithm, QOG, then
/// every zero off-diagonal entry that is not a roundoff zero of the
/// logarithm is floored at `cfg.zero_floor`.
pub fn initial_generator(p: &TransitionMatrix, cfg: &EmConfig) -> Result<GeneratorMatrix> {
    let h = p.dim();
    let observed = DMatrix::from_element(h, h, 1.0);
    initial_with_mask(p, &observed, cfg)
}

/// Starting generator for an observation set: the average TPM is used, and
/// off-diagonal pairs never observed in any period are pinned at zero.
pub fn initial_generator_for(obs: &ObservationSet, cfg: &EmConfig) -> Result<GeneratorMatrix> {
    initial_with_mask(&obs.average_tpm()?, &obs.total_counts(), cfg)
}

fn initial_with_mask(
    p: &TransitionMatrix,
    counts: &DMatrix<f64>,
    cfg: &EmConfig,
) -> Result<GeneratorMatrix> {
    cfg.validate()?;
    let raw = signed_modulus_log(p)?;
    let projected = regularize::qog(&RawLogMatrix::new(raw.clone())?);
    let h = p.dim();
    let mut q = projected.into_matrix();
    for i in 0..h - 1 {
        for j in 0..h {
            if i == j {
                continue;
            }
            if counts[(i, j)] <= 0.0 {
                q[(i, j)] = 0.0;
            } else if q[(i, j)] == 0.0 && raw[(i, j)].abs() > ROUNDOFF_ZERO {
                q[(i, j)] = cfg.zero_floor;
            }
        }
    }
    GeneratorMatrix::from_rates(q)
}

/// `W_sr = n_sr / P_sr` with `P = e^{Q dt}`; zero where `n_sr = 0`.
fn count_weights(p: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let h = p.nrows();
    let mut w = DMatrix::zeros(h, h);
    for s in 0..h {
        for r in 0..h {
            let c = n[(s, r)];
            if c > 0.0 {
                let prob = p[(s, r)];
                if !(prob > MIN_MODEL_PROB) {
                    return Err(Error::MisspecifiedGenerator { from: s, to: r, prob });
                }
                w[(s, r)] = c / prob;
            }
        }
    }
    Ok(w)
}

fn check_dims(q: &GeneratorMatrix, obs: &ObservationSet) -> Result<()> {
    if q.dim() != obs.dim() {
        return Err(Error::DimensionError(format!(
            "generator is {}x{} but observations have {} states",
            q.dim(),
            q.dim(),
            obs.dim()
        )));
    }
    Ok(())
}

/// Expected jumps and holding times under `q`, given the observations.
pub fn expected_statistics(q: &GeneratorMatrix, obs: &ObservationSet) -> Result<ExpectedStats> {
    check_dims(q, obs)?;
    let dt = obs.dt();
    let p = linalg::expm(q.matrix(), dt)?;
    let w = count_weights(&p, &obs.total_counts())?;
    let qt = q.matrix().transpose();
    let m = linalg::vanloan_integral(&qt, &w, dt)?;
    let h = q.dim();
    let jumps = DMatrix::from_fn(h, h, |i, j| {
        if i == j {
            0.0
        } else {
            (q.rate(i, j) * m[(i, j)]).max(0.0)
        }
    });
    let holds = DVector::from_fn(h, |i, _| m[(i, i)].max(0.0));
    Ok(ExpectedStats { jumps, holds })
}

/// M-step: `q'_ij = E[K_ij] / E[S_i]`. Rows with no expected occupancy keep
/// their current values.
pub fn m_step(q: &GeneratorMatrix, stats: &ExpectedStats) -> Result<GeneratorMatrix> {
    let h = q.dim();
    let mut out = q.matrix().clone();
    for i in 0..h - 1 {
        let s = stats.holds[i];
        let k: f64 = stats.jumps.row(i).sum();
        if s > 0.0 {
            for j in 0..h {
                if j != i {
                    out[(i, j)] = stats.jumps[(i, j)] / s;
                }
            }
        } else if k > 0.0 {
            return Err(Error::ZeroHoldingTime(i));
        }
    }
    GeneratorMatrix::from_rates(out)
}

/// One EM iteration.
pub fn em_step(q: &GeneratorMatrix, obs: &ObservationSet) -> Result<GeneratorMatrix> {
    m_step(q, &expected_statistics(q, obs)?)
}

/// `Σ_sr n_sr ln (e^{Q dt})_sr`, or `-∞` when an observed transition is
/// impossible under `q`.
pub fn observed_loglik(q: &GeneratorMatrix, obs: &ObservationSet) -> Result<f64> {
    check_dims(q, obs)?;
    let p = linalg::expm(q.matrix(), obs.dt())?;
    Ok(loglik_from(&p, &obs.total_counts()))
}

pub(crate) fn loglik_from(p: &DMatrix<f64>, n: &DMatrix<f64>) -> f64 {
    let mut ll = 0.0;
    for (c, prob) in n.iter().zip(p.iter()) {
        if *c > 0.0 {
            if !(*prob > 0.0) {
                return f64::NEG_INFINITY;
            }
            ll += c * prob.ln();
        }
    }
    ll
}

/// First entry, if any, outside the constrained set `Λ_ε`. Pinned entries
/// are exempt.
fn boundary_check(q: &GeneratorMatrix, pinned: &DMatrix<bool>, cfg: &EmConfig) -> Option<BoundaryEntry> {
    let h = q.dim();
    for i in 0..h - 1 {
        for j in 0..h {
            if i == j || pinned[(i, j)] {
                continue;
            }
            if q.rate(i, j) > cfg.max_entry {
                return Some(BoundaryEntry::AboveCap { row: i, col: j });
            }
            if i.abs_diff(j) == 1 && q.rate(i, j) < cfg.eps_band {
                return Some(BoundaryEntry::BelowBand { row: i, col: j });
            }
        }
    }
    None
}

pub fn lemma_diagnostics(
    q: &GeneratorMatrix,
    stats: &ExpectedStats,
    obs: &ObservationSet,
) -> LemmaDiagnostics {
    let h = q.dim();
    let dt = obs.dt();
    let mut band = f64::INFINITY;
    let mut top: f64 = 0.0;
    for i in 0..h - 1 {
        for j in 0..h {
            if i != j {
                top = top.max(q.rate(i, j));
                if i.abs_diff(j) == 1 {
                    band = band.min(q.rate(i, j));
                }
            }
        }
    }
    let eps = if top > 0.0 { band.min(1.0 / top) } else { band };
    let applicable = eps > 0.0 && eps < 1.0;
    let mut jump_violations = Vec::new();
    let mut hold_violations = Vec::new();
    if applicable {
        let max_count = |i: usize, j: usize| {
            obs.counts().iter().map(|c| c[(i, j)]).fold(0.0, f64::max)
        };
        for i in 0..h - 1 {
            for j in 0..h {
                if i == j {
                    continue;
                }
                let n = max_count(i, j);
                if n > 0.0 && stats.jumps[(i, j)] < n * eps * q.rate(i, j) / h as f64 {
                    jump_violations.push((i, j));
                }
            }
            let n = max_count(i, i);
            let bound = n * dt * (-(h as f64) * dt / eps).exp();
            if n > 0.0 && stats.holds[i] < bound {
                hold_violations.push(i);
            }
        }
    }
    LemmaDiagnostics {
        eps_eff: eps,
        applicable,
        jump_violations,
        hold_violations,
    }
}

/// Runs EM from the standard starting value.
pub fn estimate_em(obs: &ObservationSet, cfg: &EmConfig) -> Result<EmReport> {
    let q0 = initial_generator_for(obs, cfg)?;
    estimate_em_from(obs, cfg, q0)
}

/// Runs EM from a given starting generator. Entries that are zero in the
/// start stay zero.
pub fn estimate_em_from(
    obs: &ObservationSet,
    cfg: &EmConfig,
    start: GeneratorMatrix,
) -> Result<EmReport> {
    cfg.validate()?;
    check_dims(&start, obs)?;
    let h = start.dim();
    let pinned = DMatrix::from_fn(h, h, |i, j| i != j && i + 1 < h && start.rate(i, j) == 0.0);
    let pinned_list: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| (0..h).map(move |j| (i, j)))
        .filter(|&(i, j)| pinned[(i, j)])
        .collect();

    let mut q = start;
    let mut stats = expected_statistics(&q, obs)?;
    let mut ll = observed_loglik(&q, obs)?;
    let mut trace = vec![ll];
    let mut status = EmStatus::MaxIter;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        let next = m_step(&q, &stats)?;
        iterations += 1;
        let dq = (next.matrix() - q.matrix()).amax();
        let next_ll = observed_loglik(&next, obs)?;
        let rel = (next_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        q = next;
        ll = next_ll;
        trace.push(ll);
        stats = expected_statistics(&q, obs)?;
        if let Some(entry) = boundary_check(&q, &pinned, cfg) {
            log::warn!("EM left the constrained set at {entry:?} after {iterations} iterations");
            status = EmStatus::BoundaryHit { entry };
            break;
        }
        // The likelihood is flat near the optimum, so its criterion only
        // counts once the parameters have nearly settled too.
        if dq < cfg.tol_param || (rel < cfg.tol_loglik && dq < 10.0 * cfg.tol_param) {
            status = EmStatus::Converged;
            break;
        }
    }

    let degenerate_rows = (0..h - 1).filter(|&i| stats.holds[i] <= 0.0).collect();
    let lemma = lemma_diagnostics(&q, &stats, obs);
    Ok(EmReport {
        estimate: q,
        loglik_trace: trace,
        status,
        iterations,
        stats,
        pinned: pinned_list,
        degenerate_rows,
        lemma,
    })
}

/// Runs EM from every start and keeps the report with the highest final
/// log-likelihood. Ties keep the earlier start.
pub fn estimate_em_multistart(
    obs: &ObservationSet,
    cfg: &EmConfig,
    starts: Vec<GeneratorMatrix>,
) -> Result<EmReport> {
    let mut best: Option<EmReport> = None;
    for s in starts {
        let r = estimate_em_from(obs, cfg, s)?;
        let better = match &best {
            None => true,
            Some(b) => final_loglik(&r) > final_loglik(b),
        };
        if better {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no starting generators given".into()))
}

impl EmReport {
    pub fn final_loglik(&self) -> f64 {
        final_loglik(self)
    }

    /// Largest `|q_ij - E[K_ij]/E[S_i]|` over non-pinned, non-degenerate
    /// entries at the final iterate.
    pub fn fixed_point_residual(&self) -> f64 {
        let h = self.estimate.dim();
        let mut worst: f64 = 0.0;
        for i in 0..h - 1 {
            let s = self.stats.holds[i];
            if s <= 0.0 {
                continue;
            }
            for j in 0..h {
                if j != i {
                    let r = (self.estimate.rate(i, j) - self.stats.jumps[(i, j)] / s).abs();
                    worst = worst.max(r);
                }
            }
        }
        worst
    }

    /// Largest drop between consecutive log-likelihoods, relative to the
    /// magnitude; zero for a monotone trace.
    pub fn worst_ascent_violation(&self) -> f64 {
        self.loglik_trace
            .windows(2)
            .map(|w| (w[0] - w[1]) / w[0].abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

fn final_loglik(r: &EmReport) -> f64 {
    *r.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)
}

/// `E[K]` and `E[S]` for one pair and one state the long way, through the
/// 2h-by-2h matrices `C_γ` and `C_φ`. Used to cross-check the batched
/// E-step.
pub fn expected_pair_direct(
    q: &GeneratorMatrix,
    obs: &ObservationSet,
    i: usize,
    j: usize,
) -> Result<(f64, f64)> {
    check_dims(q, obs)?;
    let h = q.dim();
    let dt = obs.dt();
    let mut eij = DMatrix::zeros(h, h);
    eij[(i, j)] = q.rate(i, j);
    let mut eii = DMatrix::zeros(h, h);
    eii[(i, i)] = 1.0;
    let (p, gamma) = linalg::vanloan_with_exp(q.matrix(), &eij, dt)?;
    let phi = linalg::vanloan_integral(q.matrix(), &eii, dt)?;
    let w = count_weights(&p, &obs.total_counts())?;
    Ok((w.component_mul(&gamma).sum(), w.component_mul(&phi).sum()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::transition_matrix;
    use crate::reference;
    use approx::assert_relative_eq;

    fn toy() -> GeneratorMatrix {
        GeneratorMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[-0.5, 0.3, 0.2, 0.4, -0.6, 0.2, 0.0, 0.0, 0.0],
        ))
        .unwrap()
    }

    fn table4_obs() -> ObservationSet {
        ObservationSet::from_tpms(
            1.0,
            vec![reference::sparse_observed_tpm()],
            &[reference::SPARSE_OBSERVED_OBLIGORS; 8],
        )
        .unwrap()
    }

    #[test]
    fn batched_estep_matches_per_pair_matrices() {
        let q = reference::stable_generator();
        let obs = table4_obs();
        let stats = expected_statistics(&q, &obs).unwrap();
        for i in 0..7 {
            for j in 0..8 {
                let (k, s) = expected_pair_direct(&q, &obs, i, j).unwrap();
                if i != j {
                    assert_relative_eq!(stats.jumps[(i, j)], k, epsilon = 1e-10, max_relative = 1e-9);
                }
                assert_relative_eq!(stats.holds[i], s, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn no_jump_chain() {
        let q = GeneratorMatrix::zeros(3);
        let counts = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 7.0, 2.0]));
        let obs = ObservationSet::from_counts(2.0, vec![counts.clone(), counts]).unwrap();
        let stats = expected_statistics(&q, &obs).unwrap();
        assert_eq!(stats.jumps.amax(), 0.0);
        assert_relative_eq!(stats.holds[0], 2.0 * 10.0, epsilon = 1e-12);
        assert_relative_eq!(stats.holds[1], 2.0 * 14.0, epsilon = 1e-12);
    }

    #[test]
    fn holding_times_add_up_to_observed_time() {
        // Every obligor spends dt in some state.
        let obs = table4_obs();
        let q = reference::unstable_generator();
        let stats = expected_statistics(&q, &obs).unwrap();
        assert_relative_eq!(stats.holds.sum(), obs.total_counts().sum() * obs.dt(), max_relative = 1e-10);
    }

    #[test]
    fn two_by_two_initial_value() {
        let p = TransitionMatrix::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0]), 1.0).unwrap();
        let q = initial_generator(&p, &EmConfig::default()).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert_relative_eq!(q.rate(0, 0), -ln2, epsilon = 1e-12);
        assert_relative_eq!(q.rate(0, 1), ln2, epsilon = 1e-12);
    }

    #[test]
    fn embeddable_start_is_the_generator() {
        let q = reference::stable_generator();
        let p = transition_matrix(&q, 1.0).unwrap();
        let q0 = initial_generator(&p, &EmConfig::default()).unwrap();
        assert!(q0.distance(&q) < 1e-8);
    }

    #[test]
    fn table4_start_respects_zero_counts() {
        let obs = table4_obs();
        let q0 = initial_generator_for(&obs, &EmConfig::default()).unwrap();
        for j in 2..8 {
            assert_eq!(q0.rate(0, j), 0.0);
        }
        assert!(q0.row_sum_residual() < 1e-12);
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    assert!(q0.rate(i, j) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn table4_first_step_ascends() {
        let obs = table4_obs();
        let q0 = initial_generator_for(&obs, &EmConfig::default()).unwrap();
        let q1 = em_step(&q0, &obs).unwrap();
        assert!(observed_loglik(&q1, &obs).unwrap() > observed_loglik(&q0, &obs).unwrap());
    }

    #[test]
    fn fixed_point_is_stationary() {
        let obs = table4_obs();
        let r = estimate_em(&obs, &EmConfig { tol_param: 1e-12, tol_loglik: 1e-300, max_iter: 20000, ..Default::default() }).unwrap();
        let again = em_step(&r.estimate, &obs).unwrap();
        assert!((again.matrix() - r.estimate.matrix()).amax() < 1e-11);
    }

    #[test]
    fn zero_iterations_returns_start() {
        let obs = table4_obs();
        let cfg = EmConfig { max_iter: 0, ..Default::default() };
        let r = estimate_em(&obs, &cfg).unwrap();
        assert_eq!(r.status, EmStatus::MaxIter);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.estimate, initial_generator_for(&obs, &cfg).unwrap());
    }

    #[test]
    fn loglik_two_state_direct() {
        let q = GeneratorMatrix::new(DMatrix::from_row_slice(2, 2, &[-0.3, 0.3, 0.0, 0.0])).unwrap();
        let counts = DMatrix::from_row_slice(2, 2, &[74.0, 26.0, 0.0, 10.0]);
        let obs = ObservationSet::from_counts(1.0, vec![counts]).unwrap();
        let stay = (-0.3f64).exp();
        let want = 74.0 * stay.ln() + 26.0 * (1.0 - stay).ln();
        assert_relative_eq!(observed_loglik(&q, &obs).unwrap(), want, max_relative = 1e-13);
    }

    #[test]
    fn impossible_transition() {
        let q = GeneratorMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0])).unwrap();
        let counts = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let obs = ObservationSet::from_counts(1.0, vec![counts]).unwrap();
        assert_eq!(observed_loglik(&q, &obs).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(
            expected_statistics(&q, &obs),
            Err(Error::MisspecifiedGenerator { from: 0, to: 1, .. })
        ));
    }

    #[test]
    fn zero_entries_persist() {
        let obs = table4_obs();
        let r = estimate_em(&obs, &EmConfig::default()).unwrap();
        for &(i, j) in &r.pinned {
            assert_eq!(r.estimate.rate(i, j), 0.0);
        }
        assert!(r.pinned.contains(&(0, 7)));
    }

    #[test]
    fn toy_em_recovers_generator_from_exact_weights() {
        let q = toy();
        let p = transition_matrix(&q, 1.0).unwrap();
        let obs = ObservationSet::from_probabilities(1.0, vec![p], &[1e4, 1e4, 1e4]).unwrap();
        let cfg = EmConfig { tol_param: 1e-12, max_iter: 5000, ..Default::default() };
        let r = estimate_em(&obs, &cfg).unwrap();
        assert!(r.estimate.distance(&q) < 1e-8, "{}", r.estimate.distance(&q));
        assert!(r.worst_ascent_violation() <= 1e-12);
    }
}
