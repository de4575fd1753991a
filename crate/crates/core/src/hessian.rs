//! Observed-data Hessian at an EM estimate, variances and normal-based
//! confidence intervals.
//!
//! The gradient of `ℓ(Q) = Σ n_sr ln P_sr` in the free rate `q_μν` (with the
//! diagonal rebalanced) is `M_μν − M_μμ`, `M = ∫ e^{(t-u)Qᵀ} W e^{uQᵀ} du`.
//! Differentiating once more in `q_αβ` gives three matrices over `(μ, ν)`:
//! one from the change in `W = n/P`, and two double integrals from the
//! second derivative of the exponential, each the corner block of a 3h
//! block-triangular exponential. [`second_deriv_r`] evaluates the same
//! entry one pair at a time through the 4h matrices `C_ψ` and `C_ω`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{GeneratorMatrix, ObservationSet};

pub const DEFAULT_CUTOFF: f64 = 1e-8;
/// Information matrices with a larger condition number are treated as
/// singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// Off-diagonal entries above the cutoff, in row-major order. Position in
/// `pairs` is the Hessian row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllowedPairs {
    pub cutoff: f64,
    pub pairs: Vec<(usize, usize)>,
}

impl AllowedPairs {
    pub fn new(q: &GeneratorMatrix, cutoff: f64) -> Self {
        let h = q.dim();
        let pairs = (0..h - 1)
            .flat_map(|i| (0..h).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && q.rate(i, j) > cutoff)
            .collect();
        AllowedPairs { cutoff, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn index_of(&self, pair: (usize, usize)) -> Option<usize> {
        self.pairs.iter().position(|&p| p == pair)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenSummary {
    pub min: f64,
    pub max: f64,
    /// All eigenvalues of the Hessian negative.
    pub local_maximum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub from: usize,
    pub to: usize,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ConfidenceInterval {
    pub fn crosses_zero(&self) -> bool {
        self.lo < 0.0
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianReport {
    pub pairs: AllowedPairs,
    pub hessian: DMatrix<f64>,
    pub information: DMatrix<f64>,
    /// Condition number of the information matrix.
    pub condition: f64,
    /// Diagonal of the inverse information; absent when the information is
    /// singular.
    pub variances: Option<Vec<f64>>,
    pub eigen: EigenSummary,
    /// Estimates at the allowed pairs.
    pub estimates: Vec<f64>,
}

/// `e_a e_bᵀ`.
fn unit(h: usize, a: usize, b: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(h, h);
    m[(a, b)] = 1.0;
    m
}

/// `∂Q/∂q_αβ` with the diagonal rebalanced: `e_α e_βᵀ − e_α e_αᵀ`.
fn direction(h: usize, a: usize, b: usize) -> DMatrix<f64> {
    let mut m = unit(h, a, b);
    m[(a, a)] = -1.0;
    m
}

/// Corner block `(1,3)` of `exp([[A, B, 0], [0, A, C], [0, 0, A]] t)`.
fn nested_corner(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let h = a.nrows();
    let mut m = DMatrix::zeros(3 * h, 3 * h);
    for k in 0..3 {
        m.view_mut((k * h, k * h), (h, h)).copy_from(a);
    }
    m.view_mut((0, h), (h, h)).copy_from(b);
    m.view_mut((h, 2 * h), (h, h)).copy_from(c);
    let e = linalg::expm(&m, t)?;
    Ok(e.view((0, 2 * h), (h, h)).into_owned())
}

/// Weights `n/P` and their sensitivity factor `n/P²`.
fn weights(p: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let h = p.nrows();
    let mut w = DMatrix::zeros(h, h);
    let mut w2 = DMatrix::zeros(h, h);
    for s in 0..h {
        for r in 0..h {
            let c = n[(s, r)];
            if c > 0.0 {
                let prob = p[(s, r)];
                if !(prob > crate::em::MIN_MODEL_PROB) {
                    return Err(Error::MisspecifiedGenerator { from: s, to: r, prob });
                }
                w[(s, r)] = c / prob;
                w2[(s, r)] = c / (prob * prob);
            }
        }
    }
    Ok((w, w2))
}

/// Gradient of the observed log-likelihood over the given pairs.
pub fn gradient(q: &GeneratorMatrix, obs: &ObservationSet, pairs: &AllowedPairs) -> Result<Vec<f64>> {
    let dt = obs.dt();
    let p = linalg::expm(q.matrix(), dt)?;
    let (w, _) = weights(&p, &obs.total_counts())?;
    let m = linalg::vanloan_integral(&q.matrix().transpose(), &w, dt)?;
    Ok(pairs.pairs.iter().map(|&(a, b)| m[(a, b)] - m[(a, a)]).collect())
}

/// Observed-data Hessian over the allowed pairs, symmetrised.
pub fn hessian_matrix(q: &GeneratorMatrix, obs: &ObservationSet, pairs: &AllowedPairs) -> Result<DMatrix<f64>> {
    let h = q.dim();
    let dt = obs.dt();
    let qm = q.matrix();
    let qt = qm.transpose();
    let n = obs.total_counts();
    let p = linalg::expm(qm, dt)?;
    let (w, w2) = weights(&p, &n)?;
    let na = pairs.len();
    let mut hess = DMatrix::zeros(na, na);
    for (row, &(a, b)) in pairs.pairs.iter().enumerate() {
        let e = direction(h, a, b);
        let dp = linalg::vanloan_integral(qm, &e, dt)?;
        let dw = -w2.component_mul(&dp);
        let et = e.transpose();
        let total = linalg::vanloan_integral(&qt, &dw, dt)?
            + nested_corner(&qt, &et, &w, dt)?
            + nested_corner(&qt, &w, &et, dt)?;
        for (col, &(mu, nu)) in pairs.pairs.iter().enumerate() {
            hess[(row, col)] = total[(mu, nu)] - total[(mu, mu)];
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// One Hessian entry `∂²ℓ/∂q_αβ ∂q_μν` through the Oakes identity, built
/// from `C_γ`, `C_φ` and their 4h Van Loan extensions.
pub fn second_deriv_r(
    q: &GeneratorMatrix,
    obs: &ObservationSet,
    pairs: &AllowedPairs,
    ab: (usize, usize),
    mn: (usize, usize),
) -> Result<f64> {
    for pair in [ab, mn] {
        if pairs.index_of(pair).is_none() {
            return Err(Error::DisallowedPair(pair.0, pair.1));
        }
    }
    let (a, b) = ab;
    let (mu, nu) = mn;
    let h = q.dim();
    let dt = obs.dt();
    let qm = q.matrix();
    let n = obs.total_counts();
    let p = linalg::expm(qm, dt)?;
    let (w, w2) = weights(&p, &n)?;
    let delta = if ab == mn { 1.0 } else { 0.0 };
    let q_mn = q.rate(mu, nu);

    let eta = linalg::vanloan_integral(qm, &direction(h, a, b), dt)?;
    let dq = direction(h, a, b);

    let gamma_b = unit(h, mu, nu) * q_mn;
    let c_gamma = linalg::block_upper(qm, &gamma_b, qm);
    let dc_gamma = linalg::block_upper(&dq, &(unit(h, mu, nu) * delta), &dq);
    let psi = linalg::vanloan_integral(&c_gamma, &dc_gamma, dt)?;
    let g_gamma = linalg::vanloan_integral(qm, &gamma_b, dt)?;

    let phi_b = unit(h, mu, mu);
    let c_phi = linalg::block_upper(qm, &phi_b, qm);
    let zero = DMatrix::zeros(h, h);
    let dc_phi = linalg::block_upper(&dq, &zero, &dq);
    let omega = linalg::vanloan_integral(&c_phi, &dc_phi, dt)?;
    let g_phi = linalg::vanloan_integral(qm, &phi_b, dt)?;

    let corner = |m: &DMatrix<f64>| m.view((0, h), (h, h)).into_owned();
    let dk = -w2.component_mul(&eta).component_mul(&g_gamma).sum()
        + w.component_mul(&corner(&psi)).sum();
    let ds = -w2.component_mul(&eta).component_mul(&g_phi).sum()
        + w.component_mul(&corner(&omega)).sum();
    let k = w.component_mul(&g_gamma).sum();
    Ok(-delta * k / (q_mn * q_mn) + dk / q_mn - ds)
}

/// Hessian, information, variances and stationary-point classification.
pub fn hessian_at(q: &GeneratorMatrix, obs: &ObservationSet, cutoff: f64) -> Result<HessianReport> {
    let pairs = AllowedPairs::new(q, cutoff);
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no allowed pairs above the cutoff".into()));
    }
    let hessian = hessian_matrix(q, obs, &pairs)?;
    let information = -&hessian;
    let eig = SymmetricEigen::new(hessian.clone()).eigenvalues;
    let min = eig.min();
    let max = eig.max();
    let abs_max = eig.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let abs_min = eig.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    let condition = if abs_min > 0.0 { abs_max / abs_min } else { f64::INFINITY };
    let variances = if condition <= MAX_CONDITION {
        information
            .clone()
            .try_inverse()
            .map(|inv| (0..pairs.len()).map(|k| inv[(k, k)]).collect())
    } else {
        log::warn!("information matrix is singular (condition {condition:e}); no variances");
        None
    };
    let estimates = pairs.pairs.iter().map(|&(i, j)| q.rate(i, j)).collect();
    Ok(HessianReport {
        pairs,
        hessian,
        information,
        condition,
        variances,
        eigen: EigenSummary {
            min,
            max,
            local_maximum: max < 0.0,
        },
        estimates,
    })
}

/// `q ± 1.96 √var` for every allowed pair. Negative variances (possible
/// when the information is indefinite) give no interval.
pub fn confidence_intervals(report: &HessianReport) -> Result<Vec<Option<ConfidenceInterval>>> {
    let var = report
        .variances
        .as_ref()
        .ok_or(Error::SingularInformation(report.condition))?;
    Ok(report
        .pairs
        .pairs
        .iter()
        .zip(var)
        .zip(&report.estimates)
        .map(|((&(from, to), &v), &q)| {
            (v >= 0.0).then(|| {
                let half = Z95 * v.sqrt();
                ConfidenceInterval {
                    from,
                    to,
                    estimate: q,
                    lo: q - half,
                    hi: q + half,
                }
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::observed_loglik;
    use approx::assert_relative_eq;

    fn toy() -> (GeneratorMatrix, ObservationSet) {
        let q = GeneratorMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[-0.5, 0.3, 0.2, 0.4, -0.6, 0.2, 0.0, 0.0, 0.0],
        ))
        .unwrap();
        let counts = DMatrix::from_row_slice(3, 3, &[60.0, 25.0, 15.0, 30.0, 55.0, 15.0, 0.0, 0.0, 20.0]);
        (q, ObservationSet::from_counts(1.0, vec![counts]).unwrap())
    }

    fn shifted(q: &GeneratorMatrix, moves: &[((usize, usize), f64)]) -> GeneratorMatrix {
        let mut m = q.matrix().clone();
        for &((i, j), d) in moves {
            m[(i, j)] += d;
        }
        GeneratorMatrix::from_rates(m).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (q, obs) = toy();
        let pairs = AllowedPairs::new(&q, DEFAULT_CUTOFF);
        let g = gradient(&q, &obs, &pairs).unwrap();
        let step = 1e-6;
        for (k, &pair) in pairs.pairs.iter().enumerate() {
            let up = observed_loglik(&shifted(&q, &[(pair, step)]), &obs).unwrap();
            let dn = observed_loglik(&shifted(&q, &[(pair, -step)]), &obs).unwrap();
            assert_relative_eq!(g[k], (up - dn) / (2.0 * step), max_relative = 1e-6, epsilon = 1e-6);
        }
    }

    #[test]
    fn per_entry_oakes_matches_batched() {
        let (q, obs) = toy();
        let pairs = AllowedPairs::new(&q, DEFAULT_CUTOFF);
        let hm = hessian_matrix(&q, &obs, &pairs).unwrap();
        for (r, &ab) in pairs.pairs.iter().enumerate() {
            for (c, &mn) in pairs.pairs.iter().enumerate() {
                let x = second_deriv_r(&q, &obs, &pairs, ab, mn).unwrap();
                assert_relative_eq!(hm[(r, c)], x, max_relative = 1e-9, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn disallowed_pair() {
        let (q, obs) = toy();
        let pairs = AllowedPairs::new(&q, DEFAULT_CUTOFF);
        assert!(matches!(
            second_deriv_r(&q, &obs, &pairs, (2, 0), (0, 1)),
            Err(Error::DisallowedPair(2, 0))
        ));
    }

    #[test]
    fn rate_derivative_top_left_block() {
        // ∂C_γ/∂q_αβ has e_α e_βᵀ − e_α e_αᵀ on both diagonal blocks.
        let d = direction(3, 0, 2);
        assert_eq!(d[(0, 2)], 1.0);
        assert_eq!(d[(0, 0)], -1.0);
        assert_eq!(d.iter().filter(|x| **x != 0.0).count(), 2);
    }

    #[test]
    fn zero_variance_interval_is_a_point() {
        let (q, obs) = toy();
        let mut r = hessian_at(&q, &obs, DEFAULT_CUTOFF).unwrap();
        r.variances = Some(vec![0.0; r.pairs.len()]);
        for ci in confidence_intervals(&r).unwrap().into_iter().flatten() {
            assert_eq!(ci.lo, ci.hi);
            assert_eq!(ci.lo, ci.estimate);
        }
    }

    #[test]
    fn singular_information_has_no_variances() {
        let (q, obs) = toy();
        let mut r = hessian_at(&q, &obs, DEFAULT_CUTOFF).unwrap();
        r.variances = None;
        assert!(matches!(confidence_intervals(&r), Err(Error::SingularInformation(_))));
    }

    pub(crate) fn fd_hessian(q: &GeneratorMatrix, obs: &ObservationSet, pairs: &AllowedPairs, step: f64) -> DMatrix<f64> {
        let f = |moves: &[((usize, usize), f64)]| observed_loglik(&shifted(q, moves), obs).unwrap();
        let na = pairs.len();
        DMatrix::from_fn(na, na, |r, c| {
            let (a, b) = (pairs.pairs[r], pairs.pairs[c]);
            let pp = f(&[(a, step), (b, step)]);
            let pm = f(&[(a, step), (b, -step)]);
            let mp = f(&[(a, -step), (b, step)]);
            let mm = f(&[(a, -step), (b, -step)]);
            (pp - pm - mp + mm) / (4.0 * step * step)
        })
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let (q, obs) = toy();
        let pairs = AllowedPairs::new(&q, DEFAULT_CUTOFF);
        let hm = hessian_matrix(&q, &obs, &pairs).unwrap();
        let fd = fd_hessian(&q, &obs, &pairs, 1e-4);
        assert!((&hm - &fd).amax() < 1e-4 * hm.amax(), "{hm}{fd}");
        assert!((&hm - hm.transpose()).amax() <= 1e-8 * hm.amax());
    }

    #[test]
    fn em_optimum_is_a_local_maximum() {
        let (_, obs) = toy();
        let cfg = crate::em::EmConfig { tol_param: 1e-10, max_iter: 5000, ..Default::default() };
        let r = crate::em::estimate_em(&obs, &cfg).unwrap();
        let rep = hessian_at(&r.estimate, &obs, DEFAULT_CUTOFF).unwrap();
        assert!(rep.eigen.local_maximum);
        assert!(rep.variances.unwrap().iter().all(|v| *v > 0.0));
        let g = gradient(&r.estimate, &obs, &rep.pairs).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-6), "{g:?}");
    }
}
