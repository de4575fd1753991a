//! Dense matrix kernels: the matrix exponential, the principal matrix
//! logarithm and Van Loan block-exponential integrals.
//!
//! `expm` is the scaling-and-squaring algorithm with diagonal Padé
//! approximants of degree 3 to 13 (Higham 2005). `logm` diagonalises the
//! matrix when the eigenvector basis is well conditioned and otherwise uses
//! inverse scaling-and-squaring with a Gauss-Legendre Padé evaluation of
//! `log(I + X)`.
//!
//! Van Loan's identity gives
//!
//! ```text
//! exp([[A, B], [0, A]] t) = [[e^{At}, ∫_0^t e^{(t-u)A} B e^{uA} du], [0, e^{At}]]
//! ```
//!
//! so integrals of that form are read off the top-right block of one
//! exponential of twice the size.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Eigenvalues with modulus below this are treated as zero by `logm`.
pub const LOG_ZERO_EIGENVALUE: f64 = 1e-12;

/// Eigenvector bases worse conditioned than this trigger the
/// inverse scaling-and-squaring fallback in `logm`.
pub const LOG_EIGVEC_CONDITION: f64 = 1e8;

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Backward-error bounds for each Padé degree in double precision.
const THETA3: f64 = 1.495585217958292e-2;
const THETA5: f64 = 2.539398330063230e-1;
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068;
const THETA13: f64 = 5.371920351148152;

pub(crate) fn check_square(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionError(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidMatrix(format!("{what} is empty")));
    }
    Ok(())
}

pub(crate) fn check_finite(a: &DMatrix<f64>, what: &str) -> Result<()> {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if !a[(i, j)].is_finite() {
                return Err(Error::InvalidMatrix(format!(
                    "{what} entry ({},{}) is not finite",
                    i + 1,
                    j + 1
                )));
            }
        }
    }
    Ok(())
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    // Even powers A^0, A^2, A^4, ...
    let mut pow = ident.clone();
    let mut u_inner = DMatrix::<f64>::zeros(n, n);
    let mut v = DMatrix::<f64>::zeros(n, n);
    for k in (0..b.len()).step_by(2) {
        v += &pow * b[k];
        if k + 1 < b.len() {
            u_inner += &pow * b[k + 1];
        }
        pow = &pow * &a2;
    }
    let u = a * u_inner;
    solve_pade(u, v)
}

fn pade13(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let b = &PADE13;
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_hi = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (u_hi + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let v_hi = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_hi + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    solve_pade(u, v)
}

fn solve_pade(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = &v + &u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| Error::InvalidMatrix("singular Padé denominator in expm".into()))
}

/// `e^{A t}` by scaling and squaring.
pub fn expm(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_square(a, "expm input")?;
    check_finite(a, "expm input")?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "expm time must be finite and nonnegative, got {t}"
        )));
    }
    let n = a.nrows();
    if t == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let at = a * t;
    let norm = norm1(&at);
    if norm == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let low: [(&[f64], f64); 4] = [
        (&PADE3, THETA3),
        (&PADE5, THETA5),
        (&PADE7, THETA7),
        (&PADE9, THETA9),
    ];
    for (coeffs, theta) in low {
        if norm <= theta {
            return pade_low(&at, coeffs);
        }
    }
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = at * 2f64.powi(-s);
    let mut r = pade13(&scaled)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Clamps roundoff-level negative entries of a nominally stochastic matrix
/// to zero and renormalises the affected rows. Entries below `-tol` are an
/// error.
pub fn clean_stochastic(mut p: DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    for i in 0..p.nrows() {
        let mut touched = false;
        for j in 0..p.ncols() {
            let x = p[(i, j)];
            if x < -tol {
                return Err(Error::InvalidTransitionMatrix(format!(
                    "entry ({},{}) is {x:e}, below -{tol:e}",
                    i + 1,
                    j + 1
                )));
            }
            if x < 0.0 {
                p[(i, j)] = 0.0;
                touched = true;
            }
        }
        if touched {
            let s: f64 = p.row(i).sum();
            if s > 0.0 {
                for j in 0..p.ncols() {
                    p[(i, j)] /= s;
                }
            }
        }
    }
    Ok(p)
}

/// Builds the block upper-triangular matrix `[[a, b], [0, c]]`.
pub fn block_upper(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    m.view_mut((0, n), (n, n)).copy_from(b);
    m.view_mut((n, n), (n, n)).copy_from(c);
    m
}

/// `∫_0^t e^{(t-u)Q} B e^{uQ} du` via the top-right block of
/// `exp([[Q, B], [0, Q]] t)`.
pub fn vanloan_integral(q: &DMatrix<f64>, b: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let (full, n) = vanloan_full(q, b, t)?;
    Ok(full.view((0, n), (n, n)).into_owned())
}

/// Same as [`vanloan_integral`] but also returns `e^{Qt}` from the diagonal
/// block, which comes for free.
pub fn vanloan_with_exp(
    q: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (full, n) = vanloan_full(q, b, t)?;
    Ok((
        full.view((0, 0), (n, n)).into_owned(),
        full.view((0, n), (n, n)).into_owned(),
    ))
}

fn vanloan_full(q: &DMatrix<f64>, b: &DMatrix<f64>, t: f64) -> Result<(DMatrix<f64>, usize)> {
    check_square(q, "Van Loan generator block")?;
    if b.shape() != q.shape() {
        return Err(Error::DimensionError(format!(
            "Van Loan integrand block is {}x{}, expected {}x{}",
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Van Loan horizon must be positive, got {t}"
        )));
    }
    let n = q.nrows();
    let c = block_upper(q, b, q);
    Ok((expm(&c, t)?, n))
}

/// Principal matrix logarithm. The result is complex in general; for a
/// real matrix without negative real eigenvalues its imaginary part is at
/// roundoff level.
pub fn logm(p: &DMatrix<f64>) -> Result<CMatrix> {
    check_square(p, "logm input")?;
    check_finite(p, "logm input")?;
    let n = p.nrows();
    let eig = p.clone().complex_eigenvalues();
    for lambda in eig.iter() {
        if lambda.norm() < LOG_ZERO_EIGENVALUE {
            return Err(Error::LogUndefined(lambda.norm()));
        }
    }
    let pc = p.map(|x| Complex64::new(x, 0.0));
    if let Some(l) = logm_eigen(&pc, eig.as_slice(), n) {
        return Ok(l);
    }
    logm_iss(&pc)
}

/// Real part of the principal logarithm.
pub fn logm_real(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(logm(p)?.map(|z| z.re))
}

fn logm_eigen(p: &CMatrix, eig: &[Complex64], n: usize) -> Option<CMatrix> {
    // Eigenvalues too close together give an ill-conditioned basis anyway;
    // leave those to the fallback.
    let scale = eig.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);
    for a in 0..n {
        for b in (a + 1)..n {
            if (eig[a] - eig[b]).norm() < 1e-8 * scale {
                return None;
            }
        }
    }
    let mut v = CMatrix::zeros(n, n);
    for (k, &lambda) in eig.iter().enumerate() {
        let mut shifted = p.clone();
        for i in 0..n {
            shifted[(i, i)] -= lambda;
        }
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t?;
        let (kmin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())?;
        // Null vector is the conjugate of the matching row of V^H.
        for i in 0..n {
            v[(i, k)] = v_t[(kmin, i)].conj();
        }
    }
    let sv = v.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smin > 0.0) || smax / smin > LOG_EIGVEC_CONDITION {
        return None;
    }
    let v_inv = v.clone().try_inverse()?;
    let log_diag = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n,
        eig.iter().map(|z| z.ln()),
    ));
    let lam_diag =
        CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, eig.iter().copied()));
    let recon = &v * lam_diag * &v_inv;
    let resid = (recon - p).norm();
    if resid > 1e-10 * p.norm().max(1.0) {
        return None;
    }
    Some(&v * log_diag * v_inv)
}

fn cnorm1(a: &CMatrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Principal square root by the Denman-Beavers iteration.
fn sqrtm_db(a: &CMatrix) -> Result<CMatrix> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = CMatrix::identity(n, n);
    for _ in 0..100 {
        let y_inv = y
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::LogFailed("singular iterate in square root".into()))?;
        let z_inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::LogFailed("singular iterate in square root".into()))?;
        let y_next = (&y + z_inv) * Complex64::new(0.5, 0.0);
        let z_next = (&z + y_inv) * Complex64::new(0.5, 0.0);
        let delta = cnorm1(&(&y_next - &y));
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * cnorm1(&y).max(1.0) {
            return Ok(y);
        }
    }
    Err(Error::LogFailed(
        "square-root iteration did not converge".into(),
    ))
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub(crate) fn gauss_legendre01(m: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        // Newton on P_m starting from the Chebyshev-like guess.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=m {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push(((x + 1.0) / 2.0, w / 2.0));
    }
    out
}

fn logm_iss(a: &CMatrix) -> Result<CMatrix> {
    let n = a.nrows();
    let ident = CMatrix::identity(n, n);
    let mut x = a.clone();
    let mut k = 0u32;
    while cnorm1(&(&x - &ident)) > 0.25 {
        if k >= 60 {
            return Err(Error::LogFailed(
                "too many square roots in inverse scaling and squaring".into(),
            ));
        }
        x = sqrtm_db(&x)?;
        k += 1;
    }
    let y = &x - &ident;
    // log(I + Y) = ∫_0^1 Y (I + sY)^{-1} ds, evaluated by Gauss-Legendre.
    let mut acc = CMatrix::zeros(n, n);
    for (node, weight) in gauss_legendre01(12) {
        let m = &ident + &y * Complex64::new(node, 0.0);
        let sol = m
            .lu()
            .solve(&y)
            .ok_or_else(|| Error::LogFailed("singular Padé denominator".into()))?;
        acc += sol * Complex64::new(weight, 0.0);
    }
    Ok(acc * Complex64::new(2f64.powi(k as i32), 0.0))
}

/// Matrix logarithm forced through inverse scaling-and-squaring; exposed so
/// the two routes can be compared.
pub fn logm_inverse_scaling_squaring(p: &DMatrix<f64>) -> Result<CMatrix> {
    check_square(p, "logm input")?;
    check_finite(p, "logm input")?;
    logm_iss(&p.map(|x| Complex64::new(x, 0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn absorbing2() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0])
    }

    #[test]
    fn expm_zero_time_is_identity() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, 2.0, 7.0]);
        assert_eq!(expm(&a, 0.0).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn expm_two_state_absorbing_closed_form() {
        let p = expm(&absorbing2(), 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert_relative_eq!(p[(0, 0)], e, epsilon = 1e-15);
        assert_relative_eq!(p[(0, 1)], 1.0 - e, epsilon = 1e-15);
        assert_relative_eq!(p[(1, 0)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(p[(1, 1)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn expm_large_norm_uses_squaring() {
        // exp of diag(-40, 3) and a rotation generator.
        let d = DMatrix::from_row_slice(2, 2, &[-40.0, 0.0, 0.0, 3.0]);
        let r = expm(&d, 1.0).unwrap();
        assert_relative_eq!(r[(0, 0)], (-40.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(r[(1, 1)], 3.0f64.exp(), max_relative = 1e-13);
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -10.0, 10.0, 0.0]);
        let r = expm(&rot, 1.0).unwrap();
        assert_relative_eq!(r[(0, 0)], 10.0f64.cos(), epsilon = 1e-12);
        assert_relative_eq!(r[(1, 0)], 10.0f64.sin(), epsilon = 1e-12);
    }

    #[test]
    fn expm_rejects_non_finite() {
        let a = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 0.0]);
        assert!(matches!(expm(&a, 1.0), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn logm_identity_is_zero() {
        let l = logm(&DMatrix::identity(4, 4)).unwrap();
        assert!(l.norm() < 1e-14);
    }

    #[test]
    fn logm_upper_triangular_closed_form() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0]);
        let l = logm_real(&p).unwrap();
        let ln2 = 2f64.ln();
        assert_relative_eq!(l[(0, 0)], -ln2, epsilon = 1e-12);
        assert_relative_eq!(l[(0, 1)], ln2, epsilon = 1e-12);
        assert_relative_eq!(l[(1, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(l[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn logm_singular_is_undefined() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert!(matches!(logm(&p), Err(Error::LogUndefined(_))));
    }

    #[test]
    fn logm_negative_eigenvalue_is_complex() {
        // Reflection-like stochastic matrix with eigenvalue -0.6.
        let p = DMatrix::from_row_slice(2, 2, &[0.2, 0.8, 0.8, 0.2]);
        let l = logm(&p).unwrap();
        assert!(l.iter().any(|z| z.im.abs() > 0.1));
    }

    #[test]
    fn logm_routes_agree() {
        let q = DMatrix::from_row_slice(
            3,
            3,
            &[-0.3, 0.2, 0.1, 0.05, -0.15, 0.1, 0.0, 0.0, 0.0],
        );
        let p = expm(&q, 1.0).unwrap();
        let a = logm(&p).unwrap();
        let b = logm_inverse_scaling_squaring(&p).unwrap();
        assert!((&a - &b).norm() < 1e-11);
        assert!((a.map(|z| z.re) - q).norm() < 1e-11);
    }

    #[test]
    fn logm_defective_uses_fallback() {
        // Jordan block: exp([[−1, 1], [0, −1]]).
        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        let p = expm(&j, 1.0).unwrap();
        let l = logm_real(&p).unwrap();
        assert!((l - j).norm() < 1e-10);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let rule = gauss_legendre01(6);
        let wsum: f64 = rule.iter().map(|(_, w)| w).sum();
        assert_relative_eq!(wsum, 1.0, epsilon = 1e-14);
        // ∫_0^1 x^11 = 1/12
        let v: f64 = rule.iter().map(|(x, w)| w * x.powi(11)).sum();
        assert_relative_eq!(v, 1.0 / 12.0, epsilon = 1e-14);
    }

    #[test]
    fn vanloan_zero_integrand() {
        let b = DMatrix::zeros(2, 2);
        let r = vanloan_integral(&absorbing2(), &b, 1.0).unwrap();
        assert_eq!(r.norm(), 0.0);
    }

    #[test]
    fn vanloan_dimension_mismatch() {
        let b = DMatrix::zeros(3, 3);
        assert!(matches!(
            vanloan_integral(&absorbing2(), &b, 1.0),
            Err(Error::DimensionError(_))
        ));
    }

    #[test]
    fn clean_stochastic_clamps_roundoff_only() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0 + 1e-16, -1e-16, 0.0, 1.0]);
        let c = clean_stochastic(p, 1e-14).unwrap();
        assert_eq!(c[(0, 1)], 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.1, -0.1, 0.0, 1.0]);
        assert!(clean_stochastic(bad, 1e-14).is_err());
    }
}
