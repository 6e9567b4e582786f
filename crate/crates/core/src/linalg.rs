//! Small dense linear-algebra helpers: matrix exponential, symmetrization
//! and positive-semidefiniteness checks.
//!
//! Everything here works on `nalgebra` dynamic matrices and stays within
//! `core` + `alloc`.

use nalgebra::{DMatrix, DVector};
use num_traits::Float;

use crate::error::{invalid, Result};

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

// Backward-error bounds for the [m/m] Padé approximants in double precision.
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with diagonal Padé approximants.
///
/// The input is first balanced by an exact power-of-two diagonal similarity,
/// which matters for the sensor models where spin and quadrature coordinates
/// differ by many orders of magnitude.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(invalid("matrix exponential needs a square matrix"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(invalid("matrix exponential of a non-finite matrix"));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (b, scale) = balance(a);
    let e = expm_unbalanced(&b)?;
    Ok(DMatrix::from_fn(n, n, |i, j| e[(i, j)] * scale[i] / scale[j]))
}

fn expm_unbalanced(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let norm = norm1(a);
    for &(m, theta) in THETA.iter() {
        if norm <= theta {
            let coeffs: &[f64] = match m {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            let (u, v) = pade_low(a, coeffs);
            return pade_solve(&u, &v);
        }
    }
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a * 2.0.powi(-s);
    let (u, v) = pade13(&scaled);
    let mut x = pade_solve(&u, &v)?;
    for _ in 0..s {
        x = &x * &x;
    }
    Ok(x)
}

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let a2 = a * a;
    let mut odd = DMatrix::identity(n, n) * b[1];
    let mut even = DMatrix::identity(n, n) * b[0];
    let mut power = DMatrix::identity(n, n);
    let m = b.len() - 1;
    let mut k = 2;
    while k <= m {
        power = &power * &a2;
        even += &power * b[k];
        if k < m {
            odd += &power * b[k + 1];
        }
        k += 2;
    }
    (a * odd, even)
}

fn pade13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE13;
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    (u, v)
}

fn pade_solve(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = v + u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| invalid("singular Padé denominator in matrix exponential"))
}

/// Power-of-two diagonal balancing. Returns `(D⁻¹ A D, diag(D))`.
pub(crate) fn balance(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    const RADIX: f64 = 2.0;
    let n = a.nrows();
    let mut b = a.clone();
    let mut scale = DVector::from_element(n, 1.0);
    for _sweep in 0..200 {
        let mut done = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += b[(j, i)].abs();
                    r += b[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                scale[i] *= f;
                for j in 0..n {
                    b[(i, j)] /= f;
                    b[(j, i)] *= f;
                }
            }
        }
        if done {
            break;
        }
    }
    (b, scale)
}

/// Maximum absolute column sum.
pub fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrized(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn is_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    (0..n).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= rel_tol * scale))
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    symmetrized(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric and numerically positive semidefinite: the smallest eigenvalue
/// is at least `-rel_tol * ‖A‖_max`.
pub fn is_psd(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !is_symmetric(a, 1e-9) {
        return false;
    }
    let scale = a.amax();
    min_eigenvalue(a) >= -rel_tol * scale
}

/// `‖A − B‖_F / ‖B‖_F`, falling back to the absolute difference when `B = 0`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let base = b.norm();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

/// A square root `L` with `L Lᵀ = A` for a symmetric PSD matrix: Cholesky when
/// possible, otherwise the eigenvalue square root with negative eigenvalues
/// clipped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrized(a);
    if let Some(ch) = sym.clone().cholesky() {
        return ch.l();
    }
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

pub(crate) fn commutator(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b - b * a
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn exp_of_zero_is_identity() {
        let e = expm(&DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(e, DMatrix::identity(4, 4));
    }

    #[test]
    fn exp_of_rotation_generator() {
        let w = 2.0 * PI * 1e4;
        let f = DMatrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0]);
        let e = expm(&(f * 2.5e-5)).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((e - expect).amax() < 1e-12);
    }

    #[test]
    fn exp_large_norm_scalar() {
        let a = DMatrix::from_element(1, 1, -30.0);
        let e = expm(&a).unwrap();
        assert!((e[(0, 0)] / (-30.0f64).exp() - 1.0).abs() < 1e-12);
        let a = DMatrix::from_element(1, 1, 12.5);
        let e = expm(&a).unwrap();
        assert!((e[(0, 0)] / 12.5f64.exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exp_nilpotent_badly_scaled() {
        // exp([[0, c], [0, 0]]) = [[1, c], [0, 1]] for any c.
        let c = 3.7e9;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, c, 0.0, 0.0]);
        let e = expm(&a).unwrap();
        assert_eq!(e[(0, 0)], 1.0);
        assert!((e[(0, 1)] / c - 1.0).abs() < 1e-14);
        assert_eq!(e[(1, 0)], 0.0);
    }

    #[test]
    fn exp_rejects_nan() {
        let a = DMatrix::from_element(2, 2, f64::NAN);
        assert!(expm(&a).is_err());
    }

    #[test]
    fn psd_sqrt_semidefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_sqrt(&a);
        assert!((&l * l.transpose() - a).amax() < 1e-12);
    }
}
