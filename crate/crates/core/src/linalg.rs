//! Dense complex matrix helpers shared by every module.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{Determinant, EigValsh, Factorize, Inverse, QR, SVD, UPLO};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = Array2<C64>;
pub type CVec = Array1<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

pub fn eye(n: usize) -> CMat {
    Array2::eye(n)
}

pub fn zeros(m: usize, n: usize) -> CMat {
    Array2::zeros((m, n))
}

/// Conjugate transpose, returned in standard layout.
pub fn dag(a: &ArrayView2<C64>) -> CMat {
    let mut out = Array2::zeros((a.ncols(), a.nrows()));
    for ((i, j), v) in a.indexed_iter() {
        out[[j, i]] = v.conj();
    }
    out
}

pub fn adj(a: &CMat) -> CMat {
    dag(&a.view())
}

pub fn inv(a: &CMat, block: &'static str) -> Result<CMat> {
    let out = a.inv().map_err(|_| Error::Singular { block })?;
    if out.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Singular { block });
    }
    Ok(out)
}

/// Inverse together with the complex log-determinant taken from the LU pivots.
pub fn inv_logdet(a: &CMat, block: &'static str) -> Result<(CMat, C64)> {
    let lu = a.factorize().map_err(|_| Error::Singular { block })?;
    let (sign, ln_abs) = lu.sln_det().map_err(|_| Error::Singular { block })?;
    if !ln_abs.is_finite() {
        return Err(Error::Singular { block });
    }
    let out = lu.inv().map_err(|_| Error::Singular { block })?;
    Ok((out, C64::new(ln_abs, sign.arg())))
}

pub fn logdet(a: &CMat, block: &'static str) -> Result<C64> {
    let (sign, ln_abs) = a.sln_det().map_err(|_| Error::Singular { block })?;
    if !ln_abs.is_finite() {
        return Err(Error::Singular { block });
    }
    Ok(C64::new(ln_abs, sign.arg()))
}

pub fn trace(a: &CMat) -> C64 {
    a.diag().iter().sum()
}

/// `Tr(a b)` without forming the product.
pub fn trace_prod(a: &CMat, b: &CMat) -> C64 {
    let mut acc = ZERO;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[[i, k]] * b[[k, i]];
        }
    }
    acc
}

pub fn fro(a: &CMat) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn max_abs(a: &CMat) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.norm()))
}

/// Largest entry of `a - a†`, relative to the largest entry of `a` (floored at one).
pub fn hermitian_defect(a: &CMat) -> f64 {
    if a.nrows() != a.ncols() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in i..a.ncols() {
            worst = worst.max((a[[i, j]] - a[[j, i]].conj()).norm());
        }
    }
    worst / max_abs(a).max(1.0)
}

pub fn require_hermitian(a: &CMat, what: &str) -> Result<()> {
    let d = hermitian_defect(a);
    if d > 1e-8 {
        return Err(Error::Contract(format!(
            "{what} is not Hermitian (defect {d:.2e})"
        )));
    }
    Ok(())
}

/// Frobenius distance of `a a†` from the identity.
pub fn unitarity_defect(a: &CMat) -> f64 {
    let g = a.dot(&adj(a));
    fro(&(g - eye(a.nrows())))
}

/// Matrix with i.i.d. circular complex Gaussian entries of the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(m: usize, n: usize, var: f64, rng: &mut R) -> CMat {
    let sd = (0.5 * var).sqrt();
    Array2::from_shape_simple_fn((m, n), || {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(sd * re, sd * im)
    })
}

/// Haar-distributed unitary matrix: QR of a Gaussian matrix with the phases of
/// the triangular factor pushed back into Q.
pub fn random_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMat {
    let g = complex_gaussian(n, n, 1.0, rng);
    let (mut q, r) = g.qr().expect("QR of a Gaussian matrix");
    for j in 0..n {
        let d = r[[j, j]];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { ONE };
        q.column_mut(j).mapv_inplace(|v| v * ph);
    }
    q
}

/// Extends the orthonormal columns of `w` (m×k) to an m×m unitary whose first
/// k columns are exactly `w`.
pub fn complete_unitary(w: &CMat) -> Result<CMat> {
    let (m, k) = w.dim();
    if k > m {
        return Err(Error::Dimension(format!(
            "cannot complete {k} columns in dimension {m}"
        )));
    }
    if k == m {
        return Ok(w.clone());
    }
    let mut aug = zeros(m, k + m);
    aug.slice_mut(s![.., ..k]).assign(w);
    aug.slice_mut(s![.., k..]).assign(&eye(m));
    let (mut q, r) = aug
        .qr()
        .map_err(|e| Error::Decomposition(format!("unitary completion: {e}")))?;
    for j in 0..m {
        let d = r[[j, j]];
        if d.norm() > 0.0 {
            let ph = d / d.norm();
            q.column_mut(j).mapv_inplace(|v| v * ph);
        }
    }
    q.slice_mut(s![.., ..k]).assign(w);
    Ok(q)
}

pub fn singular_values(a: &CMat) -> Result<Array1<f64>> {
    let (_, s, _) = a
        .svd(false, false)
        .map_err(|e| Error::Decomposition(format!("svd: {e}")))?;
    Ok(s)
}

/// Eigenvalues of the Hermitian part `(a + a†)/2`, ascending.
pub fn hermitian_eigenvalues(a: &CMat) -> Result<Array1<f64>> {
    let h = (a + &adj(a)).mapv(|v| v * 0.5);
    h.eigvalsh(UPLO::Lower)
        .map_err(|e| Error::Decomposition(format!("eigvalsh: {e}")))
}

pub fn condition_number(a: &CMat) -> Result<f64> {
    let s = singular_values(a)?;
    let hi = s.iter().cloned().fold(0.0, f64::max);
    let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(if lo > 0.0 { hi / lo } else { f64::INFINITY })
}

/// Copy of `a[r0..r1, c0..c1]` in standard row-major layout, which LAPACK
/// wrappers accept even for degenerate shapes.
pub fn block(a: &CMat, r0: usize, r1: usize, c0: usize, c1: usize) -> CMat {
    let v = a.slice(s![r0..r1, c0..c1]);
    Array2::from_shape_fn(v.dim(), |(i, j)| v[[i, j]])
}

pub fn set_block(a: &mut CMat, r0: usize, c0: usize, b: &CMat) {
    let (m, n) = b.dim();
    a.slice_mut(s![r0..r0 + m, c0..c0 + n]).assign(b);
}

pub fn add_block(a: &mut CMat, r0: usize, c0: usize, b: &CMat) {
    let (m, n) = b.dim();
    let mut v = a.slice_mut(s![r0..r0 + m, c0..c0 + n]);
    v += b;
}

pub fn diag_mat(d: &CVec) -> CMat {
    Array2::from_diag(d)
}

/// `a * diag(d)`, scaling columns.
pub fn scale_cols(a: &CMat, d: &[C64]) -> CMat {
    let mut out = a.clone();
    for (mut col, &x) in out.axis_iter_mut(Axis(1)).zip(d.iter()) {
        col.mapv_inplace(|v| v * x);
    }
    out
}

/// `diag(d) * a`, scaling rows.
pub fn scale_rows(a: &CMat, d: &[C64]) -> CMat {
    let mut out = a.clone();
    for (mut row, &x) in out.axis_iter_mut(Axis(0)).zip(d.iter()) {
        row.mapv_inplace(|v| v * x);
    }
    out
}

/// `diag(d) a diag(d)†` for a diagonal given as a vector.
pub fn conj_diag(d: &[C64], a: &CMat) -> CMat {
    let mut out = a.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v = d[i] * *v * d[j].conj();
    }
    out
}

/// `diag(d)† a diag(d)`.
pub fn conj_diag_adj(d: &[C64], a: &CMat) -> CMat {
    let mut out = a.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v = d[i].conj() * *v * d[j];
    }
    out
}

/// Pairwise summation in index order.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    match x.len() {
        0 => 0.0,
        1 => x[0],
        n if n <= 8 => x.iter().sum(),
        n => {
            let (a, b) = x.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Wraps an angle difference into (-π, π].
pub fn wrap_phase(x: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut y = x.rem_euclid(tau);
    if y > std::f64::consts::PI {
        y -= tau;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_unitary_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 7, 20] {
            let u = random_unitary(n, &mut rng);
            assert!(unitarity_defect(&u) < 1e-12);
        }
    }

    #[test]
    fn completion_keeps_leading_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_unitary(6, &mut rng);
        let w = block(&u, 0, 6, 0, 2);
        let full = complete_unitary(&w).unwrap();
        assert!(unitarity_defect(&full) < 1e-12);
        assert!(fro(&(block(&full, 0, 6, 0, 2) - &w)) < 1e-15);
    }

    #[test]
    fn logdet_matches_product_of_eigenvalues() {
        let a = CMat::from_diag(&ndarray::arr1(&[
            C64::new(2.0, 0.0),
            C64::new(-3.0, 0.0),
            C64::new(0.0, 0.5),
        ]));
        let (_, ld) = inv_logdet(&a, "test").unwrap();
        let expected = C64::new(2.0, 0.0) * C64::new(-3.0, 0.0) * C64::new(0.0, 0.5);
        assert!((ld.exp() - expected).norm() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = zeros(3, 3);
        assert!(matches!(
            inv(&a, "probe"),
            Err(Error::Singular { block: "probe" })
        ));
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let x: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert!((pairwise_sum(&x) - x.iter().sum::<f64>()).abs() < 1e-10);
    }

    #[test]
    fn phase_wrapping() {
        assert!((wrap_phase(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!(wrap_phase(std::f64::consts::TAU).abs() < 1e-12);
    }
}
