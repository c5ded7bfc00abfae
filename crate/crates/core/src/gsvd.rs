//! Generalized singular value decomposition of the channel pair `(H1, H2)`
//! through a QR factorization of the stacked matrix and a CS split of its
//! orthonormal factor.

use ndarray::{s, Array2};
use ndarray_linalg::{QR, SVD};

use crate::error::{Error, Result};
use crate::linalg::{
    adj, block, complete_unitary, eye, fro, inv, singular_values, zeros, CMat, C64,
};
use crate::model::{augment_rows, regime_of, Regime};

/// Relative singular-value floor below which the stacked channel counts as
/// rank deficient.
const RANK_TOL: f64 = 1e-13;

/// `H_i = U_i Σ_i V` with unitary `U_i` and nonsingular `V`.
///
/// Column layout of `V` (and of both `Σ_i`): user-2 private directions,
/// coupled directions with `c` descending, user-1 private directions. In the
/// private regime the layout is `V = [H1; N; H2]`.
#[derive(Clone, Debug)]
pub struct GsvdFactors {
    pub u1: CMat,
    pub u2: CMat,
    pub v: CMat,
    pub v_inv: CMat,
    pub sigma1: Array2<f64>,
    pub sigma2: Array2<f64>,
    /// Coupled cosines `c_j` and sines `s_j`, `c_j² + s_j² = 1`.
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    /// `c_j² / s_j²`, descending.
    pub mu: Vec<f64>,
    pub regime: Regime,
    /// Private subchannel counts of users 1 and 2.
    pub private: [usize; 2],
    pub cond_v: f64,
}

impl GsvdFactors {
    pub fn coupled(&self) -> usize {
        self.mu.len()
    }

    /// Power normalization factor `Tr(V⁻¹ V⁻†)`.
    pub fn power_factor(&self) -> f64 {
        self.v_inv.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Largest relative Frobenius residual of `H_i − U_i Σ_i V`.
    pub fn reconstruction_residual(&self, h1: &CMat, h2: &CMat) -> f64 {
        let r = |h: &CMat, u: &CMat, sig: &Array2<f64>| {
            let sc = sig.mapv(|x| C64::new(x, 0.0));
            fro(&(h - &u.dot(&sc).dot(&self.v))) / fro(h).max(f64::MIN_POSITIVE)
        };
        r(h1, &self.u1, &self.sigma1).max(r(h2, &self.u2, &self.sigma2))
    }

    /// Largest deviation of `U_i† U_i` from the identity.
    pub fn unitarity_defect(&self) -> f64 {
        [&self.u1, &self.u2]
            .iter()
            .map(|u| fro(&(adj(u).dot(*u) - eye(u.ncols()))))
            .fold(0.0, f64::max)
    }
}

pub fn gsvd(h1: &CMat, h2: &CMat) -> Result<GsvdFactors> {
    let t = h1.ncols();
    if h2.ncols() != t {
        return Err(Error::Dimension(format!(
            "H1 has {t} columns, H2 has {}",
            h2.ncols()
        )));
    }
    let (r1, r2) = (h1.nrows(), h2.nrows());
    let out = if t >= r1 + r2 {
        private_gsvd(h1, h2)?
    } else {
        stacked_gsvd(h1, h2)?
    };
    if out.cond_v > 1e8 {
        log::warn!("GSVD: condition number of V is {:.3e}", out.cond_v);
    }
    #[cfg(debug_assertions)]
    {
        let res = out.reconstruction_residual(h1, h2);
        debug_assert!(res < 1e-9, "GSVD reconstruction residual {res:.3e}");
    }
    Ok(out)
}

fn stacked(h1: &CMat, h2: &CMat) -> CMat {
    let (r1, t) = h1.dim();
    let mut a = zeros(r1 + h2.nrows(), t);
    a.slice_mut(s![..r1, ..]).assign(h1);
    a.slice_mut(s![r1.., ..]).assign(h2);
    a
}

fn rank_check(sv: &[f64], what: &str) -> Result<f64> {
    let hi = sv.iter().cloned().fold(0.0, f64::max);
    let lo = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(hi > 0.0) || lo < RANK_TOL * hi {
        let rank = sv.iter().filter(|&&x| x >= RANK_TOL * hi).count();
        return Err(Error::Decomposition(format!(
            "{what} is rank deficient: numerical rank {rank} of {}",
            sv.len()
        )));
    }
    Ok(hi / lo)
}

fn stacked_gsvd(h1: &CMat, h2: &CMat) -> Result<GsvdFactors> {
    let (r1, t) = h1.dim();
    let r2 = h2.nrows();
    let a = stacked(h1, h2);
    let (q, r) = a
        .qr()
        .map_err(|e| Error::Decomposition(format!("QR of stacked channel: {e}")))?;
    let cond_v = rank_check(
        singular_values(&r)?.as_slice().unwrap(),
        "stacked channel [H1; H2]",
    )?;
    let q1 = block(&q, 0, r1, 0, q.ncols());
    let q2 = block(&q, r1, r1 + r2, 0, q.ncols());

    let (_, _, zt) = q1
        .svd(false, true)
        .map_err(|e| Error::Decomposition(format!("CS split: {e}")))?;
    let z_desc =
        adj(&zt.ok_or_else(|| Error::Decomposition("CS split returned no right factor".into()))?);

    let p1 = r1.min(t - r2.min(t));
    let p2 = r2.min(t - r1.min(t));
    let sc = t - p1 - p2;

    // Reorder from c-descending [p1 | coupled | p2] to [p2 | coupled | p1].
    let mut z = zeros(t, t);
    z.slice_mut(s![.., ..p2])
        .assign(&z_desc.slice(s![.., t - p2..]));
    z.slice_mut(s![.., p2..p2 + sc])
        .assign(&z_desc.slice(s![.., p1..p1 + sc]));
    z.slice_mut(s![.., p2 + sc..])
        .assign(&z_desc.slice(s![.., ..p1]));

    let w1 = q1.dot(&z);
    let w2 = q2.dot(&z);
    let col_norm =
        |w: &CMat, j: usize| w.column(j).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();

    let mut c = Vec::with_capacity(sc);
    let mut sn = Vec::with_capacity(sc);
    for j in 0..sc {
        c.push(col_norm(&w1, p2 + j));
        sn.push(col_norm(&w2, p2 + j));
    }
    if sn.iter().any(|&x| !(x > 0.0)) || c.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Decomposition(
            "coupled subchannel with a vanishing generalized singular value".into(),
        ));
    }

    // U1 columns: coupled directions, then user-1 private directions.
    let mut u1_lead = zeros(r1, sc + p1);
    for j in 0..sc {
        let col = w1.column(p2 + j).mapv(|v| v / c[j]);
        u1_lead.column_mut(j).assign(&col);
    }
    for m in 0..p1 {
        let n = col_norm(&w1, p2 + sc + m);
        let col = w1.column(p2 + sc + m).mapv(|v| v / n);
        u1_lead.column_mut(sc + m).assign(&col);
    }
    // U2 columns: user-2 private directions, then coupled directions.
    let mut u2_lead = zeros(r2, p2 + sc);
    for m in 0..p2 {
        let n = col_norm(&w2, m);
        let col = w2.column(m).mapv(|v| v / n);
        u2_lead.column_mut(m).assign(&col);
    }
    for j in 0..sc {
        let col = w2.column(p2 + j).mapv(|v| v / sn[j]);
        u2_lead.column_mut(p2 + j).assign(&col);
    }
    let u1 = complete_unitary(&u1_lead)?;
    let u2 = complete_unitary(&u2_lead)?;

    let mut sigma1 = Array2::zeros((r1, t));
    let mut sigma2 = Array2::zeros((r2, t));
    for j in 0..sc {
        sigma1[[j, p2 + j]] = c[j];
        sigma2[[p2 + j, p2 + j]] = sn[j];
    }
    for m in 0..p1 {
        sigma1[[sc + m, p2 + sc + m]] = 1.0;
    }
    for m in 0..p2 {
        sigma2[[m, m]] = 1.0;
    }

    let v = adj(&z).dot(&r);
    let v_inv = inv(&r, "R factor of stacked channel")?.dot(&z);
    let mut mu: Vec<f64> = c
        .iter()
        .zip(sn.iter())
        .map(|(a, b)| (a * a) / (b * b))
        .collect();
    mu.sort_by(|a, b| b.total_cmp(a));

    Ok(GsvdFactors {
        u1,
        u2,
        v,
        v_inv,
        sigma1,
        sigma2,
        c,
        s: sn,
        mu,
        regime: regime_of(t, [r1, r2]),
        private: [p1, p2],
        cond_v,
    })
}

/// `T ≥ R1 + R2`: `V = [H1; N; H2]` with `N` spanning the orthogonal
/// complement of the rows of both channels, `U_i = I`.
fn private_gsvd(h1: &CMat, h2: &CMat) -> Result<GsvdFactors> {
    let (r1, t) = h1.dim();
    let r2 = h2.nrows();
    let a = stacked(h1, h2);
    rank_check(
        singular_values(&a)?.as_slice().unwrap(),
        "stacked channel [H1; H2]",
    )?;
    let (q, _) = adj(&a)
        .qr()
        .map_err(|e| Error::Decomposition(format!("QR of stacked channel: {e}")))?;
    let full = complete_unitary(&q)?;
    let null = adj(&full.slice(s![.., r1 + r2..]).to_owned());
    let mut v = zeros(t, t);
    v.slice_mut(s![..r1, ..]).assign(h1);
    v.slice_mut(s![r1..t - r2, ..]).assign(&null);
    v.slice_mut(s![t - r2.., ..]).assign(h2);
    let cond_v = rank_check(singular_values(&v)?.as_slice().unwrap(), "private-regime V")?;
    let v_inv = inv(&v, "private-regime V")?;
    let mut sigma1 = Array2::zeros((r1, t));
    let mut sigma2 = Array2::zeros((r2, t));
    for j in 0..r1 {
        sigma1[[j, j]] = 1.0;
    }
    for j in 0..r2 {
        sigma2[[j, t - r2 + j]] = 1.0;
    }
    Ok(GsvdFactors {
        u1: eye(r1),
        u2: eye(r2),
        v,
        v_inv,
        sigma1,
        sigma2,
        c: vec![],
        s: vec![],
        mu: vec![],
        regime: Regime::Private,
        private: [r1, r2],
        cond_v,
    })
}

/// `Ĥ2 = [H2; Δ [I 0]]` with `T − R2` appended rows.
pub fn augment_h2(h2: &CMat, delta: f64) -> Result<CMat> {
    augment_rows(h2, delta)
}

/// Gram reduction `B = H1 (H2† H2)⁻¹ H1†`. When `H2` has fewer rows than
/// columns it is first augmented with `Δ [I 0]`.
pub fn b_matrix(h1: &CMat, h2: &CMat, delta: f64) -> Result<CMat> {
    let x = whitened(h1, h2, delta)?;
    Ok(x.dot(&adj(&x)))
}

/// Eigenvalues of [`b_matrix`], descending, computed as squared singular
/// values of `H1 R⁻¹` where `H2 = Q R`.
pub fn b_eigenvalues(h1: &CMat, h2: &CMat, delta: f64) -> Result<Vec<f64>> {
    let x = whitened(h1, h2, delta)?;
    let mut ev: Vec<f64> = singular_values(&x)?.iter().map(|s| s * s).collect();
    ev.resize(h1.nrows(), 0.0);
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}

fn whitened(h1: &CMat, h2: &CMat, delta: f64) -> Result<CMat> {
    let t = h1.ncols();
    if h2.ncols() != t {
        return Err(Error::Dimension(format!(
            "H1 has {t} columns, H2 has {}",
            h2.ncols()
        )));
    }
    let h2 = if h2.nrows() < t {
        augment_rows(h2, delta)?
    } else {
        h2.clone()
    };
    let (_, r) = h2
        .qr()
        .map_err(|e| Error::Decomposition(format!("QR of H2: {e}")))?;
    let sv = singular_values(&r)?;
    let hi = sv.iter().cloned().fold(0.0, f64::max);
    if sv.iter().any(|&x| !(x > RANK_TOL * hi)) {
        return Err(Error::Singular { block: "H2† H2" });
    }
    let r_inv = inv(&r, "H2† H2")?;
    Ok(h1.dot(&r_inv))
}

/// `Tr((H1† H1 + H2† H2)⁻¹)`.
pub fn power_factor_exact(h1: &CMat, h2: &CMat) -> Result<f64> {
    if h2.ncols() != h1.ncols() {
        return Err(Error::Dimension(format!(
            "H1 has {} columns, H2 has {}",
            h1.ncols(),
            h2.ncols()
        )));
    }
    let a = stacked(h1, h2);
    if a.nrows() < a.ncols() {
        return Err(Error::Singular {
            block: "H1† H1 + H2† H2",
        });
    }
    let (_, r) = a
        .qr()
        .map_err(|e| Error::Decomposition(format!("QR of stacked channel: {e}")))?;
    let sv = singular_values(&r)?;
    let hi = sv.iter().cloned().fold(0.0, f64::max);
    if sv.iter().any(|&x| !(x > RANK_TOL * hi)) {
        return Err(Error::Singular {
            block: "H1† H1 + H2† H2",
        });
    }
    let r_inv = inv(&r, "H1† H1 + H2† H2")?;
    Ok(r_inv.iter().map(|v| v.norm_sqr()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::complex_gaussian;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(r1: usize, r2: usize, t: usize, seed: u64) -> (CMat, CMat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            complex_gaussian(r1, t, 1.0, &mut rng),
            complex_gaussian(r2, t, 1.0, &mut rng),
        )
    }

    fn scaled_eye(n: usize, a: f64) -> CMat {
        eye(n).mapv(|v| v * a)
    }

    fn check_structure(f: &GsvdFactors) {
        let [p1, p2] = f.private;
        let sc = f.coupled();
        let (r1, t) = f.sigma1.dim();
        for ((i, j), &x) in f.sigma1.indexed_iter() {
            let expected_nonzero = if f.regime == Regime::Private {
                i == j
            } else {
                (i < sc && j == p2 + i) || (i >= sc && i < sc + p1 && j == p2 + i)
            };
            if !expected_nonzero {
                assert_eq!(x, 0.0, "Σ1[{i},{j}]");
            }
        }
        for m in 0..p1 {
            let j = if f.regime == Regime::Private {
                m
            } else {
                p2 + sc + m
            };
            let i = if f.regime == Regime::Private {
                m
            } else {
                sc + m
            };
            assert_eq!(f.sigma1[[i, j]], 1.0);
        }
        for m in 0..p2 {
            let j = if f.regime == Regime::Private {
                t - f.sigma2.nrows() + m
            } else {
                m
            };
            assert_eq!(f.sigma2[[m, j]], 1.0);
        }
        assert!(r1 >= sc + p1);
    }

    #[test]
    fn identical_channels_give_unit_ratios() {
        let f = gsvd(&eye(4), &eye(4)).unwrap();
        assert!(f.mu.iter().all(|&m| (m - 1.0).abs() < 1e-12));
    }

    #[test]
    fn scalar_ratio() {
        let f = gsvd(&scaled_eye(3, 2.0), &eye(3)).unwrap();
        assert!(f.mu.iter().all(|&m| (m - 4.0).abs() < 1e-12));
    }

    #[test]
    fn ratios_match_b_eigenvalues() {
        let (h1, h2) = pair(6, 5, 4, 1);
        let f = gsvd(&h1, &h2).unwrap();
        let ev = b_eigenvalues(&h1, &h2, 0.0).unwrap();
        assert_eq!(f.mu.len(), 4);
        for (a, b) in f.mu.iter().zip(ev.iter()) {
            assert!((a - b).abs() < 1e-8 * b.max(1.0), "{a} vs {b}");
        }
        assert!(ev[4..].iter().all(|&x| x.abs() < 1e-10));
    }

    #[test]
    fn b_matrix_trivial_cases() {
        let (h, _) = pair(4, 4, 4, 2);
        let ev = b_eigenvalues(&h, &h, 0.0).unwrap();
        assert!(ev.iter().all(|&x| (x - 1.0).abs() < 1e-10));
        let (h1, _) = pair(3, 3, 3, 3);
        let b = b_matrix(&h1, &eye(3), 0.0).unwrap();
        assert!(fro(&(b - h1.dot(&adj(&h1)))) < 1e-12);
    }

    #[test]
    fn b_matrix_needs_invertible_gram() {
        let (h1, h2) = pair(3, 2, 4, 4);
        assert!(matches!(
            b_matrix(&h1, &h2, 0.0),
            Err(Error::Singular { .. })
        ));
        assert!(b_matrix(&h1, &h2, 1e-2).is_ok());
    }

    #[test]
    fn power_factor_trivial_cases() {
        assert!((power_factor_exact(&eye(5), &eye(5)).unwrap() - 2.5).abs() < 1e-12);
        let t = power_factor_exact(&scaled_eye(3, 2.0), &scaled_eye(3, 0.5)).unwrap();
        assert!((t - 3.0 / 4.25).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let (h1, _) = pair(3, 3, 4, 5);
        let h2 = h1.clone();
        match gsvd(&h1, &h2) {
            Err(Error::Decomposition(msg)) => assert!(msg.contains("rank")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn augmentation() {
        let (_, h2) = pair(1, 3, 5, 6);
        let a = augment_h2(&h2, 0.0).unwrap();
        assert_eq!(a.dim(), (5, 5));
        assert!(a.slice(s![3.., ..]).iter().all(|v| v.norm() == 0.0));
        let a = augment_h2(&h2, 1e-4).unwrap();
        assert_eq!(a[[3, 0]], C64::new(1e-4, 0.0));
        assert_eq!(a[[4, 1]], C64::new(1e-4, 0.0));
        assert!(matches!(augment_h2(&eye(4), 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn augmented_spectrum_converges_as_delta_shrinks() {
        let (h1, h2) = pair(10, 10, 16, 7);
        let exact = gsvd(&h1, &h2).unwrap().mu;
        let mut prev: Option<Vec<f64>> = None;
        let mut gaps = vec![];
        for delta in [1e-2, 1e-3, 1e-4] {
            let mu = gsvd(&h1, &augment_h2(&h2, delta).unwrap()).unwrap().mu;
            // The coupled ratios of the original pair are the smallest ones.
            let tail: Vec<f64> = mu[mu.len() - exact.len()..].to_vec();
            if let Some(p) = &prev {
                gaps.push(
                    tail.iter()
                        .zip(p.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max),
                );
            }
            prev = Some(tail);
        }
        assert!(gaps[1] < gaps[0]);
        let last = prev.unwrap();
        for (a, b) in last.iter().zip(exact.iter()) {
            assert!((a - b).abs() < 1e-6 * b.max(1.0));
        }
    }

    #[test]
    fn private_regime_layout() {
        let (h1, h2) = pair(2, 3, 7, 8);
        let f = gsvd(&h1, &h2).unwrap();
        assert_eq!(f.regime, Regime::Private);
        assert!(f.mu.is_empty());
        assert!(f.reconstruction_residual(&h1, &h2) < 1e-12);
        check_structure(&f);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn invariants_hold_in_every_regime(seed in any::<u64>(), r1 in 1usize..7, r2 in 1usize..7, t in 1usize..12) {
            let (h1, h2) = pair(r1, r2, t, seed);
            let f = gsvd(&h1, &h2).unwrap();
            prop_assert!(f.reconstruction_residual(&h1, &h2) < 1e-10);
            prop_assert!(f.unitarity_defect() < 1e-12);
            prop_assert_eq!(f.coupled(), crate::model::coupled_count(t, [r1, r2]));
            prop_assert!(f.mu.windows(2).all(|w| w[0] >= w[1]));
            check_structure(&f);
            if t <= r1 + r2 {
                let exact = power_factor_exact(&h1, &h2).unwrap();
                prop_assert!((exact - f.power_factor()).abs() < 1e-8 * exact);
            }
        }

        #[test]
        fn ratios_are_scale_invariant(seed in any::<u64>(), c in 0.1f64..10.0) {
            let (h1, h2) = pair(5, 4, 4, seed);
            let a = gsvd(&h1, &h2).unwrap().mu;
            let b = gsvd(&h1.mapv(|v| v * c), &h2.mapv(|v| v * c)).unwrap().mu;
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-9 * x.max(1.0));
            }
            let t0 = power_factor_exact(&h1, &h2).unwrap();
            let t1 = power_factor_exact(&h1.mapv(|v| v * c), &h2.mapv(|v| v * c)).unwrap();
            prop_assert!((t1 - t0 / (c * c)).abs() < 1e-9 * t0 / (c * c));
        }
    }
}
