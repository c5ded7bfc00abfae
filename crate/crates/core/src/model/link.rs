use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{adj, complex_gaussian, eye, scale_cols, unitarity_defect, zeros, CMat, C64};

/// One Rician link with Weichselberger correlation:
/// `W = los + left (profile ⊙ X) right†`, entries of `X` circular Gaussian
/// with variance `var`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Link {
    pub los: CMat,
    pub left: CMat,
    pub right: CMat,
    pub profile: Array2<f64>,
    pub var: f64,
}

impl Link {
    pub fn new(los: CMat, left: CMat, right: CMat, profile: Array2<f64>, var: f64) -> Result<Self> {
        let link = Link {
            los,
            left,
            right,
            profile,
            var,
        };
        link.validate()?;
        Ok(link)
    }

    /// Purely deterministic link (zero variance profile, identity bases).
    pub fn deterministic(los: CMat, var: f64) -> Self {
        let (m, n) = los.dim();
        Link {
            los,
            left: eye(m),
            right: eye(n),
            profile: Array2::zeros((m, n)),
            var,
        }
    }

    pub fn rows(&self) -> usize {
        self.los.nrows()
    }

    pub fn cols(&self) -> usize {
        self.los.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.los.dim();
        if self.left.dim() != (m, m) || self.right.dim() != (n, n) || self.profile.dim() != (m, n) {
            return Err(Error::Dimension(format!(
                "link {m}x{n}: left {:?}, right {:?}, profile {:?}",
                self.left.dim(),
                self.right.dim(),
                self.profile.dim()
            )));
        }
        if !(self.var > 0.0) {
            return Err(Error::Config(format!(
                "entry variance must be positive, got {}",
                self.var
            )));
        }
        if self.profile.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Config(
                "variance profile has negative entries".into(),
            ));
        }
        for (name, u) in [("left", &self.left), ("right", &self.right)] {
            let d = unitarity_defect(u);
            if d > 1e-12 * (u.nrows() as f64).max(1.0) {
                return Err(Error::Config(format!(
                    "{name} factor is not unitary (defect {d:.2e})"
                )));
            }
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.profile.iter().all(|&p| p == 0.0)
    }

    /// Zero-mean part `left (profile ⊙ X) right†`.
    pub fn sample_scatter<R: Rng + ?Sized>(&self, rng: &mut R) -> CMat {
        let (m, n) = self.los.dim();
        let mut x = complex_gaussian(m, n, self.var, rng);
        x.zip_mut_with(&self.profile, |v, &p| *v *= p);
        self.left.dot(&x).dot(&adj(&self.right))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CMat {
        &self.los + &self.sample_scatter(rng)
    }

    fn squared_profile(&self) -> Array2<f64> {
        self.profile.mapv(|p| p * p)
    }

    /// `E[W̃† C W̃]` for `C` of size rows×rows; the result is cols×cols.
    pub fn eta(&self, c: &CMat) -> CMat {
        let d = basis_diagonal(&self.left, c);
        let p2 = self.squared_profile();
        let w: Array1<C64> = (0..self.cols())
            .map(|l| {
                let mut acc = C64::new(0.0, 0.0);
                for j in 0..self.rows() {
                    acc += d[j] * p2[[j, l]];
                }
                acc * self.var
            })
            .collect();
        scale_cols(&self.right, w.as_slice().unwrap()).dot(&adj(&self.right))
    }

    /// `E[W̃ D W̃†]` for `D` of size cols×cols; the result is rows×rows.
    pub fn eta_tilde(&self, dmat: &CMat) -> CMat {
        let d = basis_diagonal(&self.right, dmat);
        let p2 = self.squared_profile();
        let w: Array1<C64> = (0..self.rows())
            .map(|l| {
                let mut acc = C64::new(0.0, 0.0);
                for j in 0..self.cols() {
                    acc += d[j] * p2[[l, j]];
                }
                acc * self.var
            })
            .collect();
        scale_cols(&self.left, w.as_slice().unwrap()).dot(&adj(&self.left))
    }

    /// `E‖W̃‖²_F`.
    pub fn scatter_energy(&self) -> f64 {
        self.var * self.profile.iter().map(|p| p * p).sum::<f64>()
    }

    pub fn los_energy(&self) -> f64 {
        self.los.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Multiplies the link amplitude (LoS and scatter) by `a`.
    pub fn scale_amplitude(&mut self, a: f64) {
        self.los.mapv_inplace(|v| v * a);
        self.profile.mapv_inplace(|p| p * a);
    }

    /// Appends `extra` rows: LoS rows from `los_rows`, no scatter, identity
    /// extension of the left basis. Entry variance is kept.
    pub fn pad_rows(&self, los_rows: &CMat) -> Result<Link> {
        let (m, n) = self.los.dim();
        let extra = los_rows.nrows();
        if los_rows.ncols() != n {
            return Err(Error::Dimension(format!(
                "padding rows have {} columns, link has {n}",
                los_rows.ncols()
            )));
        }
        let mut los = zeros(m + extra, n);
        los.slice_mut(s![..m, ..]).assign(&self.los);
        los.slice_mut(s![m.., ..]).assign(los_rows);
        let mut left = zeros(m + extra, m + extra);
        left.slice_mut(s![..m, ..m]).assign(&self.left);
        left.slice_mut(s![m.., m..]).assign(&eye(extra));
        let mut profile = Array2::zeros((m + extra, n));
        profile.slice_mut(s![..m, ..]).assign(&self.profile);
        Ok(Link {
            los,
            left,
            right: self.right.clone(),
            profile,
            var: self.var,
        })
    }
}

/// Diagonal of `b† c b`.
fn basis_diagonal(b: &CMat, c: &CMat) -> Array1<C64> {
    let cb = c.dot(b);
    (0..b.ncols())
        .map(|j| {
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..b.nrows() {
                acc += b[[i, j]].conj() * cb[[i, j]];
            }
            acc
        })
        .collect()
}
