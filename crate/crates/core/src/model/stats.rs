use ndarray::s;
use serde::{Deserialize, Serialize};

use super::link::Link;
use crate::error::{Error, Result};
use crate::linalg::{require_hermitian, zeros, CMat, C64};

/// Statistics of every link in the system.
///
/// Panel indices in the public operator methods are 1-based so that index 0
/// denotes the direct BS→user link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub tx: usize,
    pub rx: [usize; 2],
    /// BS→panel links `F_k`, `L_k × T`, entry variance `1/T`.
    pub bs_ris: Vec<Link>,
    /// Direct BS→user links `R_{0,i}`, `R_i × T`, entry variance `1/R_i`.
    pub direct: [Link; 2],
    /// Panel→user links `R_{k,i}`, `R_i × L_k`, entry variance `1/L_k`.
    pub ris_user: Vec<[Link; 2]>,
}

impl ChannelStats {
    pub fn validate(&self) -> Result<()> {
        let t = self.tx;
        if self.bs_ris.len() != self.ris_user.len() {
            return Err(Error::Dimension(format!(
                "{} BS→panel links but {} panel→user pairs",
                self.bs_ris.len(),
                self.ris_user.len()
            )));
        }
        for i in 0..2 {
            let d = &self.direct[i];
            if d.rows() != self.rx[i] || d.cols() != t {
                return Err(Error::Dimension(format!(
                    "direct link {} is {}x{}, expected {}x{t}",
                    i + 1,
                    d.rows(),
                    d.cols(),
                    self.rx[i]
                )));
            }
            d.validate()?;
        }
        for (k, f) in self.bs_ris.iter().enumerate() {
            if f.cols() != t {
                return Err(Error::Dimension(format!(
                    "panel {} link has {} columns, expected {t}",
                    k + 1,
                    f.cols()
                )));
            }
            f.validate()?;
            for i in 0..2 {
                let r = &self.ris_user[k][i];
                if r.rows() != self.rx[i] || r.cols() != f.rows() {
                    return Err(Error::Dimension(format!(
                        "panel {} → user {} link is {}x{}, expected {}x{}",
                        k + 1,
                        i + 1,
                        r.rows(),
                        r.cols(),
                        self.rx[i],
                        f.rows()
                    )));
                }
                r.validate()?;
            }
        }
        Ok(())
    }

    pub fn num_panels(&self) -> usize {
        self.bs_ris.len()
    }

    pub fn panel_sizes(&self) -> Vec<usize> {
        self.bs_ris.iter().map(|f| f.rows()).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.bs_ris.iter().map(|f| f.rows()).sum()
    }

    /// Link `R_{k,i}` (`k = 0` is the direct link); `i` is 0 or 1.
    pub fn user_link(&self, k: usize, i: usize) -> &Link {
        if k == 0 {
            &self.direct[i]
        } else {
            &self.ris_user[k - 1][i]
        }
    }

    fn user_link_checked(&self, k: usize, i: usize) -> Result<&Link> {
        if i > 1 || k > self.num_panels() {
            return Err(Error::Dimension(format!("no link ({k}, {i})")));
        }
        Ok(self.user_link(k, i))
    }

    fn panel_link_checked(&self, k: usize) -> Result<&Link> {
        if k == 0 || k > self.num_panels() {
            return Err(Error::Dimension(format!("no BS→panel link {k}")));
        }
        Ok(&self.bs_ris[k - 1])
    }

    /// `E[R̃† C R̃]` for the user link `(k, i)`.
    pub fn eta(&self, k: usize, i: usize, c: &CMat) -> Result<CMat> {
        let link = self.user_link_checked(k, i)?;
        check_square(c, link.rows(), "eta argument")?;
        require_hermitian(c, "eta argument")?;
        Ok(link.eta(c))
    }

    /// `E[R̃ C R̃†]` for the user link `(k, i)`.
    pub fn eta_tilde(&self, k: usize, i: usize, c: &CMat) -> Result<CMat> {
        let link = self.user_link_checked(k, i)?;
        check_square(c, link.cols(), "eta_tilde argument")?;
        require_hermitian(c, "eta_tilde argument")?;
        Ok(link.eta_tilde(c))
    }

    /// `E[F̃_k† D F̃_k]`, `k ≥ 1`.
    pub fn zeta(&self, k: usize, d: &CMat) -> Result<CMat> {
        let link = self.panel_link_checked(k)?;
        check_square(d, link.rows(), "zeta argument")?;
        require_hermitian(d, "zeta argument")?;
        Ok(link.eta(d))
    }

    /// `E[F̃_k D F̃_k†]`, `k ≥ 1`.
    pub fn zeta_tilde(&self, k: usize, d: &CMat) -> Result<CMat> {
        let link = self.panel_link_checked(k)?;
        check_square(d, link.cols(), "zeta_tilde argument")?;
        require_hermitian(d, "zeta_tilde argument")?;
        Ok(link.eta_tilde(d))
    }

    /// True when every BS→panel link has no scattered part.
    pub fn bs_ris_deterministic(&self) -> bool {
        self.bs_ris.iter().all(Link::is_deterministic)
    }

    pub fn is_deterministic(&self) -> bool {
        self.bs_ris_deterministic()
            && self.direct.iter().all(Link::is_deterministic)
            && self.ris_user.iter().flatten().all(Link::is_deterministic)
    }

    /// Copy with user roles exchanged.
    pub fn swapped(&self) -> ChannelStats {
        ChannelStats {
            tx: self.tx,
            rx: [self.rx[1], self.rx[0]],
            bs_ris: self.bs_ris.clone(),
            direct: [self.direct[1].clone(), self.direct[0].clone()],
            ris_user: self
                .ris_user
                .iter()
                .map(|p| [p[1].clone(), p[0].clone()])
                .collect(),
        }
    }

    /// Copy keeping only the first `k` panels.
    pub fn truncated(&self, k: usize) -> ChannelStats {
        ChannelStats {
            tx: self.tx,
            rx: self.rx,
            bs_ris: self.bs_ris[..k].to_vec(),
            direct: self.direct.clone(),
            ris_user: self.ris_user[..k].to_vec(),
        }
    }

    /// Copy with every BS→panel scattered part removed.
    pub fn with_deterministic_bs_ris(&self) -> ChannelStats {
        let mut out = self.clone();
        for f in &mut out.bs_ris {
            f.profile.fill(0.0);
        }
        out
    }

    /// Copy in which the composite channels of both users are scaled by `c`.
    pub fn scaled(&self, c: f64) -> ChannelStats {
        let mut out = self.clone();
        for l in out
            .direct
            .iter_mut()
            .chain(out.ris_user.iter_mut().flatten())
        {
            l.scale_amplitude(c);
        }
        out
    }

    /// Statistics of the pair `(H_a, Ĥ_b)` where user `b`'s channel receives
    /// `T − R_b` extra rows `Δ [I 0]` on the direct link and zero rows on the
    /// reflected links.
    pub fn augmented(&self, b: usize, delta: f64) -> Result<ChannelStats> {
        let t = self.tx;
        let rb = self.rx[b];
        if b > 1 || rb >= t {
            return Err(Error::Contract(format!(
                "augmentation needs R_b < T, got R_b = {rb}, T = {t}"
            )));
        }
        let extra = t - rb;
        let mut ihat = zeros(extra, t);
        for j in 0..extra {
            ihat[[j, j]] = C64::new(delta, 0.0);
        }
        let mut out = self.clone();
        out.rx[b] = t;
        out.direct[b] = self.direct[b].pad_rows(&ihat)?;
        for (k, pair) in out.ris_user.iter_mut().enumerate() {
            let l = self.bs_ris[k].rows();
            pair[b] = self.ris_user[k][b].pad_rows(&zeros(extra, l))?;
        }
        Ok(out)
    }
}

/// Appends `Δ [I_{T−R} 0]` below a sampled `R × T` channel.
pub fn augment_rows(h: &CMat, delta: f64) -> Result<CMat> {
    let (r, t) = h.dim();
    if r >= t {
        return Err(Error::Contract(format!(
            "augmentation needs R < T, got {r} x {t}"
        )));
    }
    let mut out = zeros(t, t);
    out.slice_mut(s![..r, ..]).assign(h);
    for j in 0..t - r {
        out[[r + j, j]] = C64::new(delta, 0.0);
    }
    Ok(out)
}

fn check_square(c: &CMat, n: usize, what: &str) -> Result<()> {
    if c.dim() != (n, n) {
        return Err(Error::Dimension(format!(
            "{what} is {:?}, expected {n}x{n}",
            c.dim()
        )));
    }
    Ok(())
}
