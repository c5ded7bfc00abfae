use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::stats::ChannelStats;
use super::theta::ThetaState;
use crate::error::{Error, Result};
use crate::linalg::{fro, scale_cols, CMat};

/// One draw of every link together with the composite user channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub bs_ris: Vec<CMat>,
    pub direct: [CMat; 2],
    pub ris_user: Vec<[CMat; 2]>,
    pub h: [CMat; 2],
}

impl ChannelRealization {
    /// Assembles `H_i = R_{0,i} + Σ_k R_{k,i} Θ_{k,i} F_k`.
    pub fn assemble(
        bs_ris: Vec<CMat>,
        direct: [CMat; 2],
        ris_user: Vec<[CMat; 2]>,
        theta: &ThetaState,
    ) -> ChannelRealization {
        let h = [0, 1].map(|i| composite(&bs_ris, &direct[i], &ris_user, theta, i));
        ChannelRealization {
            bs_ris,
            direct,
            ris_user,
            h,
        }
    }

    /// Largest Frobenius deviation between the stored and recomputed composites.
    pub fn assembly_defect(&self, theta: &ThetaState) -> f64 {
        (0..2)
            .map(|i| {
                fro(&(&self.h[i]
                    - &composite(&self.bs_ris, &self.direct[i], &self.ris_user, theta, i)))
            })
            .fold(0.0, f64::max)
    }
}

fn composite(
    bs_ris: &[CMat],
    direct: &CMat,
    ris_user: &[[CMat; 2]],
    theta: &ThetaState,
    i: usize,
) -> CMat {
    let mut h = direct.clone();
    for (k, f) in bs_ris.iter().enumerate() {
        h += &scale_cols(&ris_user[k][i], theta.panel(k, i)).dot(f);
    }
    h
}

/// Draws every link of `stats` from `rng`: all BS→panel links first, then the
/// direct links, then the panel→user links panel by panel.
pub fn sample_with<R: Rng + ?Sized>(
    stats: &ChannelStats,
    theta: &ThetaState,
    rng: &mut R,
) -> ChannelRealization {
    let bs_ris: Vec<CMat> = stats.bs_ris.iter().map(|l| l.sample(rng)).collect();
    let direct = [stats.direct[0].sample(rng), stats.direct[1].sample(rng)];
    let ris_user: Vec<[CMat; 2]> = stats
        .ris_user
        .iter()
        .map(|p| [p[0].sample(rng), p[1].sample(rng)])
        .collect();
    ChannelRealization::assemble(bs_ris, direct, ris_user, theta)
}

pub fn sample_realization(
    stats: &ChannelStats,
    theta: &ThetaState,
    seed: u64,
) -> Result<ChannelRealization> {
    stats.validate()?;
    check_theta(stats, theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_with(stats, theta, &mut rng))
}

pub fn check_theta(stats: &ChannelStats, theta: &ThetaState) -> Result<()> {
    if theta.panels() != stats.panel_sizes().as_slice() {
        return Err(Error::Config(format!(
            "coefficient panels {:?} do not match channel panels {:?}",
            theta.panels(),
            stats.panel_sizes()
        )));
    }
    theta.validate()
}
