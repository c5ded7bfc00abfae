use super::realization::check_theta;
use super::stats::ChannelStats;
use super::theta::ThetaState;
use crate::error::{Error, Result};
use crate::linalg::{adj, conj_diag, eye, trace, CMat};

/// `E[Θ F F† Θ†]` for panel `k` (0-based) and side `i`.
fn reflected_input(stats: &ChannelStats, theta: &ThetaState, k: usize, i: usize) -> CMat {
    let f = &stats.bs_ris[k];
    let second = f.los.dot(&adj(&f.los)) + f.eta_tilde(&eye(stats.tx));
    conj_diag(theta.panel(k, i), &second)
}

/// `E Tr(R_{k,i} Θ_{k,i} F_k (·)†)` for panel `k` (0-based).
pub fn expected_panel_gain(stats: &ChannelStats, theta: &ThetaState, k: usize, i: usize) -> f64 {
    let x = reflected_input(stats, theta, k, i);
    let r = &stats.ris_user[k][i];
    let los = trace(&r.los.dot(&x).dot(&adj(&r.los))).re;
    los + trace(&r.eta_tilde(&x)).re
}

pub fn expected_direct_gain(stats: &ChannelStats, i: usize) -> f64 {
    let d = &stats.direct[i];
    d.los_energy() + d.scatter_energy()
}

/// `E Tr(H_i H_i†)`, including the coherent sum of the LoS paths.
pub fn expected_channel_energy(stats: &ChannelStats, theta: &ThetaState, i: usize) -> f64 {
    let mut mean = stats.direct[i].los.clone();
    let mut fluct = stats.direct[i].scatter_energy();
    for k in 0..stats.num_panels() {
        let r = &stats.ris_user[k][i];
        let f = &stats.bs_ris[k];
        let path = crate::linalg::scale_cols(&r.los, theta.panel(k, i)).dot(&f.los);
        let coherent: f64 = path.iter().map(|v| v.norm_sqr()).sum();
        fluct += expected_panel_gain(stats, theta, k, i) - coherent;
        mean += &path;
    }
    mean.iter().map(|v| v.norm_sqr()).sum::<f64>() + fluct
}

/// Rescales both direct links so that their expected gain equals the mean
/// expected gain of the reflected paths.
pub fn normalize_direct_gain(stats: &ChannelStats, theta: &ThetaState) -> Result<ChannelStats> {
    check_theta(stats, theta)?;
    let k = stats.num_panels();
    if k == 0 {
        return Err(Error::Degenerate(
            "no reflected paths to normalize against".into(),
        ));
    }
    let mut out = stats.clone();
    for i in 0..2 {
        let target = (0..k)
            .map(|p| expected_panel_gain(stats, theta, p, i))
            .sum::<f64>()
            / k as f64;
        let current = expected_direct_gain(stats, i);
        if !(target > 0.0) || !(current > 0.0) {
            return Err(Error::Degenerate(format!(
                "user {}: reflected gain {target:.3e}, direct gain {current:.3e}",
                i + 1
            )));
        }
        out.direct[i].scale_amplitude((target / current).sqrt());
    }
    Ok(out)
}
