use std::f64::consts::{PI, TAU};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SystemConfig;
use super::link::Link;
use super::stats::ChannelStats;
use crate::error::Result;
use crate::linalg::{random_unitary, CMat, CVec, C64};

/// Inputs for generating frozen channel statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    /// LoS energy over expected scattered energy, per link.
    pub rician_factor: f64,
    /// UPA element spacing in wavelengths.
    pub element_spacing: f64,
    /// Azimuth range (radians) for departure and arrival angles.
    pub azimuth: [f64; 2],
    /// Elevation range (radians) for departure and arrival angles.
    pub elevation: [f64; 2],
    /// Drop the scattered part of every BS→panel link.
    pub deterministic_bs_ris: bool,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            rician_factor: 1.0,
            element_spacing: 0.5,
            azimuth: [-PI, PI],
            elevation: [0.0, 0.5 * PI],
            deterministic_bs_ris: false,
        }
    }
}

/// Rows and columns of the most square planar grid with `n` elements.
pub fn upa_shape(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

/// Unit-modulus UPA response towards azimuth `az` and elevation `el`.
pub fn upa_steering(n: usize, spacing: f64, az: f64, el: f64) -> CVec {
    let (_, cols) = upa_shape(n);
    let ux = el.sin() * az.cos();
    let uy = el.sin() * az.sin();
    (0..n)
        .map(|e| {
            let (x, y) = ((e / cols) as f64, (e % cols) as f64);
            C64::from_polar(1.0, TAU * spacing * (x * ux + y * uy))
        })
        .collect()
}

fn uniform_in<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

/// Draws one link: Haar bases, uniform(0,1) profile, and a rank-one UPA LoS
/// scaled to `rician_factor` times the expected scattered energy.
fn random_link<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    var: f64,
    p: &ScenarioParams,
    rng: &mut R,
) -> Link {
    let left = random_unitary(rows, rng);
    let right = random_unitary(cols, rng);
    let profile = Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>());
    let arrival = upa_steering(
        rows,
        p.element_spacing,
        uniform_in(p.azimuth, rng),
        uniform_in(p.elevation, rng),
    );
    let departure = upa_steering(
        cols,
        p.element_spacing,
        uniform_in(p.azimuth, rng),
        uniform_in(p.elevation, rng),
    );
    let scatter = var * profile.iter().map(|x| x * x).sum::<f64>();
    let amp = (p.rician_factor * scatter / (rows * cols) as f64).sqrt();
    let los = CMat::from_shape_fn((rows, cols), |(a, b)| {
        arrival[a] * departure[b].conj() * amp
    });
    Link {
        los,
        left,
        right,
        profile,
        var,
    }
}

/// Frozen statistics for `cfg`, fully determined by `seed`. Draw order: all
/// BS→panel links, the two direct links, then panel→user links panel by panel.
pub fn generate_stats(
    cfg: &SystemConfig,
    params: &ScenarioParams,
    seed: u64,
) -> Result<ChannelStats> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.tx;
    let mut bs_ris: Vec<Link> = cfg
        .panels
        .iter()
        .map(|&l| random_link(l, t, 1.0 / t as f64, params, &mut rng))
        .collect();
    let direct =
        [0, 1].map(|i| random_link(cfg.rx[i], t, 1.0 / cfg.rx[i] as f64, params, &mut rng));
    let ris_user: Vec<[Link; 2]> = cfg
        .panels
        .iter()
        .map(|&l| [0, 1].map(|i| random_link(cfg.rx[i], l, 1.0 / l as f64, params, &mut rng)))
        .collect();
    if params.deterministic_bs_ris {
        for f in &mut bs_ris {
            f.profile.fill(0.0);
        }
    }
    let stats = ChannelStats {
        tx: t,
        rx: cfg.rx,
        bs_ris,
        direct,
        ris_user,
    };
    stats.validate()?;
    Ok(stats)
}
