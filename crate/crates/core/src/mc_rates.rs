//! Exact per-realization rates and their Monte-Carlo averages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsvd::{gsvd, GsvdFactors};
use crate::linalg::pairwise_sum;
use crate::model::{
    check_theta, expected_channel_energy, sample_with, ChannelStats, Regime, SystemConfig,
    ThetaState,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateUnit {
    #[default]
    Bits,
    Nats,
}

impl RateUnit {
    /// Converts a value in nats.
    pub fn from_nats(self, x: f64) -> f64 {
        match self {
            RateUnit::Bits => x / std::f64::consts::LN_2,
            RateUnit::Nats => x,
        }
    }
}

/// Which per-subchannel rate expressions to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatePath {
    /// Printed expressions: user 2's interference term carries `κ1` alone and
    /// private terms are counted as `T − R_i` (clamped at zero).
    #[default]
    Verbatim,
    /// SINRs derived from `Σ_i` and the SIC model; private terms use the
    /// GSVD private counts.
    FirstPrinciples,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateOptions {
    pub unit: RateUnit,
    pub path: RatePath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub i1: f64,
    pub i2: f64,
    pub regime: Regime,
    pub s: usize,
    /// Power factor; the trial mean for Monte-Carlo reports.
    pub t: f64,
    /// Ratios of the single realization, empty for Monte-Carlo reports.
    pub mu: Vec<f64>,
    pub n_trials: usize,
    pub seed: Option<u64>,
    pub stderr: [f64; 2],
    pub failed: usize,
}

impl RateReport {
    pub fn sum(&self) -> f64 {
        self.i1 + self.i2
    }
}

/// Per-trial record for optional CSV output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub seed: u64,
    pub regime: Regime,
    pub i1: f64,
    pub i2: f64,
    pub t: f64,
}

/// Coupled-subchannel rates in nats from the ratios `μ`, as printed.
pub fn coupled_rates_verbatim(mu: &[f64], cfg: &SystemConfig, t: f64) -> (f64, f64) {
    let [k1, k2] = cfg.kappa;
    let snr = cfg.power / (t * cfg.sigma0_sq);
    let i1: Vec<f64> = mu
        .iter()
        .map(|&m| (m / (1.0 + m) * k1 * cfg.rho[0] * snr).ln_1p())
        .collect();
    let i2: Vec<f64> = mu
        .iter()
        .map(|&m| (k2 * cfg.power / (k1 + (1.0 + m) * t * cfg.sigma0_sq)).ln_1p())
        .collect();
    (pairwise_sum(&i1), pairwise_sum(&i2))
}

/// Coupled-subchannel rates in nats from the cosines `c_j` and sines `s_j`.
pub fn coupled_rates_sic(c: &[f64], s: &[f64], cfg: &SystemConfig, t: f64) -> (f64, f64) {
    let [k1, k2] = cfg.kappa;
    let [r1, r2] = cfg.rho;
    let noise = t * cfg.sigma0_sq;
    let p = cfg.power;
    let i1: Vec<f64> = c
        .iter()
        .map(|&x| (k1 * r1 * p * x * x / noise).ln_1p())
        .collect();
    let i2: Vec<f64> = s
        .iter()
        .map(|&x| {
            let g = r2 * p * x * x;
            (k2 * g / (k1 * g + noise)).ln_1p()
        })
        .collect();
    (pairwise_sum(&i1), pairwise_sum(&i2))
}

/// Private-subchannel counts used by `path`.
pub fn private_counts(cfg: &SystemConfig, path: RatePath) -> [usize; 2] {
    let t = cfg.tx;
    let [r1, r2] = cfg.rx;
    match (path, cfg.regime()) {
        (_, Regime::Coupled) => [0, 0],
        (RatePath::Verbatim, _) => [t.saturating_sub(r1), t.saturating_sub(r2)],
        (RatePath::FirstPrinciples, _) => [r1.min(t - r2.min(t)), r2.min(t - r1.min(t))],
    }
}

/// Private-subchannel rates in nats.
pub fn private_rates(cfg: &SystemConfig, t: f64, path: RatePath) -> (f64, f64) {
    let [n1, n2] = private_counts(cfg, path);
    let snr = cfg.power / (t * cfg.sigma0_sq);
    (
        n1 as f64 * (cfg.rho[0] * snr).ln_1p(),
        n2 as f64 * (cfg.rho[1] * snr).ln_1p(),
    )
}

fn rates_nats(f: &GsvdFactors, cfg: &SystemConfig, t: f64, path: RatePath) -> (f64, f64) {
    let (c1, c2) = match path {
        RatePath::Verbatim => coupled_rates_verbatim(&f.mu, cfg, t),
        RatePath::FirstPrinciples => coupled_rates_sic(&f.c, &f.s, cfg, t),
    };
    let (p1, p2) = private_rates(cfg, t, path);
    (c1 + p1, c2 + p2)
}

fn check_factors(f: &GsvdFactors, cfg: &SystemConfig) -> Result<()> {
    let (r1, t) = f.sigma1.dim();
    if f.regime != cfg.regime()
        || t != cfg.tx
        || r1 != cfg.rx[0]
        || f.sigma2.nrows() != cfg.rx[1]
        || f.coupled() != cfg.s()
    {
        return Err(Error::Contract(format!(
            "decomposition ({:?}, {} coupled) does not match configuration ({:?}, {} coupled)",
            f.regime,
            f.coupled(),
            cfg.regime(),
            cfg.s()
        )));
    }
    Ok(())
}

/// Rates of one realization given its decomposition and power factor.
pub fn rates_one_shot(
    f: &GsvdFactors,
    cfg: &SystemConfig,
    t: f64,
    opts: RateOptions,
) -> Result<RateReport> {
    cfg.validate()?;
    check_factors(f, cfg)?;
    if !(t > 0.0) {
        return Err(Error::Contract(format!(
            "power factor must be positive, got {t}"
        )));
    }
    let (i1, i2) = rates_nats(f, cfg, t, opts.path);
    Ok(RateReport {
        i1: opts.unit.from_nats(i1),
        i2: opts.unit.from_nats(i2),
        regime: f.regime,
        s: f.coupled(),
        t,
        mu: f.mu.clone(),
        n_trials: 1,
        seed: None,
        stderr: [0.0; 2],
        failed: 0,
    })
}

/// True when user 1 has the larger expected weighted channel energy.
pub fn check_sic_order(stats: &ChannelStats, theta: &ThetaState, cfg: &SystemConfig) -> bool {
    let e1 = cfg.rho[0] * expected_channel_energy(stats, theta, 0);
    let e2 = cfg.rho[1] * expected_channel_energy(stats, theta, 1);
    e1 > e2
}

/// Monte-Carlo averages for several configurations sharing one set of
/// channel draws (e.g. an SNR grid).
#[derive(Clone, Debug)]
pub struct McSweep {
    pub reports: Vec<RateReport>,
    /// `trials[c]` holds the per-trial records of configuration `c`.
    pub trials: Vec<Vec<TrialRecord>>,
}

/// Maximum tolerated fraction of failed trials.
pub const MAX_FAILURE_RATE: f64 = 0.01;

/// Generator of trial `trial`: the base seed with the trial index as stream.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

pub fn mc_sweep(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfgs: &[SystemConfig],
    n_trials: usize,
    seed: u64,
    opts: RateOptions,
) -> Result<McSweep> {
    if n_trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    stats.validate()?;
    check_theta(stats, theta)?;
    for cfg in cfgs {
        cfg.validate()?;
        if cfg.tx != stats.tx || cfg.rx != stats.rx || cfg.panels != stats.panel_sizes() {
            return Err(Error::Config(
                "configuration dimensions differ from channel statistics".into(),
            ));
        }
    }
    let per_trial: Vec<Option<(f64, Regime, Vec<(f64, f64)>)>> = (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial);
            let real = sample_with(stats, theta, &mut rng);
            match gsvd(&real.h[0], &real.h[1]) {
                Ok(f) => {
                    let t = f.power_factor();
                    let rates = cfgs
                        .iter()
                        .map(|c| rates_nats(&f, c, t, opts.path))
                        .collect();
                    Some((t, f.regime, rates))
                }
                Err(e) => {
                    log::debug!("trial {trial} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let failed = per_trial.iter().filter(|r| r.is_none()).count();
    if failed as f64 > MAX_FAILURE_RATE * n_trials as f64 {
        return Err(Error::TrialFailures {
            failed,
            total: n_trials,
        });
    }
    if failed > 0 {
        log::warn!("{failed} of {n_trials} trials failed and were skipped");
    }
    let ok: Vec<(u64, &(f64, Regime, Vec<(f64, f64)>))> = per_trial
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().map(|x| (i as u64, x)))
        .collect();
    let n = ok.len() as f64;
    let ts: Vec<f64> = ok.iter().map(|(_, r)| r.0).collect();
    let t_mean = pairwise_sum(&ts) / n;

    let mut reports = Vec::with_capacity(cfgs.len());
    let mut trials = Vec::with_capacity(cfgs.len());
    for (c, cfg) in cfgs.iter().enumerate() {
        let a: Vec<f64> = ok
            .iter()
            .map(|(_, r)| opts.unit.from_nats(r.2[c].0))
            .collect();
        let b: Vec<f64> = ok
            .iter()
            .map(|(_, r)| opts.unit.from_nats(r.2[c].1))
            .collect();
        let (m1, e1) = mean_stderr(&a);
        let (m2, e2) = mean_stderr(&b);
        reports.push(RateReport {
            i1: m1,
            i2: m2,
            regime: cfg.regime(),
            s: cfg.s(),
            t: t_mean,
            mu: vec![],
            n_trials,
            seed: Some(seed),
            stderr: [e1, e2],
            failed,
        });
        trials.push(
            ok.iter()
                .zip(a.iter().zip(b.iter()))
                .map(|((trial, r), (&i1, &i2))| TrialRecord {
                    trial: *trial,
                    seed,
                    regime: r.1,
                    i1,
                    i2,
                    t: r.0,
                })
                .collect(),
        );
    }
    Ok(McSweep { reports, trials })
}

pub fn mc_average(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    n_trials: usize,
    seed: u64,
    opts: RateOptions,
) -> Result<RateReport> {
    let mut out = mc_sweep(
        stats,
        theta,
        std::slice::from_ref(cfg),
        n_trials,
        seed,
        opts,
    )?;
    Ok(out.reports.remove(0))
}

/// Mean and standard error with pairwise accumulation.
pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = pairwise_sum(x) / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = x.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::complex_gaussian;
    use crate::model::{generate_stats, ScenarioParams};
    use proptest::prelude::*;

    fn factors(r1: usize, r2: usize, t: usize, seed: u64) -> (GsvdFactors, SystemConfig) {
        let mut rng = trial_rng(seed, 0);
        let h1 = complex_gaussian(r1, t, 1.0, &mut rng);
        let h2 = complex_gaussian(r2, t, 1.0, &mut rng);
        (
            gsvd(&h1, &h2).unwrap(),
            SystemConfig::new(t, [r1, r2], vec![]),
        )
    }

    fn nats() -> RateOptions {
        RateOptions {
            unit: RateUnit::Nats,
            path: RatePath::Verbatim,
        }
    }

    #[test]
    fn large_ratios_reach_interference_free_limit() {
        let cfg = SystemConfig::new(4, [4, 4], vec![]).with_snr_db(10.0);
        let mu = vec![1e12; 4];
        let (i1, _) = coupled_rates_verbatim(&mu, &cfg, 2.0);
        let limit = 4.0 * (cfg.kappa[0] * cfg.rho[0] * cfg.power / (2.0 * cfg.sigma0_sq)).ln_1p();
        assert!((i1 - limit).abs() < 1e-9);
    }

    #[test]
    fn vanishing_power_gives_zero_rates() {
        let (f, mut cfg) = factors(5, 5, 4, 1);
        cfg.power = 1e-300;
        let r = rates_one_shot(&f, &cfg, f.power_factor(), nats()).unwrap();
        assert!(r.i1.abs() < 1e-250 && r.i2.abs() < 1e-250);
    }

    #[test]
    fn regime_mismatch_is_a_contract_violation() {
        let (f, _) = factors(5, 5, 4, 2);
        let cfg = SystemConfig::new(4, [3, 5], vec![]);
        assert!(matches!(
            rates_one_shot(&f, &cfg, 1.0, nats()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sigma_entries_reproduce_ratio_rates() {
        for (r1, r2, t) in [(6, 5, 4), (5, 5, 8), (4, 6, 7)] {
            let (f, cfg) = factors(r1, r2, t, 3);
            let cfg = cfg.with_snr_db(7.0).with_rho([1.0, 1.0]);
            let t = f.power_factor();
            // With ρ2 = 1 both paths agree on the coupled part.
            let a = coupled_rates_verbatim(&f.mu, &cfg, t);
            let b = coupled_rates_sic(&f.c, &f.s, &cfg, t);
            assert!((a.0 - b.0).abs() < 1e-9 * a.0.max(1.0));
            assert!((a.1 - b.1).abs() < 1e-9 * a.1.max(1.0));
        }
    }

    #[test]
    fn paths_differ_when_user_two_gain_is_not_one() {
        let (f, cfg) = factors(6, 5, 4, 4);
        let cfg = cfg.with_snr_db(10.0).with_rho([5.0, 3.0]);
        let t = f.power_factor();
        let a = coupled_rates_verbatim(&f.mu, &cfg, t);
        let b = coupled_rates_sic(&f.c, &f.s, &cfg, t);
        assert!((a.0 - b.0).abs() < 1e-9 * a.0);
        assert!((a.1 - b.1).abs() > 1e-3);
    }

    #[test]
    fn private_boundary_continuity() {
        // At T = R1 + R2 the mixed expressions with no coupled terms equal the
        // private ones.
        let cfg = SystemConfig::new(7, [3, 4], vec![]).with_snr_db(5.0);
        let (f, _) = factors(3, 4, 7, 5);
        let t = f.power_factor();
        let private = rates_one_shot(&f, &cfg, t, nats()).unwrap();
        let (c1, c2) = coupled_rates_verbatim(&[], &cfg, t);
        let snr = cfg.power / (t * cfg.sigma0_sq);
        let mixed1 = c1 + 4.0 * (cfg.rho[0] * snr).ln_1p();
        let mixed2 = c2 + 3.0 * (cfg.rho[1] * snr).ln_1p();
        assert!((private.i1 - mixed1).abs() < 1e-12 && (private.i2 - mixed2).abs() < 1e-12);
    }

    #[test]
    fn private_counts_by_path() {
        let cfg = SystemConfig::new(6, [8, 4], vec![]);
        assert_eq!(private_counts(&cfg, RatePath::Verbatim), [0, 2]);
        assert_eq!(private_counts(&cfg, RatePath::FirstPrinciples), [2, 0]);
        let cfg = SystemConfig::new(16, [10, 10], vec![]);
        assert_eq!(private_counts(&cfg, RatePath::Verbatim), [6, 6]);
        assert_eq!(private_counts(&cfg, RatePath::FirstPrinciples), [6, 6]);
    }

    fn scenario(k: usize, seed: u64) -> (ChannelStats, ThetaState, SystemConfig) {
        let cfg = SystemConfig::new(4, [5, 5], vec![3; k]).with_snr_db(10.0);
        let stats = generate_stats(&cfg, &ScenarioParams::default(), seed).unwrap();
        let theta = ThetaState::uniform_split(cfg.panels.clone());
        (stats, theta, cfg)
    }

    #[test]
    fn single_trial_equals_one_shot() {
        let (stats, theta, cfg) = scenario(2, 6);
        let r = mc_average(&stats, &theta, &cfg, 1, 42, nats()).unwrap();
        let mut rng = trial_rng(42, 0);
        let real = sample_with(&stats, &theta, &mut rng);
        let f = gsvd(&real.h[0], &real.h[1]).unwrap();
        let one = rates_one_shot(&f, &cfg, f.power_factor(), nats()).unwrap();
        assert_eq!(r.i1, one.i1);
        assert_eq!(r.i2, one.i2);
    }

    #[test]
    fn deterministic_channels_have_zero_stderr() {
        let (mut stats, theta, cfg) = scenario(1, 7);
        for l in stats
            .bs_ris
            .iter_mut()
            .chain(stats.direct.iter_mut())
            .chain(stats.ris_user.iter_mut().flatten())
        {
            l.profile.fill(0.0);
        }
        // Rank-one LoS alone is singular; add a full-rank deterministic part.
        for (i, d) in stats.direct.iter_mut().enumerate() {
            for j in 0..4 {
                d.los[[j + i, j]] += crate::linalg::C64::new(1.0, 0.0);
            }
        }
        let r = mc_average(&stats, &theta, &cfg, 16, 3, nats()).unwrap();
        assert!(r.stderr[0] < 1e-12 && r.stderr[1] < 1e-12);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let (stats, theta, cfg) = scenario(1, 8);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mc_average(&stats, &theta, &cfg, 64, 5, nats()).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn stderr_shrinks_with_trials() {
        let (stats, theta, cfg) = scenario(1, 9);
        let a = mc_average(&stats, &theta, &cfg, 200, 1, nats()).unwrap();
        let b = mc_average(&stats, &theta, &cfg, 3200, 1, nats()).unwrap();
        let ratio = a.stderr[0] / b.stderr[0];
        assert!((ratio - 4.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn sic_order_follows_gains() {
        let (stats, theta, cfg) = scenario(2, 10);
        let mut same = stats.clone();
        same.direct[1] = same.direct[0].clone();
        for p in &mut same.ris_user {
            p[1] = p[0].clone();
        }
        assert!(check_sic_order(&same, &theta, &cfg));
        assert!(!check_sic_order(
            &same,
            &theta,
            &cfg.clone().with_rho([1.0, 5.0])
        ));
    }

    #[test]
    fn zero_trials_is_a_config_error() {
        let (stats, theta, cfg) = scenario(1, 11);
        assert!(matches!(
            mc_average(&stats, &theta, &cfg, 0, 1, nats()),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn user_one_rate_is_monotone(seed in any::<u64>(), snr in -10.0f64..30.0, k1 in 0.0f64..0.9) {
            let (f, cfg) = factors(5, 4, 4, seed);
            let cfg = cfg.with_snr_db(snr).with_kappa1(k1);
            let t = f.power_factor();
            for path in [RatePath::Verbatim, RatePath::FirstPrinciples] {
                let o = RateOptions { unit: RateUnit::Nats, path };
                let base = rates_one_shot(&f, &cfg, t, o).unwrap();
                let mut more_power = cfg.clone();
                more_power.power *= 1.5;
                let more_kappa = cfg.clone().with_kappa1(k1 + 0.1);
                prop_assert!(rates_one_shot(&f, &more_power, t, o).unwrap().i1 >= base.i1);
                prop_assert!(rates_one_shot(&f, &more_kappa, t, o).unwrap().i1 >= base.i1);
                prop_assert!(base.i1 >= 0.0 && base.i2 >= 0.0);
            }
        }
    }
}
