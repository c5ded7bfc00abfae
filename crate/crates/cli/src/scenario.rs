//! Scenario documents: one TOML file per run.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use starnoma_core::freeprob::{AsymptoticOptions, QuadratureOptions, SolverOptions};
use starnoma_core::mc_rates::{RateOptions, RatePath, RateUnit};
use starnoma_core::pgam::PgamOptions;
use starnoma_core::{
    generate_stats, normalize_direct_gain, ChannelStats, ScenarioParams, SystemConfig, ThetaState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub system: SystemSection,
    #[serde(default)]
    pub statistics: StatisticsSection,
    #[serde(default)]
    pub theta: ThetaSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub quadrature: QuadratureOptions,
    #[serde(default)]
    pub pgam: PgamSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub tx: usize,
    pub rx: [usize; 2],
    /// Elements per panel.
    pub panels: Vec<usize>,
    /// `1/σ²` in dB.
    #[serde(default = "default_snr_db")]
    pub snr_db: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default = "default_kappa1")]
    pub kappa1: f64,
    #[serde(default = "default_rho")]
    pub rho: [f64; 2],
}

fn default_snr_db() -> f64 {
    10.0
}

fn default_power() -> f64 {
    1.0
}

fn default_kappa1() -> f64 {
    0.1
}

fn default_rho() -> [f64; 2] {
    [5.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatisticsSection {
    pub seed: u64,
    pub rician_factor: f64,
    pub element_spacing: f64,
    pub azimuth: [f64; 2],
    pub elevation: [f64; 2],
    pub deterministic_bs_ris: bool,
    /// Match each direct link to the mean reflected gain.
    pub normalize_direct_gain: bool,
}

impl Default for StatisticsSection {
    fn default() -> Self {
        let p = ScenarioParams::default();
        StatisticsSection {
            seed: 1,
            rician_factor: p.rician_factor,
            element_spacing: p.element_spacing,
            azimuth: p.azimuth,
            elevation: p.elevation,
            deterministic_bs_ris: p.deterministic_bs_ris,
            normalize_direct_gain: true,
        }
    }
}

impl StatisticsSection {
    pub fn params(&self) -> ScenarioParams {
        ScenarioParams {
            rician_factor: self.rician_factor,
            element_spacing: self.element_spacing,
            azimuth: self.azimuth,
            elevation: self.elevation,
            deterministic_bs_ris: self.deterministic_bs_ris,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaInit {
    /// Uniform phases, equal transmission/reflection split.
    #[default]
    RandomPhases,
    /// Uniform phases and uniform splits.
    Random,
    /// Zero phases, equal split.
    UniformSplit,
    /// Phases and user-1 splits listed in the document.
    Explicit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThetaSection {
    pub init: ThetaInit,
    /// Seed of the random initializations; the run seed when absent.
    pub seed: Option<u64>,
    pub phases1: Vec<f64>,
    pub phases2: Vec<f64>,
    /// User-1 power fraction per element.
    pub betas: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Mc,
    Prop1,
    Closed,
    Pgam,
    Compare,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Mc => "mc",
            Pipeline::Prop1 => "prop1",
            Pipeline::Closed => "closed",
            Pipeline::Pgam => "pgam",
            Pipeline::Compare => "compare",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub pipeline: Pipeline,
    pub trials: usize,
    /// Seed of the Monte-Carlo trials and of random coefficient draws.
    pub seed: u64,
    pub unit: RateUnit,
    pub path: RatePath,
    pub fold_power: bool,
    pub delta: f64,
    /// Also write one row per Monte-Carlo trial.
    pub per_trial: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            pipeline: Pipeline::Compare,
            trials: 10_000,
            seed: 7,
            unit: RateUnit::Bits,
            path: RatePath::Verbatim,
            fold_power: false,
            delta: starnoma_core::freeprob::DEFAULT_DELTA,
            per_trial: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// `1/σ²` in dB.
    Snr,
    /// Number of panels, keeping the first `K` of `system.panels`.
    Panels,
    /// Transmit antennas.
    Tx,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr_db",
            SweepAxis::Panels => "panels",
            SweepAxis::Tx => "tx",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Ascent settings; rate evaluation inside the ascent follows `[run]`,
/// `[solver]` and `[quadrature]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgamSection {
    pub eps: f64,
    pub max_iters: usize,
    pub shrink: f64,
    pub sufficient_increase: f64,
    pub max_backtracks: usize,
    pub initial_move: f64,
    pub freeze_power_factor: bool,
}

impl Default for PgamSection {
    fn default() -> Self {
        let d = PgamOptions::default();
        PgamSection {
            eps: d.eps,
            max_iters: d.max_iters,
            shrink: d.shrink,
            sufficient_increase: d.sufficient_increase,
            max_backtracks: d.max_backtracks,
            initial_move: d.initial_move,
            freeze_power_factor: d.freeze_power_factor,
        }
    }
}

/// Inputs of one sweep point.
pub struct Point {
    pub value: f64,
    pub cfg: SystemConfig,
    pub stats: ChannelStats,
    pub theta: ThetaState,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<(Scenario, Vec<u8>)> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let text = std::str::from_utf8(&bytes)
            .with_context(|| format!("{} is not UTF-8", path.display()))?;
        let scenario = Scenario::parse(text)
            .with_context(|| format!("parsing scenario {}", path.display()))?;
        Ok((scenario, bytes))
    }

    pub fn parse(text: &str) -> Result<Scenario> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Configuration at the nominal operating point.
    pub fn base_config(&self) -> SystemConfig {
        let s = &self.system;
        SystemConfig::new(s.tx, s.rx, s.panels.clone())
            .with_snr_db(s.snr_db)
            .with_kappa1(s.kappa1)
            .with_rho(s.rho)
            .with_power(s.power)
    }

    pub fn rate_options(&self) -> RateOptions {
        RateOptions {
            unit: self.run.unit,
            path: self.run.path,
        }
    }

    pub fn asymptotic_options(&self) -> AsymptoticOptions {
        AsymptoticOptions {
            solver: self.solver.clone(),
            quadrature: self.quadrature.clone(),
            delta: self.run.delta,
            fold_power: self.run.fold_power,
            unit: self.run.unit,
            path: self.run.path,
        }
    }

    pub fn pgam_options(&self) -> PgamOptions {
        let p = &self.pgam;
        PgamOptions {
            eps: p.eps,
            max_iters: p.max_iters,
            shrink: p.shrink,
            sufficient_increase: p.sufficient_increase,
            max_backtracks: p.max_backtracks,
            initial_move: p.initial_move,
            freeze_power_factor: p.freeze_power_factor,
            rates: self.asymptotic_options(),
        }
    }

    pub fn theta_seed(&self) -> u64 {
        self.theta.seed.unwrap_or(self.run.seed)
    }

    /// Sweep axis name and values; a run without `[sweep]` is one point on
    /// the SNR axis.
    pub fn sweep_values(&self) -> (SweepAxis, Vec<f64>) {
        match &self.sweep {
            Some(s) => (s.axis, s.values.clone()),
            None => (SweepAxis::Snr, vec![self.system.snr_db]),
        }
    }

    /// Checks everything that can be checked before any computation.
    pub fn validate(&self) -> Result<()> {
        let cfg = self.base_config();
        cfg.validate()?;
        let k_max = self.system.panels.len();
        ensure!(self.run.trials > 0, "run.trials must be at least 1");
        ensure!(
            self.run.delta > 0.0,
            "run.delta must be positive, got {}",
            self.run.delta
        );
        ensure!(
            self.quadrature.rel_tol > 0.0,
            "quadrature.rel_tol must be positive"
        );
        ensure!(
            self.solver.tolerance > 0.0 && self.solver.max_iters > 0,
            "solver.tolerance and solver.max_iters must be positive"
        );
        ensure!(
            self.solver.damping > 0.0 && self.solver.damping <= 1.0,
            "solver.damping must lie in (0, 1]"
        );
        ensure!(self.pgam.eps > 0.0, "pgam.eps must be positive");
        ensure!(
            self.pgam.shrink > 0.0 && self.pgam.shrink < 1.0,
            "pgam.shrink must lie in (0, 1)"
        );
        ensure!(
            self.pgam.initial_move > 0.0,
            "pgam.initial_move must be positive"
        );
        if let Some(s) = &self.sweep {
            ensure!(!s.values.is_empty(), "sweep.values must not be empty");
            ensure!(
                s.values.iter().all(|v| v.is_finite()),
                "sweep.values must be finite"
            );
            ensure!(
                s.values.windows(2).all(|w| w[1] > w[0]),
                "sweep.values must be strictly increasing"
            );
            match s.axis {
                SweepAxis::Snr => {}
                SweepAxis::Panels => {
                    for &v in &s.values {
                        ensure!(
                            v.fract() == 0.0 && v >= 0.0 && v as usize <= k_max,
                            "panel counts must be integers in 0..={k_max}, got {v}"
                        );
                    }
                }
                SweepAxis::Tx => {
                    for &v in &s.values {
                        ensure!(
                            v.fract() == 0.0 && v >= 1.0,
                            "transmit antenna counts must be positive integers, got {v}"
                        );
                    }
                }
            }
        }
        let (axis, values) = self.sweep_values();
        let pipeline = self.run.pipeline;
        let needs_deterministic = matches!(pipeline, Pipeline::Closed | Pipeline::Pgam);
        if needs_deterministic && !self.statistics.deterministic_bs_ris {
            bail!(
                "the {} pipeline needs statistics.deterministic_bs_ris = true",
                pipeline.name()
            );
        }
        let asymptotic = matches!(
            pipeline,
            Pipeline::Prop1 | Pipeline::Closed | Pipeline::Pgam | Pipeline::Compare
        );
        for &v in &values {
            let (tx, k) = match axis {
                SweepAxis::Tx => (v as usize, k_max),
                SweepAxis::Panels => (self.system.tx, v as usize),
                SweepAxis::Snr => (self.system.tx, k_max),
            };
            let [r1, r2] = self.system.rx;
            if asymptotic && tx >= r1 + r2 {
                bail!(
                    "the {} pipeline needs T < R1 + R2 (got T = {tx}, R1 + R2 = {})",
                    pipeline.name(),
                    r1 + r2
                );
            }
            if pipeline == Pipeline::Pgam && k == 0 {
                bail!("the pgam pipeline needs at least one panel");
            }
        }
        if self.theta.init == ThetaInit::Explicit {
            let l: usize = self.system.panels.iter().sum();
            ensure!(
                self.theta.phases1.len() == l
                    && self.theta.phases2.len() == l
                    && self.theta.betas.len() == l,
                "explicit coefficients need {l} entries in phases1, phases2 and betas"
            );
        }
        Ok(())
    }

    pub fn initial_theta(&self) -> Result<ThetaState> {
        let panels = self.system.panels.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.theta_seed());
        Ok(match self.theta.init {
            ThetaInit::RandomPhases => ThetaState::random_phases(panels, &mut rng),
            ThetaInit::Random => ThetaState::random(panels, &mut rng),
            ThetaInit::UniformSplit => ThetaState::uniform_split(panels),
            ThetaInit::Explicit => ThetaState::from_phases(
                panels,
                [&self.theta.phases1, &self.theta.phases2],
                &self.theta.betas,
            )?,
        })
    }

    fn statistics_for(&self, cfg: &SystemConfig, theta: &ThetaState) -> Result<ChannelStats> {
        let stats = generate_stats(cfg, &self.statistics.params(), self.statistics.seed)?;
        Ok(if self.statistics.normalize_direct_gain {
            normalize_direct_gain(&stats, theta)?
        } else {
            stats
        })
    }

    /// Statistics, coefficients and configuration of every sweep point.
    ///
    /// Statistics are generated once for the full panel list; panel sweeps
    /// keep the first `K` panels so that the direct links stay fixed.
    pub fn points(&self) -> Result<Vec<Point>> {
        let base = self.base_config();
        let theta = self.initial_theta()?;
        let (axis, values) = self.sweep_values();
        match axis {
            SweepAxis::Snr | SweepAxis::Panels => {
                let stats = self.statistics_for(&base, &theta)?;
                Ok(values
                    .iter()
                    .map(|&v| match axis {
                        SweepAxis::Snr => Point {
                            value: v,
                            cfg: base.clone().with_snr_db(v),
                            stats: stats.clone(),
                            theta: theta.clone(),
                        },
                        _ => {
                            let k = v as usize;
                            Point {
                                value: v,
                                cfg: base.truncated(k),
                                stats: stats.truncated(k),
                                theta: theta.truncated(k),
                            }
                        }
                    })
                    .collect())
            }
            SweepAxis::Tx => values
                .iter()
                .map(|&v| {
                    let cfg = SystemConfig {
                        tx: v as usize,
                        ..base.clone()
                    };
                    let stats = self.statistics_for(&cfg, &theta)?;
                    Ok(Point {
                        value: v,
                        cfg,
                        stats,
                        theta: theta.clone(),
                    })
                })
                .collect(),
        }
    }
}
