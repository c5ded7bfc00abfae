//! Asymptotic rates from the Cauchy transform of the ratio distribution.
//!
//! With `S G_μ(z) = Tr G11(z) − c/z` (`c` zero eigenvalues of `B`), the
//! coupled rates are integrals of two kernels:
//!
//! * `A(x) = 1/(1+x) + (1+x)⁻² G_μ(−1/(1+x))`, whose integral over `[0, a]`
//!   is `E log(1 + μa/(1+μ))`;
//! * `B(x) = −G_μ(−(1+x))`, whose integral is `E log(1 + a/(1+μ))`.
//!
//! User 1 integrates `A` over `[0, a1]`, user 2 integrates `B` over
//! `[κ1 a2, a2]`. When `R2 > R1` the spectrum is computed for the swapped
//! pair, whose ratios are `1/μ`, and the two kernels trade places.

use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::prop1::{spectrum_counts, FixedPointSolution, Prop1State, Prop1System};
use super::prop2::solve_prop2;
use super::SolverOptions;
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::mc_rates::{private_rates, RatePath, RateUnit};
use crate::model::{ChannelStats, Regime, SystemConfig, ThetaState};

/// Augmentation level for `R2 < T < R1 + R2`.
pub const DEFAULT_DELTA: f64 = 1e-4;

/// Statistics oriented so that the larger receiver is user 1, with user 2
/// augmented when it has fewer antennas than the transmitter.
#[derive(Clone, Debug)]
pub struct SpectralProblem {
    /// Configuration with the oriented antenna counts (unaugmented).
    pub dims: SystemConfig,
    pub stats: ChannelStats,
    pub theta: ThetaState,
    pub swapped: bool,
    pub augmented: bool,
    pub delta: f64,
    /// Number of coupled subchannels.
    pub s: usize,
    /// Number of zero eigenvalues of `B`.
    pub zeros_b: usize,
}

impl SpectralProblem {
    pub fn new(
        stats: &ChannelStats,
        theta: &ThetaState,
        cfg: &SystemConfig,
        delta: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        if stats.tx != cfg.tx || stats.rx != cfg.rx || stats.panel_sizes() != cfg.panels {
            return Err(Error::Dimension(
                "statistics do not match configuration".into(),
            ));
        }
        if cfg.regime() == Regime::Private {
            return Err(Error::Contract(format!(
                "no coupled subchannels for T = {} ≥ R1 + R2 = {}",
                cfg.tx,
                cfg.rx[0] + cfg.rx[1]
            )));
        }
        // Equal receivers keep the unswapped orientation.
        let swapped = cfg.rx[1] > cfg.rx[0];
        let (mut st, th, mut dims) = if swapped {
            let mut d = cfg.clone();
            d.rx = [cfg.rx[1], cfg.rx[0]];
            (stats.swapped(), theta.swapped(), d)
        } else {
            (stats.clone(), theta.clone(), cfg.clone())
        };
        let augmented = dims.tx > dims.rx[1];
        if augmented {
            if !(delta > 0.0) {
                return Err(Error::Config(format!(
                    "augmentation level must be positive, got {delta}"
                )));
            }
            st = st.augmented(1, delta)?;
        }
        dims.panels = cfg.panels.clone();
        let (s, zeros_b, _) = spectrum_counts(&dims);
        Ok(SpectralProblem {
            dims,
            stats: st,
            theta: th,
            swapped,
            augmented,
            delta,
            s,
            zeros_b,
        })
    }

    pub fn system(&self, simplified: bool) -> Result<Prop1System> {
        Prop1System::new(&self.stats, &self.theta, simplified)
    }
}

const CACHE_LIMIT: usize = 96;

/// Evaluates `S G_μ` along the real axis, warm-starting every solve from the
/// cached solution nearest in `asinh(x)`.
pub struct SpectralEvaluator {
    pub system: Prop1System,
    pub opts: SolverOptions,
    pub s: usize,
    pub zeros_b: usize,
    cache: Mutex<Vec<(f64, Prop1State)>>,
    solves: AtomicUsize,
    sweeps: AtomicUsize,
}

impl SpectralEvaluator {
    pub fn new(problem: &SpectralProblem, opts: &SolverOptions, simplified: bool) -> Result<Self> {
        Ok(SpectralEvaluator {
            system: problem.system(simplified)?,
            opts: opts.clone(),
            s: problem.s,
            zeros_b: problem.zeros_b,
            cache: Mutex::new(Vec::new()),
            solves: AtomicUsize::new(0),
            sweeps: AtomicUsize::new(0),
        })
    }

    /// Number of solves and total fixed-point sweeps so far.
    pub fn work(&self) -> (usize, usize) {
        (
            self.solves.load(Ordering::Relaxed),
            self.sweeps.load(Ordering::Relaxed),
        )
    }

    fn nearest(&self, x: f64) -> Option<Prop1State> {
        let cache = self.cache.lock().unwrap();
        let key = x.asinh();
        cache
            .iter()
            .min_by(|a, b| {
                (a.0.asinh() - key)
                    .abs()
                    .total_cmp(&(b.0.asinh() - key).abs())
            })
            .filter(|(y, _)| (y.asinh() - key).abs() < 1.0)
            .map(|(_, s)| s.clone())
    }

    /// Converged solution at `z = x + iy`.
    pub fn solution_at(&self, z: C64) -> Result<FixedPointSolution> {
        let warm = self.nearest(z.re);
        let sol = if z.re < 0.0 {
            self.system.solve_left(z, warm.as_ref(), &self.opts)?
        } else {
            match warm {
                Some(init) => match self.system.solve(z, Some(&init), &self.opts) {
                    Ok(s) => s,
                    Err(Error::NoConvergence { .. }) | Err(Error::Singular { .. }) => {
                        self.system.solve(z, None, &self.opts)?
                    }
                    Err(e) => return Err(e),
                },
                None => self.system.solve(z, None, &self.opts)?,
            }
        };
        self.solves.fetch_add(1, Ordering::Relaxed);
        self.sweeps
            .fetch_add(sol.report.iterations, Ordering::Relaxed);
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= CACHE_LIMIT {
            cache.remove(0);
        }
        cache.push((z.re, sol.state.clone()));
        Ok(sol)
    }

    /// Converged solution at `x + iε`.
    pub fn solution(&self, x: f64) -> Result<FixedPointSolution> {
        self.solution_at(C64::new(x, self.opts.epsilon))
    }

    /// `S G_μ(x + iε)`.
    pub fn scaled_cauchy_mu(&self, x: f64) -> Result<C64> {
        let z = C64::new(x, self.opts.epsilon);
        let tr = self.solution_at(z)?.trace_g11();
        Ok(tr - C64::new(self.zeros_b as f64, 0.0) / z)
    }
}

/// Rate kernels in the variable `u = log(1 + x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// `S A(x)(1+x) = S + (1+x)⁻¹ S G_μ(−1/(1+x))`.
    A,
    /// `S B(x)(1+x) = −(1+x) S G_μ(−(1+x))`.
    B,
}

impl Kernel {
    fn eval<F: Fn(f64) -> Result<f64>>(self, s: f64, sgmu: &F, u: f64) -> Result<f64> {
        let w = u.exp();
        match self {
            Kernel::A => Ok(s + sgmu(-1.0 / w)? / w),
            Kernel::B => Ok(-w * sgmu(-w)?),
        }
    }
}

/// Quadrature controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureOptions {
    /// Relative accuracy of each rate.
    pub rel_tol: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions { rel_tol: 1e-4 }
    }
}

/// `∫_0^{b_j} S·kernel(x) dx` for every breakpoint `b_j ≥ 0`, accumulating
/// double-exponential quadrature over consecutive segments in `log(1 + x)`.
///
/// `sgmu(z)` must return `Re S G_μ(z)` for real `z < 0`.
pub fn cumulative_integrals<F: Fn(f64) -> Result<f64>>(
    kernel: Kernel,
    s: usize,
    sgmu: F,
    breakpoints: &[f64],
    opts: &QuadratureOptions,
) -> Result<Vec<f64>> {
    if let Some(b) = breakpoints.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
        return Err(Error::Contract(format!(
            "integration limit {b} must be finite and nonnegative"
        )));
    }
    let mut order: Vec<usize> = (0..breakpoints.len()).collect();
    order.sort_by(|&i, &j| breakpoints[i].total_cmp(&breakpoints[j]));
    let sf = s as f64;
    let mut out = vec![0.0; breakpoints.len()];
    let mut acc = 0.0;
    let mut lo = 0.0f64;
    for &i in &order {
        let hi = breakpoints[i].ln_1p();
        if hi > lo {
            // The u-space integrand lies in [0, S].
            let target = opts.rel_tol * 0.1 * sf * (hi - lo);
            let err = RefCell::new(None);
            let f = |u: f64| match kernel.eval(sf, &sgmu, u) {
                Ok(v) => v,
                Err(e) => {
                    err.borrow_mut().get_or_insert(e);
                    0.0
                }
            };
            let res = quadrature::integrate(f, lo, hi, target);
            if let Some(e) = err.into_inner() {
                return Err(e);
            }
            if !res.integral.is_finite() || res.error_estimate > 10.0 * target {
                return Err(Error::Quadrature {
                    lo: lo.exp_m1(),
                    hi: hi.exp_m1(),
                    estimate: res.error_estimate,
                    tolerance: target,
                });
            }
            acc += res.integral;
            lo = hi;
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Upper limits `(a1, a2)`: `a1 = κ1 ρ1 P' / (t σ²)`, `a2 = ρ2 P' / (t σ²)`
/// with `P' = P` when `fold_power` is set and `1` otherwise.
pub fn integration_limits(cfg: &SystemConfig, t: f64, fold_power: bool) -> (f64, f64) {
    let p = if fold_power { cfg.power } else { 1.0 };
    let snr = p / (t * cfg.sigma0_sq);
    (cfg.kappa[0] * cfg.rho[0] * snr, cfg.rho[1] * snr)
}

/// Coupled-subchannel rates in nats for each configuration in `cfgs`, all
/// sharing the spectrum `sgmu` with `s` coupled subchannels.
pub fn integrate_rates_many<F: Fn(f64) -> Result<f64>>(
    cfgs: &[SystemConfig],
    t: f64,
    s: usize,
    swapped: bool,
    fold_power: bool,
    sgmu: F,
    opts: &QuadratureOptions,
) -> Result<Vec<(f64, f64)>> {
    if !(t > 0.0) {
        return Err(Error::Contract(format!(
            "power factor must be positive, got {t}"
        )));
    }
    if s == 0 {
        return Ok(vec![(0.0, 0.0); cfgs.len()]);
    }
    let lims: Vec<(f64, f64)> = cfgs
        .iter()
        .map(|c| integration_limits(c, t, fold_power))
        .collect();
    let a1: Vec<f64> = lims.iter().map(|l| l.0).collect();
    let a2: Vec<f64> = lims
        .iter()
        .zip(cfgs)
        .flat_map(|(l, c)| [c.kappa[0] * l.1, l.1])
        .collect();
    let (k1, k2) = if swapped {
        (Kernel::B, Kernel::A)
    } else {
        (Kernel::A, Kernel::B)
    };
    let i1 = cumulative_integrals(k1, s, &sgmu, &a1, opts)?;
    let i2 = cumulative_integrals(k2, s, &sgmu, &a2, opts)?;
    Ok((0..cfgs.len())
        .map(|j| (i1[j], i2[2 * j + 1] - i2[2 * j]))
        .collect())
}

/// Coupled-subchannel rates `(I1, I2)` in nats.
pub fn integrate_rates<F: Fn(f64) -> Result<f64>>(
    cfg: &SystemConfig,
    t: f64,
    s: usize,
    swapped: bool,
    fold_power: bool,
    sgmu: F,
    opts: &QuadratureOptions,
) -> Result<(f64, f64)> {
    Ok(integrate_rates_many(
        std::slice::from_ref(cfg),
        t,
        s,
        swapped,
        fold_power,
        sgmu,
        opts,
    )?[0])
}

/// Controls of the asymptotic pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsymptoticOptions {
    pub solver: SolverOptions,
    pub quadrature: QuadratureOptions,
    pub delta: f64,
    pub fold_power: bool,
    pub unit: RateUnit,
    pub path: RatePath,
}

impl Default for AsymptoticOptions {
    fn default() -> Self {
        AsymptoticOptions {
            solver: SolverOptions::default(),
            quadrature: QuadratureOptions::default(),
            delta: DEFAULT_DELTA,
            fold_power: false,
            unit: RateUnit::Bits,
            path: RatePath::Verbatim,
        }
    }
}

/// Deterministic-equivalent rates at one operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub snr_db: f64,
    pub i1: f64,
    pub i2: f64,
    pub t: f64,
    pub s: usize,
    pub regime: Regime,
    /// Resolvent solves and fixed-point sweeps spent on the whole sweep.
    pub solves: usize,
    pub sweeps: usize,
}

impl AsymptoticReport {
    pub fn sum(&self) -> f64 {
        self.i1 + self.i2
    }
}

/// Asymptotic rates for every configuration in `cfgs`, which may differ
/// only in powers, noise, splits and gains. The power factor and the
/// spectrum are shared.
pub fn asymptotic_rates_many(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfgs: &[SystemConfig],
    opts: &AsymptoticOptions,
) -> Result<Vec<AsymptoticReport>> {
    let Some(cfg) = cfgs.first() else {
        return Ok(Vec::new());
    };
    if cfgs
        .iter()
        .any(|c| c.tx != cfg.tx || c.rx != cfg.rx || c.panels != cfg.panels)
    {
        return Err(Error::Config(
            "configurations of one sweep must share dimensions".into(),
        ));
    }
    let t = solve_prop2(stats, theta, cfg, &opts.solver)?.t;
    let problem = SpectralProblem::new(stats, theta, cfg, opts.delta)?;
    let eval = SpectralEvaluator::new(&problem, &opts.solver, false)?;
    let sgmu = |x: f64| eval.scaled_cauchy_mu(x).map(|v| v.re);
    let coupled = integrate_rates_many(
        cfgs,
        t,
        problem.s,
        problem.swapped,
        opts.fold_power,
        sgmu,
        &opts.quadrature,
    )?;
    let (solves, sweeps) = eval.work();
    Ok(cfgs
        .iter()
        .zip(coupled)
        .map(|(c, (c1, c2))| {
            let pc = if opts.fold_power {
                c.clone()
            } else {
                SystemConfig {
                    power: 1.0,
                    ..c.clone()
                }
            };
            let (p1, p2) = private_rates(&pc, t, opts.path);
            AsymptoticReport {
                snr_db: c.snr_db(),
                i1: opts.unit.from_nats(c1 + p1),
                i2: opts.unit.from_nats(c2 + p2),
                t,
                s: problem.s,
                regime: c.regime(),
                solves,
                sweeps,
            }
        })
        .collect())
}

pub fn asymptotic_rates(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    opts: &AsymptoticOptions,
) -> Result<AsymptoticReport> {
    Ok(asymptotic_rates_many(stats, theta, std::slice::from_ref(cfg), opts)?.remove(0))
}

/// Asymptotic rates over an SNR grid in dB.
pub fn asymptotic_snr_sweep(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    snr_db: &[f64],
    opts: &AsymptoticOptions,
) -> Result<Vec<AsymptoticReport>> {
    let cfgs: Vec<SystemConfig> = snr_db.iter().map(|&d| cfg.clone().with_snr_db(d)).collect();
    asymptotic_rates_many(stats, theta, &cfgs, opts)
}
