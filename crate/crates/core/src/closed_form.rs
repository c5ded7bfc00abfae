//! Closed-form asymptotic rates for deterministic BS→panel links.
//!
//! With `F̃_k = 0` the cross blocks of the resolvent system vanish and the
//! kernel integrals of the rate pipeline reduce to differences of the free
//! energy `φ` (`dφ/dz = Tr G11`):
//!
//! * `S∫_0^a A = φ(−1/(1+a)) − φ(−1) + (S + c) log(1+a)`,
//! * `S∫_0^a B = φ(−1−a) − φ(−1) − c log(1+a)`,
//!
//! where `c` counts the zero eigenvalues of `B`. All evaluation points are
//! real and negative, left of the spectrum.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freeprob::{
    integration_limits, solve_prop2, AsymptoticOptions, AsymptoticReport, FixedPointSolution,
    Kernel, Prop1State, Prop1System, SolverOptions, SpectralProblem,
};
use crate::linalg::{trace, wrap_phase, zeros, C64};
use crate::mc_rates::private_rates;
use crate::model::{ChannelStats, SystemConfig, ThetaState};

pub use crate::freeprob::BRANCH_TOL;

/// Converged simplified system at one spectral point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedFormSolution {
    pub z: C64,
    /// Resolvent blocks; the 2↔6 cross blocks are zero.
    pub sol: FixedPointSolution,
    /// Free energy `φ(z)` before the branch check.
    pub phi_raw: C64,
}

pub(crate) fn require_deterministic_bs_ris(stats: &ChannelStats) -> Result<()> {
    if !stats.bs_ris_deterministic() {
        return Err(Error::Contract(
            "closed forms need deterministic BS→panel links (F̃ = 0)".into(),
        ));
    }
    Ok(())
}

fn wrap(sol: FixedPointSolution) -> ClosedFormSolution {
    let mut sol = sol;
    for (a, b) in sol.state.g26.iter_mut().zip(sol.state.g62.iter_mut()) {
        *a = zeros(a.nrows(), a.ncols());
        *b = zeros(b.nrows(), b.ncols());
    }
    ClosedFormSolution {
        z: sol.z,
        phi_raw: sol.free_energy(),
        sol,
    }
}

/// Solves `system` at the real point `x < 0`, falling back to a descent
/// from `x + i` when the direct solve lands on a non-physical fixed point.
pub fn solve_negative(
    system: &Prop1System,
    x: f64,
    init: Option<&Prop1State>,
    opts: &SolverOptions,
) -> Result<FixedPointSolution> {
    system.solve_left(C64::new(x, 0.0), init, opts)
}

/// Solves the simplified system at `z`, which must lie in the upper
/// half-plane or on the negative real axis.
///
/// For `R2 < T` the statistics must already carry the augmented user 2.
pub fn solve_simplified(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    z: C64,
    opts: &SolverOptions,
) -> Result<ClosedFormSolution> {
    require_deterministic_bs_ris(stats)?;
    let augmented = stats.rx[1] == cfg.tx && cfg.rx[1] < cfg.tx;
    if stats.tx != cfg.tx || stats.rx[0] != cfg.rx[0] || (stats.rx[1] != cfg.rx[1] && !augmented) {
        return Err(Error::Dimension(
            "statistics do not match configuration".into(),
        ));
    }
    if !(z.im > 0.0 || (z.im == 0.0 && z.re < 0.0)) {
        return Err(Error::Contract(format!(
            "spectral point {z} must be in the upper half-plane or negative"
        )));
    }
    let sys = Prop1System::new(stats, theta, true)?;
    if z.im == 0.0 {
        return Ok(wrap(solve_negative(&sys, z.re, None, opts)?));
    }
    Ok(wrap(sys.solve(z, None, opts)?))
}

/// `Re φ(z)`, after checking that `det` is real at the evaluation point.
pub fn phi(sol: &ClosedFormSolution) -> Result<f64> {
    let im = sol.phi_raw.im;
    let residue = wrap_phase(2.0 * im) / 2.0;
    if residue.abs() > BRANCH_TOL {
        return Err(Error::Branch(residue));
    }
    Ok(sol.phi_raw.re)
}

/// Cached free-energy evaluations on the negative real axis for one
/// oriented problem.
pub struct ClosedFormEvaluator {
    pub system: Prop1System,
    pub opts: SolverOptions,
    pub s: usize,
    pub zeros_b: usize,
    pub swapped: bool,
    cache: Mutex<HashMap<u64, ClosedFormSolution>>,
}

impl ClosedFormEvaluator {
    pub fn new(problem: &SpectralProblem, opts: &SolverOptions) -> Result<Self> {
        require_deterministic_bs_ris(&problem.stats)?;
        Ok(ClosedFormEvaluator {
            system: problem.system(true)?,
            opts: opts.clone(),
            s: problem.s,
            zeros_b: problem.zeros_b,
            swapped: problem.swapped,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn nearest(&self, x: f64) -> Option<Prop1State> {
        let cache = self.cache.lock().unwrap();
        let key = x.asinh();
        cache
            .values()
            .min_by(|a, b| {
                (a.z.re.asinh() - key)
                    .abs()
                    .total_cmp(&(b.z.re.asinh() - key).abs())
            })
            .map(|s| s.sol.state.clone())
    }

    /// Solution at the real point `x < 0`, computed once per point.
    pub fn solution(&self, x: f64) -> Result<ClosedFormSolution> {
        if !(x < 0.0) {
            return Err(Error::Contract(format!(
                "closed-form points must be negative, got {x}"
            )));
        }
        if let Some(s) = self.cache.lock().unwrap().get(&x.to_bits()) {
            return Ok(s.clone());
        }
        let init = self.nearest(x);
        let out = wrap(solve_negative(&self.system, x, init.as_ref(), &self.opts)?);
        self.cache.lock().unwrap().insert(x.to_bits(), out.clone());
        Ok(out)
    }

    /// Difference `φ(x) − φ(y)`, checking that the imaginary parts cancel.
    pub fn phi_difference(&self, x: f64, y: f64) -> Result<f64> {
        let a = self.solution(x)?;
        let b = self.solution(y)?;
        let gap = wrap_phase(a.phi_raw.im - b.phi_raw.im);
        if gap.abs() > BRANCH_TOL {
            return Err(Error::Branch(gap));
        }
        Ok(phi(&a)? - phi(&b)?)
    }

    /// `S ∫_0^a kernel`.
    pub fn kernel_integral(&self, kernel: Kernel, a: f64) -> Result<f64> {
        if !(a >= 0.0) {
            return Err(Error::Contract(format!(
                "integration limit {a} must be nonnegative"
            )));
        }
        if a == 0.0 {
            return Ok(0.0);
        }
        let (s, c) = (self.s as f64, self.zeros_b as f64);
        match kernel {
            Kernel::A => Ok(self.phi_difference(-1.0 / (1.0 + a), -1.0)? + (s + c) * a.ln_1p()),
            Kernel::B => Ok(self.phi_difference(-1.0 - a, -1.0)? - c * a.ln_1p()),
        }
    }

    /// Integrand `S·kernel(x)` from the resolvent trace, the analytic
    /// derivative of [`Self::kernel_integral`].
    pub fn kernel_value(&self, kernel: Kernel, x: f64) -> Result<f64> {
        let (s, c) = (self.s as f64, self.zeros_b as f64);
        let w = 1.0 + x;
        match kernel {
            Kernel::A => {
                Ok((s + c) / w + trace(&self.solution(-1.0 / w)?.sol.state.g11).re / (w * w))
            }
            Kernel::B => Ok(-trace(&self.solution(-w)?.sol.state.g11).re - c / w),
        }
    }

    /// Kernels of user 1 and user 2 for this orientation.
    pub fn kernels(&self) -> (Kernel, Kernel) {
        if self.swapped {
            (Kernel::B, Kernel::A)
        } else {
            (Kernel::A, Kernel::B)
        }
    }

    /// Coupled rates in nats for the limits `(a1, a2)`.
    pub fn coupled_rates(&self, a1: f64, a2: f64, kappa1: f64) -> Result<(f64, f64)> {
        if self.s == 0 {
            return Ok((0.0, 0.0));
        }
        let (k1, k2) = self.kernels();
        let i1 = self.kernel_integral(k1, a1)?;
        let i2 = self.kernel_integral(k2, a2)? - self.kernel_integral(k2, kappa1 * a2)?;
        Ok((i1, i2))
    }

    /// `∂I1/∂a1` in nats.
    pub fn d_rate1(&self, a1: f64) -> Result<f64> {
        self.kernel_value(self.kernels().0, a1)
    }
}

/// Closed-form rates for every configuration in `cfgs` (same dimensions).
pub fn rates_closed_many(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfgs: &[SystemConfig],
    opts: &AsymptoticOptions,
) -> Result<Vec<AsymptoticReport>> {
    let Some(cfg) = cfgs.first() else {
        return Ok(Vec::new());
    };
    require_deterministic_bs_ris(stats)?;
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
    let eval = ClosedFormEvaluator::new(&problem, &opts.solver)?;
    cfgs.iter()
        .map(|c| {
            let (a1, a2) = integration_limits(c, t, opts.fold_power);
            let (c1, c2) = eval.coupled_rates(a1, a2, c.kappa[0])?;
            let pc = if opts.fold_power {
                c.clone()
            } else {
                SystemConfig {
                    power: 1.0,
                    ..c.clone()
                }
            };
            let (p1, p2) = private_rates(&pc, t, opts.path);
            Ok(AsymptoticReport {
                snr_db: c.snr_db(),
                i1: opts.unit.from_nats(c1 + p1),
                i2: opts.unit.from_nats(c2 + p2),
                t,
                s: problem.s,
                regime: c.regime(),
                solves: eval.cache.lock().unwrap().len(),
                sweeps: 0,
            })
        })
        .collect()
}

/// Closed-form rates `(Ī1, Ī2)` at one operating point.
pub fn rates_closed(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    opts: &AsymptoticOptions,
) -> Result<AsymptoticReport> {
    Ok(rates_closed_many(stats, theta, std::slice::from_ref(cfg), opts)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::freeprob::{
        asymptotic_rates, integrate_rates, solve_prop1, SpectralEvaluator, DEFAULT_DELTA,
    };
    use crate::linalg::{complex_gaussian, fro};
    use crate::mc_rates::{mc_average, RateOptions, RateUnit};
    use crate::model::{generate_stats, ScenarioParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenario(
        r: [usize; 2],
        t: usize,
        panels: Vec<usize>,
        seed: u64,
    ) -> (SystemConfig, ChannelStats, ThetaState) {
        let cfg = SystemConfig::new(t, r, panels).with_snr_db(10.0);
        let params = ScenarioParams {
            deterministic_bs_ris: true,
            ..Default::default()
        };
        let stats = generate_stats(&cfg, &params, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let theta = ThetaState::random(cfg.panels.clone(), &mut rng);
        (cfg, stats, theta)
    }

    #[test]
    fn random_bs_links_are_rejected() {
        let cfg = SystemConfig::new(3, [4, 4], vec![2]);
        let stats = generate_stats(&cfg, &ScenarioParams::default(), 1).unwrap();
        let theta = ThetaState::uniform_split(cfg.panels.clone());
        let z = C64::new(-1.0, 0.0);
        assert!(matches!(
            solve_simplified(&stats, &theta, &cfg, z, &SolverOptions::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn simplified_matches_full_solver() {
        let (cfg, stats, theta) = scenario([4, 5], 3, vec![2, 3], 2);
        let z = C64::new(0.7, 0.05);
        let opts = SolverOptions::default();
        let a = solve_simplified(&stats, &theta, &cfg, z, &opts).unwrap();
        let b = solve_prop1(&stats, &theta, &cfg, z, &opts).unwrap();
        assert!(fro(&(&a.sol.state.g11 - &b.state.g11)) < 1e-8);
        assert!(a
            .sol
            .state
            .g26
            .iter()
            .all(|m| m.iter().all(|v| *v == C64::new(0.0, 0.0))));
    }

    #[test]
    fn fully_deterministic_channels_need_one_sweep() {
        let (cfg, mut stats, theta) = scenario([4, 4], 3, vec![2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in stats
            .direct
            .iter_mut()
            .chain(stats.ris_user.iter_mut().flatten())
        {
            l.profile.fill(0.0);
            l.los = complex_gaussian(l.los.nrows(), l.los.ncols(), 1.0, &mut rng);
        }
        let sol = solve_simplified(
            &stats,
            &theta,
            &cfg,
            C64::new(-0.5, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(sol.sol.report.iterations <= 2);
        assert!(phi(&sol).is_ok());
    }

    #[test]
    fn phi_rejects_points_inside_the_spectrum() {
        let (cfg, stats, theta) = scenario([4, 4], 3, vec![2], 4);
        let sol = solve_simplified(
            &stats,
            &theta,
            &cfg,
            C64::new(0.5, 0.1),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(matches!(phi(&sol), Err(Error::Branch(_))));
    }

    #[test]
    fn zero_snr_and_unit_split_give_zero() {
        let (cfg, stats, theta) = scenario([4, 4], 3, vec![2], 5);
        let problem = SpectralProblem::new(&stats, &theta, &cfg, DEFAULT_DELTA).unwrap();
        let eval = ClosedFormEvaluator::new(&problem, &SolverOptions::default()).unwrap();
        assert_eq!(eval.coupled_rates(0.0, 0.0, 0.1).unwrap(), (0.0, 0.0));
        let (_, i2) = eval.coupled_rates(2.0, 3.0, 1.0).unwrap();
        assert!(i2.abs() < 1e-12);
        // A tiny limit is a genuine φ difference, not the shortcut.
        let (i1, _) = eval.coupled_rates(1e-12, 0.0, 0.1).unwrap();
        assert!(i1.abs() < 1e-8);
    }

    #[test]
    fn derivative_identity_holds() {
        for (r, t, seed) in [([4, 4], 3, 6), ([3, 5], 4, 7), ([5, 3], 4, 8)] {
            let (cfg, stats, theta) = scenario(r, t, vec![2, 2], seed);
            let problem = SpectralProblem::new(&stats, &theta, &cfg, DEFAULT_DELTA).unwrap();
            let eval = ClosedFormEvaluator::new(&problem, &SolverOptions::default()).unwrap();
            for a in [0.3, 2.0, 25.0] {
                let h = 1e-4 * a;
                let k = eval.kernels().0;
                let fd = (eval.kernel_integral(k, a + h).unwrap()
                    - eval.kernel_integral(k, a - h).unwrap())
                    / (2.0 * h);
                let an = eval.d_rate1(a).unwrap();
                assert!(
                    (fd - an).abs() < 1e-4 * an.abs(),
                    "{r:?} a={a}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn closed_form_matches_quadrature() {
        for (r, t, seed) in [([5, 4], 3, 9), ([3, 4], 3, 10), ([4, 4], 6, 11)] {
            let (cfg, stats, theta) = scenario(r, t, vec![3, 2], seed);
            let opts = AsymptoticOptions::default();
            let closed = rates_closed(&stats, &theta, &cfg, &opts).unwrap();
            let quad = asymptotic_rates(&stats, &theta, &cfg, &opts).unwrap();
            assert!(
                (closed.i1 - quad.i1).abs() < 1e-3 * quad.i1,
                "{r:?}: {} vs {}",
                closed.i1,
                quad.i1
            );
            assert!(
                (closed.i2 - quad.i2).abs() < 1e-3 * quad.i2,
                "{r:?}: {} vs {}",
                closed.i2,
                quad.i2
            );
        }
    }

    #[test]
    fn closed_form_tracks_simplified_quadrature_and_monte_carlo() {
        let (cfg, stats, theta) = scenario([16, 16], 10, vec![30, 30], 12);
        let stats = crate::model::normalize_direct_gain(&stats, &theta).unwrap();
        let opts = AsymptoticOptions {
            unit: RateUnit::Nats,
            ..Default::default()
        };
        let closed = rates_closed(&stats, &theta, &cfg, &opts).unwrap();
        let problem = SpectralProblem::new(&stats, &theta, &cfg, DEFAULT_DELTA).unwrap();
        let eval = SpectralEvaluator::new(&problem, &opts.solver, true).unwrap();
        let (q1, q2) = integrate_rates(
            &cfg,
            closed.t,
            problem.s,
            problem.swapped,
            false,
            |x| eval.scaled_cauchy_mu(x).map(|v| v.re),
            &opts.quadrature,
        )
        .unwrap();
        assert!((closed.i1 - q1).abs() < 1e-3 * q1 && (closed.i2 - q2).abs() < 1e-3 * q2);
        let mc = mc_average(
            &stats,
            &theta,
            &cfg,
            2000,
            1,
            RateOptions {
                unit: RateUnit::Nats,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            (closed.i1 - mc.i1).abs() < 0.03 * mc.i1,
            "{} vs {}",
            closed.i1,
            mc.i1
        );
        assert!(
            (closed.i2 - mc.i2).abs() < 0.03 * mc.i2,
            "{} vs {}",
            closed.i2,
            mc.i2
        );
    }

    #[test]
    fn rate_one_is_monotone_in_its_limit() {
        let (cfg, stats, theta) = scenario([4, 4], 3, vec![2], 13);
        let problem = SpectralProblem::new(&stats, &theta, &cfg, DEFAULT_DELTA).unwrap();
        let eval = ClosedFormEvaluator::new(&problem, &SolverOptions::default()).unwrap();
        let v: Vec<f64> = [0.1, 1.0, 10.0, 100.0]
            .iter()
            .map(|&a| eval.kernel_integral(Kernel::A, a).unwrap())
            .collect();
        assert!(v.windows(2).all(|w| w[1] > w[0]));
    }
}
