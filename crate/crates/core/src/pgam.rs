//! Projected gradient ascent of the closed-form sum rate over the panel
//! coefficients.
//!
//! The free energy `φ` is stationary in the resolvent blocks, so its
//! derivative in `θ*` only sees the explicit coefficient dependence of the
//! mean linearization and of the block map:
//!
//! * user 1: `∂φ/∂θ*_{k,1,l} = −[η_{k,1}(G11) Θ_{k,1} G77_k]_{ll} − R̄_{k,1}[:, l]† G17[:, l]`,
//! * user 2: `∂φ/∂θ*_{k,2,l} = −[η_{k,2}(G55) Θ_{k,2} G44_k]_{ll} + R̄_{k,2}[:, l]† G54[:, l]`.
//!
//! The coupled rates are signed sums of `φ` at real points, so the sum-rate
//! gradient is the matching signed sum of these vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::closed_form::{phi, require_deterministic_bs_ris, solve_negative, ClosedFormSolution};
use crate::error::{Error, Result};
use crate::freeprob::{
    integration_limits, power_factor_gradient, solve_prop2, AsymptoticOptions, FixedPointSolution,
    Prop1System, SpectralProblem,
};
use crate::linalg::{CVec, C64};
use crate::mc_rates::{private_counts, private_rates};
use crate::model::{ChannelStats, SystemConfig, ThetaState};

/// `∂φ/∂θ*` at a converged simplified solution, user-1 elements first
/// (length `2L`). `stats` and `theta` are those the solution was built from.
pub fn gradient_phi(
    sol: &ClosedFormSolution,
    stats: &ChannelStats,
    theta: &ThetaState,
) -> Result<CVec> {
    gradient_from(&sol.sol, stats, theta)
}

fn gradient_from(
    sol: &FixedPointSolution,
    stats: &ChannelStats,
    theta: &ThetaState,
) -> Result<CVec> {
    let st = &sol.state;
    let (r1, r2) = (st.g11.nrows(), st.g55.nrows());
    let l = theta.total_elements();
    if theta.panels() != stats.panel_sizes().as_slice()
        || stats.rx != [r1, r2]
        || st.g77.len() != stats.num_panels()
        || sol.g17.ncols() != r1 + l
        || sol.g54.ncols() != r2 + l
    {
        return Err(Error::Dimension(
            "solution does not match statistics and coefficients".into(),
        ));
    }
    let mut out = CVec::zeros(2 * l);
    for k in 0..stats.num_panels() {
        let o = theta.offset(k);
        let [u1, u2] = &stats.ris_user[k];
        let sides = [
            (u1, u1.eta(&st.g11), &st.g77[k], &sol.g17, r1, -1.0),
            (u2, u2.eta(&st.g55), &st.g44[k], &sol.g54, r2, 1.0),
        ];
        for (i, (link, eta, gpp, cross, r, sign)) in sides.into_iter().enumerate() {
            let th = theta.panel(k, i);
            for e in 0..th.len() {
                let mut quad = C64::new(0.0, 0.0);
                for m in 0..th.len() {
                    quad += eta[[e, m]] * th[m] * gpp[[m, e]];
                }
                let mut lin = C64::new(0.0, 0.0);
                for j in 0..link.rows() {
                    lin += link.los[[j, e]].conj() * cross[[j, r + o + e]];
                }
                out[i * l + o + e] = -quad + sign * lin;
            }
        }
    }
    Ok(out)
}

/// The coupled rates as `Σ w·φ(x) + offset` over real points `x < 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RatePoints {
    /// Distinct evaluation points with nonzero weights, in increasing order.
    pub points: Vec<(f64, f64)>,
    /// Part of the sum independent of the coefficients, in nats.
    pub offset: f64,
}

/// Evaluation points of `I1 + I2` for the limits `(a1, a2)`.
pub fn rate_points(
    s: usize,
    zeros_b: usize,
    swapped: bool,
    a1: f64,
    a2: f64,
    kappa1: f64,
) -> RatePoints {
    let mut acc: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    let mut offset = 0.0;
    if s > 0 {
        let (s, c) = (s as f64, zeros_b as f64);
        let mut add =
            |x: f64, w: f64| acc.entry(x.to_bits() ^ (1 << 63)).or_insert((x, 0.0)).1 += w;
        let mut kernel = |is_a: bool, a: f64, sign: f64| {
            if a == 0.0 {
                return;
            }
            add(-1.0, -sign);
            if is_a {
                add(-1.0 / (1.0 + a), sign);
                offset += sign * (s + c) * a.ln_1p();
            } else {
                add(-1.0 - a, sign);
                offset -= sign * c * a.ln_1p();
            }
        };
        let (k1, k2) = (!swapped, swapped);
        kernel(k1, a1, 1.0);
        kernel(k2, a2, 1.0);
        kernel(k2, kappa1 * a2, -1.0);
    }
    let mut points: Vec<(f64, f64)> = acc.into_values().filter(|&(_, w)| w != 0.0).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    RatePoints { points, offset }
}

/// Sum rate and its spectral solutions at one coefficient state with the
/// power factor held fixed.
struct Evaluation {
    problem: SpectralProblem,
    points: RatePoints,
    sols: Vec<FixedPointSolution>,
    t: f64,
    limits: (f64, f64),
    value: f64,
}

fn evaluate(
    stats: &ChannelStats,
    cfg: &SystemConfig,
    theta: &ThetaState,
    t: f64,
    opts: &AsymptoticOptions,
    warm: Option<&Evaluation>,
) -> Result<Evaluation> {
    let problem = SpectralProblem::new(stats, theta, cfg, opts.delta)?;
    let system: Prop1System = problem.system(true)?;
    let (a1, a2) = integration_limits(cfg, t, opts.fold_power);
    let points = rate_points(
        problem.s,
        problem.zeros_b,
        problem.swapped,
        a1,
        a2,
        cfg.kappa[0],
    );
    let mut sols = Vec::with_capacity(points.points.len());
    let mut coupled = points.offset;
    for (j, &(x, w)) in points.points.iter().enumerate() {
        let init = warm.and_then(|e| {
            e.sols
                .iter()
                .min_by(|a, b| (a.z.re - x).abs().total_cmp(&(b.z.re - x).abs()))
                .or(e.sols.get(j))
                .map(|s| &s.state)
        });
        let sol = solve_negative(&system, x, init, &opts.solver)?;
        let wrapped = ClosedFormSolution {
            z: sol.z,
            phi_raw: sol.free_energy(),
            sol,
        };
        coupled += w * phi(&wrapped)?;
        sols.push(wrapped.sol);
    }
    let pc = if opts.fold_power {
        cfg.clone()
    } else {
        SystemConfig {
            power: 1.0,
            ..cfg.clone()
        }
    };
    let (p1, p2) = private_rates(&pc, t, opts.path);
    Ok(Evaluation {
        problem,
        points,
        sols,
        t,
        limits: (a1, a2),
        value: opts.unit.from_nats(coupled + p1 + p2),
    })
}

/// `∂(Ī1 + Ī2)/∂t` at fixed coefficients, in the rate unit.
fn rate_t_derivative(
    eval: &Evaluation,
    cfg: &SystemConfig,
    opts: &AsymptoticOptions,
) -> Result<f64> {
    let p = &eval.problem;
    let (s, c) = (p.s as f64, p.zeros_b as f64);
    let trace_at = |x: f64| -> Result<f64> {
        eval.sols
            .iter()
            .find(|sol| sol.z.re.to_bits() == x.to_bits())
            .map(|sol| sol.trace_g11().re)
            .ok_or_else(|| Error::Contract(format!("no solution at {x}")))
    };
    // a · S·kernel(a), the derivative of S∫_0^a kernel with respect to log a.
    let scaled = |is_a: bool, a: f64| -> Result<f64> {
        if a == 0.0 {
            return Ok(0.0);
        }
        let w = 1.0 + a;
        Ok(a * if is_a {
            (s + c) / w + trace_at(-1.0 / w)? / (w * w)
        } else {
            -trace_at(-w)? - c / w
        })
    };
    let (a1, a2) = eval.limits;
    let k1 = cfg.kappa[0];
    let mut log_derivative = 0.0;
    if p.s > 0 {
        log_derivative += scaled(!p.swapped, a1)?;
        if k1 != 1.0 {
            log_derivative += scaled(p.swapped, a2)? - scaled(p.swapped, k1 * a2)?;
        }
    }
    let pc = if opts.fold_power {
        cfg.clone()
    } else {
        SystemConfig {
            power: 1.0,
            ..cfg.clone()
        }
    };
    let snr = pc.power / (eval.t * pc.sigma0_sq);
    let [n1, n2] = private_counts(&pc, opts.path);
    for (n, rho) in [(n1, pc.rho[0]), (n2, pc.rho[1])] {
        log_derivative += n as f64 * rho * snr / (1.0 + rho * snr);
    }
    // Every limit scales as 1/t.
    Ok(-opts.unit.from_nats(log_derivative) / eval.t)
}

fn gradient_of(eval: &Evaluation, opts: &AsymptoticOptions) -> Result<[CVec; 2]> {
    let p = &eval.problem;
    let l = p.theta.total_elements();
    let mut g = CVec::zeros(2 * l);
    for (sol, &(_, w)) in eval.sols.iter().zip(&eval.points.points) {
        g.scaled_add(C64::new(w, 0.0), &gradient_from(sol, &p.stats, &p.theta)?);
    }
    let scale = 2.0 * opts.unit.from_nats(1.0);
    let side = |i: usize| -> CVec { g.slice(ndarray::s![i * l..(i + 1) * l]).mapv(|v| v * scale) };
    Ok(if p.swapped {
        [side(1), side(0)]
    } else {
        [side(0), side(1)]
    })
}

fn check_inputs(stats: &ChannelStats, cfg: &SystemConfig) -> Result<()> {
    require_deterministic_bs_ris(stats)?;
    if stats.tx != cfg.tx || stats.rx != cfg.rx || stats.panel_sizes() != cfg.panels {
        return Err(Error::Dimension(
            "statistics do not match configuration".into(),
        ));
    }
    Ok(())
}

/// Closed-form `Ī1 + Ī2` with the power factor `t` held fixed.
pub fn sum_rate(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    t: f64,
    opts: &AsymptoticOptions,
) -> Result<f64> {
    check_inputs(stats, cfg)?;
    Ok(evaluate(stats, cfg, theta, t, opts, None)?.value)
}

/// `δ_i = 2 ∂(Ī1 + Ī2)/∂θ_i*` with the power factor `t` held fixed.
pub fn gradient_sum_rate(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    t: f64,
    opts: &AsymptoticOptions,
) -> Result<[CVec; 2]> {
    check_inputs(stats, cfg)?;
    gradient_of(&evaluate(stats, cfg, theta, t, opts, None)?, opts)
}

/// Total derivative `2 d(Ī1 + Ī2)/dθ_i*` including the dependence of the
/// power factor on the coefficients, together with that power factor.
pub fn gradient_sum_rate_total(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    opts: &AsymptoticOptions,
) -> Result<(f64, [CVec; 2])> {
    check_inputs(stats, cfg)?;
    let (t, _) = power_factor_gradient(stats, theta, cfg, &opts.solver)?;
    let eval = evaluate(stats, cfg, theta, t, opts, None)?;
    Ok((t, total_gradient(&eval, stats, theta, cfg, opts)?))
}

fn total_gradient(
    eval: &Evaluation,
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    opts: &AsymptoticOptions,
) -> Result<[CVec; 2]> {
    let mut g = gradient_of(eval, opts)?;
    let (_, dt) = power_factor_gradient(stats, theta, cfg, &opts.solver)?;
    let scale = C64::new(2.0 * rate_t_derivative(eval, cfg, opts)?, 0.0);
    let l = theta.total_elements();
    for i in 0..2 {
        g[i].scaled_add(scale, &dt.slice(ndarray::s![i * l..(i + 1) * l]));
    }
    Ok(g)
}

/// Element-wise projection `θ_i(l) ← θ_i(l) / √(|θ_1(l)|² + |θ_2(l)|²)`.
pub fn project(raw: &[CVec; 2], panels: &[usize]) -> Result<ThetaState> {
    let l: usize = panels.iter().sum();
    if raw[0].len() != l || raw[1].len() != l {
        return Err(Error::Dimension(format!(
            "expected {l} coefficients per side"
        )));
    }
    let mut out = [CVec::zeros(l), CVec::zeros(l)];
    for e in 0..l {
        let norm = (raw[0][e].norm_sqr() + raw[1][e].norm_sqr()).sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate(format!(
                "element {e} has zero coefficients on both sides"
            )));
        }
        out[0][e] = raw[0][e] / norm;
        out[1][e] = raw[1][e] / norm;
    }
    ThetaState::from_complex(panels.to_vec(), out)
}

/// `Σ Re(a* b)` over both sides.
fn inner(a: &[CVec; 2], b: &[CVec; 2]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u.conj() * v).re).sum::<f64>())
        .sum()
}

fn axpy(x: &[CVec; 2], alpha: f64, d: &[CVec; 2]) -> [CVec; 2] {
    [
        &x[0] + &d[0].mapv(|v| v * alpha),
        &x[1] + &d[1].mapv(|v| v * alpha),
    ]
}

fn diff(a: &[CVec; 2], b: &[CVec; 2]) -> [CVec; 2] {
    [&a[0] - &b[0], &a[1] - &b[1]]
}

/// Norm of the gradient after removing its radial part at every element,
/// i.e. its component tangent to the feasible set.
pub fn projected_gradient_norm(theta: &ThetaState, grad: &[CVec; 2]) -> f64 {
    let (a, b) = (theta.side(0), theta.side(1));
    let mut acc = 0.0;
    for e in 0..a.len() {
        let radial = (a[e].conj() * grad[0][e] + b[e].conj() * grad[1][e]).re;
        acc += (grad[0][e] - a[e] * radial).norm_sqr() + (grad[1][e] - b[e] * radial).norm_sqr();
    }
    acc.sqrt()
}

/// Settings of the ascent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgamOptions {
    /// Stop once an accepted step changes the sum rate by less than this.
    pub eps: f64,
    pub max_iters: usize,
    /// Backtracking factor.
    pub shrink: f64,
    /// Armijo sufficient-increase constant.
    pub sufficient_increase: f64,
    pub max_backtracks: usize,
    /// Largest element move of the very first trial step.
    pub initial_move: f64,
    /// Ascend along the fixed-`t` gradient and test steps at the frozen `t`,
    /// instead of following the total derivative with `t` refreshed at
    /// every trial point.
    pub freeze_power_factor: bool,
    pub rates: AsymptoticOptions,
}

impl Default for PgamOptions {
    fn default() -> Self {
        PgamOptions {
            eps: 1e-4,
            max_iters: 50,
            shrink: 0.5,
            sufficient_increase: 1e-4,
            max_backtracks: 30,
            initial_move: 0.5,
            freeze_power_factor: false,
            rates: AsymptoticOptions::default(),
        }
    }
}

/// Iteration history of [`optimize`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PgamTrace {
    /// Sum rate before the first step and after every accepted step.
    pub sum_rates: Vec<f64>,
    /// Accepted step sizes.
    pub steps: Vec<f64>,
    /// `‖P(θ + αδ) − (θ + αδ)‖` of every accepted step.
    pub projection_residuals: Vec<f64>,
    /// `‖δ‖` at the start of every iteration.
    pub grad_norms: Vec<f64>,
    /// Power factor used in every iteration.
    pub power_factors: Vec<f64>,
    pub converged: bool,
    /// The line search found no acceptable step.
    pub stalled: bool,
    pub theta: ThetaState,
}

impl PgamTrace {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn final_sum_rate(&self) -> f64 {
        *self.sum_rates.last().expect("trace holds the initial rate")
    }
}

/// Maximizes the closed-form sum rate from `theta0`.
///
/// Every iteration takes an Armijo-backtracked projected step from a
/// Barzilai–Borwein guess. By default the direction is the total derivative
/// (through the power factor as well) and each trial point is scored with
/// its own power factor. With [`PgamOptions::freeze_power_factor`] the
/// direction and the Armijo test use the power factor of the current
/// iterate, and an accepted point must also not lose rate once its power
/// factor is refreshed. Either way the recorded sum rates never decrease.
pub fn optimize(
    stats: &ChannelStats,
    cfg: &SystemConfig,
    theta0: &ThetaState,
    opts: &PgamOptions,
) -> Result<PgamTrace> {
    check_inputs(stats, cfg)?;
    theta0.validate()?;
    if !(opts.eps > 0.0) || !(opts.shrink > 0.0 && opts.shrink < 1.0) || !(opts.initial_move > 0.0)
    {
        return Err(Error::Config(
            "eps and initial move must be positive, shrink in (0, 1)".into(),
        ));
    }
    let panels = theta0.panels().to_vec();
    let ro = &opts.rates;
    let mut theta = theta0.clone();
    let t0 = solve_prop2(stats, &theta, cfg, &ro.solver)?.t;
    let mut cur = evaluate(stats, cfg, &theta, t0, ro, None)?;
    let mut trace = PgamTrace {
        sum_rates: vec![cur.value],
        steps: Vec::new(),
        projection_residuals: Vec::new(),
        grad_norms: Vec::new(),
        power_factors: vec![t0],
        converged: false,
        stalled: false,
        theta: theta.clone(),
    };
    let mut prev: Option<([CVec; 2], [CVec; 2], f64)> = None;
    for iteration in 1..=opts.max_iters {
        let grad = if opts.freeze_power_factor {
            gradient_of(&cur, ro)?
        } else {
            total_gradient(&cur, stats, &theta, cfg, ro)?
        };
        let gnorm = inner(&grad, &grad).sqrt();
        trace.grad_norms.push(gnorm);
        if gnorm == 0.0 {
            trace.converged = true;
            break;
        }
        let x = theta.sides().clone();
        let largest = grad
            .iter()
            .flat_map(|g| g.iter().map(|v| v.norm()))
            .fold(0.0, f64::max);
        let mut alpha = match &prev {
            Some((px, pg, pa)) => {
                let s = diff(&x, px);
                let y = diff(pg, &grad);
                let sy = inner(&s, &y);
                if sy > 0.0 {
                    inner(&s, &s) / sy
                } else {
                    2.0 * pa
                }
            }
            None => opts.initial_move / largest,
        };
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let raw = axpy(&x, alpha, &grad);
            let cand = project(&raw, &panels)?;
            let d = diff(cand.sides(), &x);
            let resid = inner(&diff(&raw, cand.sides()), &diff(&raw, cand.sides())).sqrt();
            let need = opts.sufficient_increase * inner(&grad, &d).max(0.0);
            let scored = if opts.freeze_power_factor {
                let fixed = evaluate(stats, cfg, &cand, cur.t, ro, Some(&cur))?;
                if fixed.value >= cur.value + need {
                    let t_new = solve_prop2(stats, &cand, cfg, &ro.solver)?.t;
                    let fresh = evaluate(stats, cfg, &cand, t_new, ro, Some(&fixed))?;
                    Some(fresh).filter(|f| f.value >= cur.value)
                } else {
                    None
                }
            } else {
                let t_new = solve_prop2(stats, &cand, cfg, &ro.solver)?.t;
                Some(evaluate(stats, cfg, &cand, t_new, ro, Some(&cur))?)
                    .filter(|f| f.value >= cur.value + need)
            };
            if let Some(fresh) = scored {
                accepted = Some((cand, fresh, resid));
                break;
            }
            alpha *= opts.shrink;
        }
        let Some((cand, fresh, resid)) = accepted else {
            log::warn!("line search exhausted at iteration {iteration}");
            trace.stalled = true;
            break;
        };
        let change = fresh.value - cur.value;
        log::debug!(
            "iteration {iteration}: sum rate {:.6} (+{change:.2e}), step {alpha:.3e}",
            fresh.value
        );
        prev = Some((x, grad, alpha));
        trace.steps.push(alpha);
        trace.projection_residuals.push(resid);
        trace.sum_rates.push(fresh.value);
        trace.power_factors.push(fresh.t);
        theta = cand;
        cur = fresh;
        if change.abs() < opts.eps {
            trace.converged = true;
            break;
        }
    }
    trace.theta = theta;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::rates_closed;
    use crate::freeprob::SolverOptions;
    use crate::model::{generate_stats, normalize_direct_gain, ScenarioParams};
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
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
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let theta = ThetaState::random(cfg.panels.clone(), &mut rng);
        let stats = normalize_direct_gain(&stats, &theta).unwrap();
        (cfg, stats, theta)
    }

    fn tight() -> SolverOptions {
        SolverOptions {
            tolerance: 1e-13,
            ..Default::default()
        }
    }

    fn phi_at(stats: &ChannelStats, theta: &ThetaState, x: f64) -> f64 {
        let sys = Prop1System::new(stats, theta, true).unwrap();
        solve_negative(&sys, x, None, &tight())
            .unwrap()
            .free_energy()
            .re
    }

    #[test]
    fn projection_examples() {
        let one = |v: C64| Array1::from_elem(1, v);
        let p = project(&[one(C64::new(1.0, 0.0)), one(C64::new(1.0, 0.0))], &[1]).unwrap();
        let h = 0.5f64.sqrt();
        assert!((p.side(0)[0] - C64::new(h, 0.0)).norm() < 1e-15);
        assert!((p.side(1)[0] - C64::new(h, 0.0)).norm() < 1e-15);
        let a = C64::from_polar(3.0, std::f64::consts::FRAC_PI_3);
        let p = project(&[one(a), one(C64::new(4.0, 0.0))], &[1]).unwrap();
        assert!((p.side(0)[0] - C64::from_polar(0.6, std::f64::consts::FRAC_PI_3)).norm() < 1e-15);
        assert!((p.side(1)[0] - C64::new(0.8, 0.0)).norm() < 1e-15);
        let zero = one(C64::new(0.0, 0.0));
        assert!(matches!(
            project(&[zero.clone(), zero], &[1]),
            Err(Error::Degenerate(_))
        ));
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let panels = vec![3, 2];
            let raw = [0, 1].map(|_| -> CVec {
                (0..5).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * scale).collect()
            });
            let p = project(&raw, &panels).unwrap();
            prop_assert!(p.feasibility_defect() < 1e-12);
            let q = project(p.sides(), &panels).unwrap();
            for i in 0..2 {
                for (a, b) in p.side(i).iter().zip(q.side(i).iter()) {
                    prop_assert!((a - b).norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn gradient_phi_matches_finite_differences() {
        let (_, stats, theta) = scenario([4, 4], 4, vec![2, 2], 3);
        let x = -0.6;
        let sys = Prop1System::new(&stats, &theta, true).unwrap();
        let sol = solve_negative(&sys, x, None, &tight()).unwrap();
        let wrapped = ClosedFormSolution {
            z: sol.z,
            phi_raw: sol.free_energy(),
            sol,
        };
        let g = gradient_phi(&wrapped, &stats, &theta).unwrap();
        let l = theta.total_elements();
        let h = 1e-5;
        for i in 0..2 {
            for e in 0..l {
                let d = |v: C64| phi_at(&stats, &theta.perturbed(i, e, v), x);
                let dre = (d(C64::new(h, 0.0)) - d(C64::new(-h, 0.0))) / (2.0 * h);
                let dim = (d(C64::new(0.0, h)) - d(C64::new(0.0, -h))) / (2.0 * h);
                let fd = C64::new(dre, dim) * 0.5;
                let a = g[i * l + e];
                assert!(
                    (a - fd).norm() < 1e-4 * fd.norm().max(1e-3),
                    "side {i} element {e}: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn zero_user_side_mean_leaves_only_scatter_terms() {
        let (_, mut stats, theta) = scenario([4, 4], 3, vec![2], 4);
        for pair in stats.ris_user.iter_mut() {
            for link in pair.iter_mut() {
                link.los.fill(C64::new(0.0, 0.0));
                link.profile.fill(0.0);
            }
        }
        let sys = Prop1System::new(&stats, &theta, true).unwrap();
        let sol = sys
            .solve(C64::new(-1.0, 0.0), None, &SolverOptions::default())
            .unwrap();
        let wrapped = ClosedFormSolution {
            z: sol.z,
            phi_raw: sol.free_energy(),
            sol,
        };
        let g = gradient_phi(&wrapped, &stats, &theta).unwrap();
        assert!(g.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn rate_points_reproduce_closed_rates() {
        let (cfg, stats, theta) = scenario([5, 4], 3, vec![2, 2], 5);
        let opts = AsymptoticOptions::default();
        let t = solve_prop2(&stats, &theta, &cfg, &opts.solver).unwrap().t;
        let closed = rates_closed(&stats, &theta, &cfg, &opts).unwrap();
        let s = sum_rate(&stats, &theta, &cfg, t, &opts).unwrap();
        assert!(
            (s - closed.sum()).abs() < 1e-7 * closed.sum(),
            "{s} vs {}",
            closed.sum()
        );
        // Swapped orientation.
        let (cfg, stats, theta) = scenario([3, 5], 4, vec![2], 6);
        let t = solve_prop2(&stats, &theta, &cfg, &opts.solver).unwrap().t;
        let closed = rates_closed(&stats, &theta, &cfg, &opts).unwrap();
        let s = sum_rate(&stats, &theta, &cfg, t, &opts).unwrap();
        assert!(
            (s - closed.sum()).abs() < 1e-7 * closed.sum(),
            "{s} vs {}",
            closed.sum()
        );
    }

    #[test]
    fn equal_power_split_cancels_user_two_points() {
        let p = rate_points(4, 0, false, 2.0, 3.0, 1.0);
        // Only user 1's kernel A points survive.
        assert_eq!(p.points.len(), 2);
        assert!(p.points.iter().any(|&(x, w)| x == -1.0 / 3.0 && w == 1.0));
        assert!(p.points.iter().any(|&(x, w)| x == -1.0 && w == -1.0));
    }

    #[test]
    fn sum_rate_gradient_matches_finite_differences() {
        for (r, t, panels, seed) in [
            ([4, 4], 3, vec![2, 1], 7u64),
            ([3, 4], 3, vec![2], 8),
            ([3, 4], 5, vec![2], 8),
        ] {
            let (cfg, stats, theta) = scenario(r, t, panels, seed);
            let opts = AsymptoticOptions {
                solver: tight(),
                ..Default::default()
            };
            let tf = solve_prop2(&stats, &theta, &cfg, &opts.solver).unwrap().t;
            let g = gradient_sum_rate(&stats, &theta, &cfg, tf, &opts).unwrap();
            let h = 1e-5;
            let f = |th: ThetaState| {
                let problem = SpectralProblem::new(&stats, &th, &cfg, opts.delta).unwrap();
                let sys = problem.system(true).unwrap();
                let (a1, a2) = integration_limits(&cfg, tf, false);
                let p = rate_points(
                    problem.s,
                    problem.zeros_b,
                    problem.swapped,
                    a1,
                    a2,
                    cfg.kappa[0],
                );
                let v: f64 = p
                    .points
                    .iter()
                    .map(|&(x, w)| {
                        w * solve_negative(&sys, x, None, &opts.solver)
                            .unwrap()
                            .free_energy()
                            .re
                    })
                    .sum();
                opts.unit.from_nats(v + p.offset)
            };
            for i in 0..2 {
                for e in 0..theta.total_elements() {
                    let dre = (f(theta.perturbed(i, e, C64::new(h, 0.0)))
                        - f(theta.perturbed(i, e, C64::new(-h, 0.0))))
                        / (2.0 * h);
                    let dim = (f(theta.perturbed(i, e, C64::new(0.0, h)))
                        - f(theta.perturbed(i, e, C64::new(0.0, -h))))
                        / (2.0 * h);
                    let fd = C64::new(dre, dim);
                    assert!(
                        (g[i][e] - fd).norm() < 1e-4 * fd.norm().max(1e-3),
                        "{r:?} side {i} element {e}: {} vs {fd}",
                        g[i][e]
                    );
                }
            }
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences_of_the_refreshed_rate() {
        let (cfg, stats, theta) = scenario([3, 3], 4, vec![2, 1], 11);
        let opts = AsymptoticOptions {
            solver: tight(),
            ..Default::default()
        };
        let (_, g) = gradient_sum_rate_total(&stats, &theta, &cfg, &opts).unwrap();
        let f = |th: ThetaState| {
            let t = solve_prop2(&stats, &th, &cfg, &opts.solver).unwrap().t;
            sum_rate(&stats, &th, &cfg, t, &opts).unwrap()
        };
        let h = 1e-5;
        for i in 0..2 {
            for e in 0..theta.total_elements() {
                let d = |v: C64| f(theta.perturbed(i, e, v));
                let fd = C64::new(
                    d(C64::new(h, 0.0)) - d(C64::new(-h, 0.0)),
                    d(C64::new(0.0, h)) - d(C64::new(0.0, -h)),
                ) / (2.0 * h);
                assert!(
                    (g[i][e] - fd).norm() < 1e-4 * fd.norm().max(1e-3),
                    "side {i} element {e}: {} vs {fd}",
                    g[i][e]
                );
            }
        }
    }

    #[test]
    fn frozen_power_factor_still_records_monotone_rates() {
        let (cfg, stats, theta) = scenario([4, 4], 3, vec![3, 3], 12);
        let opts = PgamOptions {
            freeze_power_factor: true,
            max_iters: 8,
            ..Default::default()
        };
        let trace = optimize(&stats, &cfg, &theta, &opts).unwrap();
        assert!(trace.sum_rates.windows(2).all(|w| w[1] >= w[0]));
        assert!(trace.theta.feasibility_defect() < 1e-12);
    }

    #[test]
    fn huge_tolerance_stops_after_one_step() {
        let (cfg, stats, theta) = scenario([4, 4], 3, vec![3, 3], 9);
        let opts = PgamOptions {
            eps: 1e3,
            ..Default::default()
        };
        let trace = optimize(&stats, &cfg, &theta, &opts).unwrap();
        assert_eq!(trace.iterations(), 1);
        assert!(trace.converged);
        assert!(trace.final_sum_rate() >= trace.sum_rates[0]);
        assert!(trace.theta.feasibility_defect() < 1e-12);
    }

    #[test]
    fn ascent_is_monotone_and_converges() {
        let (cfg, stats, theta) = scenario([5, 5], 4, vec![4, 4], 10);
        let trace = optimize(&stats, &cfg, &theta, &PgamOptions::default()).unwrap();
        assert!(trace.converged, "{trace:?}");
        assert!(trace.sum_rates.windows(2).all(|w| w[1] >= w[0]));
        assert!(trace.final_sum_rate() > trace.sum_rates[0]);
        assert_eq!(trace.power_factors.len(), trace.sum_rates.len());
    }

    #[test]
    fn rejects_random_bs_links() {
        let cfg = SystemConfig::new(3, [4, 4], vec![2]);
        let stats = generate_stats(&cfg, &ScenarioParams::default(), 1).unwrap();
        let theta = ThetaState::uniform_split(cfg.panels.clone());
        assert!(matches!(
            optimize(&stats, &cfg, &theta, &PgamOptions::default()),
            Err(Error::Contract(_))
        ));
    }
}
