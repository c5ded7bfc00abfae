//! Spectral density and distribution of the GSV ratios.
//!
//! The distribution function comes from the counting function
//! `#{λ ≤ x} = (Im φ(x₀ + iε) − Im φ(x + iε)) / π`, where `φ` is the free
//! energy with `dφ/dz = Tr G11` and `x₀ < 0` lies left of the spectrum. The
//! phase is unwrapped along a path through the upper half-plane, so the
//! result is the exact integral of `−Im G / π` including mass outside any
//! finite grid.

use std::f64::consts::PI;

use super::prop1::{FixedPointSolution, Prop1State};
use super::rates::SpectralEvaluator;
use crate::error::{Error, Result};
use crate::linalg::{wrap_phase, C64};

/// `−Im G_μ(x + iε) / π`.
pub fn ratio_density(eval: &SpectralEvaluator, x: f64) -> Result<f64> {
    Ok(-eval.scaled_cauchy_mu(x)?.im / (PI * eval.s as f64))
}

struct Walker<'a> {
    eval: &'a SpectralEvaluator,
    state: Option<Prop1State>,
    phase: f64,
    last: f64,
    solves: usize,
}

const MAX_BISECTIONS: usize = 12;

impl<'a> Walker<'a> {
    fn solve(&mut self, z: C64) -> Result<FixedPointSolution> {
        let sys = &self.eval.system;
        let opts = &self.eval.opts;
        self.solves += 1;
        let sol = match &self.state {
            Some(s) => match sys.solve_from(z, Some(s), opts) {
                Ok(x) => x,
                Err(Error::NoConvergence { .. }) | Err(Error::Singular { .. }) => {
                    sys.solve(z, None, opts)?
                }
                Err(e) => return Err(e),
            },
            None => sys.solve(z, None, opts)?,
        };
        self.state = Some(sol.state.clone());
        Ok(sol)
    }

    fn start(eval: &'a SpectralEvaluator, z: C64) -> Result<Self> {
        let mut w = Walker {
            eval,
            state: None,
            phase: 0.0,
            last: 0.0,
            solves: 0,
        };
        let sol = w.solve(z)?;
        w.phase = sol.free_energy().im;
        w.last = w.phase;
        Ok(w)
    }

    /// Moves along the segment to `to`, bisecting until every phase step is
    /// below `π/2`.
    fn walk(&mut self, from: C64, to: C64) -> Result<()> {
        let mut stack = vec![(to, 0usize)];
        let mut here = from;
        while let Some((target, depth)) = stack.pop() {
            let saved = (self.state.clone(), self.phase, self.last);
            let sol = self.solve(target)?;
            let raw = sol.free_energy().im;
            let step = wrap_phase(raw - self.last);
            if step.abs() > 0.5 * PI && depth < MAX_BISECTIONS {
                (self.state, self.phase, self.last) = saved;
                stack.push((target, depth + 1));
                stack.push(((here + target) * 0.5, depth + 1));
                continue;
            }
            self.phase += step;
            self.last = raw;
            here = target;
        }
        Ok(())
    }
}

/// Distribution function of the GSV ratios at every point of an increasing
/// positive grid, plus the number of resolvent solves spent.
pub fn ratio_cdf(eval: &SpectralEvaluator, grid: &[f64]) -> Result<(Vec<f64>, usize)> {
    if grid.is_empty() || grid[0] <= 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Contract(
            "grid must be positive and strictly increasing".into(),
        ));
    }
    let eps = eval.opts.epsilon;
    let height = 1.0;
    let x0 = -1.0;
    let origin = C64::new(x0, eps);
    let mut w = Walker::start(eval, origin)?;
    let reference = w.phase;
    // Up, across above the spectrum's left edge, and down onto the grid.
    let rungs = |x: f64| {
        let n = 8;
        (0..=n).map(move |j| C64::new(x, eps * (height / eps).powf(j as f64 / n as f64)))
    };
    let mut path: Vec<C64> = rungs(x0).collect();
    path.push(C64::new(grid[0], height));
    path.extend(rungs(grid[0]).rev().skip(1));
    for pair in path.windows(2) {
        w.walk(pair[0], pair[1])?;
    }
    let s = eval.s as f64;
    let zeros = eval.zeros_b as f64;
    let mut out = Vec::with_capacity(grid.len());
    let mut prev = C64::new(grid[0], eps);
    for &x in grid {
        let z = C64::new(x, eps);
        if z != prev {
            w.walk(prev, z)?;
        }
        prev = z;
        let below = (reference - w.phase) / PI;
        out.push(((below - zeros) / s).clamp(0.0, 1.0));
    }
    Ok((out, w.solves))
}

/// Empirical distribution function of `samples` on `grid`.
pub fn empirical_cdf(samples: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    grid.iter()
        .map(|&x| v.partition_point(|&y| y <= x) as f64 / n)
        .collect()
}

/// Largest gap between two distribution functions sampled on one grid.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `n` log-spaced points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|j| (a + (b - a) * j as f64 / (n - 1) as f64).exp())
        .collect()
}
