//! Fixed-point driver shared by the resolvent solvers.

use std::ops::Range;

use ndarray::{Array1, Array2};
use ndarray_linalg::LeastSquaresSvd;
use serde::{Deserialize, Serialize};

use super::SolverOptions;
use crate::error::{Error, Result};
use crate::linalg::C64;

/// Outcome of a converged iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iterations: usize,
    pub residual: f64,
    /// Residual after every sweep when requested in the options.
    pub history: Vec<f64>,
}

/// Largest block-wise change `‖g − x‖_F / max(1, ‖g‖_F)`.
pub fn block_residual(x: &[C64], g: &[C64], blocks: &[Range<usize>]) -> f64 {
    blocks
        .iter()
        .map(|b| {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in b.clone() {
                num += (g[j] - x[j]).norm_sqr();
                den += g[j].norm_sqr();
            }
            num.sqrt() / den.sqrt().max(1.0)
        })
        .fold(0.0, f64::max)
}

fn all_finite(v: &[C64]) -> bool {
    v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

/// Iterates `x ← g(x)` until the block residual falls below the tolerance.
///
/// With `anderson_depth = 0` this is damped substitution whose step halves
/// whenever the residual grows. Otherwise Anderson mixing over the last
/// `anderson_depth` differences is used, restarting from a damped step when
/// the residual jumps above ten times its best value.
///
/// Returns the final image `g(x)`.
pub fn fixed_point<F>(
    x0: Vec<C64>,
    blocks: &[Range<usize>],
    opts: &SolverOptions,
    mut g: F,
) -> Result<(Vec<C64>, IterationReport)>
where
    F: FnMut(&[C64]) -> Result<Vec<C64>>,
{
    let n = x0.len();
    let mut x = x0;
    let mut alpha = opts.damping;
    let mut last = f64::INFINITY;
    let mut best = f64::INFINITY;
    let mut history = Vec::new();
    let mut xs: Vec<Vec<C64>> = Vec::new();
    let mut fs: Vec<Vec<C64>> = Vec::new();

    for it in 0..opts.max_iters {
        let gx = g(&x)?;
        if !all_finite(&gx) {
            return Err(Error::NoConvergence {
                iterations: it,
                last: f64::NAN,
                history,
            });
        }
        let res = block_residual(&x, &gx, blocks);
        if opts.record_history {
            history.push(res);
        }
        if res <= opts.tolerance {
            return Ok((
                gx,
                IterationReport {
                    iterations: it + 1,
                    residual: res,
                    history,
                },
            ));
        }
        let f: Vec<C64> = gx.iter().zip(&x).map(|(a, b)| a - b).collect();

        if opts.anderson_depth == 0 {
            if res > last {
                alpha = (alpha * 0.5).max(1e-3);
            }
            last = res;
            for j in 0..n {
                x[j] += f[j] * alpha;
            }
            continue;
        }

        if res > 10.0 * best {
            xs.clear();
            fs.clear();
        }
        best = best.min(res);
        xs.push(x.clone());
        fs.push(f.clone());
        if xs.len() > opts.anderson_depth + 1 {
            xs.remove(0);
            fs.remove(0);
        }
        let beta = opts.damping;
        let m = xs.len() - 1;
        if m == 0 {
            for j in 0..n {
                x[j] += f[j] * beta;
            }
            continue;
        }
        let mut df = Array2::<C64>::zeros((n, m));
        let mut dx = Array2::<C64>::zeros((n, m));
        for c in 0..m {
            for j in 0..n {
                df[[j, c]] = fs[c + 1][j] - fs[c][j];
                dx[[j, c]] = xs[c + 1][j] - xs[c][j];
            }
        }
        let rhs = Array1::from(f.clone());
        let gamma = match df.least_squares(&rhs) {
            Ok(sol) if all_finite(sol.solution.as_slice().unwrap()) => sol.solution,
            _ => {
                xs.clear();
                fs.clear();
                for j in 0..n {
                    x[j] += f[j] * beta;
                }
                continue;
            }
        };
        for j in 0..n {
            let mut corr = C64::new(0.0, 0.0);
            for c in 0..m {
                corr += (dx[[j, c]] + df[[j, c]] * beta) * gamma[c];
            }
            x[j] += f[j] * beta - corr;
        }
    }
    let last = history.last().copied().unwrap_or(f64::NAN);
    Err(Error::NoConvergence {
        iterations: opts.max_iters,
        last,
        history,
    })
}

/// Concatenates matrices into one vector, recording each block's range.
pub fn pack(mats: &[&Array2<C64>]) -> (Vec<C64>, Vec<Range<usize>>) {
    let total = mats.iter().map(|m| m.len()).sum();
    let mut out = Vec::with_capacity(total);
    let mut ranges = Vec::with_capacity(mats.len());
    for m in mats {
        let start = out.len();
        out.extend(m.iter().copied());
        ranges.push(start..out.len());
    }
    (out, ranges)
}

/// Inverse of [`pack`] for the given shapes.
pub fn unpack(v: &[C64], shapes: &[(usize, usize)]) -> Vec<Array2<C64>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut o = 0;
    for &(r, c) in shapes {
        out.push(Array2::from_shape_vec((r, c), v[o..o + r * c].to_vec()).unwrap());
        o += r * c;
    }
    out
}
