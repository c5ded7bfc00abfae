//! Deterministic equivalents from operator-valued free probability: the
//! Cauchy transform of `B = H1 (H2† H2)⁻¹ H1†`, the rate integrals built on
//! it, and the asymptotic power normalization factor.

mod iterate;
mod layout;
mod prop1;
mod prop2;
mod rates;
mod spectral;

pub use iterate::{block_residual, fixed_point, IterationReport};
pub use layout::{IndexGroup, Prop1Layout, Prop2Layout};
pub use prop1::{
    cauchy_b, cauchy_mu, is_physical, solve_prop1, spectrum_counts, FixedPointSolution, Prop1State,
    Prop1System, RBlocks, BRANCH_TOL, CONTINUATION_LADDER,
};
pub use prop2::{
    power_factor_gradient, solve_prop2, PowerFixedPoint, Prop2RBlocks, Prop2State, Prop2System,
};
pub use rates::{
    asymptotic_rates, asymptotic_rates_many, asymptotic_snr_sweep, cumulative_integrals,
    integrate_rates, integrate_rates_many, integration_limits, AsymptoticOptions, AsymptoticReport,
    Kernel, QuadratureOptions, SpectralEvaluator, SpectralProblem, DEFAULT_DELTA,
};
pub use spectral::{empirical_cdf, ks_distance, log_grid, ratio_cdf, ratio_density};

use serde::{Deserialize, Serialize};

/// Iteration controls shared by every fixed-point solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Stop when the block-relative change falls below this value.
    pub tolerance: f64,
    pub max_iters: usize,
    /// Mixing weight of the newest image.
    pub damping: f64,
    /// Number of stored differences for Anderson mixing; zero selects plain
    /// damped substitution with step halving.
    pub anderson_depth: usize,
    /// Imaginary offset used for spectral points on the real axis.
    pub epsilon: f64,
    /// Approach small imaginary parts inside the spectrum gradually.
    pub continuation: bool,
    /// Keep the per-sweep residuals in the report.
    pub record_history: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-8,
            max_iters: 5000,
            damping: 0.5,
            anderson_depth: 5,
            epsilon: 1e-6,
            continuation: true,
            record_history: false,
        }
    }
}
