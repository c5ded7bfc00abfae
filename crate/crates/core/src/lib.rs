//! Rates of a GSVD-precoded two-user MIMO-NOMA downlink aided by STAR-RIS
//! panels: exact Monte-Carlo evaluation, deterministic equivalents from
//! operator-valued free probability, closed forms for deterministic
//! BS→panel links, and projected gradient ascent over the panel coefficients.

pub mod closed_form;
pub mod error;
pub mod freeprob;
pub mod gsvd;
pub mod linalg;
pub mod mc_rates;
pub mod model;
pub mod pgam;

pub use error::{Error, Result};
pub use model::{
    generate_stats, normalize_direct_gain, sample_realization, ChannelRealization, ChannelStats,
    Link, Regime, ScenarioParams, SystemConfig, ThetaState,
};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
