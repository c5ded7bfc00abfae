use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Antenna regime of the GSVD precoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `T ≤ min(R1, R2)`: every transmit dimension is shared.
    Coupled,
    /// `min(R1, R2) < T < R1 + R2`: shared subchannels plus private ones.
    Mixed,
    /// `T ≥ R1 + R2`: only private subchannels.
    Private,
}

/// System dimensions, powers and NOMA splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub tx: usize,
    pub rx: [usize; 2],
    /// Elements per STAR-RIS panel; the panel count is its length.
    pub panels: Vec<usize>,
    pub power: f64,
    pub sigma0_sq: f64,
    pub kappa: [f64; 2],
    pub rho: [f64; 2],
}

impl SystemConfig {
    pub fn new(tx: usize, rx: [usize; 2], panels: Vec<usize>) -> Self {
        SystemConfig {
            tx,
            rx,
            panels,
            power: 1.0,
            sigma0_sq: 1.0,
            kappa: [0.1, 0.9],
            rho: [5.0, 1.0],
        }
    }

    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.sigma0_sq = 10f64.powf(-snr_db / 10.0);
        self
    }

    pub fn with_kappa1(mut self, kappa1: f64) -> Self {
        self.kappa = [kappa1, 1.0 - kappa1];
        self
    }

    pub fn with_rho(mut self, rho: [f64; 2]) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_power(mut self, power: f64) -> Self {
        self.power = power;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tx == 0 || self.rx.iter().any(|&r| r == 0) || self.panels.iter().any(|&l| l == 0) {
            return Err(Error::Config(
                "antenna and element counts must be at least 1".into(),
            ));
        }
        if !(self.power > 0.0) || !(self.sigma0_sq > 0.0) || self.rho.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config(
                "power, noise variance and channel gains must be positive".into(),
            ));
        }
        if self.kappa.iter().any(|&k| !(0.0..=1.0).contains(&k))
            || (self.kappa[0] + self.kappa[1] - 1.0).abs() > 1e-12
        {
            return Err(Error::Config(format!(
                "power fractions {:?} must lie in [0, 1] and sum to one",
                self.kappa
            )));
        }
        Ok(())
    }

    pub fn num_panels(&self) -> usize {
        self.panels.len()
    }

    pub fn total_elements(&self) -> usize {
        self.panels.iter().sum()
    }

    /// Number of coupled GSVD subchannels.
    pub fn s(&self) -> usize {
        coupled_count(self.tx, self.rx)
    }

    pub fn regime(&self) -> Regime {
        regime_of(self.tx, self.rx)
    }

    pub fn snr_db(&self) -> f64 {
        -10.0 * self.sigma0_sq.log10()
    }

    /// Copy keeping only the first `k` panels.
    pub fn truncated(&self, k: usize) -> SystemConfig {
        let mut out = self.clone();
        out.panels.truncate(k);
        out
    }
}

pub fn coupled_count(tx: usize, rx: [usize; 2]) -> usize {
    rx[0].min(tx) + rx[1].min(tx) - (rx[0] + rx[1]).min(tx)
}

pub fn regime_of(tx: usize, rx: [usize; 2]) -> Regime {
    if tx <= rx[0].min(rx[1]) {
        Regime::Coupled
    } else if tx < rx[0] + rx[1] {
        Regime::Mixed
    } else {
        Regime::Private
    }
}
