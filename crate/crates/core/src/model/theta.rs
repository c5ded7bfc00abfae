use std::f64::consts::TAU;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CVec, C64};

/// STAR-RIS coefficients: `theta[i][l] = sqrt(beta_i(l)) e^{j phase_i(l)}`
/// for side `i` (0 = towards user 1, 1 = towards user 2), elements of all
/// panels concatenated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaState {
    panels: Vec<usize>,
    theta: [CVec; 2],
}

/// Largest tolerated violation of `|θ₁|² + |θ₂|² = 1`.
pub const FEASIBILITY_TOL: f64 = 1e-12;

impl ThetaState {
    /// Builds from complex coefficients, which must already be feasible.
    pub fn from_complex(panels: Vec<usize>, theta: [CVec; 2]) -> Result<Self> {
        let state = ThetaState { panels, theta };
        state.validate()?;
        Ok(state)
    }

    pub fn from_phases(panels: Vec<usize>, phases: [&[f64]; 2], betas: &[f64]) -> Result<Self> {
        let l: usize = panels.iter().sum();
        if phases[0].len() != l || phases[1].len() != l || betas.len() != l {
            return Err(Error::Dimension(format!(
                "expected {l} phases and splits per side"
            )));
        }
        if betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("amplitude splits must lie in [0, 1]".into()));
        }
        let side = |i: usize| -> CVec {
            (0..l)
                .map(|e| {
                    let b = if i == 0 { betas[e] } else { 1.0 - betas[e] };
                    C64::from_polar(b.sqrt(), phases[i][e])
                })
                .collect()
        };
        Self::from_complex(panels, [side(0), side(1)])
    }

    /// Equal split, zero phases.
    pub fn uniform_split(panels: Vec<usize>) -> Self {
        let l: usize = panels.iter().sum();
        let a = C64::new(0.5f64.sqrt(), 0.0);
        ThetaState {
            panels,
            theta: [Array1::from_elem(l, a), Array1::from_elem(l, a)],
        }
    }

    /// Equal split with independent uniform phases per element and side.
    pub fn random_phases<R: Rng + ?Sized>(panels: Vec<usize>, rng: &mut R) -> Self {
        let l: usize = panels.iter().sum();
        let a = 0.5f64.sqrt();
        let mut side = || -> CVec {
            (0..l)
                .map(|_| C64::from_polar(a, rng.random::<f64>() * TAU))
                .collect()
        };
        let t0 = side();
        let t1 = side();
        ThetaState {
            panels,
            theta: [t0, t1],
        }
    }

    /// Uniform phases and uniform amplitude split.
    pub fn random<R: Rng + ?Sized>(panels: Vec<usize>, rng: &mut R) -> Self {
        let l: usize = panels.iter().sum();
        let mut t0 = CVec::zeros(l);
        let mut t1 = CVec::zeros(l);
        for e in 0..l {
            let beta: f64 = rng.random();
            t0[e] = C64::from_polar(beta.sqrt(), rng.random::<f64>() * TAU);
            t1[e] = C64::from_polar((1.0 - beta).sqrt(), rng.random::<f64>() * TAU);
        }
        ThetaState {
            panels,
            theta: [t0, t1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l: usize = self.panels.iter().sum();
        if self.theta[0].len() != l || self.theta[1].len() != l {
            return Err(Error::Dimension(format!(
                "coefficient vectors of length {} and {} for {l} elements",
                self.theta[0].len(),
                self.theta[1].len()
            )));
        }
        let worst = self.feasibility_defect();
        if worst > FEASIBILITY_TOL {
            return Err(Error::Config(format!(
                "element powers violate the split constraint by {worst:.2e}"
            )));
        }
        Ok(())
    }

    /// Copy with `delta` added to element `e` of side `i`. The result may
    /// violate the split constraint; it serves derivative probes of
    /// quantities that are defined for arbitrary coefficients.
    pub fn perturbed(&self, i: usize, e: usize, delta: C64) -> ThetaState {
        let mut out = self.clone();
        out.theta[i][e] += delta;
        out
    }

    pub fn feasibility_defect(&self) -> f64 {
        self.theta[0]
            .iter()
            .zip(self.theta[1].iter())
            .map(|(a, b)| (a.norm_sqr() + b.norm_sqr() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn panels(&self) -> &[usize] {
        &self.panels
    }

    pub fn total_elements(&self) -> usize {
        self.theta[0].len()
    }

    /// Offset of panel `k` in the concatenated element index.
    pub fn offset(&self, k: usize) -> usize {
        self.panels[..k].iter().sum()
    }

    pub fn side(&self, i: usize) -> &CVec {
        &self.theta[i]
    }

    pub fn sides(&self) -> &[CVec; 2] {
        &self.theta
    }

    /// Diagonal of `Θ_{k,i}`.
    pub fn panel(&self, k: usize, i: usize) -> &[C64] {
        let o = self.offset(k);
        &self.theta[i].as_slice().unwrap()[o..o + self.panels[k]]
    }

    pub fn phases(&self, i: usize) -> Vec<f64> {
        self.theta[i]
            .iter()
            .map(|v| v.arg().rem_euclid(TAU))
            .collect()
    }

    pub fn betas(&self) -> Vec<f64> {
        self.theta[0].iter().map(|v| v.norm_sqr()).collect()
    }

    /// Keeps only the first `k` panels.
    pub fn truncated(&self, k: usize) -> ThetaState {
        let panels: Vec<usize> = self.panels[..k].to_vec();
        let l: usize = panels.iter().sum();
        ThetaState {
            theta: [
                self.theta[0].slice(ndarray::s![..l]).to_owned(),
                self.theta[1].slice(ndarray::s![..l]).to_owned(),
            ],
            panels,
        }
    }

    /// Exchanges the roles of the two sides.
    pub fn swapped(&self) -> ThetaState {
        ThetaState {
            panels: self.panels.clone(),
            theta: [self.theta[1].clone(), self.theta[0].clone()],
        }
    }
}
