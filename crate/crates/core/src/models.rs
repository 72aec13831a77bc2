//! Model Hamiltonians `H = p^2/2m + V(q)`.

use std::f64::consts::PI;

use crate::error::{config, Result};
use crate::phase::{PhasePoint, WeylConventions};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PotentialModel {
    /// `V = D0 (1 - exp(-alpha (q - qe)))^2`
    Morse { d0: f64, alpha: f64, qe: f64 },
    /// `V = m omega^2 (q - qe)^2 / 2`
    Harmonic { omega: f64, qe: f64 },
    Free,
}

impl PotentialModel {
    pub fn name(&self) -> &'static str {
        match self {
            PotentialModel::Morse { .. } => "morse",
            PotentialModel::Harmonic { .. } => "harmonic",
            PotentialModel::Free => "free",
        }
    }

    /// Short text form, e.g. `morse(D0=1,alpha=1.25,qe=0)`.
    pub fn descriptor(&self) -> String {
        match *self {
            PotentialModel::Morse { d0, alpha, qe } => format!("morse(D0={d0},alpha={alpha},qe={qe})"),
            PotentialModel::Harmonic { omega, qe } => format!("harmonic(omega={omega},qe={qe})"),
            PotentialModel::Free => "free".to_string(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            PotentialModel::Morse { d0, alpha, qe } => {
                if !(d0.is_finite() && d0 > 0.0) {
                    return config(format!("D0 must be positive, got {d0}"));
                }
                if !(alpha.is_finite() && alpha > 0.0) {
                    return config(format!("alpha must be positive, got {alpha}"));
                }
                if !qe.is_finite() {
                    return config("qe must be finite");
                }
            }
            PotentialModel::Harmonic { omega, qe } => {
                if !(omega.is_finite() && omega >= 0.0) {
                    return config(format!("omega must be non-negative, got {omega}"));
                }
                if !qe.is_finite() {
                    return config("qe must be finite");
                }
            }
            PotentialModel::Free => {}
        }
        Ok(())
    }
}

/// Morse bound-state count together with the parameter it derives from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundStates {
    pub lambda: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystemParams {
    pub mass: f64,
    pub conv: WeylConventions,
    pub potential: PotentialModel,
}

impl SystemParams {
    pub fn new(mass: f64, potential: PotentialModel, conv: WeylConventions) -> Result<Self> {
        if !(mass.is_finite() && mass > 0.0) {
            return config(format!("mass must be positive, got {mass}"));
        }
        potential.validate()?;
        Ok(Self { mass, conv, potential })
    }

    /// The Morse system of the reference figures: m = 0.5, D0 = 1, alpha = 1.25, qe = 0.
    pub fn morse_reference() -> Self {
        Self {
            mass: 0.5,
            conv: WeylConventions::default(),
            potential: PotentialModel::Morse { d0: 1.0, alpha: 1.25, qe: 0.0 },
        }
    }

    pub fn hbar(&self) -> f64 {
        self.conv.hbar()
    }

    pub fn with_mass(&self, mass: f64) -> Result<Self> {
        Self::new(mass, self.potential, self.conv)
    }

    pub fn potential(&self, q: f64) -> f64 {
        match self.potential {
            PotentialModel::Morse { d0, alpha, qe } => {
                let y = 1.0 - (-alpha * (q - qe)).exp();
                d0 * y * y
            }
            PotentialModel::Harmonic { omega, qe } => 0.5 * self.mass * omega * omega * (q - qe).powi(2),
            PotentialModel::Free => 0.0,
        }
    }

    /// `-dV/dq`.
    pub fn force(&self, q: f64) -> f64 {
        match self.potential {
            PotentialModel::Morse { d0, alpha, qe } => {
                let e = (-alpha * (q - qe)).exp();
                -2.0 * d0 * alpha * e * (1.0 - e)
            }
            PotentialModel::Harmonic { omega, qe } => -self.mass * omega * omega * (q - qe),
            PotentialModel::Free => 0.0,
        }
    }

    /// `d^2V/dq^2`.
    pub fn curvature(&self, q: f64) -> f64 {
        match self.potential {
            PotentialModel::Morse { d0, alpha, qe } => {
                let e = (-alpha * (q - qe)).exp();
                2.0 * d0 * alpha * alpha * e * (2.0 * e - 1.0)
            }
            PotentialModel::Harmonic { omega, .. } => self.mass * omega * omega,
            PotentialModel::Free => 0.0,
        }
    }

    pub fn hamiltonian(&self, r: PhasePoint) -> f64 {
        r.p * r.p / (2.0 * self.mass) + self.potential(r.q)
    }

    /// `omega_M = sqrt(2 alpha^2 D0 / m)`.
    pub fn morse_frequency(&self) -> Result<f64> {
        match self.potential {
            PotentialModel::Morse { d0, alpha, .. } => Ok((2.0 * alpha * alpha * d0 / self.mass).sqrt()),
            other => config(format!("morse_frequency needs a morse potential, got {}", other.name())),
        }
    }

    /// `lambda = sqrt(2 m D0) / (alpha hbar)`.
    pub fn bound_state_parameter(&self) -> Result<BoundStates> {
        match self.potential {
            PotentialModel::Morse { d0, alpha, .. } => {
                let lambda = (2.0 * self.mass * d0).sqrt() / (alpha * self.hbar());
                let count = if lambda > 0.5 { (lambda - 0.5).floor() as usize + 1 } else { 0 };
                Ok(BoundStates { lambda, count })
            }
            other => config(format!("bound_state_parameter needs a morse potential, got {}", other.name())),
        }
    }

    /// Analytic Morse level `E_n = hbar w (n+1/2) - (hbar w (n+1/2))^2 / (4 D0)`.
    pub fn morse_level(&self, n: usize) -> Result<f64> {
        let w = self.morse_frequency()?;
        let PotentialModel::Morse { d0, .. } = self.potential else { unreachable!() };
        let x = self.hbar() * w * (n as f64 + 0.5);
        Ok(x - x * x / (4.0 * d0))
    }

    /// Small-oscillation frequency: `omega_M` for Morse, `omega` for harmonic.
    pub fn natural_frequency(&self) -> Result<f64> {
        match self.potential {
            PotentialModel::Morse { .. } => self.morse_frequency(),
            PotentialModel::Harmonic { omega, .. } if omega > 0.0 => Ok(omega),
            other => config(format!("{} potential has no natural frequency", other.descriptor())),
        }
    }

    /// `2 pi / (4 omega)`.
    pub fn quarter_period(&self) -> Result<f64> {
        Ok(2.0 * PI / (4.0 * self.natural_frequency()?))
    }

    /// Harmonic approximation at the potential minimum.
    pub fn harmonic_of(&self) -> Result<Self> {
        let potential = match self.potential {
            PotentialModel::Morse { qe, .. } => PotentialModel::Harmonic { omega: self.morse_frequency()?, qe },
            h @ PotentialModel::Harmonic { .. } => h,
            PotentialModel::Free => return config("free particle has no harmonic approximation"),
        };
        Self::new(self.mass, potential, self.conv)
    }

    /// `(V(q + qt/2) - V(q - qt/2), qt V'(q))`: the non-local and local potential terms.
    pub fn action_integrand(&self, q: f64, qt: f64) -> (f64, f64) {
        let nonlocal = self.potential(q + 0.5 * qt) - self.potential(q - 0.5 * qt);
        let local = -qt * self.force(q);
        (nonlocal, local)
    }

    pub fn descriptor(&self) -> String {
        format!("{};m={};hbar={}", self.potential.descriptor(), self.mass, self.hbar())
    }
}
