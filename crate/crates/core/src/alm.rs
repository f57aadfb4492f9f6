//! Penalty-Lagrangian functions and per-class multiplier schedules.
//!
//! The constraint for class `k` is `d̂_k − η ≤ 0`, used in the normalised
//! form `z_k = d̂_k/η − 1`. After every epoch the multipliers move to
//! `P′(z_k, λ_k, ρ_k)` and, every `update_period` epochs, `ρ_k` grows by `β`
//! when the violation `d̂_k − η` is positive and did not shrink.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlmError {
    #[error("penalty parameter must be positive and finite, got {0}")]
    InvalidRho(f64),

    #[error("multiplier must be non-negative and finite, got {0}")]
    InvalidLambda(f64),

    #[error("{what} must be greater than 1, got {value}")]
    InvalidScale { what: &'static str, value: f64 },

    #[error("target size must be positive, got {0}")]
    InvalidEta(f64),

    #[error("rho update period must be at least 1")]
    InvalidPeriod,

    #[error("expected {expected} per-class values, got {got}")]
    Length { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, AlmError>;

/// Lower bound applied to multipliers after each update.
pub const LAMBDA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Phr,
    P2,
    P3,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 3] = [PenaltyKind::Phr, PenaltyKind::P2, PenaltyKind::P3];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::Phr => "phr",
            PenaltyKind::P2 => "p2",
            PenaltyKind::P3 => "p3",
        }
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "phr" => Ok(PenaltyKind::Phr),
            "p2" => Ok(PenaltyKind::P2),
            "p3" => Ok(PenaltyKind::P3),
            other => Err(format!("unknown penalty function `{other}`")),
        }
    }
}

fn check(lambda: f64, rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(AlmError::InvalidRho(rho));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(AlmError::InvalidLambda(lambda));
    }
    Ok(())
}

/// `P(z, λ, ρ)`.
pub fn penalty(kind: PenaltyKind, z: f64, lambda: f64, rho: f64) -> Result<f64> {
    check(lambda, rho)?;
    Ok(match kind {
        PenaltyKind::Phr => {
            if lambda + rho * z >= 0.0 {
                lambda * z + 0.5 * rho * z * z
            } else {
                -lambda * lambda / (2.0 * rho)
            }
        }
        PenaltyKind::P2 if z >= 0.0 => lambda * z + lambda * rho * z * z + rho * rho * z * z * z / 6.0,
        PenaltyKind::P3 if z >= 0.0 => lambda * z + lambda * rho * z * z,
        PenaltyKind::P2 | PenaltyKind::P3 => lambda * z / (1.0 - rho * z),
    })
}

/// `∂P/∂z (z, λ, ρ)`.
pub fn penalty_prime(kind: PenaltyKind, z: f64, lambda: f64, rho: f64) -> Result<f64> {
    check(lambda, rho)?;
    Ok(match kind {
        PenaltyKind::Phr => (lambda + rho * z).max(0.0),
        PenaltyKind::P2 if z >= 0.0 => lambda + 2.0 * lambda * rho * z + 0.5 * rho * rho * z * z,
        PenaltyKind::P3 if z >= 0.0 => lambda + 2.0 * lambda * rho * z,
        PenaltyKind::P2 | PenaltyKind::P3 => {
            let den = 1.0 - rho * z;
            lambda / (den * den)
        }
    })
}

/// Multipliers, penalty parameters and the previous violations of every class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlmState {
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    pub beta: f64,
    /// `d̂_k − η` at the last acting epoch; `None` before the first one.
    pub prev_violation: Vec<Option<f64>>,
    pub update_period: usize,
    pub eta: f64,
}

impl AlmState {
    pub fn new(
        num_classes: usize,
        lambda0: f64,
        rho0: f64,
        beta: f64,
        update_period: usize,
        eta: f64,
    ) -> Result<Self> {
        check(lambda0, rho0)?;
        if lambda0 <= 0.0 {
            return Err(AlmError::InvalidLambda(lambda0));
        }
        if !(beta > 1.0 && beta.is_finite()) {
            return Err(AlmError::InvalidScale { what: "beta", value: beta });
        }
        if update_period == 0 {
            return Err(AlmError::InvalidPeriod);
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(AlmError::InvalidEta(eta));
        }
        Ok(Self {
            lambda: vec![lambda0; num_classes],
            rho: vec![rho0; num_classes],
            beta,
            prev_violation: vec![None; num_classes],
            update_period,
            eta,
        })
    }

    /// λ⁽⁰⁾ = 1e-6, ρ⁽⁰⁾ = 1, β = 1.2, ρ updated every 10 epochs.
    pub fn with_defaults(num_classes: usize, eta: f64) -> Result<Self> {
        Self::new(num_classes, 1e-6, 1.0, 1.2, 10, eta)
    }

    pub fn num_classes(&self) -> usize {
        self.lambda.len()
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got == self.num_classes() {
            Ok(())
        } else {
            Err(AlmError::Length {
                expected: self.num_classes(),
                got,
            })
        }
    }

    /// `z_k = d̂_k/η − 1`.
    pub fn normalized(&self, d_hat: f64) -> f64 {
        d_hat / self.eta - 1.0
    }

    /// First-order multiplier update. Classes without an estimate keep λ.
    pub fn update_multipliers(&mut self, kind: PenaltyKind, d_hat: &[Option<f64>]) -> Result<()> {
        self.check_len(d_hat.len())?;
        for (k, d) in d_hat.iter().enumerate() {
            if let Some(d) = d {
                let z = self.normalized(*d);
                self.lambda[k] = penalty_prime(kind, z, self.lambda[k], self.rho[k])?.max(LAMBDA_FLOOR);
            }
        }
        Ok(())
    }

    /// Conditional ρ growth. `epoch` is 1-based; only multiples of
    /// `update_period` act. The first acting epoch only records violations.
    /// Returns whether this epoch acted.
    pub fn update_rho(&mut self, d_hat: &[Option<f64>], epoch: usize) -> Result<bool> {
        self.check_len(d_hat.len())?;
        if epoch == 0 || epoch % self.update_period != 0 {
            return Ok(false);
        }
        for (k, d) in d_hat.iter().enumerate() {
            let Some(d) = d else { continue };
            let violation = d - self.eta;
            if let Some(prev) = self.prev_violation[k] {
                if violation > prev.max(0.0) {
                    self.rho[k] *= self.beta;
                }
            }
            self.prev_violation[k] = Some(violation);
        }
        Ok(true)
    }
}

/// Multiplier state of the heuristic rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrState {
    pub lambda: Vec<f64>,
    pub mu: f64,
    pub tau: f64,
    pub prev_penalty: Vec<Option<f64>>,
}

impl HrState {
    pub fn new(num_classes: usize, lambda0: f64, mu: f64, tau: f64) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0.is_finite()) {
            return Err(AlmError::InvalidLambda(lambda0));
        }
        for (what, value) in [("mu", mu), ("tau", tau)] {
            if !(value > 1.0 && value.is_finite()) {
                return Err(AlmError::InvalidScale { what, value });
            }
        }
        Ok(Self {
            lambda: vec![lambda0; num_classes],
            mu,
            tau,
            prev_penalty: vec![None; num_classes],
        })
    }

    /// μ = τ = 1.1.
    pub fn with_defaults(num_classes: usize, lambda0: f64) -> Result<Self> {
        Self::new(num_classes, lambda0, 1.1, 1.1)
    }

    /// Scale λ_k up or down by μ when the penalty moved by more than a factor τ.
    pub fn update_multipliers_hr(&mut self, current_penalty: &[Option<f64>]) -> Result<()> {
        if current_penalty.len() != self.lambda.len() {
            return Err(AlmError::Length {
                expected: self.lambda.len(),
                got: current_penalty.len(),
            });
        }
        for (k, p) in current_penalty.iter().enumerate() {
            let Some(new) = *p else { continue };
            if let Some(old) = self.prev_penalty[k] {
                if new > self.tau * old {
                    self.lambda[k] *= self.mu;
                } else if old > self.tau * new {
                    self.lambda[k] /= self.mu;
                }
            }
            self.prev_penalty[k] = Some(new);
        }
        Ok(())
    }
}
