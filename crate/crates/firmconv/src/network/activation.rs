//! Scalar activations, all monotone, 1-Lipschitz, and zero at zero.
//!
//! Those three properties make each one a proximity operator of some convex
//! function, which is what the averagedness of a building block rests on.
//! Seven of the nine carry a positive shape parameter alpha; `linear` and
//! `relu` are parameter-free.
//!
//! Kink conventions (the derivative value chosen at non-smooth points) are
//! fixed here once: relu'(0) = 0, soft_threshold'(+-alpha) = 0,
//! salu'(+-alpha) = 0, prelu'(0) = alpha. Subgradient choices at kinks only
//! affect which valid subgradient the backward pass reports.

use crate::error::{ensure, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Linear,
    Relu,
    Prelu,
    Salu,
    BentIdentity,
    SoftThreshold,
    Elliot,
    Isru,
    Isrlu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 9] = [
        ActivationKind::Linear,
        ActivationKind::Relu,
        ActivationKind::Prelu,
        ActivationKind::Salu,
        ActivationKind::BentIdentity,
        ActivationKind::SoftThreshold,
        ActivationKind::Elliot,
        ActivationKind::Isru,
        ActivationKind::Isrlu,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Linear => "linear",
            ActivationKind::Relu => "relu",
            ActivationKind::Prelu => "prelu",
            ActivationKind::Salu => "salu",
            ActivationKind::BentIdentity => "bent_identity",
            ActivationKind::SoftThreshold => "soft_threshold",
            ActivationKind::Elliot => "elliot",
            ActivationKind::Isru => "isru",
            ActivationKind::Isrlu => "isrlu",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| {
                crate::error::Error::validation(format!("unknown activation kind {name:?}"))
            })
    }

    /// Whether this kind has a trainable shape parameter.
    pub fn has_parameter(&self) -> bool {
        !matches!(self, ActivationKind::Linear | ActivationKind::Relu)
    }

    /// Validates alpha for this kind: prelu needs alpha in [0, 1], the other
    /// parameterized kinds need alpha > 0, parameter-free kinds ignore it.
    pub fn validate_alpha(&self, alpha: f64) -> Result<()> {
        ensure!(alpha.is_finite(), "activation parameter must be finite");
        match self {
            ActivationKind::Linear | ActivationKind::Relu => Ok(()),
            ActivationKind::Prelu => {
                ensure!(
                    (0.0..=1.0).contains(&alpha),
                    "prelu slope must lie in [0, 1], got {alpha}"
                );
                Ok(())
            }
            _ => {
                ensure!(
                    alpha > 0.0,
                    "{} needs a positive shape parameter, got {alpha}",
                    self.name()
                );
                Ok(())
            }
        }
    }
}

/// An activation kind together with its shape parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub kind: ActivationKind,
    pub alpha: f64,
}

impl Activation {
    pub fn new(kind: ActivationKind, alpha: f64) -> Result<Self> {
        kind.validate_alpha(alpha)?;
        Ok(Activation { kind, alpha })
    }

    /// sigma_alpha(x).
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let a = self.alpha;
        match self.kind {
            ActivationKind::Linear => x,
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Prelu => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            ActivationKind::Salu => x.clamp(-a, a),
            ActivationKind::BentIdentity => 0.5 * (x + (x * x + a * a).sqrt() - a),
            ActivationKind::SoftThreshold => {
                if x > a {
                    x - a
                } else if x < -a {
                    x + a
                } else {
                    0.0
                }
            }
            ActivationKind::Elliot => x / (a * x.abs() + 1.0),
            ActivationKind::Isru => x / (1.0 + (a * x) * (a * x)).sqrt(),
            ActivationKind::Isrlu => {
                if x >= 0.0 {
                    x
                } else {
                    x / (1.0 + (a * x) * (a * x)).sqrt()
                }
            }
        }
    }

    /// d sigma / dx, using the kink conventions above. Always in [0, 1].
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        let a = self.alpha;
        match self.kind {
            ActivationKind::Linear => 1.0,
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Prelu => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            ActivationKind::Salu => {
                if x.abs() < a {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::BentIdentity => 0.5 * (1.0 + x / (x * x + a * a).sqrt()),
            ActivationKind::SoftThreshold => {
                if x.abs() > a {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Elliot => {
                let d = a * x.abs() + 1.0;
                1.0 / (d * d)
            }
            ActivationKind::Isru => {
                let d = 1.0 + (a * x) * (a * x);
                1.0 / (d * d.sqrt())
            }
            ActivationKind::Isrlu => {
                if x >= 0.0 {
                    1.0
                } else {
                    let d = 1.0 + (a * x) * (a * x);
                    1.0 / (d * d.sqrt())
                }
            }
        }
    }

    /// d sigma / d alpha; identically zero for parameter-free kinds.
    #[inline]
    pub fn alpha_deriv(&self, x: f64) -> f64 {
        let a = self.alpha;
        match self.kind {
            ActivationKind::Linear | ActivationKind::Relu => 0.0,
            ActivationKind::Prelu => {
                if x > 0.0 {
                    0.0
                } else {
                    x
                }
            }
            ActivationKind::Salu => {
                if x >= a {
                    1.0
                } else if x <= -a {
                    -1.0
                } else {
                    0.0
                }
            }
            ActivationKind::BentIdentity => 0.5 * (a / (x * x + a * a).sqrt() - 1.0),
            ActivationKind::SoftThreshold => {
                if x > a {
                    -1.0
                } else if x < -a {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Elliot => {
                let d = a * x.abs() + 1.0;
                -x * x.abs() / (d * d)
            }
            ActivationKind::Isru => {
                let d = 1.0 + (a * x) * (a * x);
                -a * x * x * x / (d * d.sqrt())
            }
            ActivationKind::Isrlu => {
                if x >= 0.0 {
                    0.0
                } else {
                    let d = 1.0 + (a * x) * (a * x);
                    -a * x * x * x / (d * d.sqrt())
                }
            }
        }
    }
}
