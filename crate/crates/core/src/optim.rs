//! Update rules: gradient descent, normalized GD and sign descent with
//! heavy-ball momentum, RMSprop, and Adam.
//!
//! All steps work on flat slices aligned with [`crate::models::ParamVector`].
//!
//! ```
//! use optlab::optim::{DirectionKind, GdVariantState};
//!
//! let mut sign = GdVariantState::new(DirectionKind::SignDescent, 0.1, 0.0, 2);
//! let mut x = vec![0.0, 0.0];
//! sign.step(&mut x, &[3.0, -7.0]).unwrap();
//! assert_eq!(x, vec![-0.1, 0.1]);
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Momentum used by every `+m` optimizer.
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OptimizerId {
    SgdMomentum,
    Sgd,
    NormGdMomentum,
    NormGd,
    SignMomentum,
    Sign,
    Rmsprop,
    AdamMomentum,
    Adam,
}

impl OptimizerId {
    pub const ALL: [OptimizerId; 9] = [
        OptimizerId::SgdMomentum,
        OptimizerId::Sgd,
        OptimizerId::NormGdMomentum,
        OptimizerId::NormGd,
        OptimizerId::SignMomentum,
        OptimizerId::Sign,
        OptimizerId::Rmsprop,
        OptimizerId::AdamMomentum,
        OptimizerId::Adam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerId::SgdMomentum => "sgd+m",
            OptimizerId::Sgd => "sgd-m",
            OptimizerId::NormGdMomentum => "norm-gd+m",
            OptimizerId::NormGd => "norm-gd-m",
            OptimizerId::SignMomentum => "sign+m",
            OptimizerId::Sign => "sign-m",
            OptimizerId::Rmsprop => "rmsprop",
            OptimizerId::AdamMomentum => "adam+m",
            OptimizerId::Adam => "adam-m",
        }
    }

    pub fn has_momentum(self) -> bool {
        matches!(
            self,
            OptimizerId::SgdMomentum
                | OptimizerId::NormGdMomentum
                | OptimizerId::SignMomentum
                | OptimizerId::AdamMomentum
        )
    }

    pub fn momentum_flag(self) -> &'static str {
        if self.has_momentum() {
            "+m"
        } else {
            "-m"
        }
    }

    /// Direction transform for the gradient-descent family, `None` for
    /// RMSprop and Adam.
    pub fn direction(self) -> Option<DirectionKind> {
        match self {
            OptimizerId::SgdMomentum | OptimizerId::Sgd => Some(DirectionKind::Gd),
            OptimizerId::NormGdMomentum | OptimizerId::NormGd => Some(DirectionKind::NormalizedGd),
            OptimizerId::SignMomentum | OptimizerId::Sign => Some(DirectionKind::SignDescent),
            _ => None,
        }
    }
}

impl fmt::Display for OptimizerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OptimizerId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = OptimizerId::ALL.iter().map(|id| id.as_str()).collect();
                format!("unknown optimizer `{s}`, expected one of {}", known.join(", "))
            })
    }
}

impl TryFrom<String> for OptimizerId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<OptimizerId> for String {
    fn from(id: OptimizerId) -> String {
        id.as_str().to_string()
    }
}

/// Hyperparameters other than the step size, with defaults resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub id: OptimizerId,
    /// Heavy-ball momentum for the GD family.
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub bias_correction: bool,
    pub epsilon_inside_sqrt: bool,
}

impl OptimizerConfig {
    pub fn new(id: OptimizerId) -> Self {
        let momentum = if id.has_momentum() { DEFAULT_MOMENTUM } else { 0.0 };
        Self {
            id,
            beta: momentum,
            beta1: momentum,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            bias_correction: true,
            epsilon_inside_sqrt: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::schema(name, format!("{v} outside [0, 1)")));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::schema("epsilon", "must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn build(&self, alpha: f64, dim: usize) -> Optimizer {
        match self.id.direction() {
            Some(kind) => Optimizer::GdVariant(GdVariantState::new(kind, alpha, self.beta, dim)),
            None if self.id == OptimizerId::Rmsprop => {
                Optimizer::Rmsprop(RmspropState::new(alpha, self.beta2, self.epsilon, dim))
            }
            None => Optimizer::Adam(AdamState {
                alpha,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
                bias_correction: self.bias_correction,
                epsilon_inside_sqrt: self.epsilon_inside_sqrt,
                ..AdamState::new(alpha, dim)
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DirectionKind {
    Gd,
    NormalizedGd,
    SignDescent,
}

/// `sign(x)` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The step direction `d_t` of the gradient-descent family.
pub fn transform_direction(kind: DirectionKind, grad: &[f64]) -> Result<Vec<f64>> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    match kind {
        DirectionKind::Gd => Ok(grad.to_vec()),
        DirectionKind::NormalizedGd => {
            let norm = l2_norm(grad);
            if norm == 0.0 {
                return Err(Error::ZeroGradient);
            }
            Ok(grad.iter().map(|g| g / norm).collect())
        }
        DirectionKind::SignDescent => Ok(grad.iter().map(|&g| sign(g)).collect()),
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Misaligned { expected, actual })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Normalized GD saw a zero gradient: momentum decayed, no new direction.
    ZeroGradientSkipped,
}

/// `m_t = β m_{t-1} + d_t`, `x_{t+1} = x_t − α m_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct GdVariantState {
    pub kind: DirectionKind,
    pub alpha: f64,
    pub beta: f64,
    pub m: Vec<f64>,
    pub zero_gradient_skips: u64,
}

impl GdVariantState {
    pub fn new(kind: DirectionKind, alpha: f64, beta: f64, dim: usize) -> Self {
        Self { kind, alpha, beta, m: vec![0.0; dim], zero_gradient_skips: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<StepOutcome> {
        check_len(self.m.len(), params.len())?;
        check_len(self.m.len(), grad.len())?;
        let (direction, outcome) = match transform_direction(self.kind, grad) {
            Ok(d) => (Some(d), StepOutcome::Applied),
            Err(Error::ZeroGradient) => {
                self.zero_gradient_skips += 1;
                (None, StepOutcome::ZeroGradientSkipped)
            }
            Err(e) => return Err(e),
        };
        for i in 0..params.len() {
            let d = direction.as_ref().map_or(0.0, |d| d[i]);
            self.m[i] = self.beta * self.m[i] + d;
            params[i] -= self.alpha * self.m[i];
        }
        Ok(outcome)
    }
}

/// Adam with optional bias correction; ε sits inside the square root unless
/// `epsilon_inside_sqrt` is off.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub bias_correction: bool,
    pub epsilon_inside_sqrt: bool,
}

impl AdamState {
    pub fn new(alpha: f64, dim: usize) -> Self {
        Self {
            alpha,
            beta1: DEFAULT_MOMENTUM,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            bias_correction: true,
            epsilon_inside_sqrt: true,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<StepOutcome> {
        check_len(self.m.len(), params.len())?;
        check_len(self.m.len(), grad.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let (c1, c2) = if self.bias_correction {
            let t = self.t as i32;
            (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
        } else {
            (1.0, 1.0)
        };
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let denom = if self.epsilon_inside_sqrt {
                (v_hat + self.epsilon).sqrt()
            } else {
                v_hat.sqrt() + self.epsilon
            };
            // 0/0 only arises with ε = 0 and an all-zero history; treat as no move
            if denom > 0.0 {
                params[i] -= self.alpha * m_hat / denom;
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// `v_{t+1} = β₂ v_t + (1−β₂) g²`, `x_{t+1} = x_t − α g / (sqrt(v_{t+1}) + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmspropState {
    pub alpha: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub v: Vec<f64>,
}

impl RmspropState {
    pub fn new(alpha: f64, beta2: f64, epsilon: f64, dim: usize) -> Self {
        Self { alpha, beta2, epsilon, v: vec![0.0; dim] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<StepOutcome> {
        check_len(self.v.len(), params.len())?;
        check_len(self.v.len(), grad.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        for i in 0..params.len() {
            let g = grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let denom = self.v[i].sqrt() + self.epsilon;
            if denom > 0.0 {
                params[i] -= self.alpha * g / denom;
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    GdVariant(GdVariantState),
    Adam(AdamState),
    Rmsprop(RmspropState),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<StepOutcome> {
        match self {
            Optimizer::GdVariant(s) => s.step(params, grad),
            Optimizer::Adam(s) => s.step(params, grad),
            Optimizer::Rmsprop(s) => s.step(params, grad),
        }
    }

    pub fn zero_gradient_skips(&self) -> u64 {
        match self {
            Optimizer::GdVariant(s) => s.zero_gradient_skips,
            _ => 0,
        }
    }
}
