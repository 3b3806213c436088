use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Graph, PointLoss, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
    /// MSE and MAE summed at equal weight.
    MsePlusMae,
    SmoothL1,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::MsePlusMae,
        LossKind::Mse,
        LossKind::Mae,
        LossKind::SmoothL1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::MsePlusMae => "mse_plus_mae",
            LossKind::SmoothL1 => "smooth_l1",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("loss", format!("expected mse|mae|mse_plus_mae|smooth_l1, got `{s}`")))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Smooth-L1 threshold; unused by the other kinds.
    pub beta: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::Mse,
            beta: 1.0,
        }
    }
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec { kind, beta: 1.0 }
    }
}

/// Scalar training loss of `pred` against a fixed target.
pub fn loss<F: Scalar>(g: &mut Graph<F>, pred: Var, target: &Tensor<F>, spec: LossSpec) -> Result<Var> {
    match spec.kind {
        LossKind::Mse => g.point_loss(pred, target, PointLoss::Mse),
        LossKind::Mae => g.point_loss(pred, target, PointLoss::Mae),
        LossKind::MsePlusMae => {
            let a = g.point_loss(pred, target, PointLoss::Mse)?;
            let b = g.point_loss(pred, target, PointLoss::Mae)?;
            g.add(a, b)
        }
        LossKind::SmoothL1 => g.point_loss(pred, target, PointLoss::SmoothL1 { beta: F::c(spec.beta) }),
    }
}
