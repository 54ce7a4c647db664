//! Interval arithmetic and bound propagation through MLPs.
//!
//! Two propagators are provided: forward interval propagation ([`ibp_forward`],
//! also available on a [`Graph`](crate::neural::Graph) via [`ibp_graph`]) and
//! backward linear relaxation ([`crown_backward`]).

mod crown;
mod ibp;
mod interval;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use crown::{crown_backward, LinearBound, LinearRelaxation};
pub use ibp::{ibp_forward, ibp_forward_batch, ibp_graph, ibp_preactivations, tanh_bounds_graph};
pub use interval::{interval_affine, interval_unary, IntervalVec, UnaryFn};

pub(crate) use interval::{round_down, round_up, scalar_unary};

use crate::neural::{MlpNetwork, NeuralError};

#[derive(Debug, thiserror::Error)]
pub enum BoundError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed interval: {0}")]
    Malformed(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Which propagator bounds the networks during verification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMethod {
    Ibp,
    Crown,
}

impl BoundMethod {
    /// Output box of `net` over `input`. The CROWN box is intersected with
    /// the IBP box; both enclose the true range.
    pub fn bound(self, net: &MlpNetwork, input: &IntervalVec) -> Result<IntervalVec, BoundError> {
        match self {
            BoundMethod::Ibp => ibp_forward(net, input),
            BoundMethod::Crown => {
                let (_, c) = crown_backward(net, input)?;
                let i = ibp_forward(net, input)?;
                Ok(c.intersect(&i))
            }
        }
    }
}

impl fmt::Display for BoundMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundMethod::Ibp => "ibp",
            BoundMethod::Crown => "crown",
        })
    }
}

impl FromStr for BoundMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ibp" => Ok(BoundMethod::Ibp),
            "crown" => Ok(BoundMethod::Crown),
            other => Err(format!("unknown bound method {other:?} (expected ibp or crown)")),
        }
    }
}
