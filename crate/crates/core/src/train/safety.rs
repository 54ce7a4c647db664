//! Differentiable reach tubes and the tube-extent safety loss.

use super::{Controller, TrainError};
use crate::boundprop::ibp_graph;
use crate::laneworld::{LaneState, VehicleParams};
use crate::neural::{BoundMlp, DTensor, Graph, Tensor};

/// Per-element tube extremes and losses recorded on a graph, all `[n, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct SafetyTube {
    pub sigma_lo: DTensor,
    pub sigma_hi: DTensor,
    pub loss: DTensor,
    /// Mean of `loss`, `[1, 1]`.
    pub mean: DTensor,
    /// Mean over elements and steps of how far the controller's pre-tanh
    /// bounds reach beyond `±margin`, `[1, 1]`. Zero once the output unit
    /// is out of saturation; before that it is the only term with a
    /// gradient, since the tanh bound is flat there.
    pub saturation: DTensor,
}

fn denominator(k: usize) -> f64 {
    k.saturating_sub(1).max(1) as f64
}

/// `(|sigma_hi| + |sigma_lo|) / (K - 1)`, with `K = 1` dividing by one.
pub fn safety_loss_value(sigma_lo: f64, sigma_hi: f64, k: usize) -> f64 {
    (sigma_hi.abs() + sigma_lo.abs()) / denominator(k)
}

/// `L + max(0, |sigma_hi| - beta) + max(0, |sigma_lo| - beta)`.
pub fn eta_score(loss: f64, sigma_hi: f64, sigma_lo: f64, beta: f64) -> f64 {
    loss + (sigma_hi.abs() - beta).max(0.0) + (sigma_lo.abs() - beta).max(0.0)
}

/// Builds `K`-step interval tubes from each state on `g`.
///
/// `generator` should be bound as constants so that gradients reach only
/// the controller weights in `net`.
#[allow(clippy::too_many_arguments)]
pub fn safety_loss(
    g: &mut Graph,
    generator: &BoundMlp,
    controller: &Controller,
    net: &BoundMlp,
    dynamics: &VehicleParams,
    states: &[LaneState],
    k: usize,
    epsilon: f64,
    margin: f64,
) -> Result<SafetyTube, TrainError> {
    if states.is_empty() || k == 0 {
        return Err(TrainError::Contract("safety loss needs states and K >= 1".into()));
    }
    let n = states.len();
    let m = g.value(generator.layers[0].weight).cols() - 2;
    let s0 = Tensor::matrix(n, 2, states.iter().flat_map(|s| [s.d, s.theta]).collect())?;
    let mut s_lo = g.constant(s0.clone());
    let mut s_hi = g.constant(s0);
    let z_lo = g.constant(Tensor::filled(&[n, m], -1.0));
    let z_hi = g.constant(Tensor::filled(&[n, m], 1.0));
    let mut extremes: Option<(DTensor, DTensor)> = None;
    let mut excess: Option<DTensor> = None;
    let steer = dynamics.max_steer;
    for _ in 0..k {
        let in_lo = g.concat_cols(&[s_lo, z_lo])?;
        let in_hi = g.concat_cols(&[s_hi, z_hi])?;
        let (img_lo, img_hi) = ibp_graph(g, generator, in_lo, in_hi)?;
        let img_lo = g.offset(img_lo, -epsilon);
        let img_hi = g.offset(img_hi, epsilon);
        let img_lo = g.clamp(img_lo, -1.0, 1.0);
        let img_hi = g.clamp(img_hi, -1.0, 1.0);
        let b = controller.ibp_graph_parts(g, net, img_lo, img_hi)?;
        let over = g.offset(b.pre_hi, -margin);
        let over = g.relu(over);
        let neg = g.scale(b.pre_lo, -1.0);
        let under = g.offset(neg, -margin);
        let under = g.relu(under);
        let e = g.add(over, under)?;
        excess = Some(match excess {
            None => e,
            Some(acc) => g.add(acc, e)?,
        });
        let a_lo = g.clamp(b.action_lo, -steer, steer);
        let a_hi = g.clamp(b.action_hi, -steer, steer);
        let (lo, hi) = dynamics.step_graph(g, s_lo, s_hi, a_lo, a_hi)?;
        s_lo = lo;
        s_hi = hi;
        let d_lo = g.cols(s_lo, 0, 1)?;
        let d_hi = g.cols(s_hi, 0, 1)?;
        extremes = Some(match extremes {
            None => (d_lo, d_hi),
            Some((lo, hi)) => (g.minimum(lo, d_lo)?, g.maximum(hi, d_hi)?),
        });
    }
    let (sigma_lo, sigma_hi) = extremes.expect("k >= 1");
    for (i, s) in states.iter().enumerate() {
        let lo = g.value(sigma_lo).data()[i];
        let hi = g.value(sigma_hi).data()[i];
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(TrainError::NonFiniteBounds { d: s.d, theta: s.theta });
        }
    }
    let a = g.abs(sigma_hi);
    let b = g.abs(sigma_lo);
    let sum = g.add(a, b)?;
    let loss = g.scale(sum, 1.0 / denominator(k));
    let mean = g.mean(loss);
    let excess = g.mean(excess.expect("k >= 1"));
    let saturation = g.scale(excess, 1.0 / k as f64);
    Ok(SafetyTube {
        sigma_lo,
        sigma_hi,
        loss,
        mean,
        saturation,
    })
}
