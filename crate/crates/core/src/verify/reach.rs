use serde::Serialize;

use super::VerifyError;
use crate::boundprop::{ibp_forward_batch, BoundMethod, IntervalVec};
use crate::laneworld::{Dynamics, LaneState, SafetySpec};
use crate::neural::{MlpNetwork, Tensor};
use crate::train::Controller;

/// Over-approximated closed-loop reach sets from one initial state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReachTube {
    /// `S_0 ..= S_K` over `(d, theta)`; `S_0` is a point.
    pub state_boxes: Vec<IntervalVec>,
    /// Image box feeding the controller at steps `1 ..= K`.
    pub obs_boxes: Vec<IntervalVec>,
    /// Steering box applied at steps `1 ..= K`.
    pub action_boxes: Vec<IntervalVec>,
    pub method: BoundMethod,
    pub epsilon: f64,
}

impl ReachTube {
    pub fn horizon(&self) -> usize {
        self.action_boxes.len()
    }
}

/// Everything a reach step needs besides the state box.
#[derive(Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub generator: &'a MlpNetwork,
    pub controller: &'a Controller,
    pub dynamics: &'a dyn Dynamics,
    pub epsilon: f64,
    pub method: BoundMethod,
}

impl ClosedLoop<'_> {
    fn check(&self) -> Result<usize, VerifyError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(VerifyError::Contract(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        let g = self.generator;
        if g.input_dim() < 2 || g.output_dim() != self.controller.net.input_dim() {
            return Err(VerifyError::Contract(format!(
                "generator maps {} -> {}, controller expects {} pixels",
                g.input_dim(),
                g.output_dim(),
                self.controller.net.input_dim()
            )));
        }
        Ok(g.input_dim() - 2)
    }

    fn bound_rows(&self, net: &MlpNetwork, boxes: &[IntervalVec]) -> Result<Vec<IntervalVec>, VerifyError> {
        match self.method {
            BoundMethod::Ibp => {
                let n = boxes.len();
                let cols = net.input_dim();
                let lb = Tensor::matrix(n, cols, boxes.iter().flat_map(|b| b.lb().to_vec()).collect())?;
                let ub = Tensor::matrix(n, cols, boxes.iter().flat_map(|b| b.ub().to_vec()).collect())?;
                let (lo, hi) = ibp_forward_batch(net, &lb, &ub)?;
                (0..n)
                    .map(|i| Ok(IntervalVec::new(lo.row_slice(i).to_vec(), hi.row_slice(i).to_vec())?))
                    .collect()
            }
            BoundMethod::Crown => boxes.iter().map(|b| Ok(self.method.bound(net, b)?)).collect(),
        }
    }

    /// One step for many state boxes at once.
    fn step_rows(&self, sboxes: &[IntervalVec]) -> Result<Vec<(IntervalVec, IntervalVec, IntervalVec)>, VerifyError> {
        let m = self.check()?;
        let latent = IntervalVec::uniform(m, -1.0, 1.0);
        let inputs: Vec<IntervalVec> = sboxes
            .iter()
            .map(|s| {
                if s.dim() != 2 {
                    return Err(VerifyError::Contract(format!("state box has {} coordinates", s.dim())));
                }
                Ok(s.concat(&latent))
            })
            .collect::<Result<_, _>>()?;
        let images: Vec<IntervalVec> = self
            .bound_rows(self.generator, &inputs)?
            .into_iter()
            .map(|b| b.inflate(self.epsilon).clamp(-1.0, 1.0))
            .collect();
        let max_steer = self.dynamics.max_steer();
        let actions: Vec<IntervalVec> = self
            .bound_rows(&self.controller.net, &images)?
            .into_iter()
            .map(|b| b.scale(self.controller.max_steer).clamp(-max_steer, max_steer))
            .collect();
        sboxes
            .iter()
            .zip(images)
            .zip(actions)
            .map(|((s, o), a)| Ok((self.dynamics.step_interval(s, &a)?, o, a)))
            .collect()
    }
}

/// `(next state box, observation box, action box)` for one closed-loop step.
pub fn reach_step(
    sbox: &IntervalVec,
    lp: &ClosedLoop<'_>,
) -> Result<(IntervalVec, IntervalVec, IntervalVec), VerifyError> {
    Ok(lp.step_rows(std::slice::from_ref(sbox))?.remove(0))
}

/// `K` reach steps from the point `{s0}`.
pub fn reach_tube(s0: LaneState, k: usize, lp: &ClosedLoop<'_>) -> Result<ReachTube, VerifyError> {
    Ok(reach_tubes(&[s0], k, lp)?.remove(0))
}

/// [`reach_tube`] for many initial states, stepped together.
pub fn reach_tubes(s0s: &[LaneState], k: usize, lp: &ClosedLoop<'_>) -> Result<Vec<ReachTube>, VerifyError> {
    if k == 0 {
        return Err(VerifyError::Contract("horizon K must be at least 1".into()));
    }
    let mut tubes: Vec<ReachTube> = s0s
        .iter()
        .map(|s| ReachTube {
            state_boxes: vec![IntervalVec::point(&s.to_vec())],
            obs_boxes: Vec::with_capacity(k),
            action_boxes: Vec::with_capacity(k),
            method: lp.method,
            epsilon: lp.epsilon,
        })
        .collect();
    for _ in 0..k {
        let current: Vec<IntervalVec> = tubes.iter().map(|t| t.state_boxes.last().unwrap().clone()).collect();
        for (t, (s, o, a)) in tubes.iter_mut().zip(lp.step_rows(&current)?) {
            t.state_boxes.push(s);
            t.obs_boxes.push(o);
            t.action_boxes.push(a);
        }
    }
    Ok(tubes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TubeCheck {
    /// `safe[t]` for `t = 0 ..= K`.
    pub safe: Vec<bool>,
    /// Largest `k` with every `t <= k` safe; `0` when step 1 already fails.
    pub verified_upto: usize,
    pub first_failure: Option<usize>,
}

/// A step is safe when its whole `d` interval lies in `[-beta, beta]`.
pub fn check_tube(tube: &ReachTube, spec: &SafetySpec) -> TubeCheck {
    let safe: Vec<bool> = tube
        .state_boxes
        .iter()
        .map(|b| b.lb()[0] >= -spec.beta && b.ub()[0] <= spec.beta)
        .collect();
    let first_failure = safe.iter().position(|ok| !ok);
    let verified_upto = match first_failure {
        Some(t) => t.saturating_sub(1),
        None => tube.horizon(),
    };
    TubeCheck {
        safe,
        verified_upto,
        first_failure,
    }
}

/// `(min_t lb(d_t), max_t ub(d_t))` over `t = 1 ..= K`.
pub fn sigma_bounds(tube: &ReachTube) -> (f64, f64) {
    tube.state_boxes[1..]
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b.lb()[0]), hi.max(b.ub()[0])))
}
