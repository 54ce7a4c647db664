//! Image-to-steering policy: an MLP with a tanh output scaled to the
//! steering limit.

use rand_chacha::ChaCha8Rng;

use crate::boundprop::{ibp_graph, tanh_bounds_graph, BoundError, BoundMethod, IntervalVec};
use crate::laneworld::IMAGE_DIM;
use crate::neural::{Activation, BoundMlp, DTensor, Graph, Init, MlpNetwork, NeuralError, Tensor};

pub const CONTROLLER_HIDDEN: [usize; 4] = [128, 64, 32, 8];

/// Graph handles for a batch of action intervals, `[n, 1]` each.
#[derive(Clone, Copy, Debug)]
pub struct ActionBounds {
    pub pre_lo: DTensor,
    pub pre_hi: DTensor,
    pub action_lo: DTensor,
    pub action_hi: DTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    pub net: MlpNetwork,
    pub max_steer: f64,
}

impl Controller {
    /// Wraps `net`, which must map an image to one tanh unit.
    pub fn new(net: MlpNetwork, max_steer: f64) -> Result<Self, NeuralError> {
        let last = net.layers().last().map(|l| l.activation);
        if net.input_dim() != IMAGE_DIM || net.output_dim() != 1 || last != Some(Activation::Tanh) {
            return Err(NeuralError::Shape(format!(
                "controller must map {IMAGE_DIM} pixels to one tanh output, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        if !(max_steer > 0.0 && max_steer.is_finite()) {
            return Err(NeuralError::Contract(format!("steering limit {max_steer}")));
        }
        Ok(Self { net, max_steer })
    }

    pub fn init(hidden: &[usize], max_steer: f64, rng: &mut ChaCha8Rng) -> Result<Self, NeuralError> {
        let mut dims = vec![IMAGE_DIM];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let net = MlpNetwork::init(&dims, Activation::Relu, Activation::Tanh, Init::HeUniform, rng)?;
        Self::new(net, max_steer)
    }

    pub fn act(&self, image: &[f64]) -> Result<f64, NeuralError> {
        Ok(self.net.forward(image)?[0] * self.max_steer)
    }

    /// One action per row of `images` (`[n, IMAGE_DIM]`).
    pub fn act_batch(&self, images: &Tensor) -> Result<Vec<f64>, NeuralError> {
        Ok(self.net.forward_batch(images)?.data().iter().map(|a| a * self.max_steer).collect())
    }

    /// Steering box over an image box.
    pub fn bound(&self, method: BoundMethod, images: &IntervalVec) -> Result<IntervalVec, BoundError> {
        Ok(method.bound(&self.net, images)?.scale(self.max_steer))
    }

    /// Actions for `[n, IMAGE_DIM]` observations on `g`, with `net` the
    /// network bound to the same graph.
    pub fn forward_graph(&self, g: &mut Graph, net: &BoundMlp, x: DTensor) -> Result<DTensor, NeuralError> {
        let y = net.forward(g, x)?;
        Ok(g.scale(y, self.max_steer))
    }

    /// Differentiable interval bounds on the actions, `[n, 1]` each.
    pub fn ibp_graph(
        &self,
        g: &mut Graph,
        net: &BoundMlp,
        lb: DTensor,
        ub: DTensor,
    ) -> Result<(DTensor, DTensor), BoundError> {
        let b = self.ibp_graph_parts(g, net, lb, ub)?;
        Ok((b.action_lo, b.action_hi))
    }

    /// Like [`Controller::ibp_graph`], also returning the bounds on the
    /// output unit before the tanh.
    pub fn ibp_graph_parts(
        &self,
        g: &mut Graph,
        net: &BoundMlp,
        lb: DTensor,
        ub: DTensor,
    ) -> Result<ActionBounds, BoundError> {
        let mut linear = net.clone();
        if let Some(last) = linear.layers.last_mut() {
            last.activation = Activation::Identity;
        }
        let (pre_lo, pre_hi) = ibp_graph(g, &linear, lb, ub)?;
        let (lo, hi) = tanh_bounds_graph(g, pre_lo, pre_hi)?;
        Ok(ActionBounds {
            pre_lo,
            pre_hi,
            action_lo: g.scale(lo, self.max_steer),
            action_hi: g.scale(hi, self.max_steer),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform};

    #[test]
    fn actions_stay_within_the_steering_limit() {
        let c = Controller::init(&CONTROLLER_HIDDEN, 0.5, &mut stream(1, "ctl", 0)).unwrap();
        let mut rng = stream(1, "ctl", 1);
        for _ in 0..200 {
            let x: Vec<f64> = (0..IMAGE_DIM).map(|_| uniform(&mut rng, -30.0, 30.0)).collect();
            assert!(c.act(&x).unwrap().abs() <= 0.5);
        }
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let mut rng = stream(1, "ctl", 2);
        let net = MlpNetwork::init(&[IMAGE_DIM, 4, 1], Activation::Relu, Activation::Identity, Init::HeUniform, &mut rng)
            .unwrap();
        assert!(Controller::new(net, 0.5).is_err());
    }

    #[test]
    fn bound_contains_actions() {
        let c = Controller::init(&[16, 8], 0.5, &mut stream(2, "ctl", 0)).unwrap();
        let x: Vec<f64> = (0..IMAGE_DIM).map(|i| (i as f64 * 0.1).sin()).collect();
        let b = IntervalVec::point(&x).inflate(0.05);
        let a = c.act(&x).unwrap();
        for m in [BoundMethod::Ibp, BoundMethod::Crown] {
            let ab = c.bound(m, &b).unwrap();
            assert!(ab.lb()[0] <= a && a <= ab.ub()[0]);
        }
    }
}
