use super::mlp::{MlpGrads, MlpNetwork};
use super::tensor::Tensor;
use super::NeuralError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    pub lr: f64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(shapes: &[&[usize]], lr: f64) -> Self {
        Self {
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            lr,
            config: AdamConfig::default(),
        }
    }

    /// Moments laid out as `[w0, b0, w1, b1, ...]`.
    pub fn for_network(net: &MlpNetwork, lr: f64) -> Self {
        let shapes: Vec<&[usize]> = net
            .layers()
            .iter()
            .flat_map(|l| [l.weight.shape(), l.bias.shape()])
            .collect();
        Self::new(&shapes, lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over `params`. Nothing is modified when
    /// any gradient is non-finite; the error names the offending tensor index.
    pub fn adam_step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), NeuralError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NeuralError::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(NeuralError::Shape(format!("parameter {i} shape mismatch")));
            }
            if !g.all_finite() {
                return Err(NeuralError::NonFiniteGradient { layer: i });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / c1;
                let vhat = *vj / c2;
                *pj -= self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// [`Self::adam_step`] over a whole network; errors report the layer index.
    pub fn step_network(&mut self, net: &mut MlpNetwork, grads: &MlpGrads) -> Result<(), NeuralError> {
        let mut params: Vec<&mut Tensor> = net
            .layers_mut()
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        let gs: Vec<&Tensor> = grads.layers.iter().flat_map(|(w, b)| [w, b]).collect();
        self.adam_step(&mut params, &gs).map_err(|e| match e {
            NeuralError::NonFiniteGradient { layer } => NeuralError::NonFiniteGradient { layer: layer / 2 },
            other => other,
        })
    }
}

/// Cosine annealing from `lr_start` at step 0 to `lr_end` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_start: f64, lr_end: f64) -> f64 {
    let total = total.max(1);
    let step = step.min(total);
    let frac = step as f64 / total as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
}
