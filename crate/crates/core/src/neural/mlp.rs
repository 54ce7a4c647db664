use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::graph::{DTensor, Graph};
use super::tensor::{gemm, Tensor};
use super::NeuralError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn apply_graph(self, g: &mut Graph, x: DTensor) -> DTensor {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform,
    /// Semi-orthogonal weight matrices (rows or columns orthonormal),
    /// scaled by `sqrt(2)` ahead of ReLU layers.
    Orthogonal,
}

/// One affine map followed by an elementwise activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`, row-major.
    pub weight: Tensor,
    /// length `out`.
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Vec<f64>, activation: Activation) -> Result<Self, NeuralError> {
        if weight.shape().len() != 2 || weight.rows() != bias.len() {
            return Err(NeuralError::Shape(format!(
                "weight {:?} with bias of length {}",
                weight.shape(),
                bias.len()
            )));
        }
        let n = bias.len();
        Ok(Self {
            weight,
            bias: Tensor::new(vec![n], bias)?,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Feed-forward stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<Layer>,
}

impl MlpNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::Shape("network without layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NeuralError::Shape(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Randomly initialized network with layer widths `dims`
    /// (`dims[0]` inputs, `dims.last()` outputs).
    pub fn init(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NeuralError> {
        if dims.len() < 2 {
            return Err(NeuralError::Shape("need at least input and output widths".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let last = i + 2 == dims.len();
            let act = if last { output } else { hidden };
            let gain = if act == Activation::Relu { 2f64.sqrt() } else { 1.0 };
            let w = match init {
                Init::HeUniform => {
                    let bound = (6.0 / fan_in.max(1) as f64).sqrt() * gain / 2f64.sqrt();
                    (0..fan_out * fan_in)
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect()
                }
                Init::Orthogonal => orthogonal(fan_out, fan_in, gain, rng),
            };
            layers.push(Layer::new(
                Tensor::matrix(fan_out, fan_in, w)?,
                vec![0.0; fan_out],
                act,
            )?);
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        if x.len() != self.input_dim() {
            return Err(NeuralError::InputShape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let t = Tensor::row(x.to_vec());
        Ok(self.forward_batch(&t)?.into_data())
    }

    /// Forward pass over the rows of `x: [batch, in]`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor, NeuralError> {
        if x.cols() != self.input_dim() {
            return Err(NeuralError::InputShape {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let m = x.rows();
        let mut cur = x.data().to_vec();
        for layer in &self.layers {
            let (k, n) = (layer.in_dim(), layer.out_dim());
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(layer.bias.data());
            }
            gemm(m, k, n, &cur, k, 1, layer.weight.data(), 1, k, &mut out, 1.0);
            if layer.activation != Activation::Identity {
                out.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            }
            cur = out;
        }
        Tensor::matrix(m, self.output_dim(), cur)
    }

    /// Registers the weights on `g`, as trainable parameters or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                };
                BoundLayer {
                    weight: w,
                    bias: b,
                    activation: l.activation,
                }
            })
            .collect();
        BoundMlp { layers }
    }
}

/// Graph handles for one layer.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: DTensor,
    pub bias: DTensor,
    pub activation: Activation,
}

/// A network whose weights live on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLayer>,
}

/// Per-layer `(weight, bias)` gradients.
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl MlpGrads {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| (Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.data_mut().iter_mut().zip(ow.data()).for_each(|(a, x)| *a += x);
            b.data_mut().iter_mut().zip(ob.data()).for_each(|(a, x)| *a += x);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: DTensor) -> Result<DTensor, NeuralError> {
        let mut cur = x;
        for l in &self.layers {
            let z = g.matmul_nt(cur, l.weight)?;
            let z = g.add_row(z, l.bias)?;
            cur = l.activation.apply_graph(g, z);
        }
        Ok(cur)
    }

    /// Gradients after `g.backward`; layers that received none report zeros.
    pub fn grads(&self, g: &Graph) -> MlpGrads {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let pick = |id: DTensor| {
                    g.grad(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
                };
                (pick(l.weight), pick(l.bias))
            })
            .collect();
        MlpGrads { layers }
    }
}

fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // QR of a tall Gaussian matrix gives orthonormal columns.
    let (tall_r, tall_c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = nalgebra::DMatrix::from_fn(tall_r, tall_c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix keeps the distribution uniform over orthogonal matrices
    for j in 0..tall_c {
        if r[(j, j)] < 0.0 {
            for i in 0..tall_r {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out[i * cols + j] = gain * v;
        }
    }
    out
}
