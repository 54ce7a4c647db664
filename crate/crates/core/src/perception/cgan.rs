//! Adversarial training of the state-conditioned generator.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{GeneratorConfig, PerceptionError};
use crate::laneworld::{LaneState, Sample, StateRanges, IMAGE_DIM};
use crate::neural::{
    cosine_lr, Activation, BoundMlp, DTensor, Graph, Init, MlpNetwork, NeuralError,
    OptimizerState, Tensor,
};
use crate::rng::{stream, uniform};

/// Orthogonal initialization, with the state columns of the first layer
/// divided by the initial-state half-ranges so that `d` and `theta` start
/// on the same footing as the latent coordinates.
pub fn generator_init(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<MlpNetwork, NeuralError> {
    let mut dims = vec![2 + cfg.latent_dim];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(IMAGE_DIM);
    let mut net = MlpNetwork::init(&dims, Activation::Relu, Activation::Tanh, Init::Orthogonal, rng)?;
    let ranges = StateRanges::default();
    let first = &mut net.layers_mut()[0].weight;
    let cols = first.cols();
    for row in first.data_mut().chunks_mut(cols) {
        row[0] /= ranges.d;
        row[1] /= ranges.theta;
    }
    Ok(net)
}

/// Scores `(image, state)` pairs with an unbounded logit.
pub fn discriminator_init(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<MlpNetwork, NeuralError> {
    let mut dims = vec![IMAGE_DIM + 2];
    dims.extend_from_slice(&cfg.disc_hidden);
    dims.push(1);
    MlpNetwork::init(&dims, Activation::Relu, Activation::Identity, Init::Orthogonal, rng)
}

/// Rows `[d, theta, z...]`.
pub fn generator_input(states: &[LaneState], z: &[f64], latent_dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(states.len() * (2 + latent_dim));
    for (i, s) in states.iter().enumerate() {
        data.push(s.d);
        data.push(s.theta);
        data.extend_from_slice(&z[i * latent_dim..(i + 1) * latent_dim]);
    }
    Tensor::matrix(states.len(), 2 + latent_dim, data).expect("generator input")
}

fn uniform_latents(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect()
}

/// Rows `[image, d, theta]`.
fn discriminator_input(images: &[f64], states: &[LaneState]) -> Tensor {
    let mut data = Vec::with_capacity(states.len() * (IMAGE_DIM + 2));
    for (i, s) in states.iter().enumerate() {
        data.extend_from_slice(&images[i * IMAGE_DIM..(i + 1) * IMAGE_DIM]);
        data.push(s.d);
        data.push(s.theta);
    }
    Tensor::matrix(states.len(), IMAGE_DIM + 2, data).expect("discriminator input")
}

/// `Σ_layers ‖W Wᵀ ⊙ (1 − I)‖²` recorded on `g`.
pub fn orthogonal_penalty(g: &mut Graph, net: &BoundMlp) -> Result<DTensor, NeuralError> {
    let mut total: Option<DTensor> = None;
    for layer in &net.layers {
        let rows = g.value(layer.weight).rows();
        let gram = g.matmul_nt(layer.weight, layer.weight)?;
        let mut mask = Tensor::filled(&[rows, rows], 1.0);
        for i in 0..rows {
            mask.data_mut()[i * rows + i] = 0.0;
        }
        let mask = g.constant(mask);
        let off = g.mul(gram, mask)?;
        let sq = g.square(off);
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| NeuralError::Contract("network without layers".into()))
}

/// Mean per-pixel absolute error of `g(s, z)` against the samples, with
/// latents drawn from a stream fixed by `seed`.
pub fn heldout_l1(generator: &MlpNetwork, samples: &[Sample], seed: u64) -> Result<f64, NeuralError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let m = generator.input_dim() - 2;
    let mut rng = stream(seed, "heldout-latent", 0);
    let states: Vec<LaneState> = samples.iter().map(|s| s.state).collect();
    let z = uniform_latents(&mut rng, samples.len() * m);
    let out = generator.forward_batch(&generator_input(&states, &z, m))?;
    let err: f64 = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            out.row_slice(i)
                .iter()
                .zip(&s.image)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(err / (samples.len() * IMAGE_DIM) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub disc_loss: f64,
    pub gen_adv: f64,
    pub gen_l1: f64,
    pub gen_ortho: f64,
    pub heldout_l1: f64,
}

#[derive(Clone, Debug)]
pub struct CganOutcome {
    /// Checkpoint with the lowest held-out l1.
    pub generator: MlpNetwork,
    pub discriminator: MlpNetwork,
    pub history: Vec<EpochStats>,
    pub initial_heldout_l1: f64,
    pub best_heldout_l1: f64,
    /// `None` when the initialization was never improved on.
    pub best_epoch: Option<usize>,
    pub heldout: Vec<Sample>,
}

fn finite_or(epoch: usize, batch: usize, what: &str, v: f64) -> Result<f64, PerceptionError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PerceptionError::Diverged {
            epoch,
            batch,
            what: format!("{what} = {v}"),
        })
    }
}

fn diverged(epoch: usize, batch: usize, e: NeuralError) -> PerceptionError {
    match e {
        NeuralError::NonFiniteGradient { layer } => PerceptionError::Diverged {
            epoch,
            batch,
            what: format!("non-finite gradient in layer {layer}"),
        },
        other => PerceptionError::Neural(other),
    }
}

struct BatchLosses {
    disc: f64,
    adv: f64,
    l1: f64,
    ortho: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    cfg: &GeneratorConfig,
    gen: &mut MlpNetwork,
    disc: &mut MlpNetwork,
    opt_g: &mut OptimizerState,
    opt_d: &mut OptimizerState,
    batch: &[&Sample],
    rng: &mut ChaCha8Rng,
    at: (usize, usize),
) -> Result<BatchLosses, PerceptionError> {
    let (epoch, bi) = at;
    let m = cfg.latent_dim;
    let n = batch.len();
    let states: Vec<LaneState> = batch.iter().map(|s| s.state).collect();
    let real: Vec<f64> = batch.iter().flat_map(|s| s.image.iter().copied()).collect();

    // Discriminator: real pairs toward +, generated pairs toward −.
    let z = uniform_latents(rng, n * m);
    let fake = gen.forward_batch(&generator_input(&states, &z, m))?;
    let mut g = Graph::new();
    let dn = disc.bind(&mut g, true);
    let real_in = g.constant(discriminator_input(&real, &states));
    let fake_in = g.constant(discriminator_input(fake.data(), &states));
    let lr_ = dn.forward(&mut g, real_in)?;
    let lf_ = dn.forward(&mut g, fake_in)?;
    let neg = g.scale(lr_, -1.0);
    let a = g.softplus(neg);
    let a = g.mean(a);
    let b = g.softplus(lf_);
    let b = g.mean(b);
    let d_loss = g.add(a, b)?;
    let disc_loss = finite_or(epoch, bi, "discriminator loss", g.value(d_loss).data()[0])?;
    g.backward(d_loss)?;
    let grads = dn.grads(&g);
    opt_d.step_network(disc, &grads).map_err(|e| diverged(epoch, bi, e))?;

    // Generator: fool the discriminator, stay close in l1, keep weights near-orthogonal.
    let z = uniform_latents(rng, n * m);
    let mut g = Graph::new();
    let gn = gen.bind(&mut g, true);
    let dn = disc.bind(&mut g, false);
    let x = g.constant(generator_input(&states, &z, m));
    let out = gn.forward(&mut g, x)?;
    let cond = g.constant(Tensor::matrix(n, 2, states.iter().flat_map(|s| [s.d, s.theta]).collect())?);
    let d_in = g.concat_cols(&[out, cond])?;
    let logit = dn.forward(&mut g, d_in)?;
    let neg = g.scale(logit, -1.0);
    let adv = g.softplus(neg);
    let adv = g.mean(adv);
    let target = g.constant(Tensor::matrix(n, IMAGE_DIM, real)?);
    let diff = g.sub(out, target)?;
    let l1 = g.abs(diff);
    let l1 = g.mean(l1);
    let ortho = orthogonal_penalty(&mut g, &gn)?;
    let t1 = g.scale(adv, cfg.adv_weight);
    let t2 = g.scale(l1, cfg.l1_weight);
    let t3 = g.scale(ortho, cfg.ortho_weight);
    let loss = g.add(t1, t2)?;
    let loss = g.add(loss, t3)?;
    finite_or(epoch, bi, "generator loss", g.value(loss).data()[0])?;
    g.backward(loss)?;
    let grads = gn.grads(&g);
    opt_g.step_network(gen, &grads).map_err(|e| diverged(epoch, bi, e))?;
    Ok(BatchLosses {
        disc: disc_loss,
        adv: g.value(adv).data()[0],
        l1: g.value(l1).data()[0],
        ortho: g.value(ortho).data()[0],
    })
}

/// Alternating discriminator/generator updates; returns the best held-out
/// checkpoint.
pub fn train_cgan(
    dataset: &[Sample],
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<CganOutcome, PerceptionError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(PerceptionError::Contract("empty training set".into()));
    }
    if dataset
        .iter()
        .any(|s| s.image.len() != IMAGE_DIM || s.image.iter().any(|p| !(-1.0..=1.0).contains(p)))
    {
        return Err(PerceptionError::Contract(format!(
            "images must have {IMAGE_DIM} pixels in [-1, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream(seed, "cgan-split", 0));
    let n_hold = if dataset.len() > 1 {
        ((cfg.heldout_frac * dataset.len() as f64).round() as usize).min(dataset.len() - 1)
    } else {
        0
    };
    let heldout: Vec<Sample> = order[..n_hold].iter().map(|&i| dataset[i].clone()).collect();
    let mut train: Vec<&Sample> = order[n_hold..].iter().map(|&i| &dataset[i]).collect();

    let mut gen = generator_init(cfg, &mut stream(seed, "cgan-init", 0))?;
    let mut disc = discriminator_init(cfg, &mut stream(seed, "cgan-init", 1))?;
    let initial = heldout_l1(&gen, &heldout, seed)?;
    let mut best = (gen.clone(), disc.clone(), initial, None);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut opt_g = OptimizerState::for_network(&gen, cfg.lr_start);
    let mut opt_d = OptimizerState::for_network(&disc, cfg.lr_start);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = stream(seed, "cgan-epoch", epoch as u64);
        train.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for (bi, batch) in train.chunks(cfg.batch_size).enumerate() {
            let lr = cosine_lr(step, total, cfg.lr_start, cfg.lr_end);
            opt_g.lr = lr;
            opt_d.lr = lr * cfg.disc_lr_scale;
            let l = train_batch(cfg, &mut gen, &mut disc, &mut opt_g, &mut opt_d, batch, &mut rng, (epoch, bi))?;
            for (s, v) in sums.iter_mut().zip([l.disc, l.adv, l.l1, l.ortho]) {
                *s += v;
            }
            step += 1;
        }
        let score = heldout_l1(&gen, &heldout, seed)?;
        let k = per_epoch.max(1) as f64;
        history.push(EpochStats {
            epoch,
            disc_loss: sums[0] / k,
            gen_adv: sums[1] / k,
            gen_l1: sums[2] / k,
            gen_ortho: sums[3] / k,
            heldout_l1: score,
        });
        if heldout.is_empty() || score < best.2 {
            best = (gen.clone(), disc.clone(), score, Some(epoch));
        }
    }
    Ok(CganOutcome {
        generator: best.0,
        discriminator: best.1,
        history,
        initial_heldout_l1: initial,
        best_heldout_l1: best.2,
        best_epoch: best.3,
        heldout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laneworld::{generate_dataset, StateRanges};

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: 3,
            hidden: vec![16, 16],
            disc_hidden: vec![16],
            batch_size: 16,
            epochs: 0,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = generate_dataset(40, 1, &StateRanges::default());
        let cfg = tiny();
        let out = train_cgan(&data, &cfg, 5).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.generator, generator_init(&cfg, &mut stream(5, "cgan-init", 0)).unwrap());
        assert_eq!(out.best_epoch, None);
    }

    #[test]
    fn a_few_epochs_reduce_heldout_l1() {
        let data = generate_dataset(400, 2, &StateRanges::default());
        let cfg = GeneratorConfig {
            epochs: 5,
            ..tiny()
        };
        let out = train_cgan(&data, &cfg, 6).unwrap();
        assert_eq!(out.history.len(), 5);
        assert!(out.best_heldout_l1 < out.initial_heldout_l1);
        let x = Tensor::matrix(1, 5, vec![0.3, 0.0, 1.0, -1.0, 0.5]).unwrap();
        assert!(out.generator.forward_batch(&x).unwrap().data().iter().all(|p| p.abs() <= 1.0));
    }

    #[test]
    fn orthogonal_penalty_vanishes_for_orthogonal_rows() {
        let mut rng = stream(1, "ortho", 0);
        let net = MlpNetwork::init(&[8, 8], Activation::Identity, Activation::Identity, Init::Orthogonal, &mut rng)
            .unwrap();
        let mut g = Graph::new();
        let b = net.bind(&mut g, true);
        let p = orthogonal_penalty(&mut g, &b).unwrap();
        assert!(g.value(p).data()[0] < 1e-20);
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        assert!(matches!(train_cgan(&[], &tiny(), 1), Err(PerceptionError::Contract(_))));
    }
}
