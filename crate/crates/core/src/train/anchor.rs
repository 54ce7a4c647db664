//! Supervised imitation of the state-feedback expert from rendered images.

use rand::seq::SliceRandom;

use super::{AnchorConfig, Controller, TrainError};
use crate::laneworld::{anchor_policy_state, Sample, VehicleParams, IMAGE_DIM};
use crate::neural::{Graph, MlpNetwork, OptimizerState, Tensor};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub image: Vec<f64>,
    pub steer: f64,
}

/// Labels each rendered sample with the expert's steering command.
pub fn expert_demonstrations(samples: &[Sample], params: &VehicleParams) -> Vec<Demonstration> {
    samples
        .iter()
        .map(|s| Demonstration {
            image: s.image.clone(),
            steer: anchor_policy_state(params, s.state),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AnchorOutcome {
    /// Checkpoint with the lowest validation error.
    pub controller: Controller,
    /// `(epoch, train mse, validation mse)`, in steering units squared.
    pub history: Vec<(usize, f64, f64)>,
    pub best_val_mse: f64,
}

fn stack(demos: &[&Demonstration]) -> (Tensor, Vec<f64>) {
    let x = Tensor::matrix(
        demos.len(),
        IMAGE_DIM,
        demos.iter().flat_map(|d| d.image.iter().copied()).collect(),
    )
    .expect("demonstration images");
    (x, demos.iter().map(|d| d.steer).collect())
}

fn mse(c: &Controller, demos: &[&Demonstration]) -> Result<f64, TrainError> {
    if demos.is_empty() {
        return Ok(0.0);
    }
    let (x, y) = stack(demos);
    let a = c.act_batch(&x)?;
    Ok(a.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Minimizes the mean squared steering error; keeps the checkpoint that is
/// best on a held-out split (the initialization included).
pub fn pretrain_anchor(
    demos: &[Demonstration],
    cfg: &AnchorConfig,
    max_steer: f64,
    seed: u64,
) -> Result<AnchorOutcome, TrainError> {
    cfg.validate()?;
    if demos.is_empty() || demos.iter().any(|d| d.image.len() != IMAGE_DIM || !d.steer.is_finite()) {
        return Err(TrainError::Contract(format!(
            "demonstrations must be non-empty with {IMAGE_DIM}-pixel images and finite labels"
        )));
    }
    let mut ctl = Controller::init(&cfg.hidden, max_steer, &mut stream(seed, "anchor-init", 0))?;
    let mut order: Vec<&Demonstration> = demos.iter().collect();
    order.shuffle(&mut stream(seed, "anchor-split", 0));
    let n_val = if demos.len() > 1 {
        ((cfg.val_frac * demos.len() as f64).round() as usize).min(demos.len() - 1)
    } else {
        0
    };
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();
    let val = if val.is_empty() { train.clone() } else { val.to_vec() };
    let score = |c: &Controller| mse(c, &val);
    let mut best = (ctl.clone(), score(&ctl)?);
    let mut opt = OptimizerState::for_network(&ctl.net, cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream(seed, "anchor-epoch", epoch as u64);
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in train.chunks(cfg.batch_size).enumerate() {
            let (x, y) = stack(chunk);
            let mut g = Graph::new();
            let net = ctl.net.bind(&mut g, true);
            let xn = g.constant(x);
            let out = ctl.forward_graph(&mut g, &net, xn)?;
            let t = g.constant(Tensor::matrix(y.len(), 1, y)?);
            let diff = g.sub(out, t)?;
            let sq = g.square(diff);
            let loss = g.mean(sq);
            let v = g.value(loss).data()[0];
            if !v.is_finite() {
                return Err(diverged(epoch, bi, format!("imitation loss = {v}"), &best.0.net));
            }
            total += v * chunk.len() as f64;
            g.backward(loss)?;
            opt.step_network(&mut ctl.net, &net.grads(&g))
                .map_err(|e| diverged(epoch, bi, e.to_string(), &best.0.net))?;
        }
        let v = score(&ctl)?;
        history.push((epoch, total / train.len() as f64, v));
        if v < best.1 {
            best = (ctl.clone(), v);
        }
    }
    Ok(AnchorOutcome {
        controller: best.0,
        history,
        best_val_mse: best.1,
    })
}

fn diverged(epoch: usize, batch: usize, what: String, last: &MlpNetwork) -> TrainError {
    TrainError::Diverged {
        epoch,
        batch,
        what,
        last_good: Box::new(last.clone()),
    }
}
