//! Safety-driven fine-tuning of the anchor controller.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adaptive::{sample_batch, update_adaptive_set, AdaptiveSet};
use super::safety::{eta_score, safety_loss, safety_loss_value};
use super::{evaluate, Controller, ObservationSource, TrainConfig, TrainError};
use crate::boundprop::BoundMethod;
use crate::laneworld::{render, sample_env, LaneState, SafetySpec, VehicleParams, IMAGE_DIM};
use crate::neural::{cosine_lr, Graph, MlpGrads, MlpNetwork, OptimizerState, Tensor};
use crate::perception::generator_input;
use crate::rng::{stream, uniform};
use crate::verify::{reach_tubes, sigma_bounds, ClosedLoop};

/// Frozen pieces shared by every update.
#[derive(Clone, Copy)]
pub struct SpvtContext<'a> {
    pub generator: &'a MlpNetwork,
    pub anchor: &'a Controller,
    pub dynamics: &'a VehicleParams,
    pub spec: &'a SafetySpec,
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Toggles {
    /// Adaptive training data; off means every batch is uniform.
    pub atd: bool,
    /// Horizon curriculum; off means the final horizon throughout.
    pub curriculum: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            atd: true,
            curriculum: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub perf: f64,
    pub safety: f64,
    pub saturation: f64,
    pub total: f64,
}

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Relative to `lambda2`.
    pub saturation: f64,
    pub margin: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            saturation: cfg.saturation_weight,
            margin: cfg.saturation_margin,
        }
    }
}

/// Gradients with respect to the controller weights of
/// `lambda1 * mean (pi(o) - anchor(o))^2 + lambda2 * (mean safety + w * saturation)`.
///
/// A zero weight drops its term from the graph altogether.
pub fn combined_loss(
    controller: &Controller,
    ctx: &SpvtContext<'_>,
    weights: LossWeights,
    epsilon: f64,
    observations: &Tensor,
    safety_states: &[LaneState],
    k: usize,
) -> Result<(MlpGrads, LossParts), TrainError> {
    let mut g = Graph::new();
    let net = controller.net.bind(&mut g, true);
    let mut parts = LossParts {
        perf: 0.0,
        safety: 0.0,
        saturation: 0.0,
        total: 0.0,
    };
    let LossWeights { lambda1, lambda2, .. } = weights;
    let mut terms = Vec::new();
    if lambda1 > 0.0 && observations.rows() > 0 {
        let target = ctx.anchor.act_batch(observations)?;
        let x = g.constant(observations.clone());
        let out = controller.forward_graph(&mut g, &net, x)?;
        let t = g.constant(Tensor::matrix(target.len(), 1, target)?);
        let diff = g.sub(out, t)?;
        let sq = g.square(diff);
        let perf = g.mean(sq);
        parts.perf = g.value(perf).data()[0];
        terms.push(g.scale(perf, lambda1));
    }
    if lambda2 > 0.0 && !safety_states.is_empty() {
        let gen = ctx.generator.bind(&mut g, false);
        let tube = safety_loss(&mut g, &gen, controller, &net, ctx.dynamics, safety_states, k, epsilon, weights.margin)?;
        parts.safety = g.value(tube.mean).data()[0];
        parts.saturation = g.value(tube.saturation).data()[0];
        terms.push(g.scale(tube.mean, lambda2));
        if weights.saturation > 0.0 {
            terms.push(g.scale(tube.saturation, lambda2 * weights.saturation));
        }
    }
    let Some(mut total) = terms.first().copied() else {
        return Ok((MlpGrads::zeros_like(&controller.net), parts));
    };
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    parts.total = g.value(total).data()[0];
    if !parts.total.is_finite() {
        return Err(TrainError::Contract(format!("loss is {}", parts.total)));
    }
    g.backward(total)?;
    Ok((net.grads(&g), parts))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub k: usize,
    pub p: f64,
    pub perf_loss: f64,
    pub safety_loss: f64,
    pub saturation: f64,
    pub mean_eta: f64,
    pub sa_size: usize,
    pub fallback_batches: usize,
    /// Mean episode reward, measured at the end of each stage.
    pub eval_reward: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SpvtOutcome {
    pub controller: Controller,
    pub history: Vec<EpochMetrics>,
    /// `(epoch, K, weights)` at the end of every curriculum stage.
    pub checkpoints: Vec<(usize, usize, MlpNetwork)>,
}

fn observations(
    ctx: &SpvtContext<'_>,
    source: ObservationSource,
    states: &[LaneState],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, TrainError> {
    match source {
        ObservationSource::Generator => {
            let m = ctx.generator.input_dim() - 2;
            let z: Vec<f64> = (0..states.len() * m).map(|_| uniform(rng, -1.0, 1.0)).collect();
            Ok(ctx.generator.forward_batch(&generator_input(states, &z, m))?)
        }
        ObservationSource::Renderer => {
            let data = states.iter().flat_map(|s| render(*s, &sample_env(rng))).collect();
            Ok(Tensor::matrix(states.len(), IMAGE_DIM, data)?)
        }
    }
}

/// Plain interval tubes for the whole batch: `(loss, eta)` per state.
fn score_batch(
    ctl: &Controller,
    ctx: &SpvtContext<'_>,
    states: &[LaneState],
    k: usize,
    epsilon: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let lp = ClosedLoop {
        generator: ctx.generator,
        controller: ctl,
        dynamics: ctx.dynamics,
        epsilon,
        method: BoundMethod::Ibp,
    };
    let mut losses = Vec::with_capacity(states.len());
    let mut etas = Vec::with_capacity(states.len());
    for (s, tube) in states.iter().zip(reach_tubes(states, k, &lp)?) {
        let (lo, hi) = sigma_bounds(&tube);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(TrainError::NonFiniteBounds { d: s.d, theta: s.theta });
        }
        let l = safety_loss_value(lo, hi, k);
        losses.push(l);
        etas.push(eta_score(l, hi, lo, ctx.spec.beta));
    }
    Ok((losses, etas))
}

/// Fine-tunes a copy of the anchor. Each batch mixes queue and pool states,
/// scores all of them with interval tubes, updates the adaptive set, and
/// takes one Adam step on imitation plus the safety loss of the highest-eta
/// states.
pub fn spvt_train(
    ctx: &SpvtContext<'_>,
    cfg: &TrainConfig,
    seed: u64,
    toggles: Toggles,
) -> Result<SpvtOutcome, TrainError> {
    ctx.spec.validate()?;
    cfg.validate(ctx.spec.horizon)?;
    if ctx.generator.output_dim() != IMAGE_DIM || ctx.generator.input_dim() < 2 {
        return Err(TrainError::Contract("generator must map 2 + m inputs to an image".into()));
    }
    let mut ctl = ctx.anchor.clone();
    let mut aset = AdaptiveSet::new(cfg.pool_size, cfg.sa_capacity, &mut stream(seed, "spvt-pool", 0));
    let mut opt = OptimizerState::for_network(&ctl.net, cfg.lr_start);
    let total_steps = cfg.epochs * cfg.batches_per_epoch;
    let final_k = *cfg.k_schedule.last().expect("validated");
    let eval_seed: u64 = stream(seed, "spvt-eval", 0).random();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints: Vec<(usize, usize, MlpNetwork)> = Vec::new();
    let weights = LossWeights::from_config(cfg);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let stage = cfg.stage(epoch);
        let k = if toggles.curriculum { cfg.k_schedule[stage] } else { final_k };
        let p = if toggles.atd && epoch >= cfg.warmup_epochs { cfg.p_at(stage) } else { 0.0 };
        let mut rng = stream(seed, "spvt-epoch", epoch as u64);
        let mut sums = [0.0; 4];
        let mut fallbacks = 0;
        for bi in 0..cfg.batches_per_epoch {
            let batch = sample_batch(&aset, p, cfg.batch_size, cfg.alpha, &mut rng);
            fallbacks += usize::from(batch.fallback);
            let states = batch.states();
            let (_, etas) = score_batch(&ctl, ctx, &states, k, cfg.epsilon)?;
            if toggles.atd {
                update_adaptive_set(&mut aset, &batch, &etas, cfg.m_frac, &mut rng);
            }
            let mut order: Vec<usize> = (0..states.len()).collect();
            order.sort_by(|&a, &b| etas[b].total_cmp(&etas[a]).then(a.cmp(&b)));
            let hard: Vec<LaneState> = order.iter().take(cfg.safety_batch).map(|&i| states[i]).collect();
            let obs = observations(ctx, cfg.observations, &states, &mut rng)?;
            let last_good = || {
                checkpoints
                    .last()
                    .map_or_else(|| ctx.anchor.net.clone(), |c| c.2.clone())
            };
            let (grads, parts) = combined_loss(&ctl, ctx, weights, cfg.epsilon, &obs, &hard, k)
                .map_err(|e| match e {
                    TrainError::Contract(what) => TrainError::Diverged {
                        epoch,
                        batch: bi,
                        what,
                        last_good: Box::new(last_good()),
                    },
                    other => other,
                })?;
            opt.lr = cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end);
            opt.step_network(&mut ctl.net, &grads).map_err(|e| TrainError::Diverged {
                epoch,
                batch: bi,
                what: e.to_string(),
                last_good: Box::new(last_good()),
            })?;
            sums[0] += parts.perf;
            sums[1] += parts.safety;
            sums[2] += etas.iter().sum::<f64>() / etas.len() as f64;
            sums[3] += parts.saturation;
            step += 1;
        }
        let stage_end = epoch + 1 == cfg.epochs || cfg.stage(epoch + 1) != stage;
        let eval_reward = if stage_end && cfg.eval_episodes > 0 {
            Some(evaluate(&ctl, ctx.dynamics, ctx.spec, cfg.eval_episodes, cfg.eval_steps, eval_seed)?.mean)
        } else {
            None
        };
        if stage_end {
            checkpoints.push((epoch, k, ctl.net.clone()));
        }
        let nb = cfg.batches_per_epoch as f64;
        history.push(EpochMetrics {
            epoch,
            k,
            p,
            perf_loss: sums[0] / nb,
            safety_loss: sums[1] / nb,
            saturation: sums[3] / nb,
            mean_eta: sums[2] / nb,
            sa_size: aset.queue().len(),
            fallback_batches: fallbacks,
            eval_reward,
        });
    }
    Ok(SpvtOutcome {
        controller: ctl,
        history,
        checkpoints,
    })
}

pub fn write_metrics_csv(history: &[EpochMetrics], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for m in history {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}
