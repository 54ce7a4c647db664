//! Latent search: how closely can the generator reproduce a given image?

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cgan::train_cgan;
use super::{GeneratorConfig, PerceptionError};
use crate::laneworld::{LaneState, Sample, IMAGE_DIM};
use crate::neural::{cosine_lr, Graph, MlpNetwork, NeuralError, OptimizerState, Tensor};
use crate::rng::{stream, uniform};

/// Images searched together; bounds peak memory of the batched search.
const SEARCH_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSettings {
    pub restarts: usize,
    pub iters: usize,
    /// Initial Adam step, decayed to zero on a cosine schedule.
    pub step: f64,
    pub seed: u64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            restarts: 8,
            iters: 300,
            step: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub z: Vec<f64>,
    pub mse: f64,
    pub linf: f64,
}

/// Restart `r` starts from the same point for every image and every restart
/// count, so adding restarts only ever extends the candidate set.
fn restart_point(seed: u64, r: usize, m: usize) -> Vec<f64> {
    let mut rng = stream(seed, "latent-restart", r as u64);
    (0..m).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()
}

fn residuals(out: &[f64], target: &[f64]) -> (f64, f64) {
    let mut sq = 0.0;
    let mut worst: f64 = 0.0;
    for (a, b) in out.iter().zip(target) {
        let e = a - b;
        sq += e * e;
        worst = worst.max(e.abs());
    }
    (sq / out.len() as f64, worst)
}

fn search_chunk(
    g: &MlpNetwork,
    targets: &[(LaneState, &[f64])],
    settings: &SearchSettings,
) -> Result<Vec<SearchResult>, NeuralError> {
    let m = g.input_dim() - 2;
    let restarts = settings.restarts.max(1);
    let rows = targets.len() * restarts;
    let starts: Vec<Vec<f64>> = (0..restarts).map(|r| restart_point(settings.seed, r, m)).collect();
    let states: Vec<LaneState> = (0..rows).map(|i| targets[i / restarts].0).collect();
    let mut z = Tensor::zeros(&[rows, m]);
    for i in 0..rows {
        z.data_mut()[i * m..(i + 1) * m].copy_from_slice(&starts[i % restarts]);
    }
    let mut tgt = Vec::with_capacity(rows * IMAGE_DIM);
    for i in 0..rows {
        tgt.extend_from_slice(targets[i / restarts].1);
    }
    let tgt = Tensor::matrix(rows, IMAGE_DIM, tgt)?;
    let mut best: Vec<SearchResult> = vec![
        SearchResult {
            z: vec![],
            mse: f64::INFINITY,
            linf: f64::INFINITY,
        };
        targets.len()
    ];
    let mut opt = OptimizerState::new(&[&[rows, m]], settings.step);
    let frozen = g.clone();
    for it in 0..=settings.iters {
        let mut graph = Graph::new();
        let net = frozen.bind(&mut graph, false);
        let zn = graph.input(z.clone(), true);
        let cond = graph.constant(Tensor::matrix(
            rows,
            2,
            states.iter().flat_map(|s| [s.d, s.theta]).collect(),
        )?);
        let x = graph.concat_cols(&[cond, zn])?;
        let out = net.forward(&mut graph, x)?;
        // Restarts run in lockstep; the per-row ordering keeps the lowest
        // restart index on ties.
        for i in 0..rows {
            let (mse, linf) = residuals(graph.value(out).row_slice(i), tgt.row_slice(i));
            let b = &mut best[i / restarts];
            if mse < b.mse {
                *b = SearchResult {
                    z: z.row_slice(i).to_vec(),
                    mse,
                    linf,
                };
            }
        }
        if it == settings.iters {
            break;
        }
        // Sum of per-row means keeps rows independent of one another.
        let t = graph.constant(tgt.clone());
        let diff = graph.sub(out, t)?;
        let sq = graph.square(diff);
        let total = graph.sum(sq);
        let loss = graph.scale(total, 1.0 / IMAGE_DIM as f64);
        graph.backward(loss)?;
        let grad = graph.grad(zn).cloned().unwrap_or_else(|| Tensor::zeros(&[rows, m]));
        opt.lr = cosine_lr(it, settings.iters, settings.step, 0.0);
        opt.adam_step(&mut [&mut z], &[&grad])?;
        z.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    Ok(best)
}

/// Projected search over `z ∈ [-1, 1]^m` minimizing the mean squared error
/// to each target; best over restarts and iterations.
pub fn latent_search_batch(
    g: &MlpNetwork,
    targets: &[(LaneState, &[f64])],
    settings: &SearchSettings,
) -> Result<Vec<SearchResult>, NeuralError> {
    if g.input_dim() < 2 || g.output_dim() != IMAGE_DIM {
        return Err(NeuralError::Shape(format!(
            "generator maps {} -> {}, expected 2+m -> {IMAGE_DIM}",
            g.input_dim(),
            g.output_dim()
        )));
    }
    if let Some((_, t)) = targets.iter().find(|(_, t)| t.len() != IMAGE_DIM) {
        return Err(NeuralError::InputShape {
            expected: IMAGE_DIM,
            got: t.len(),
        });
    }
    let mut out = Vec::with_capacity(targets.len());
    for chunk in targets.chunks(SEARCH_CHUNK) {
        out.extend(search_chunk(g, chunk, settings)?);
    }
    Ok(out)
}

pub fn latent_search(
    g: &MlpNetwork,
    target: &[f64],
    s: LaneState,
    settings: &SearchSettings,
) -> Result<SearchResult, NeuralError> {
    Ok(latent_search_batch(g, &[(s, target)], settings)?.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonReport {
    pub linf: Vec<f64>,
    pub mse: Vec<f64>,
    pub epsilon_max: f64,
    pub epsilon_q95: f64,
    pub latent_dim: usize,
    pub settings: SearchSettings,
}

impl EpsilonReport {
    pub fn mean_mse(&self) -> f64 {
        self.mse.iter().sum::<f64>() / self.mse.len() as f64
    }
}

/// Nearest-rank quantile of unsorted data.
fn quantile(data: &[f64], q: f64) -> f64 {
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Best-fit residuals of the generator on held-out observations.
pub fn estimate_epsilon(
    g: &MlpNetwork,
    heldout: &[Sample],
    settings: &SearchSettings,
) -> Result<EpsilonReport, PerceptionError> {
    if heldout.is_empty() {
        return Err(PerceptionError::Contract("held-out set is empty".into()));
    }
    let targets: Vec<(LaneState, &[f64])> = heldout.iter().map(|s| (s.state, s.image.as_slice())).collect();
    let found = latent_search_batch(g, &targets, settings)?;
    let linf: Vec<f64> = found.iter().map(|r| r.linf).collect();
    let mse: Vec<f64> = found.iter().map(|r| r.mse).collect();
    Ok(EpsilonReport {
        epsilon_max: linf.iter().copied().fold(0.0, f64::max),
        epsilon_q95: quantile(&linf, 0.95),
        linf,
        mse,
        latent_dim: g.input_dim() - 2,
        settings: *settings,
    })
}

pub fn write_epsilon_csv(report: &EpsilonReport, path: &Path) -> Result<(), PerceptionError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "linf", "mse"])?;
    for (i, (l, m)) in report.linf.iter().zip(&report.mse).enumerate() {
        w.write_record([i.to_string(), l.to_string(), m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionPoint {
    pub latent_dim: usize,
    pub mean_mse: f64,
    pub epsilon_max: f64,
    pub epsilon_q95: f64,
}

/// Trains one generator per latent size with the same budget and measures
/// its best-fit error on `heldout`. Points come back sorted by size.
pub fn validate_assumption(
    dims: &[usize],
    train: &[Sample],
    heldout: &[Sample],
    base: &GeneratorConfig,
    settings: &SearchSettings,
    seed: u64,
) -> Result<Vec<AssumptionPoint>, PerceptionError> {
    let mut dims = dims.to_vec();
    dims.sort_unstable();
    dims.dedup();
    dims.iter()
        .map(|&latent_dim| {
            let cfg = GeneratorConfig {
                latent_dim,
                ..base.clone()
            };
            let trained = train_cgan(train, &cfg, seed)?;
            let rep = estimate_epsilon(&trained.generator, heldout, settings)?;
            Ok(AssumptionPoint {
                latent_dim,
                mean_mse: rep.mean_mse(),
                epsilon_max: rep.epsilon_max,
                epsilon_q95: rep.epsilon_q95,
            })
        })
        .collect()
}

pub fn write_assumption_curve(points: &[AssumptionPoint], path: &Path) -> Result<(), PerceptionError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, Init};
    use crate::perception::generator_input;

    fn gen(m: usize) -> MlpNetwork {
        let mut rng = stream(7, "latent-test", m as u64);
        MlpNetwork::init(&[2 + m, 32, IMAGE_DIM], Activation::Relu, Activation::Tanh, Init::Orthogonal, &mut rng)
            .unwrap()
    }

    fn image(g: &MlpNetwork, s: LaneState, z: &[f64]) -> Vec<f64> {
        g.forward_batch(&generator_input(&[s], z, z.len())).unwrap().into_data()
    }

    #[test]
    fn realizable_target_is_recovered() {
        let g = gen(3);
        let s = LaneState::new(0.2, -0.05);
        let target = image(&g, s, &[0.3, -0.6, 0.1]);
        let r = latent_search(&g, &target, s, &SearchSettings::default()).unwrap();
        assert!(r.mse <= 1e-6, "mse {}", r.mse);
        assert!(r.z.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zero_iterations_report_the_start() {
        let g = gen(2);
        let s = LaneState::new(0.0, 0.0);
        let target = vec![0.0; IMAGE_DIM];
        let settings = SearchSettings {
            restarts: 1,
            iters: 0,
            ..SearchSettings::default()
        };
        let r = latent_search(&g, &target, s, &settings).unwrap();
        let start = restart_point(settings.seed, 0, 2);
        assert_eq!(r.z, start);
        let (mse, _) = residuals(&image(&g, s, &start), &target);
        assert_eq!(r.mse, mse);
    }

    #[test]
    fn quantile_is_an_order_statistic() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.95), 95.0);
        assert_eq!(quantile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn empty_heldout_is_rejected() {
        assert!(matches!(
            estimate_epsilon(&gen(2), &[], &SearchSettings::default()),
            Err(PerceptionError::Contract(_))
        ));
    }
}
