mod common;

use proptest::prelude::*;
use rand::Rng;
use spvt::laneworld::{generate_dataset, sample_initial, LaneState, Sample, StateRanges, IMAGE_DIM};
use spvt::perception::{
    estimate_epsilon, generator_init, generator_input, latent_search, latent_search_batch, train_cgan,
    validate_assumption, GeneratorConfig, SearchSettings,
};
use spvt::neural::MlpNetwork;
use spvt::rng::stream;

fn small_cfg(latent_dim: usize) -> GeneratorConfig {
    GeneratorConfig {
        latent_dim,
        hidden: vec![32, 32],
        disc_hidden: vec![32],
        epochs: 2,
        batch_size: 32,
        ..GeneratorConfig::default()
    }
}

fn image(g: &MlpNetwork, s: LaneState, z: &[f64]) -> Vec<f64> {
    g.forward_batch(&generator_input(&[s], z, z.len())).unwrap().row_slice(0).to_vec()
}

fn residual(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let linf = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    (mse, linf)
}

/// Images the generator itself produces at known latents.
fn realizable(g: &MlpNetwork, m: usize, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = stream(seed, "realizable", 0);
    (0..n)
        .map(|_| {
            let state = sample_initial(&mut rng);
            let z: Vec<f64> = (0..m).map(|_| rng.random_range(-0.9..0.9)).collect();
            Sample {
                state,
                env: spvt::laneworld::EnvLatent::nominal(),
                image: image(g, state, &z),
            }
        })
        .collect()
}

#[test]
fn realizable_targets_are_recovered() {
    let cfg = small_cfg(4);
    let g = generator_init(&cfg, &mut stream(41, "gen", 0)).unwrap();
    let held = realizable(&g, 4, 20, 1);
    let rep = estimate_epsilon(&g, &held, &SearchSettings::default()).unwrap();
    assert!(rep.epsilon_max <= 1e-3, "epsilon_max {}", rep.epsilon_max);
    assert!(rep.mse.iter().all(|&m| m <= 1e-6), "{:?}", rep.mse);
    assert!(rep.epsilon_q95 <= rep.epsilon_max);
    assert_eq!(rep.latent_dim, 4);
}

#[test]
fn reported_residuals_are_attained_at_the_returned_latent() {
    let g = generator_init(&small_cfg(6), &mut stream(41, "gen", 1)).unwrap();
    let data = generate_dataset(30, 2, &StateRanges::default());
    let targets: Vec<(LaneState, &[f64])> = data.iter().map(|s| (s.state, s.image.as_slice())).collect();
    let settings = SearchSettings {
        restarts: 3,
        iters: 40,
        ..SearchSettings::default()
    };
    let found = latent_search_batch(&g, &targets, &settings).unwrap();
    let rep = estimate_epsilon(&g, &data, &settings).unwrap();
    for ((r, s), linf) in found.iter().zip(&data).zip(&rep.linf) {
        assert!(r.z.iter().all(|v| (-1.0..=1.0).contains(v)));
        let (mse, l) = residual(&image(&g, s.state, &r.z), &s.image);
        assert!((mse - r.mse).abs() < 1e-12 && (l - r.linf).abs() < 1e-12);
        // Every held-out image lies within epsilon_max of a generator output.
        assert!(l <= rep.epsilon_max);
        assert_eq!(*linf, r.linf);
    }
    assert!(rep.epsilon_q95 <= rep.epsilon_max);
}

#[test]
fn zero_iterations_evaluate_the_starting_point() {
    let g = generator_init(&small_cfg(3), &mut stream(41, "gen", 2)).unwrap();
    let data = generate_dataset(3, 5, &StateRanges::default());
    let settings = SearchSettings {
        restarts: 1,
        iters: 0,
        ..SearchSettings::default()
    };
    let results: Vec<_> = data.iter().map(|s| latent_search(&g, &s.image, s.state, &settings).unwrap()).collect();
    for (r, s) in results.iter().zip(&data) {
        assert_eq!(r.z, results[0].z, "start does not depend on the target");
        let (mse, _) = residual(&image(&g, s.state, &r.z), &s.image);
        assert!((mse - r.mse).abs() < 1e-12);
    }
}

#[test]
fn more_restarts_never_hurt() {
    let g = generator_init(&small_cfg(5), &mut stream(41, "gen", 3)).unwrap();
    let data = generate_dataset(10, 6, &StateRanges::default());
    let targets: Vec<(LaneState, &[f64])> = data.iter().map(|s| (s.state, s.image.as_slice())).collect();
    let mut prev: Option<Vec<f64>> = None;
    for restarts in 1..=5 {
        let settings = SearchSettings {
            restarts,
            iters: 25,
            ..SearchSettings::default()
        };
        let mse: Vec<f64> = latent_search_batch(&g, &targets, &settings).unwrap().iter().map(|r| r.mse).collect();
        if let Some(p) = &prev {
            for (a, b) in mse.iter().zip(p) {
                assert!(a <= b, "{restarts} restarts: {a} > {b}");
            }
        }
        prev = Some(mse);
    }
}

#[test]
fn zero_epochs_return_the_initial_generator() {
    let data = generate_dataset(50, 7, &StateRanges::default());
    let cfg = GeneratorConfig {
        epochs: 0,
        ..small_cfg(4)
    };
    let out = train_cgan(&data, &cfg, 9).unwrap();
    assert!(out.history.is_empty());
    let again = train_cgan(&data, &cfg, 9).unwrap();
    assert_eq!(out.generator, again.generator);
}

#[test]
fn trained_generator_outputs_stay_in_pixel_range() {
    let data = generate_dataset(200, 8, &StateRanges::default());
    let out = train_cgan(&data, &small_cfg(4), 3).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.best_heldout_l1 <= out.initial_heldout_l1);
    let mut rng = stream(41, "range", 0);
    for _ in 0..200 {
        let s = LaneState::new(rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
        let z: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let img = image(&out.generator, s, &z);
        assert_eq!(img.len(), IMAGE_DIM);
        assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn assumption_curve_is_sorted_and_a_singleton_matches_a_direct_estimate() {
    let train = generate_dataset(120, 10, &StateRanges::default());
    let held = generate_dataset(12, 11, &StateRanges::default());
    let cfg = GeneratorConfig {
        epochs: 1,
        ..small_cfg(0)
    };
    let settings = SearchSettings {
        restarts: 2,
        iters: 10,
        ..SearchSettings::default()
    };
    let curve = validate_assumption(&[4, 2, 3], &train, &held, &cfg, &settings, 5).unwrap();
    assert_eq!(curve.iter().map(|p| p.latent_dim).collect::<Vec<_>>(), [2, 3, 4]);

    let single = validate_assumption(&[3], &train, &held, &cfg, &settings, 5).unwrap();
    assert_eq!(single.len(), 1);
    let g = train_cgan(&train, &GeneratorConfig { latent_dim: 3, ..cfg }, 5).unwrap().generator;
    let rep = estimate_epsilon(&g, &held, &settings).unwrap();
    assert_eq!(single[0].mean_mse, rep.mean_mse());
    assert_eq!(single[0].epsilon_max, rep.epsilon_max);
    assert_eq!(single[0], curve[1]);
}

#[test]
fn empty_heldout_is_a_contract_error() {
    let g = generator_init(&small_cfg(2), &mut stream(41, "gen", 4)).unwrap();
    assert!(estimate_epsilon(&g, &[], &SearchSettings::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn searched_latents_stay_in_the_unit_cube(seed in any::<u64>(), step in 0.01f64..2.0, m in 1usize..6) {
        let g = generator_init(&small_cfg(m), &mut stream(seed, "gen", 0)).unwrap();
        let mut rng = stream(seed, "target", 0);
        let s = sample_initial(&mut rng);
        let target: Vec<f64> = (0..IMAGE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let settings = SearchSettings { restarts: 2, iters: 15, step, seed };
        let r = latent_search(&g, &target, s, &settings).unwrap();
        prop_assert_eq!(r.z.len(), m);
        prop_assert!(r.z.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!(r.mse >= 0.0 && r.linf >= 0.0);
    }
}
