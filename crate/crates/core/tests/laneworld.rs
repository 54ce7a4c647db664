mod common;

use common::{render_oracle, step_oracle};
use proptest::prelude::*;
use rand::Rng;
use spvt::boundprop::IntervalVec;
use spvt::laneworld::{
    anchor_policy_state, generate_dataset, read_dataset, render, reward, rollout, sample_env, sample_initial,
    write_dataset, Dynamics, EnvLatent, LaneState, SafetySpec, StateRanges, VehicleParams, IMAGE_COLS, IMAGE_DIM,
};
use spvt::rng::stream;

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

#[test]
fn renderer_matches_the_pixel_formula() {
    let mut rng = stream(31, "render", 0);
    for _ in 0..2000 {
        let s = LaneState::new(rng.random_range(-1.5..1.5), rng.random_range(-0.4..0.4));
        let w = sample_env(&mut rng);
        let img = render(s, &w);
        assert_eq!(img.len(), IMAGE_DIM);
        for (a, b) in img.iter().zip(render_oracle(s, &w)) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn centered_lane_peaks_in_the_middle_columns() {
    let mut rng = stream(31, "center", 0);
    for _ in 0..200 {
        let mut w = sample_env(&mut rng);
        w.texture_phase = 0.0;
        let img = render(LaneState::new(0.0, 0.0), &w);
        for row in img.chunks(IMAGE_COLS) {
            assert!([7, 8].contains(&argmax(row)));
        }
    }
}

#[test]
fn lateral_offset_moves_the_ridge() {
    let w = EnvLatent::nominal();
    // Ridge at 7.5 - 0.2 * 24 = 2.7 on the first row.
    let img = render(LaneState::new(0.2, 0.0), &w);
    assert_eq!(argmax(&img[..IMAGE_COLS]), 3);

    // At d = 0.8 the first-row ridge sits at 7.5 - 19.2 = -11.7: off frame,
    // so the row is background plus texture only.
    let img = render(LaneState::new(0.8, 0.0), &w);
    for (c, v) in img[..IMAGE_COLS].iter().enumerate() {
        let background = -0.6 + 0.05 * (3.0 * c as f64).sin();
        assert!((v - background).abs() < 1e-9, "column {c}");
    }
    // Deeper rows still see the lane, left of center.
    let last = &img[7 * IMAGE_COLS..];
    assert!(argmax(last) < 7);
}

#[test]
fn renderer_is_sensitive_to_lateral_offset() {
    let mut rng = stream(31, "sensitivity", 0);
    let ranges = StateRanges::default();
    for _ in 0..5000 {
        let w = sample_env(&mut rng);
        let theta = rng.random_range(-ranges.theta..=ranges.theta);
        let d1 = rng.random_range(-ranges.d..=ranges.d - 0.2);
        let d2 = rng.random_range(d1 + 0.2..=ranges.d);
        let a = render(LaneState::new(d1, theta), &w);
        let b = render(LaneState::new(d2, theta), &w);
        let linf = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(linf >= 0.05, "d {d1} vs {d2}, theta {theta}: {linf}");
    }
}

#[test]
fn dynamics_examples() {
    let p = VehicleParams::default();
    let s = LaneState::new(0.37, 0.0);
    assert_eq!(p.step(s, 0.0), s);
    let s1 = p.step(LaneState::new(0.37, 0.1), 0.0);
    assert!((s1.d - (0.37 + 0.2 * 0.1f64.sin())).abs() < 1e-15);
    assert_eq!(s1.theta, 0.1);
}

#[test]
fn dynamics_match_the_bicycle_oracle() {
    let mut rng = stream(31, "dynamics", 0);
    for _ in 0..20_000 {
        let p = VehicleParams {
            v: rng.random_range(0.5..4.0),
            lf: rng.random_range(0.05..0.5),
            lr: rng.random_range(0.05..0.5),
            dt: rng.random_range(0.01..0.2),
            max_steer: 0.5,
        };
        let s = LaneState::new(rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5));
        let u = rng.random_range(-0.5..=0.5);
        let (a, b) = (p.step(s, u), step_oracle(&p, s, u));
        assert!((a.d - b.d).abs() <= 1e-12 && (a.theta - b.theta).abs() <= 1e-12);
    }
}

#[test]
fn interval_step_examples() {
    let p = VehicleParams::default();
    let s = LaneState::new(0.3, -0.05);
    let sb = IntervalVec::point(&s.to_vec());
    let point = p.step_interval(&sb, &IntervalVec::point(&[0.2])).unwrap();
    let exact = p.step(s, 0.2);
    assert!((point.lb()[0] - exact.d).abs() < 1e-12 && (point.ub()[0] - exact.d).abs() < 1e-12);
    assert!((point.lb()[1] - exact.theta).abs() < 1e-12 && (point.ub()[1] - exact.theta).abs() < 1e-12);

    let wide = p.step_interval(&sb, &IntervalVec::new(vec![-0.1], vec![0.1]).unwrap()).unwrap();
    for u in [-0.1, 0.0, 0.1] {
        assert!(wide.contains(&p.step(s, u).to_vec()));
    }
}

#[test]
fn interval_step_contains_sampled_successors() {
    let mut rng = stream(31, "step-fuzz", 0);
    let p = VehicleParams::default();
    let mut bad = 0;
    for _ in 0..1000 {
        let (dc, tc) = (rng.random_range(-1.5..1.5), rng.random_range(-0.5..0.5));
        let (dr, tr) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.3));
        let sb = IntervalVec::new(vec![dc - dr, tc - tr], vec![dc + dr, tc + tr]).unwrap();
        let (a, b) = (rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5));
        let ub = IntervalVec::new(vec![f64::min(a, b)], vec![f64::max(a, b)]).unwrap();
        let next = p.step_interval(&sb, &ub).unwrap();
        for _ in 0..100 {
            let s = LaneState::new(
                rng.random_range(sb.lb()[0]..=sb.ub()[0]),
                rng.random_range(sb.lb()[1]..=sb.ub()[1]),
            );
            let u = rng.random_range(ub.lb()[0]..=ub.ub()[0]);
            bad += usize::from(!next.contains(&step_oracle(&p, s, u).to_vec()));
        }
    }
    assert_eq!(bad, 0);
}

/// Kolmogorov-Smirnov distance between a sample and `U(lo, hi)`.
fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - lo) / (hi - lo);
            f64::max((i as f64 + 1.0) / n - f, f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[test]
fn initial_states_are_uniform_on_the_stated_ranges() {
    let mut rng = stream(31, "initial", 0);
    let draws: Vec<LaneState> = (0..10_000).map(|_| sample_initial(&mut rng)).collect();
    assert!(draws.iter().all(|s| s.d.abs() <= 0.8 && s.theta.abs() <= 0.15));
    let ks_d = ks_uniform(draws.iter().map(|s| s.d).collect(), -0.8, 0.8);
    let ks_t = ks_uniform(draws.iter().map(|s| s.theta).collect(), -0.15, 0.15);
    assert!(ks_d < 0.02 && ks_t < 0.02, "{ks_d} {ks_t}");

    let again: Vec<LaneState> = {
        let mut rng = stream(31, "initial", 0);
        (0..100).map(|_| sample_initial(&mut rng)).collect()
    };
    assert_eq!(&draws[..100], again.as_slice());
    let envs: Vec<EnvLatent> = (0..10_000).map(|_| sample_env(&mut rng)).collect();
    assert!(envs.iter().all(EnvLatent::is_valid));
}

#[test]
fn anchor_law_examples() {
    let p = VehicleParams::default();
    assert_eq!(anchor_policy_state(&p, LaneState::new(0.0, 0.0)), 0.0);
    assert!((anchor_policy_state(&p, LaneState::new(-0.5, 0.2)) - 0.282).abs() < 1e-12);
    let wide = VehicleParams { max_steer: 1.0, ..p };
    assert!((anchor_policy_state(&wide, LaneState::new(1.0, 0.0)) + 0.74).abs() < 1e-12);
    assert_eq!(anchor_policy_state(&p, LaneState::new(1.0, 0.0)), -0.5);
}

/// The proportional law in state space, using the oracle plant.
fn anchor_trajectory(p: &VehicleParams, s0: LaneState, steps: usize) -> Vec<LaneState> {
    let mut out = vec![s0];
    let mut s = s0;
    for _ in 0..steps {
        let u = (-0.74 * s.d - 0.44 * s.theta).clamp(-p.max_steer, p.max_steer);
        s = step_oracle(p, s, u);
        out.push(s);
    }
    out
}

#[test]
fn anchor_law_recenters_from_an_offset() {
    let p = VehicleParams::default();
    let traj = anchor_trajectory(&p, LaneState::new(0.4, 0.0), 200);
    assert!(traj.iter().all(|s| s.d.abs() <= 1.0));
    // The law is underdamped: |d| swings through zero, and the peak of each
    // swing is smaller than the one before.
    let mut peaks = Vec::new();
    let mut cur: f64 = 0.0;
    for w in traj.windows(2) {
        cur = cur.max(w[0].d.abs());
        if w[0].d * w[1].d < 0.0 {
            peaks.push(cur);
            cur = 0.0;
        }
    }
    assert!(peaks.len() >= 3 && peaks[0] == 0.4);
    for w in peaks.windows(2) {
        assert!(w[1] < w[0], "{peaks:?}");
    }
    assert!(traj[60..].iter().all(|s| s.d.abs() < 1e-3));
}

#[test]
fn anchor_law_is_safe_over_the_initial_grid() {
    let p = VehicleParams::default();
    let spec = SafetySpec::default();
    for i in 0..50 {
        for j in 0..50 {
            let d = -0.8 + 1.6 * i as f64 / 49.0;
            let theta = -0.15 + 0.3 * j as f64 / 49.0;
            let traj = anchor_trajectory(&p, LaneState::new(d, theta), 200);
            assert!(traj.iter().all(|s| spec.is_safe(*s)), "({d}, {theta})");
        }
    }
}

#[test]
fn rollout_rewards() {
    let p = VehicleParams::default();
    let spec = SafetySpec::default();
    let w = EnvLatent::nominal();
    let r = rollout(&mut |_| 0.0, &p, &spec, LaneState::new(0.0, 0.0), &w, 200).unwrap();
    assert_eq!(r.total_reward, 200.0);
    assert_eq!(r.first_unsafe, None);
    let r = rollout(&mut |_| 0.0, &p, &spec, LaneState::new(1.3, 0.0), &w, 50).unwrap();
    assert_eq!(r.total_reward, 0.0);
    assert_eq!(r.first_unsafe, Some(1));
    assert!(rollout(&mut |_| f64::NAN, &p, &spec, LaneState::new(0.0, 0.0), &w, 5).is_err());
}

#[test]
fn dataset_round_trips_and_records_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.spvd");
    let data = generate_dataset(25, 4, &StateRanges::default());
    write_dataset(&data, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);
    let prefix = generate_dataset(10, 4, &StateRanges::default());
    assert_eq!(prefix.as_slice(), &data[..10]);
    for s in &data {
        assert_eq!(s.image, render_oracle(s.state, &s.env));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn reward_is_bounded(d in -5.0f64..5.0, theta in -1.0f64..1.0, beta in 0.1f64..3.0) {
        let r = reward(LaneState::new(d, theta), beta);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn rollout_total_is_within_zero_and_t(seed in any::<u64>(), steps in 1usize..60, gain in -2.0f64..2.0) {
        let mut rng = stream(seed, "prop-rollout", 0);
        let s0 = sample_initial(&mut rng);
        let w = sample_env(&mut rng);
        let mut policy = |img: &[f64]| gain * (img[3] - img[12]);
        let r = rollout(&mut policy, &VehicleParams::default(), &SafetySpec::default(), s0, &w, steps).unwrap();
        prop_assert!(r.total_reward >= 0.0 && r.total_reward <= steps as f64);
        prop_assert_eq!(r.states.len(), steps + 1);
        prop_assert!(r.actions.iter().all(|u| u.abs() <= 0.5));
    }
}
