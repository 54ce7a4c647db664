//! Oracles and generators shared by the integration tests. Everything here
//! is written from the formulas directly, without calling the code under
//! test for the quantity it checks.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spvt::boundprop::{BoundMethod, IntervalVec};
use spvt::laneworld::{sample_initial, EnvLatent, LaneState, SafetySpec, VehicleParams, IMAGE_COLS, IMAGE_DIM, IMAGE_ROWS};
use spvt::neural::{Activation, Graph, Layer, MlpNetwork, Tensor};
use spvt::train::{combined_loss, safety_loss_value, Controller, LossWeights, SpvtContext};
use spvt::verify::{reach_tubes, sigma_bounds, ClosedLoop};

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Identity => x,
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
    }
}

/// Layer-by-layer loops over the raw weights.
pub fn forward_oracle(net: &MlpNetwork, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for l in net.layers() {
        let (out, inp) = (l.weight.shape()[0], l.weight.shape()[1]);
        let w = l.weight.data();
        let b = l.bias.data();
        let mut next = vec![0.0; out];
        for i in 0..out {
            let mut s = b[i];
            for j in 0..inp {
                s += w[i * inp + j] * cur[j];
            }
            next[i] = act(l.activation, s);
        }
        cur = next;
    }
    cur
}

/// Dense network with weights uniform in `±scale / sqrt(fan_in)`.
pub fn random_net(rng: &mut ChaCha8Rng, dims: &[usize], hidden: Activation, output: Activation, scale: f64) -> MlpNetwork {
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fin, fout) = (w[0], w[1]);
            let a = if i + 2 == dims.len() { output } else { hidden };
            let bound = scale / (fin as f64).sqrt();
            let weight = (0..fin * fout).map(|_| rng.random_range(-bound..=bound)).collect();
            let bias = (0..fout).map(|_| rng.random_range(-0.5..=0.5)).collect();
            Layer::new(Tensor::matrix(fout, fin, weight).unwrap(), bias, a).unwrap()
        })
        .collect();
    MlpNetwork::new(layers).unwrap()
}

/// 2 to 4 layers, widths up to `max_width`.
pub fn random_dims(rng: &mut ChaCha8Rng, input: usize, output: usize, max_width: usize) -> Vec<usize> {
    let hidden = rng.random_range(1..=3);
    let mut dims = vec![input];
    dims.extend((0..hidden).map(|_| rng.random_range(2..=max_width)));
    dims.push(output);
    dims
}

pub fn random_box(rng: &mut ChaCha8Rng, n: usize, center: f64, max_radius: f64) -> IntervalVec {
    let (mut lb, mut ub) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let c = rng.random_range(-center..=center);
        let r = rng.random_range(0.0..=max_radius);
        lb.push(c - r);
        ub.push(c + r);
    }
    IntervalVec::new(lb, ub).unwrap()
}

/// A point of the box; one draw in eight is a corner.
pub fn sample_in(rng: &mut ChaCha8Rng, b: &IntervalVec) -> Vec<f64> {
    let corner = rng.random_range(0..8) == 0;
    b.lb()
        .iter()
        .zip(b.ub())
        .map(|(&l, &u)| {
            if corner {
                if rng.random_bool(0.5) { l } else { u }
            } else {
                l + (u - l) * rng.random::<f64>()
            }
        })
        .collect()
}

/// Straight-path kinematic bicycle, written out from the equations.
pub fn step_oracle(p: &VehicleParams, s: LaneState, u: f64) -> LaneState {
    let u = u.clamp(-p.max_steer, p.max_steer);
    let slip = (p.lr / (p.lf + p.lr) * u.tan()).atan();
    LaneState {
        d: s.d + p.v * p.dt * (s.theta + slip).sin(),
        theta: s.theta + p.v / p.lr * slip.sin() * p.dt,
    }
}

/// The procedural camera, written out from the pixel formula.
pub fn render_oracle(s: LaneState, w: &EnvLatent) -> Vec<f64> {
    let sw = 1.0 / (2.0 * (10.0 * w.lane_width).powi(2));
    let mut img = Vec::with_capacity(IMAGE_ROWS * IMAGE_COLS);
    for r in 0..IMAGE_ROWS {
        let look = 1.0 + 0.8 * r as f64;
        let offset = -s.d - look * s.theta.tan();
        let center = 7.5 + offset * (24.0 / look);
        for c in 0..IMAGE_COLS {
            let cf = c as f64;
            let v = -0.6
                + w.brightness
                + 1.4 * (-(cf - center).powi(2) * sw).exp()
                + 0.05 * (w.texture_phase + 3.0 * cf + 5.0 * r as f64).sin();
            img.push(v.clamp(-1.0, 1.0));
        }
    }
    img
}

/// `clamp(v/n - sqrt(ln(2/delta) / 2n), 0, 1)`.
pub fn hoeffding_oracle(v: usize, n: usize, delta: f64) -> f64 {
    let eps = ((2.0f64 / delta).ln() / (2.0 * n as f64)).sqrt();
    (v as f64 / n as f64 - eps).clamp(0.0, 1.0)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Visits every weight and bias of `net` as `(layer, is_bias, index)`.
pub fn param_slots(net: &MlpNetwork) -> Vec<(usize, bool, usize)> {
    let mut out = Vec::new();
    for (li, l) in net.layers().iter().enumerate() {
        out.extend((0..l.weight.len()).map(|i| (li, false, i)));
        out.extend((0..l.bias.len()).map(|i| (li, true, i)));
    }
    out
}

pub fn with_param(net: &MlpNetwork, slot: (usize, bool, usize), delta: f64) -> MlpNetwork {
    let mut n = net.clone();
    let l = &mut n.layers_mut()[slot.0];
    let t = if slot.1 { &mut l.bias } else { &mut l.weight };
    t.data_mut()[slot.2] += delta;
    n
}

/// Central difference `(f(p + h) - f(p - h)) / 2h` in one parameter.
pub fn central_difference(net: &MlpNetwork, slot: (usize, bool, usize), h: f64, f: impl Fn(&MlpNetwork) -> f64) -> f64 {
    (f(&with_param(net, slot, h)) - f(&with_param(net, slot, -h))) / (2.0 * h)
}

/// Central difference for piecewise-smooth `f`, with `f0 = f(net)`. When
/// the one-sided slopes over `[p - h, p + h]` disagree, a kink lies inside
/// the stencil, so `h` shrinks tenfold (down to 1e-8) until they match.
pub fn kink_aware_difference(
    net: &MlpNetwork,
    slot: (usize, bool, usize),
    f0: f64,
    f: impl Fn(&MlpNetwork) -> f64,
) -> f64 {
    let mut h = 1e-6;
    loop {
        let (up, down) = (f(&with_param(net, slot, h)), f(&with_param(net, slot, -h)));
        let (right, left) = ((up - f0) / h, (f0 - down) / h);
        if rel_err(right, left, 1e-6) <= 1e-3 || h <= 1e-8 {
            return (up - down) / (2.0 * h);
        }
        h /= 10.0;
    }
}

/// Agreement between one analytic gradient and its finite differences.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdStats {
    /// Largest per-parameter `rel_err`.
    pub worst: f64,
    /// `|a - f|_2 / max(|a|_2, |f|_2, 1e-8)` over the whole gradient.
    pub norm_rel: f64,
    pub tight: usize,
    pub total: usize,
}

fn fd_stats(analytic: &[f64], fd: &[f64], floor: f64, tight_at: f64) -> FdStats {
    let mut st = FdStats::default();
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for (&a, &f) in analytic.iter().zip(fd) {
        let e = rel_err(a, f, floor);
        st.worst = st.worst.max(e);
        st.tight += usize::from(e <= tight_at);
        st.total += 1;
        diff += (a - f).powi(2);
        na += a * a;
        nf += f * f;
    }
    st.norm_rel = diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-8);
    st
}

/// Loss families with smooth heads over a small batch.
pub fn mlp_loss_value(net: &MlpNetwork, x: &Tensor, target: &[f64], kind: usize) -> f64 {
    let out = net.forward_batch(x).unwrap();
    let v = out.data();
    let n = v.len() as f64;
    match kind {
        0 => v.iter().zip(target).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / n,
        1 => v.iter().zip(target).map(|(a, t)| t * a.tanh()).sum::<f64>(),
        _ => v.iter().zip(target).map(|(a, t)| (a * t).sin()).sum::<f64>() / n,
    }
}

pub fn mlp_loss_graph(net: &MlpNetwork, x: &Tensor, target: &[f64], kind: usize) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let b = net.bind(&mut g, true);
    let xi = g.constant(x.clone());
    let out = b.forward(&mut g, xi).unwrap();
    let t = g.constant(Tensor::new(g.value(out).shape().to_vec(), target.to_vec()).unwrap());
    let loss = match kind {
        0 => {
            let d = g.sub(out, t).unwrap();
            let sq = g.square(d);
            g.mean(sq)
        }
        1 => {
            let th = g.tanh(out);
            let p = g.mul(th, t).unwrap();
            g.sum(p)
        }
        _ => {
            let p = g.mul(out, t).unwrap();
            let s = g.sin(p);
            g.mean(s)
        }
    };
    g.backward(loss).unwrap();
    (g.value(loss).data()[0], b.grads(&g).flat())
}

/// One random MLP loss: reverse mode against central differences.
pub fn mlp_fd_case(rng: &mut ChaCha8Rng, case: usize) -> FdStats {
    let (input, output) = (rng.random_range(1..=6), rng.random_range(1..=3));
    let dims = random_dims(rng, input, output, 64);
    let hidden = if case % 2 == 0 { Activation::Tanh } else { Activation::Relu };
    let net = random_net(rng, &dims, hidden, Activation::Identity, 1.2);
    let batch = 3;
    let x = Tensor::matrix(batch, dims[0], (0..batch * dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let out_dim = *dims.last().unwrap();
    let target: Vec<f64> = (0..batch * out_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kind = case % 3;
    let (value, grads) = mlp_loss_graph(&net, &x, &target, kind);
    assert!((value - mlp_loss_value(&net, &x, &target, kind)).abs() <= 1e-12);
    let fd: Vec<f64> = param_slots(&net)
        .into_iter()
        .map(|slot| central_difference(&net, slot, 1e-5, |n| mlp_loss_value(n, &x, &target, kind)))
        .collect();
    fd_stats(&grads, &fd, 1e-6, 1e-4)
}

/// Mean tube loss through the plain (non-graph) verifier.
pub fn plain_safety(
    ctl: &Controller,
    g: &MlpNetwork,
    p: &VehicleParams,
    states: &[LaneState],
    k: usize,
    eps: f64,
) -> f64 {
    let lp = ClosedLoop {
        generator: g,
        controller: ctl,
        dynamics: p,
        epsilon: eps,
        method: BoundMethod::Ibp,
    };
    let tubes = reach_tubes(states, k, &lp).unwrap();
    tubes
        .iter()
        .map(|t| {
            let (lo, hi) = sigma_bounds(t);
            safety_loss_value(lo, hi, k)
        })
        .sum::<f64>()
        / states.len() as f64
}

pub fn smooth_generator(rng: &mut ChaCha8Rng, m: usize) -> MlpNetwork {
    random_net(rng, &[2 + m, 24, IMAGE_DIM], Activation::Tanh, Activation::Tanh, 0.3)
}

pub fn smooth_controller(rng: &mut ChaCha8Rng) -> Controller {
    Controller::new(random_net(rng, &[IMAGE_DIM, 16, 8, 1], Activation::Tanh, Activation::Tanh, 0.8), 0.5).unwrap()
}

/// One safety-loss case: the graph's tube loss against central differences
/// of the plain verifier's value. Also checks the two values agree.
pub fn safety_fd_case(rng: &mut ChaCha8Rng, case: usize) -> FdStats {
    let p = VehicleParams::default();
    let spec = SafetySpec::default();
    let weights = LossWeights {
        lambda1: 0.0,
        lambda2: 1.0,
        saturation: 0.0,
        margin: 2.0,
    };
    let g = smooth_generator(rng, 3);
    let ctl = smooth_controller(rng);
    let states: Vec<LaneState> = (0..2).map(|_| sample_initial(rng)).collect();
    let k = 2 + case % 5;
    let eps = 0.01;
    let ctx = SpvtContext {
        generator: &g,
        anchor: &ctl,
        dynamics: &p,
        spec: &spec,
    };
    let empty = Tensor::zeros(&[0, IMAGE_DIM]);
    let (grads, parts) = combined_loss(&ctl, &ctx, weights, eps, &empty, &states, k).unwrap();
    let value = plain_safety(&ctl, &g, &p, &states, k, eps);
    assert!((parts.safety - value).abs() < 1e-9, "{} vs {value}", parts.safety);
    let fd: Vec<f64> = param_slots(&ctl.net)
        .into_iter()
        .map(|slot| {
            kink_aware_difference(&ctl.net, slot, value, |net| {
                let c = Controller::new(net.clone(), ctl.max_steer).unwrap();
                plain_safety(&c, &g, &p, &states, k, eps)
            })
        })
        .collect();
    fd_stats(&grads.flat(), &fd, 1e-6, 1e-3)
}
