//! Forward interval propagation.

use super::interval::{affine_pad, affine_rows, round_down, round_up};
use super::{BoundError, IntervalVec};
use crate::neural::{Activation, BoundMlp, DTensor, Graph, MlpNetwork, Tensor};

fn check_dim(net: &MlpNetwork, got: usize) -> Result<(), BoundError> {
    if got != net.input_dim() {
        return Err(BoundError::Shape(format!(
            "box has {got} coordinates, network expects {}",
            net.input_dim()
        )));
    }
    Ok(())
}

fn activate_bounds(act: Activation, lo: &mut [f64], hi: &mut [f64]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            lo.iter_mut().for_each(|v| *v = v.max(0.0));
            hi.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Activation::Tanh => {
            lo.iter_mut().for_each(|v| *v = round_down(v.tanh()).max(-1.0));
            hi.iter_mut().for_each(|v| *v = round_up(v.tanh()).min(1.0));
        }
    }
}

/// Output box of `net` over `input`.
pub fn ibp_forward(net: &MlpNetwork, input: &IntervalVec) -> Result<IntervalVec, BoundError> {
    let (lo, hi) = ibp_forward_batch(
        net,
        &Tensor::row(input.lb().to_vec()),
        &Tensor::row(input.ub().to_vec()),
    )?;
    Ok(IntervalVec::from_parts_unchecked(lo.into_data(), hi.into_data()))
}

/// Interval propagation of `m` boxes at once; `lb`/`ub` are `[m, in]`.
pub fn ibp_forward_batch(
    net: &MlpNetwork,
    lb: &Tensor,
    ub: &Tensor,
) -> Result<(Tensor, Tensor), BoundError> {
    check_dim(net, lb.cols())?;
    if lb.shape() != ub.shape() {
        return Err(BoundError::Shape(format!(
            "lower bounds {:?} vs upper bounds {:?}",
            lb.shape(),
            ub.shape()
        )));
    }
    let mut lo = lb.clone();
    let mut hi = ub.clone();
    for layer in net.layers() {
        let (mut l, mut u) = affine_rows(&layer.weight, layer.bias.data(), &lo, &hi)?;
        activate_bounds(layer.activation, l.data_mut(), u.data_mut());
        lo = l;
        hi = u;
    }
    Ok((lo, hi))
}

/// Pre-activation boxes of every layer, in order.
pub fn ibp_preactivations(
    net: &MlpNetwork,
    input: &IntervalVec,
) -> Result<Vec<IntervalVec>, BoundError> {
    check_dim(net, input.dim())?;
    let mut out = Vec::with_capacity(net.layers().len());
    let mut lo = Tensor::row(input.lb().to_vec());
    let mut hi = Tensor::row(input.ub().to_vec());
    for layer in net.layers() {
        let (l, u) = affine_rows(&layer.weight, layer.bias.data(), &lo, &hi)?;
        out.push(IntervalVec::from_parts_unchecked(
            l.data().to_vec(),
            u.data().to_vec(),
        ));
        let (mut l, mut u) = (l, u);
        activate_bounds(layer.activation, l.data_mut(), u.data_mut());
        lo = l;
        hi = u;
    }
    Ok(out)
}

/// Interval propagation recorded on `g`, so that the bounds are differentiable
/// with respect to the network weights and to the input bounds.
///
/// `lb`/`ub` are `[m, in]` nodes; the returned nodes are `[m, out]`.
/// Floating-point padding is added as constants and carries no gradient.
pub fn ibp_graph(
    g: &mut Graph,
    net: &BoundMlp,
    lb: DTensor,
    ub: DTensor,
) -> Result<(DTensor, DTensor), BoundError> {
    if g.value(lb).shape() != g.value(ub).shape() {
        return Err(BoundError::Shape(format!(
            "lower bounds {:?} vs upper bounds {:?}",
            g.value(lb).shape(),
            g.value(ub).shape()
        )));
    }
    let mut lo = lb;
    let mut hi = ub;
    for layer in &net.layers {
        let k = g.value(layer.weight).cols();
        if g.value(lo).cols() != k {
            return Err(BoundError::Shape(format!(
                "box has {} coordinates, layer expects {k}",
                g.value(lo).cols()
            )));
        }
        let sum = g.add(lo, hi)?;
        let c = g.scale(sum, 0.5);
        let diff = g.sub(hi, lo)?;
        let r = g.scale(diff, 0.5);
        let abs_w = g.abs(layer.weight);
        let zc = g.matmul_nt(c, layer.weight)?;
        let zc = g.add_row(zc, layer.bias)?;
        let zr = g.matmul_nt(r, abs_w)?;

        let pad = {
            let abs_c = g.value(c).map(f64::abs);
            let mut mag = abs_c.matmul_nt(g.value(abs_w))?;
            let bias = g.value(layer.bias).data().to_vec();
            let zr_v = g.value(zr);
            let out = mag.cols();
            for (idx, v) in mag.data_mut().iter_mut().enumerate() {
                *v = affine_pad(k, *v + zr_v.data()[idx] + bias[idx % out].abs());
            }
            g.constant(mag)
        };
        let spread = g.add(zr, pad)?;
        let mut l = g.sub(zc, spread)?;
        let mut u = g.add(zc, spread)?;
        match layer.activation {
            Activation::Identity => {}
            Activation::Relu => {
                l = g.relu(l);
                u = g.relu(u);
            }
            Activation::Tanh => (l, u) = tanh_bounds_graph(g, l, u)?,
        }
        lo = l;
        hi = u;
    }
    Ok((lo, hi))
}

/// Outward-rounded `tanh` of interval endpoints, kept inside `[-1, 1]`.
pub fn tanh_bounds_graph(g: &mut Graph, lo: DTensor, hi: DTensor) -> Result<(DTensor, DTensor), BoundError> {
    let l = g.tanh(lo);
    let u = g.tanh(hi);
    let down = g.value(l).map(|y| round_down(y) - y);
    let up = g.value(u).map(|y| round_up(y) - y);
    let down = g.constant(down);
    let up = g.constant(up);
    let l = g.add(l, down)?;
    let u = g.add(u, up)?;
    Ok((g.max_const(l, -1.0), g.min_const(u, 1.0)))
}
