//! Backward linear-relaxation bounds.
//!
//! Every nonlinear neuron with pre-activation bounds `[l, u]` (taken from
//! interval propagation) is enclosed between two lines. The output is then
//! expressed as an affine function of the input by substituting those lines
//! layer by layer from the output backwards, and concretized over the box.

use serde_json::json;

use super::ibp::ibp_preactivations;
use super::{BoundError, IntervalVec};
use crate::neural::{gemm, Activation, MlpNetwork, Tensor};

/// Relative slack on concretized bounds; covers rounding in the backward
/// products and in the relaxation lines.
const CONCRETIZE_REL: f64 = 1e-11;
const TANGENT_SEARCH_ITERS: usize = 20;

/// `x ↦ slope · x + offset` with `slope: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBound {
    pub slope: Tensor,
    pub offset: Vec<f64>,
}

impl LinearBound {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (0..self.slope.rows())
            .map(|i| {
                let row = self.slope.row_slice(i);
                self.offset[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

/// Affine lower and upper bounds on a network valid over `input_box`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRelaxation {
    pub lower: LinearBound,
    pub upper: LinearBound,
    pub input_box: IntervalVec,
}

impl LinearRelaxation {
    /// Pretty-printed JSON for inspection.
    pub fn debug_dump(&self) -> String {
        let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect::<Vec<_>>();
        serde_json::to_string_pretty(&json!({
            "input_box": self.input_box,
            "lower": { "slope": rows(&self.lower.slope), "offset": self.lower.offset },
            "upper": { "slope": rows(&self.upper.slope), "offset": self.upper.offset },
        }))
        .expect("relaxation is always serializable")
    }
}

/// A line `slope · z + intercept`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Line {
    slope: f64,
    intercept: f64,
}

impl Line {
    fn through(x0: f64, y0: f64, x1: f64, y1: f64) -> Line {
        let slope = (y1 - y0) / (x1 - x0);
        Line {
            slope,
            intercept: y0 - slope * x0,
        }
    }

    fn tangent_tanh(d: f64) -> Line {
        let y = d.tanh();
        let slope = 1.0 - y * y;
        Line {
            slope,
            intercept: y - slope * d,
        }
    }
}

fn relu_lines(l: f64, u: f64) -> (Line, Line) {
    let zero = Line {
        slope: 0.0,
        intercept: 0.0,
    };
    let ident = Line {
        slope: 1.0,
        intercept: 0.0,
    };
    if u <= 0.0 {
        (zero, zero)
    } else if l >= 0.0 {
        (ident, ident)
    } else {
        let upper = Line::through(l, 0.0, u, u);
        let lower = if l.abs() >= u.abs() { zero } else { ident };
        (lower, upper)
    }
}

/// Upper line for tanh on `[l, u]` with `l < 0 < u`.
fn tanh_mixed_upper(l: f64, u: f64) -> Line {
    let tl = l.tanh();
    // Tangent at d, evaluated at l, minus tanh(l): negative at d = 0, rising in d.
    let gap = |d: f64| {
        let t = Line::tangent_tanh(d);
        t.slope * l + t.intercept - tl
    };
    if gap(u) < 0.0 {
        return Line::through(l, tl, u, u.tanh());
    }
    let (mut lo, mut hi) = (0.0, u);
    for _ in 0..TANGENT_SEARCH_ITERS {
        let mid = 0.5 * (lo + hi);
        if gap(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Line::tangent_tanh(hi)
}

/// Returns `(lower, upper)` lines enclosing tanh on `[l, u]`.
fn tanh_lines(l: f64, u: f64) -> (Line, Line) {
    let width = u - l;
    if width <= 1e-12 * (1.0 + l.abs()) {
        let t = Line::tangent_tanh(0.5 * (l + u));
        return (t, t);
    }
    let mid = 0.5 * (l + u);
    if l >= 0.0 {
        // Concave: the chord is below, any tangent is above.
        (Line::through(l, l.tanh(), u, u.tanh()), Line::tangent_tanh(mid))
    } else if u <= 0.0 {
        (Line::tangent_tanh(mid), Line::through(l, l.tanh(), u, u.tanh()))
    } else {
        let upper = tanh_mixed_upper(l, u);
        // tanh is odd: the upper line on [-u, -l], reflected through the origin.
        let m = tanh_mixed_upper(-u, -l);
        let lower = Line {
            slope: m.slope,
            intercept: -m.intercept,
        };
        (lower, upper)
    }
}

fn activation_lines(act: Activation, l: f64, u: f64) -> Option<(Line, Line)> {
    match act {
        Activation::Identity => None,
        Activation::Relu => Some(relu_lines(l, u)),
        Activation::Tanh => Some(tanh_lines(l, u)),
    }
}

/// Running backward bound `lambda · a + constant`, `lambda: [rows, width]`.
struct Backward {
    lambda: Vec<f64>,
    constant: Vec<f64>,
    rows: usize,
    width: usize,
}

impl Backward {
    fn identity(n: usize) -> Self {
        let mut lambda = vec![0.0; n * n];
        for i in 0..n {
            lambda[i * n + i] = 1.0;
        }
        Self {
            lambda,
            constant: vec![0.0; n],
            rows: n,
            width: n,
        }
    }

    /// Substitutes `a = act(z)` by its relaxation lines; `upper` selects which
    /// line a positive coefficient must use.
    fn relax(&mut self, lines: &[(Line, Line)], upper: bool) {
        for i in 0..self.rows {
            let row = &mut self.lambda[i * self.width..(i + 1) * self.width];
            for (coef, (lo, hi)) in row.iter_mut().zip(lines) {
                let line = if (*coef >= 0.0) == upper { hi } else { lo };
                self.constant[i] += *coef * line.intercept;
                *coef *= line.slope;
            }
        }
    }

    /// Substitutes `a = W x + b`.
    fn affine(&mut self, w: &Tensor, b: &[f64]) {
        let (out, inp) = (w.rows(), w.cols());
        debug_assert_eq!(out, self.width);
        for i in 0..self.rows {
            let row = &self.lambda[i * out..(i + 1) * out];
            self.constant[i] += row.iter().zip(b).map(|(a, c)| a * c).sum::<f64>();
        }
        let mut next = vec![0.0; self.rows * inp];
        gemm(self.rows, out, inp, &self.lambda, out, 1, w.data(), inp, 1, &mut next, 0.0);
        self.lambda = next;
        self.width = inp;
    }

    fn into_bound(self) -> LinearBound {
        LinearBound {
            slope: Tensor::matrix(self.rows, self.width, self.lambda).expect("backward shape"),
            offset: self.constant,
        }
    }
}

/// Extreme value of `slope · x + offset` over the box: the maximum when
/// `upper`, else the minimum.
fn concretize(bound: &LinearBound, input: &IntervalVec, upper: bool) -> Vec<f64> {
    let c = input.center();
    let r: Vec<f64> = input.widths().iter().map(|w| 0.5 * w).collect();
    (0..bound.slope.rows())
        .map(|i| {
            let row = bound.slope.row_slice(i);
            let mut center = bound.offset[i];
            let mut spread = 0.0;
            let mut mag = bound.offset[i].abs();
            for ((a, ci), ri) in row.iter().zip(&c).zip(&r) {
                center += a * ci;
                spread += a.abs() * ri;
                mag += (a * ci).abs();
            }
            let pad = CONCRETIZE_REL * (1.0 + mag + spread);
            if upper {
                center + spread + pad
            } else {
                center - spread - pad
            }
        })
        .collect()
}

/// Linear bounds on `net` over `input` and the box they concretize to,
/// clipped to the range of the output activation.
pub fn crown_backward(
    net: &MlpNetwork,
    input: &IntervalVec,
) -> Result<(LinearRelaxation, IntervalVec), BoundError> {
    let pre = ibp_preactivations(net, input)?;
    let relaxations: Vec<Option<Vec<(Line, Line)>>> = net
        .layers()
        .iter()
        .zip(&pre)
        .map(|(layer, b)| {
            let per: Option<Vec<_>> = (0..b.dim())
                .map(|j| activation_lines(layer.activation, b.lb()[j], b.ub()[j]))
                .collect();
            per
        })
        .collect();

    let out = net.output_dim();
    let mut lower = Backward::identity(out);
    let mut upper = Backward::identity(out);
    for (layer, lines) in net.layers().iter().zip(&relaxations).rev() {
        if let Some(lines) = lines {
            lower.relax(lines, false);
            upper.relax(lines, true);
        }
        lower.affine(&layer.weight, layer.bias.data());
        upper.affine(&layer.weight, layer.bias.data());
    }
    let lower = lower.into_bound();
    let upper = upper.into_bound();
    let lo = concretize(&lower, input, false);
    let hi = concretize(&upper, input, true);
    let (floor, ceil) = match net.layers().last().map(|l| l.activation) {
        Some(Activation::Tanh) => (-1.0, 1.0),
        Some(Activation::Relu) => (0.0, f64::INFINITY),
        _ => (f64::NEG_INFINITY, f64::INFINITY),
    };
    let (lo, hi): (Vec<f64>, Vec<f64>) = lo
        .into_iter()
        .zip(hi)
        .map(|(l, h)| {
            let (l, h) = if l <= h { (l, h) } else { (h, l) };
            (l.clamp(floor, ceil), h.clamp(floor, ceil))
        })
        .unzip();
    let relax = LinearRelaxation {
        lower,
        upper,
        input_box: input.clone(),
    };
    Ok((relax, IntervalVec::new(lo, hi)?))
}
