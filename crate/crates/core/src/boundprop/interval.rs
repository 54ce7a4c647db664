//! Sound interval enclosures for affine maps and the elementary functions the
//! networks and the vehicle dynamics use.
//!
//! Results are rounded outward so that the box computed in floating point
//! still contains the floating-point evaluation of every member point.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use super::BoundError;
use crate::neural::{gemm, Tensor};

/// Elementwise lower/upper bounds on a vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalVec {
    lb: Vec<f64>,
    ub: Vec<f64>,
}

impl IntervalVec {
    pub fn new(lb: Vec<f64>, ub: Vec<f64>) -> Result<Self, BoundError> {
        if lb.len() != ub.len() {
            return Err(BoundError::Shape(format!(
                "{} lower bounds vs {} upper bounds",
                lb.len(),
                ub.len()
            )));
        }
        for (i, (l, u)) in lb.iter().zip(&ub).enumerate() {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(BoundError::Malformed(format!("entry {i}: [{l}, {u}]")));
            }
        }
        Ok(Self { lb, ub })
    }

    pub fn point(x: &[f64]) -> Self {
        Self {
            lb: x.to_vec(),
            ub: x.to_vec(),
        }
    }

    /// `[lo, hi]` in every one of `n` coordinates.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Self {
        Self {
            lb: vec![lo; n],
            ub: vec![hi; n],
        }
    }

    pub fn lb(&self) -> &[f64] {
        &self.lb
    }

    pub fn ub(&self) -> &[f64] {
        &self.ub
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.ub[i] - self.lb[i]
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lb.iter().zip(&self.ub).map(|(l, u)| u - l).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lb.iter().zip(&self.ub).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lb.iter().zip(&self.ub))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    /// `other ⊆ self`.
    pub fn contains_box(&self, other: &IntervalVec) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|i| self.lb[i] <= other.lb[i] && other.ub[i] <= self.ub[i])
    }

    /// Coordinatewise intersection of two enclosures of the same set.
    pub fn intersect(&self, other: &IntervalVec) -> IntervalVec {
        let mut lb = Vec::with_capacity(self.dim());
        let mut ub = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let l = self.lb[i].max(other.lb[i]);
            let u = self.ub[i].min(other.ub[i]);
            // Disjoint only through rounding in one of the enclosures.
            if l <= u {
                lb.push(l);
                ub.push(u);
            } else {
                lb.push(u);
                ub.push(l);
            }
        }
        Self { lb, ub }
    }

    /// Cartesian product `self × other`.
    pub fn concat(&self, other: &IntervalVec) -> IntervalVec {
        let mut lb = self.lb.clone();
        lb.extend_from_slice(&other.lb);
        let mut ub = self.ub.clone();
        ub.extend_from_slice(&other.ub);
        Self { lb, ub }
    }

    /// Widens every coordinate by `eps` on both sides.
    pub fn inflate(&self, eps: f64) -> IntervalVec {
        if eps == 0.0 {
            return self.clone();
        }
        Self {
            lb: self.lb.iter().map(|l| round_down(l - eps)).collect(),
            ub: self.ub.iter().map(|u| round_up(u + eps)).collect(),
        }
    }

    /// Intersection with `[lo, hi]` per coordinate. A coordinate lying entirely
    /// outside the range collapses onto the nearest end.
    pub fn clamp(&self, lo: f64, hi: f64) -> IntervalVec {
        Self {
            lb: self.lb.iter().map(|l| l.clamp(lo, hi)).collect(),
            ub: self.ub.iter().map(|u| u.clamp(lo, hi)).collect(),
        }
    }

    /// Coordinates `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> IntervalVec {
        Self {
            lb: self.lb[start..start + len].to_vec(),
            ub: self.ub[start..start + len].to_vec(),
        }
    }

    pub fn scale(&self, c: f64) -> IntervalVec {
        if c == 1.0 {
            return self.clone();
        }
        let (lo, hi) = if c >= 0.0 { (&self.lb, &self.ub) } else { (&self.ub, &self.lb) };
        Self {
            lb: lo.iter().map(|v| round_down(v * c)).collect(),
            ub: hi.iter().map(|v| round_up(v * c)).collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(lb: Vec<f64>, ub: Vec<f64>) -> Self {
        debug_assert_eq!(lb.len(), ub.len());
        Self { lb, ub }
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.lb, self.ub)
    }
}

/// Relative slack covering a faithfully rounded libm result on each side.
const FN_REL: f64 = 4.0 * f64::EPSILON;
const TINY: f64 = 1e-300;

#[inline]
pub(crate) fn round_down(y: f64) -> f64 {
    y - (y.abs() * FN_REL + TINY)
}

#[inline]
pub(crate) fn round_up(y: f64) -> f64 {
    y + (y.abs() * FN_REL + TINY)
}

/// Outward pad for an affine output of a `k`-term dot product whose
/// terms have total magnitude `mag`.
#[inline]
pub(crate) fn affine_pad(k: usize, mag: f64) -> f64 {
    2.0 * (k as f64 + 4.0) * f64::EPSILON * mag + TINY
}

/// Sound image of a box under `x ↦ W x + b` in center/radius form.
pub fn interval_affine(w: &Tensor, b: &[f64], x: &IntervalVec) -> Result<IntervalVec, BoundError> {
    let lb = Tensor::row(x.lb.clone());
    let ub = Tensor::row(x.ub.clone());
    let (l, u) = affine_rows(w, b, &lb, &ub)?;
    Ok(IntervalVec::from_parts_unchecked(l.into_data(), u.into_data()))
}

/// Center/radius affine bound applied to every row of `lb`/`ub` (`[m, in]`).
pub(crate) fn affine_rows(
    w: &Tensor,
    b: &[f64],
    lb: &Tensor,
    ub: &Tensor,
) -> Result<(Tensor, Tensor), BoundError> {
    let (out, k) = (w.rows(), w.cols());
    if lb.cols() != k || ub.cols() != k || b.len() != out || lb.rows() != ub.rows() {
        return Err(BoundError::Shape(format!(
            "affine map [{out}x{k}] applied to boxes of width {}",
            lb.cols()
        )));
    }
    let m = lb.rows();
    let c: Vec<f64> = lb.data().iter().zip(ub.data()).map(|(l, u)| (l + u) * 0.5).collect();
    let r: Vec<f64> = lb.data().iter().zip(ub.data()).map(|(l, u)| (u - l) * 0.5).collect();
    let abs_c: Vec<f64> = c.iter().map(|v| v.abs()).collect();
    let abs_w: Vec<f64> = w.data().iter().map(|v| v.abs()).collect();
    let mut oc = vec![0.0; m * out];
    gemm(m, k, out, &c, k, 1, w.data(), 1, k, &mut oc, 0.0);
    let mut or = vec![0.0; m * out];
    gemm(m, k, out, &r, k, 1, &abs_w, 1, k, &mut or, 0.0);
    let mut mag = vec![0.0; m * out];
    gemm(m, k, out, &abs_c, k, 1, &abs_w, 1, k, &mut mag, 0.0);
    let mut lo = Vec::with_capacity(m * out);
    let mut hi = Vec::with_capacity(m * out);
    for i in 0..m {
        for j in 0..out {
            let idx = i * out + j;
            let center = oc[idx] + b[j];
            let pad = affine_pad(k, mag[idx] + or[idx] + b[j].abs());
            lo.push(center - or[idx] - pad);
            hi.push(center + or[idx] + pad);
        }
    }
    Ok((
        Tensor::matrix(m, out, lo).expect("affine rows"),
        Tensor::matrix(m, out, hi).expect("affine rows"),
    ))
}

/// Elementary functions with interval extensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryFn {
    Relu,
    Tanh,
    Sin,
    Cos,
    Atan,
    Tan,
}

pub fn interval_unary(f: UnaryFn, x: &IntervalVec) -> Result<IntervalVec, BoundError> {
    let mut lb = Vec::with_capacity(x.dim());
    let mut ub = Vec::with_capacity(x.dim());
    for (&l, &u) in x.lb.iter().zip(&x.ub) {
        let (a, b) = scalar_unary(f, l, u)?;
        lb.push(a);
        ub.push(b);
    }
    Ok(IntervalVec { lb, ub })
}

pub(crate) fn scalar_unary(f: UnaryFn, l: f64, u: f64) -> Result<(f64, f64), BoundError> {
    Ok(match f {
        UnaryFn::Relu => (l.max(0.0), u.max(0.0)),
        UnaryFn::Tanh => (round_down(l.tanh()).max(-1.0), round_up(u.tanh()).min(1.0)),
        UnaryFn::Atan => (round_down(l.atan()), round_up(u.atan())),
        UnaryFn::Tan => {
            if !(l > -FRAC_PI_2 && u < FRAC_PI_2) {
                return Err(BoundError::Domain(format!(
                    "tan over [{l}, {u}] leaves (-pi/2, pi/2)"
                )));
            }
            (round_down(l.tan()), round_up(u.tan()))
        }
        UnaryFn::Sin => periodic_range(l, u, f64::sin, FRAC_PI_2, -FRAC_PI_2),
        UnaryFn::Cos => periodic_range(l, u, f64::cos, 0.0, PI),
    })
}

/// Range of a 2π-periodic function with maxima at `max_at + 2kπ` and minima at
/// `min_at + 2kπ`, monotone between them.
fn periodic_range(l: f64, u: f64, f: fn(f64) -> f64, max_at: f64, min_at: f64) -> (f64, f64) {
    if u - l >= TAU {
        return (-1.0, 1.0);
    }
    let (fl, fu) = (f(l), f(u));
    let mut lo = round_down(fl.min(fu));
    let mut hi = round_up(fl.max(fu));
    if contains_critical(l, u, max_at) {
        hi = 1.0;
    }
    if contains_critical(l, u, min_at) {
        lo = -1.0;
    }
    (lo.max(-1.0), hi.min(1.0))
}

/// Whether `[l, u]` (slightly widened) contains `phase + 2kπ` for some integer k.
fn contains_critical(l: f64, u: f64, phase: f64) -> bool {
    let slack = 1e-9 * (1.0 + l.abs().max(u.abs()));
    let k = ((l - slack - phase) / TAU).ceil();
    phase + k * TAU <= u + slack
}
