//! Kinematic bicycle model reduced to a straight reference path.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{LaneError, LaneState};
use crate::boundprop::{round_down, round_up, scalar_unary, BoundError, IntervalVec, UnaryFn};
use crate::neural::{DTensor, Graph, NeuralError, Tensor};

static STEER_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of out-of-range steering commands clamped by [`VehicleParams::step`]
/// in this process.
pub fn steer_clamp_count() -> u64 {
    STEER_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub v: f64,
    pub lf: f64,
    pub lr: f64,
    pub dt: f64,
    pub max_steer: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            v: 2.0,
            lf: 0.15,
            lr: 0.15,
            dt: 0.1,
            max_steer: 0.5,
        }
    }
}

/// One-step closed-loop plant, scalar and interval forms.
pub trait Dynamics: Sync {
    fn max_steer(&self) -> f64;
    fn step(&self, s: LaneState, u: f64) -> LaneState;
    /// Sound enclosure of `step` over a state box `(d, theta)` and a steering box.
    fn step_interval(&self, s: &IntervalVec, u: &IntervalVec) -> Result<IntervalVec, BoundError>;
}

#[derive(Clone, Copy, Debug)]
struct Iv(f64, f64);

impl Iv {
    fn add(self, o: Iv) -> Iv {
        Iv(round_down(self.0 + o.0), round_up(self.1 + o.1))
    }

    /// Product with a positive constant.
    fn mul_pos(self, c: f64) -> Iv {
        Iv(round_down(self.0 * c), round_up(self.1 * c))
    }

    fn apply(self, f: UnaryFn) -> Result<Iv, BoundError> {
        let (l, u) = scalar_unary(f, self.0, self.1)?;
        Ok(Iv(l, u))
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), LaneError> {
        let ok = [self.v, self.lf, self.lr, self.dt].iter().all(|x| *x > 0.0 && x.is_finite())
            && self.max_steer > 0.0
            && self.max_steer < std::f64::consts::FRAC_PI_2;
        if !ok {
            return Err(LaneError::Config(format!("vehicle parameters out of range: {self:?}")));
        }
        Ok(())
    }

    fn slip_ratio(&self) -> f64 {
        self.lr / (self.lf + self.lr)
    }

    /// Interval step on graph nodes, for training losses.
    ///
    /// `s_lb`/`s_ub` are `[m, 2]` and `u_lb`/`u_ub` are `[m, 1]` with steering
    /// already inside `[-max_steer, max_steer]`. Returns `[m, 2]` bounds.
    pub fn step_graph(
        &self,
        g: &mut Graph,
        s_lb: DTensor,
        s_ub: DTensor,
        u_lb: DTensor,
        u_ub: DTensor,
    ) -> Result<(DTensor, DTensor), NeuralError> {
        let k = self.slip_ratio();
        let slip = |g: &mut Graph, u: DTensor| {
            let t = g.tan(u);
            let t = g.scale(t, k);
            g.atan(t)
        };
        let b_lo = slip(g, u_lb);
        let b_hi = slip(g, u_ub);
        let d_lo = g.cols(s_lb, 0, 1)?;
        let d_hi = g.cols(s_ub, 0, 1)?;
        let th_lo = g.cols(s_lb, 1, 1)?;
        let th_hi = g.cols(s_ub, 1, 1)?;

        // sin is increasing on [-pi/2, pi/2]; beyond that the bound saturates.
        let a_lo = g.add(th_lo, b_lo)?;
        let a_hi = g.add(th_hi, b_hi)?;
        let half_pi = std::f64::consts::FRAC_PI_2;
        let lo_mask: Vec<bool> = g.value(a_lo).data().iter().map(|&a| a < -half_pi).collect();
        let hi_mask: Vec<bool> = g.value(a_hi).data().iter().map(|&a| a > half_pi).collect();
        let sin_lo = g.sin(a_lo);
        let sin_hi = g.sin(a_hi);
        let sin_lo = g.override_where(sin_lo, lo_mask, -1.0)?;
        let sin_hi = g.override_where(sin_hi, hi_mask, 1.0)?;
        let vdt = self.v * self.dt;
        let step_lo = g.scale(sin_lo, vdt);
        let step_hi = g.scale(sin_hi, vdt);
        let nd_lo = g.add(d_lo, step_lo)?;
        let nd_hi = g.add(d_hi, step_hi)?;

        let gain = self.v / self.lr * self.dt;
        let sb_lo = g.sin(b_lo);
        let sb_hi = g.sin(b_hi);
        let turn_lo = g.scale(sb_lo, gain);
        let turn_hi = g.scale(sb_hi, gain);
        let nt_lo = g.add(th_lo, turn_lo)?;
        let nt_hi = g.add(th_hi, turn_hi)?;
        Ok((g.concat_cols(&[nd_lo, nt_lo])?, g.concat_cols(&[nd_hi, nt_hi])?))
    }

    /// Like [`Dynamics::step_interval`] for a batch of plain boxes.
    pub fn step_interval_rows(
        &self,
        s_lb: &Tensor,
        s_ub: &Tensor,
        u_lb: &[f64],
        u_ub: &[f64],
    ) -> Result<(Tensor, Tensor), BoundError> {
        let m = s_lb.rows();
        let mut lo = Vec::with_capacity(2 * m);
        let mut hi = Vec::with_capacity(2 * m);
        for i in 0..m {
            let s = IntervalVec::new(s_lb.row_slice(i).to_vec(), s_ub.row_slice(i).to_vec())?;
            let u = IntervalVec::new(vec![u_lb[i]], vec![u_ub[i]])?;
            let next = self.step_interval(&s, &u)?;
            lo.extend_from_slice(next.lb());
            hi.extend_from_slice(next.ub());
        }
        Ok((
            Tensor::matrix(m, 2, lo).map_err(BoundError::from)?,
            Tensor::matrix(m, 2, hi).map_err(BoundError::from)?,
        ))
    }
}

impl Dynamics for VehicleParams {
    fn max_steer(&self) -> f64 {
        self.max_steer
    }

    /// Steering outside `[-max_steer, max_steer]` is clamped and counted.
    fn step(&self, s: LaneState, u: f64) -> LaneState {
        let u = if u.abs() > self.max_steer {
            STEER_CLAMPS.fetch_add(1, Ordering::Relaxed);
            u.clamp(-self.max_steer, self.max_steer)
        } else {
            u
        };
        let slip = (self.slip_ratio() * u.tan()).atan();
        let vdt = self.v * self.dt;
        LaneState {
            d: s.d + vdt * (s.theta + slip).sin(),
            theta: s.theta + self.v / self.lr * slip.sin() * self.dt,
        }
    }

    fn step_interval(&self, s: &IntervalVec, u: &IntervalVec) -> Result<IntervalVec, BoundError> {
        if s.dim() != 2 || u.dim() != 1 {
            return Err(BoundError::Shape(format!(
                "step needs a 2-d state box and a 1-d steering box, got {} and {}",
                s.dim(),
                u.dim()
            )));
        }
        let d = Iv(s.lb()[0], s.ub()[0]);
        let th = Iv(s.lb()[1], s.ub()[1]);
        let slip = Iv(u.lb()[0], u.ub()[0])
            .apply(UnaryFn::Tan)?
            .mul_pos(self.slip_ratio())
            .apply(UnaryFn::Atan)?;
        let vdt = self.v * self.dt;
        let nd = d.add(th.add(slip).apply(UnaryFn::Sin)?.mul_pos(vdt));
        let nt = th.add(slip.apply(UnaryFn::Sin)?.mul_pos(self.v / self.lr).mul_pos(self.dt));
        IntervalVec::new(vec![nd.0, nt.0], vec![nd.1, nt.1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_line_fixed_point() {
        let p = VehicleParams::default();
        let s = LaneState::new(0.37, 0.0);
        assert_eq!(p.step(s, 0.0), s);
    }

    #[test]
    fn heading_only_moves_d() {
        let p = VehicleParams::default();
        let n = p.step(LaneState::new(0.1, 0.1), 0.0);
        assert!((n.d - (0.1 + 0.2 * 0.1f64.sin())).abs() < 1e-15);
        assert_eq!(n.theta, 0.1);
    }

    #[test]
    fn out_of_range_steering_is_clamped_and_counted() {
        let p = VehicleParams::default();
        let before = steer_clamp_count();
        let s = LaneState::new(0.0, 0.0);
        assert_eq!(p.step(s, 2.0), p.step(s, 0.5));
        assert!(steer_clamp_count() > before);
    }

    #[test]
    fn point_boxes_give_the_point_step() {
        let p = VehicleParams::default();
        let s = LaneState::new(0.2, -0.05);
        let n = p.step(s, 0.3);
        let b = p
            .step_interval(&IntervalVec::point(&[0.2, -0.05]), &IntervalVec::point(&[0.3]))
            .unwrap();
        assert!((b.lb()[0] - n.d).abs() < 1e-14 && (b.ub()[0] - n.d).abs() < 1e-14);
        assert!(b.contains(&[n.d, n.theta]));
    }

    #[test]
    fn steering_box_contains_sampled_successors() {
        let p = VehicleParams::default();
        let b = p
            .step_interval(&IntervalVec::point(&[0.1, 0.05]), &IntervalVec::new(vec![-0.1], vec![0.1]).unwrap())
            .unwrap();
        for u in [-0.1, 0.0, 0.1] {
            let n = p.step(LaneState::new(0.1, 0.05), u);
            assert!(b.contains(&[n.d, n.theta]));
        }
    }

    #[test]
    fn graph_step_matches_interval_step() {
        let p = VehicleParams::default();
        let s = IntervalVec::new(vec![-0.2, -0.1], vec![0.3, 0.2]).unwrap();
        let u = IntervalVec::new(vec![-0.4], vec![0.25]).unwrap();
        let plain = p.step_interval(&s, &u).unwrap();
        let mut g = Graph::new();
        let sl = g.constant(Tensor::row(s.lb().to_vec()));
        let su = g.constant(Tensor::row(s.ub().to_vec()));
        let ul = g.constant(Tensor::row(u.lb().to_vec()));
        let uu = g.constant(Tensor::row(u.ub().to_vec()));
        let (l, h) = p.step_graph(&mut g, sl, su, ul, uu).unwrap();
        for j in 0..2 {
            assert!((g.value(l).data()[j] - plain.lb()[j]).abs() < 1e-12);
            assert!((g.value(h).data()[j] - plain.ub()[j]).abs() < 1e-12);
        }
    }
}
