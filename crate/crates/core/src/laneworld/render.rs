use super::{EnvLatent, LaneState};

pub const IMAGE_ROWS: usize = 8;
pub const IMAGE_COLS: usize = 16;
pub const IMAGE_DIM: usize = IMAGE_ROWS * IMAGE_COLS;

/// Grayscale camera image in `[-1, 1]`, row-major `IMAGE_ROWS x IMAGE_COLS`.
///
/// Row `r` looks `1.0 + 0.8 r` meters ahead; the lane center appears as a
/// Gaussian ridge whose column follows the projected lateral offset.
pub fn render(s: LaneState, w: &EnvLatent) -> Vec<f64> {
    let mut out = Vec::with_capacity(IMAGE_DIM);
    let sharp = 1.0 / (2.0 * (10.0 * w.lane_width).powi(2));
    let tan_theta = s.theta.tan();
    for r in 0..IMAGE_ROWS {
        let look = 1.0 + 0.8 * r as f64;
        let offset = -s.d - look * tan_theta;
        let center = 7.5 + offset * (24.0 / look);
        for c in 0..IMAGE_COLS {
            let cf = c as f64;
            let ridge = 1.4 * (-(cf - center).powi(2) * sharp).exp();
            let texture = 0.05 * (w.texture_phase + 3.0 * cf + 5.0 * r as f64).sin();
            out.push((-0.6 + w.brightness + ridge + texture).clamp(-1.0, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argmax(row: &[f64]) -> usize {
        row.iter()
            .enumerate()
            .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }

    #[test]
    fn centered_state_peaks_in_the_middle() {
        let img = render(LaneState::new(0.0, 0.0), &EnvLatent::nominal());
        for r in 0..IMAGE_ROWS {
            let c = argmax(&img[r * IMAGE_COLS..(r + 1) * IMAGE_COLS]);
            assert!(c == 7 || c == 8, "row {r} peaks at {c}");
        }
    }

    #[test]
    fn deterministic() {
        let w = EnvLatent {
            brightness: 0.1,
            lane_width: 0.09,
            texture_phase: 2.0,
        };
        let s = LaneState::new(0.3, -0.05);
        assert_eq!(render(s, &w), render(s, &w));
    }

    #[test]
    fn right_offset_moves_lane_left() {
        // Ridge center at 7.5 - 0.2 * 24 = 2.7.
        let img = render(LaneState::new(0.2, 0.0), &EnvLatent::nominal());
        assert_eq!(argmax(&img[..IMAGE_COLS]), 3);
    }

    #[test]
    fn pixels_in_range() {
        let w = EnvLatent {
            brightness: 0.2,
            lane_width: 0.16,
            texture_phase: 6.0,
        };
        assert!(render(LaneState::new(0.0, 0.0), &w)
            .iter()
            .all(|p| (-1.0..=1.0).contains(p)));
    }
}
