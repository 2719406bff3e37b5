use nalgebra::{SMatrix, SVector};

use crate::datamodel::BBox;

pub type State = SVector<f64, 7>;
pub type Cov = SMatrix<f64, 7, 7>;
type Meas = SVector<f64, 4>;

const MIN_AREA: f64 = 1e-6;

/// Constant-velocity state over (cx, cy, area, aspect, vcx, vcy, varea).
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState {
    pub x: State,
    pub p: Cov,
}

fn measurement(b: &BBox) -> Meas {
    let (cx, cy) = b.center();
    Meas::new(cx, cy, b.area().max(MIN_AREA), b.width() / b.height())
}

fn transition() -> Cov {
    let mut f = Cov::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    f
}

fn observation() -> SMatrix<f64, 4, 7> {
    SMatrix::<f64, 4, 7>::identity()
}

pub fn process_noise(scale: f64) -> Cov {
    Cov::from_diagonal(&State::from_column_slice(&[1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 0.0001])) * scale
}

fn measurement_noise(scale: f64) -> SMatrix<f64, 4, 4> {
    SMatrix::<f64, 4, 4>::from_diagonal(&Meas::new(1.0, 1.0, 10.0, 10.0)) * scale
}

impl KalmanState {
    /// Initial state at a detection with zero velocity and wide velocity
    /// uncertainty.
    pub fn from_bbox(b: &BBox) -> Self {
        let z = measurement(b);
        let mut x = State::zeros();
        x.fixed_rows_mut::<4>(0).copy_from(&z);
        let p = Cov::from_diagonal(&State::from_column_slice(&[10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4]));
        KalmanState { x, p }
    }

    pub fn to_bbox(&self) -> BBox {
        let area = self.x[2].max(MIN_AREA);
        let aspect = self.x[3].max(MIN_AREA);
        let w = (area * aspect).sqrt();
        let h = area / w;
        BBox::from_center(self.x[0], self.x[1], w, h)
    }

    pub fn update(&mut self, b: &BBox, noise_scale: f64) {
        let h = observation();
        let z = measurement(b);
        let y = z - h * self.x;
        let s = h * self.p * h.transpose() + measurement_noise(noise_scale);
        let Some(s_inv) = s.try_inverse() else {
            return;
        };
        let k = self.p * h.transpose() * s_inv;
        self.x += k * y;
        let i_kh = Cov::identity() - k * h;
        self.p = i_kh * self.p;
        self.p = (self.p + self.p.transpose()) * 0.5;
    }
}

/// Advances the mean by its velocity and grows the covariance by process noise.
pub fn predict(state: &KalmanState, noise_scale: f64) -> KalmanState {
    let mut x = state.x;
    if x[2] + x[6] <= 0.0 {
        x[6] = 0.0;
    }
    let f = transition();
    let x = f * x;
    let p = f * state.p * f.transpose() + process_noise(noise_scale);
    let p = (p + p.transpose()) * 0.5;
    KalmanState { x, p }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_velocity_keeps_position() {
        let s = KalmanState::from_bbox(&BBox::new(0.0, 0.0, 10.0, 20.0));
        let n = predict(&s, 1.0);
        assert_eq!(n.x.fixed_rows::<4>(0), s.x.fixed_rows::<4>(0));
        assert!(n.p.trace() > s.p.trace());
    }

    #[test]
    fn velocity_advances_center() {
        let mut s = KalmanState::from_bbox(&BBox::new(0.0, 0.0, 10.0, 10.0));
        s.x[4] = 2.0;
        let n = predict(&s, 1.0);
        assert_eq!(n.x[0], s.x[0] + 2.0);
    }

    #[test]
    fn covariance_trace_matches_hand_computation() {
        // With P = I, F P F^T has diagonal (2, 2, 2, 1, 1, 1, 1): each position row
        // picks up its velocity term. Q adds 4 + 0.02 + 0.0001.
        let s = KalmanState { x: State::from_column_slice(&[5.0, 5.0, 100.0, 1.0, 0.0, 0.0, 0.0]), p: Cov::identity() };
        let n = predict(&s, 1.0);
        assert!((n.p.trace() - 14.0201).abs() < 1e-12);
        assert_eq!(n.p, n.p.transpose());
    }

    #[test]
    fn update_pulls_towards_measurement() {
        let mut s = KalmanState::from_bbox(&BBox::new(0.0, 0.0, 10.0, 10.0));
        s = predict(&s, 1.0);
        s.update(&BBox::new(4.0, 0.0, 14.0, 10.0), 1.0);
        assert!(s.x[0] > 5.0 && s.x[0] <= 9.0);
        assert!(s.x[4] > 0.0);
        let b = s.to_bbox();
        assert!(b.is_valid());
    }
}
