//! Constant-velocity Kalman filter over `(cx, cy, aspect, height)` and their
//! velocities. Noise scales with box height.

use nalgebra::{SMatrix, SVector};

use crate::geometry::BBox;

pub type Vector8 = SVector<f64, 8>;
pub type Matrix8 = SMatrix<f64, 8, 8>;
type Vector4 = SVector<f64, 4>;
type Matrix4 = SMatrix<f64, 4, 4>;
type Matrix48 = SMatrix<f64, 4, 8>;

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: Vector8,
    pub covariance: Matrix8,
}

impl KalmanState {
    pub fn bbox(&self) -> BBox {
        let h = self.mean[3].max(0.0);
        let w = (self.mean[2] * h).max(0.0);
        BBox::new(self.mean[0], self.mean[1], w, h)
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.mean[4], self.mean[5])
    }
}

#[derive(Debug, Clone)]
pub struct KalmanFilter {
    std_position: f64,
    std_velocity: f64,
    update: Matrix48,
}

impl Default for KalmanFilter {
    fn default() -> Self {
        Self {
            std_position: 1.0 / 20.0,
            std_velocity: 1.0 / 160.0,
            update: Matrix48::from_fn(|i, j| if i == j { 1.0 } else { 0.0 }),
        }
    }
}

fn measurement(b: &BBox) -> Vector4 {
    let aspect = if b.h > 0.0 { b.w / b.h } else { 0.0 };
    Vector4::new(b.cx, b.cy, aspect, b.h)
}

impl KalmanFilter {
    /// State transition over `dt` frames.
    pub fn transition(dt: f64) -> Matrix8 {
        let mut f = Matrix8::identity();
        for i in 0..4 {
            f[(i, i + 4)] = dt;
        }
        f
    }

    pub fn initiate(&self, b: &BBox) -> KalmanState {
        let z = measurement(b);
        let mut mean = Vector8::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&z);
        let h = b.h;
        let (p, v) = (self.std_position, self.std_velocity);
        let std = [2.0 * p * h, 2.0 * p * h, 1e-2, 2.0 * p * h, 10.0 * v * h, 10.0 * v * h, 1e-5, 10.0 * v * h];
        KalmanState {
            mean,
            covariance: Matrix8::from_diagonal(&Vector8::from_fn(|i, _| std[i] * std[i])),
        }
    }

    pub fn predict(&self, s: &mut KalmanState) {
        self.predict_dt(s, 1.0);
    }

    pub fn predict_dt(&self, s: &mut KalmanState, dt: f64) {
        let h = s.mean[3];
        let (p, v) = (self.std_position * h, self.std_velocity * h);
        let std = [p, p, 1e-2, p, v, v, 1e-5, v];
        let q = Matrix8::from_diagonal(&Vector8::from_fn(|i, _| std[i] * std[i] * dt));
        let f = Self::transition(dt);
        s.mean = f * s.mean;
        s.covariance = f * s.covariance * f.transpose() + q;
    }

    pub fn update(&self, s: &mut KalmanState, b: &BBox) {
        let h = s.mean[3];
        let p = self.std_position * h;
        let r = Matrix4::from_diagonal(&Vector4::new(p * p, p * p, 1e-2 * 1e-2, p * p));
        let hm = &self.update;
        let projected = hm * s.mean;
        let cov = hm * s.covariance * hm.transpose() + r;
        let Some(inv) = cov.try_inverse() else {
            // Singular innovation: fall back to the measurement itself.
            *s = self.initiate(b);
            return;
        };
        let gain = s.covariance * hm.transpose() * inv;
        s.mean += gain * (measurement(b) - projected);
        s.covariance = (Matrix8::identity() - gain * hm) * s.covariance;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_velocity_keeps_box() {
        let kf = KalmanFilter::default();
        let b = BBox::new(100.0, 50.0, 20.0, 40.0);
        let mut s = kf.initiate(&b);
        kf.predict(&mut s);
        assert_abs_diff_eq!(s.bbox().cx, b.cx, epsilon = 1e-12);
        assert_abs_diff_eq!(s.bbox().w, b.w, epsilon = 1e-12);
    }

    #[test]
    fn velocity_shifts_center() {
        let kf = KalmanFilter::default();
        let mut s = kf.initiate(&BBox::new(100.0, 50.0, 20.0, 40.0));
        s.mean[4] = 5.0;
        kf.predict(&mut s);
        assert_abs_diff_eq!(s.bbox().cx, 105.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.bbox().cy, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn two_unit_steps_equal_one_double_step() {
        let f1 = KalmanFilter::transition(1.0);
        assert_abs_diff_eq!(f1 * f1, KalmanFilter::transition(2.0), epsilon = 1e-15);
        let kf = KalmanFilter::default();
        let mut a = kf.initiate(&BBox::new(10.0, 20.0, 5.0, 10.0));
        a.mean[4] = 1.5;
        a.mean[5] = -0.5;
        let mut b = a.clone();
        kf.predict(&mut a);
        kf.predict(&mut a);
        kf.predict_dt(&mut b, 2.0);
        assert_abs_diff_eq!(a.mean, b.mean, epsilon = 1e-12);
    }

    #[test]
    fn updates_learn_velocity() {
        let kf = KalmanFilter::default();
        let mut s = kf.initiate(&BBox::new(100.0, 100.0, 20.0, 40.0));
        for k in 1..=10 {
            kf.predict(&mut s);
            kf.update(&mut s, &BBox::new(100.0 + 4.0 * k as f64, 100.0, 20.0, 40.0));
        }
        assert!((s.velocity().0 - 4.0).abs() < 0.5);
    }
}
