//! Camera geometry: depth/disparity conversion, normalization, the exponential
//! depth-resolution adjustment and its fitting, and image warping.

mod maps;
mod view;

pub use maps::{DepthMap, DepthState, DisparityMap, Image, Plane};
pub use view::{reconstruct_left, synthesize_right, Synthesized};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Rectified stereo rig. Disparities are in pixels, depths in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig {
    focal: f64,
    baseline: f64,
    z_min: f64,
    z_max: f64,
}

impl CameraRig {
    pub fn new(focal: f64, baseline: f64, z_min: f64, z_max: f64) -> Result<Self> {
        let ok = focal > 0.0
            && baseline > 0.0
            && z_min > 0.0
            && z_min < z_max
            && [focal, baseline, z_min, z_max]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(Error::config(format!(
                "invalid rig f={focal} B={baseline} z_min={z_min} z_max={z_max}"
            )));
        }
        Ok(CameraRig {
            focal,
            baseline,
            z_min,
            z_max,
        })
    }

    /// Rig with the near clamp at one hundredth of the far range.
    pub fn with_default_near(focal: f64, baseline: f64, z_max: f64) -> Result<Self> {
        Self::new(focal, baseline, z_max / 100.0, z_max)
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    /// `f * B`.
    pub fn fb(&self) -> f64 {
        self.focal * self.baseline
    }

    /// Disparity at the near clamp, `f * B / z_min`.
    pub fn d_max(&self) -> f64 {
        self.fb() / self.z_min
    }

    /// Disparity at the far range.
    pub fn d_min(&self) -> f64 {
        self.fb() / self.z_max
    }

    pub fn clamp_depth(&self, z: f64) -> f64 {
        if z.is_nan() {
            return self.z_max;
        }
        z.clamp(self.z_min, self.z_max)
    }
}

impl Default for CameraRig {
    /// 40 px focal length, 10 cm baseline, 10 m range: disparities up to
    /// 40 px, comfortable for 64–256 px wide images.
    fn default() -> Self {
        CameraRig::with_default_near(40.0, 0.1, 10.0).expect("valid constants")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    DepthToDisparity,
    DisparityToDepth,
}

/// `d = f B / z` after clamping `z` into `[z_min, z_max]`.
pub fn depth_to_disparity(z: f64, rig: &CameraRig) -> f64 {
    rig.fb() / rig.clamp_depth(z)
}

/// `z = f B / d`, with the result clamped into `[z_min, z_max]`.
pub fn disparity_to_depth(d: f64, rig: &CameraRig) -> f64 {
    let d = if d.is_nan() { 0.0 } else { d };
    rig.clamp_depth(rig.fb() / d.max(rig.d_min()))
}

pub fn convert(values: &[f64], rig: &CameraRig, direction: Direction) -> Vec<f64> {
    let f = match direction {
        Direction::DepthToDisparity => depth_to_disparity,
        Direction::DisparityToDepth => disparity_to_depth,
    };
    values.iter().map(|&v| f(v, rig)).collect()
}

/// `1 - z / z_max`: near is high, far is 0.
pub fn normalize_depth(z: f64, rig: &CameraRig) -> f64 {
    1.0 - rig.clamp_depth(z) / rig.z_max
}

pub fn denormalize_depth(zn: f64, rig: &CameraRig) -> f64 {
    (1.0 - zn) * rig.z_max
}

/// Exponent of the depth-resolution adjustment; always at least 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjustmentParams {
    p: f64,
}

impl AdjustmentParams {
    pub const IDENTITY: AdjustmentParams = AdjustmentParams { p: 1.0 };

    pub fn new(p: f64) -> Result<Self> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::config(format!(
                "adjustment exponent must be >= 1, got {p}"
            )));
        }
        Ok(AdjustmentParams { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Smallest normalized value where the adjustment stretches resolution,
    /// `(1/p)^(1/(p-1))`; `None` when `p == 1`.
    pub fn stretch_threshold(&self) -> Option<f64> {
        (self.p > 1.0).then(|| (1.0 / self.p).powf(1.0 / (self.p - 1.0)))
    }
}

/// `z^p` on normalized values.
pub fn adjust<T: Real>(zn: T, params: AdjustmentParams) -> T {
    zn.powf(T::of(params.p))
}

/// `x^(1/p)`, the inverse of [`adjust`] on `[0, 1]`.
pub fn invert_adjust<T: Real>(x: T, params: AdjustmentParams) -> T {
    x.powf(T::of(1.0 / params.p))
}

pub const FIT_P_MIN: f64 = 1.0;
pub const FIT_P_MAX: f64 = 4.0;
pub const FIT_P_STEP: f64 = 0.05;
pub const FIT_DEFAULT_BINS: usize = 32;

/// Picks the exponent in `[1, 4]` (step 0.05) whose adjusted samples have
/// the flattest histogram, measured as the squared deviation of bin counts
/// from the uniform count. Ties resolve to the smallest exponent.
pub fn fit_exponent(samples: &[f64], bins: usize) -> Result<AdjustmentParams> {
    if samples.is_empty() {
        return Err(Error::Data("cannot fit an exponent to zero samples".into()));
    }
    if bins < 8 {
        return Err(Error::config(format!(
            "fit_exponent needs at least 8 bins, got {bins}"
        )));
    }
    if let Some(bad) = samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("sample {bad} outside [0, 1]")));
    }
    let steps = ((FIT_P_MAX - FIT_P_MIN) / FIT_P_STEP).round() as usize;
    let uniform = samples.len() as f64 / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut best = (f64::INFINITY, FIT_P_MIN);
    for k in 0..=steps {
        let p = FIT_P_MIN + FIT_P_STEP * k as f64;
        counts.fill(0);
        for &s in samples {
            counts[histogram_bin(s.powf(p), bins)] += 1;
        }
        let cost: f64 = counts.iter().map(|&c| (c as f64 - uniform).powi(2)).sum();
        if cost < best.0 {
            best = (cost, p);
        }
    }
    AdjustmentParams::new(best.1)
}

/// Bin of `v` in `[0, 1]` split into `bins` equal bins; 1.0 lands in the last.
pub fn histogram_bin(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

/// Linear interpolation result along one image row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowSample<T> {
    pub value: T,
    /// Derivative of `value` with respect to the sample position: the
    /// difference of the two neighbouring pixels.
    pub slope: T,
}

/// Samples `row` at real column `x`, or `None` outside `[0, W-1]`.
pub fn sample_row<T: Real>(row: &[T], x: T) -> Option<RowSample<T>> {
    let w = row.len();
    if w == 0 || !(x >= T::zero() && x <= T::of((w - 1) as f64)) {
        return None;
    }
    if w == 1 {
        return Some(RowSample {
            value: row[0],
            slope: T::zero(),
        });
    }
    let x0 = x.floor().to_usize().unwrap_or(0);
    if x0 >= w - 1 {
        return Some(RowSample {
            value: row[w - 1],
            slope: row[w - 1] - row[w - 2],
        });
    }
    let t = x - T::of(x0 as f64);
    let (a, b) = (row[x0], row[x0 + 1]);
    let value = if t == T::zero() { a } else { a + t * (b - a) };
    Some(RowSample {
        value,
        slope: b - a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disparity_reference_values() {
        let unit = CameraRig::new(1.0, 1.0, 0.01, 100.0).unwrap();
        assert_eq!(depth_to_disparity(1.0, &unit), 1.0);
        let rig = CameraRig::new(500.0, 0.1, 0.1, 10.0).unwrap();
        assert!((depth_to_disparity(2.0, &rig) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn near_depths_clamp_to_max_disparity() {
        let rig = CameraRig::default();
        assert_eq!(depth_to_disparity(rig.z_min() / 3.0, &rig), rig.d_max());
        assert_eq!(disparity_to_depth(0.0, &rig), rig.z_max());
        assert_eq!(disparity_to_depth(1e9, &rig), rig.z_min());
    }

    #[test]
    fn invalid_rigs() {
        assert!(CameraRig::new(0.0, 1.0, 0.1, 1.0).is_err());
        assert!(CameraRig::new(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(CameraRig::new(1.0, -1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn normalization_reference_values() {
        let rig = CameraRig::default();
        assert_eq!(normalize_depth(rig.z_max(), &rig), 0.0);
        assert_eq!(normalize_depth(rig.z_max() / 2.0, &rig), 0.5);
    }

    #[test]
    fn adjustment_reference_values() {
        let p = AdjustmentParams::new(1.5).unwrap();
        assert!((adjust(0.25f64, p) - 0.125).abs() < 1e-15);
        assert!((invert_adjust(0.125f64, p) - 0.25).abs() < 1e-15);
        assert_eq!(
            invert_adjust(1.0f64, AdjustmentParams::new(2.7).unwrap()),
            1.0
        );
        assert_eq!(adjust(0.3f64, AdjustmentParams::IDENTITY), 0.3);
        assert!(matches!(AdjustmentParams::new(0.99), Err(Error::Config(_))));
        assert!(AdjustmentParams::new(f64::NAN).is_err());
    }

    #[test]
    fn fit_on_flat_and_degenerate_samples_is_identity() {
        let n = 3200;
        let flat: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert_eq!(fit_exponent(&flat, 32).unwrap().p(), 1.0);
        assert_eq!(fit_exponent(&[0.42; 100], 32).unwrap().p(), 1.0);
    }

    #[test]
    fn fit_prefers_stretching_for_near_heavy_samples() {
        let n = 2000;
        let near: Vec<f64> = (0..n)
            .map(|i| 0.7 + 0.3 * (i as f64 + 0.5) / n as f64)
            .collect();
        assert!(fit_exponent(&near, 32).unwrap().p() > 1.0);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(matches!(fit_exponent(&[], 32), Err(Error::Data(_))));
        assert!(matches!(fit_exponent(&[0.5], 4), Err(Error::Config(_))));
        assert!(matches!(fit_exponent(&[1.5], 32), Err(Error::Data(_))));
    }

    #[test]
    fn sample_row_cases() {
        let row = [5.0, 10.0, 20.0, 7.0];
        assert_eq!(sample_row(&row, 2.0).unwrap().value, 20.0);
        assert_eq!(sample_row(&row, 3.0).unwrap().value, 7.0);
        assert_eq!(sample_row(&row, 1.5).unwrap().value, 15.0);
        assert_eq!(sample_row(&row, 1.5).unwrap().slope, 10.0);
        assert!(sample_row(&row, -0.1).is_none());
        assert!(sample_row(&row, 3.0001).is_none());
        assert!(sample_row(&row, f64::NAN).is_none());
    }
}
