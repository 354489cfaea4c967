use super::{
    adjust, denormalize_depth, depth_to_disparity, disparity_to_depth, invert_adjust,
    normalize_depth, AdjustmentParams, CameraRig,
};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Single-channel `(1, 1, H, W)` map.
pub type Plane = Tensor<f64>;

/// `(1, C, H, W)` image with intensities in `[0, 1]`.
pub type Image = Tensor<f64>;

/// Which quantity a [`DepthMap`] currently holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthState {
    /// Meters, within the rig's `[z_min, z_max]`.
    Raw,
    /// `1 - z / z_max`.
    Normalized,
    /// Normalized value raised to the adjustment exponent.
    Adjusted,
    /// Network output in the adjusted space.
    Predicted,
    /// Prediction mapped back to the normalized space.
    Recovered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    values: Plane,
    state: DepthState,
}

fn check_plane(values: &Plane) -> Result<()> {
    let s = values.shape();
    if s.n() != 1 || s.c() != 1 {
        return Err(Error::shape(format!("map must be (1,1,H,W), got {s:?}")));
    }
    Ok(())
}

impl DepthMap {
    /// Raw depths in meters, clamped into the rig range.
    pub fn raw(values: Plane, rig: &CameraRig) -> Result<Self> {
        check_plane(&values)?;
        Ok(DepthMap {
            values: values.map(|z| rig.clamp_depth(z)),
            state: DepthState::Raw,
        })
    }

    /// Network output (values in `[0, 1]`).
    pub fn predicted(values: Plane) -> Result<Self> {
        check_plane(&values)?;
        Ok(DepthMap {
            values,
            state: DepthState::Predicted,
        })
    }

    pub fn from_parts(values: Plane, state: DepthState) -> Result<Self> {
        check_plane(&values)?;
        Ok(DepthMap { values, state })
    }

    pub fn values(&self) -> &Plane {
        &self.values
    }

    pub fn state(&self) -> DepthState {
        self.state
    }

    fn expect(&self, allowed: &[DepthState], op: &str) -> Result<()> {
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{op} on a {:?} depth map",
                self.state
            )))
        }
    }

    fn with(&self, state: DepthState, f: impl Fn(f64) -> f64) -> DepthMap {
        DepthMap {
            values: self.values.map(f),
            state,
        }
    }

    pub fn normalize(&self, rig: &CameraRig) -> Result<DepthMap> {
        self.expect(&[DepthState::Raw], "normalize")?;
        Ok(self.with(DepthState::Normalized, |z| normalize_depth(z, rig)))
    }

    /// Back to meters from a normalized or recovered map.
    pub fn denormalize(&self, rig: &CameraRig) -> Result<DepthMap> {
        self.expect(
            &[DepthState::Normalized, DepthState::Recovered],
            "denormalize",
        )?;
        Ok(self.with(DepthState::Raw, |zn| {
            rig.clamp_depth(denormalize_depth(zn, rig))
        }))
    }

    pub fn adjust(&self, params: AdjustmentParams) -> Result<DepthMap> {
        self.expect(&[DepthState::Normalized], "adjust")?;
        Ok(self.with(DepthState::Adjusted, |v| adjust(v, params)))
    }

    pub fn invert_adjust(&self, params: AdjustmentParams) -> Result<DepthMap> {
        self.expect(
            &[DepthState::Predicted, DepthState::Adjusted],
            "invert_adjust",
        )?;
        Ok(self.with(DepthState::Recovered, |v| {
            invert_adjust(v.clamp(0.0, 1.0), params)
        }))
    }

    pub fn to_disparity(&self, rig: &CameraRig) -> Result<DisparityMap> {
        self.expect(&[DepthState::Raw], "to_disparity")?;
        Ok(DisparityMap {
            values: self.values.map(|z| depth_to_disparity(z, rig)),
        })
    }
}

/// Left-referenced, non-negative disparities in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    values: Plane,
}

impl DisparityMap {
    pub fn new(values: Plane) -> Result<Self> {
        check_plane(&values)?;
        Ok(DisparityMap { values })
    }

    pub fn constant(height: usize, width: usize, d: f64) -> Self {
        DisparityMap {
            values: Tensor::full(Shape::new(1, 1, height, width), d),
        }
    }

    pub fn values(&self) -> &Plane {
        &self.values
    }

    pub fn to_depth(&self, rig: &CameraRig) -> DepthMap {
        DepthMap {
            values: self.values.map(|d| disparity_to_depth(d, rig)),
            state: DepthState::Raw,
        }
    }
}
