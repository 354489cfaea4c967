//! Combined prediction and projection loss:
//! `L = alpha_z * mean((x - z')^2) + alpha_p * mean_valid((I^R(i - d, j) - I^L(i, j))^2)`.

use crate::error::{Error, Result};
use crate::geometry::{AdjustmentParams, CameraRig};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Floor applied before the fractional power that undoes the adjustment, so
/// its derivative stays finite when the sigmoid saturates at 0.
pub const INVERT_FLOOR: f64 = 1e-6;

/// What the network regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// `1 - z / z_max`, optionally adjusted.
    Depth,
    /// `d / d_max`, optionally adjusted.
    Disparity,
}

impl TargetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetMode::Depth => "depth",
            TargetMode::Disparity => "disparity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(TargetMode::Depth),
            "disparity" => Ok(TargetMode::Disparity),
            other => Err(Error::config(format!("unknown mode `{other}` (depth|disparity)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha_z: f64,
    pub alpha_p: f64,
    pub enable_projection: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_z: 1.0,
            alpha_p: 1.0,
            enable_projection: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_z >= 0.0 && self.alpha_p >= 0.0 && self.alpha_z + self.alpha_p > 0.0;
        if !ok || !self.alpha_z.is_finite() || !self.alpha_p.is_finite() {
            return Err(Error::config(format!(
                "loss weights must be non-negative with a positive sum (alpha_z={}, alpha_p={})",
                self.alpha_z, self.alpha_p
            )));
        }
        Ok(())
    }

    pub fn projection_active(&self) -> bool {
        self.enable_projection && self.alpha_p > 0.0
    }
}

/// Scalar components of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub prediction: f64,
    pub projection: f64,
    /// Pixels in the prediction term.
    pub n_z: usize,
    /// Valid reconstructed pixels in the projection term.
    pub n_p: usize,
}

/// How a network output maps back to pixels of disparity.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub rig: CameraRig,
    pub adjustment: AdjustmentParams,
    pub mode: TargetMode,
}

impl Projection {
    /// Records `x -> x^(1/p) -> disparity` on the graph.
    ///
    /// Depth mode: `z = (1 - zn) z_max`, clamped to the rig range, then
    /// `d = f B / z`. Disparity mode: `d = zn * d_max`.
    pub fn disparity<T: Real>(&self, g: &mut Graph<T>, pred: Var) -> Var {
        let inv = 1.0 / self.adjustment.p();
        let zn = if inv == 1.0 {
            pred
        } else {
            g.pow(pred, T::of(inv), T::of(INVERT_FLOOR))
        };
        match self.mode {
            TargetMode::Depth => {
                let z_max = self.rig.z_max();
                let z = g.affine(zn, T::of(-z_max), T::of(z_max));
                let z = g.clamp(z, T::of(self.rig.z_min()), T::of(z_max));
                g.reciprocal(z, T::of(self.rig.fb()))
            }
            TargetMode::Disparity => g.affine(zn, T::of(self.rig.d_max()), T::zero()),
        }
    }
}

/// Mean squared error over all `N_z` pixels.
pub fn prediction_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    g.mse(pred, target)
}

/// Mean squared photometric error between the left image and the right
/// image warped by the predicted disparity, over the `N_p` in-bounds pixels
/// and all color channels. Errors with [`Error::DegenerateProjection`] when
/// no pixel is in bounds.
pub fn projection_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    left: Var,
    right: Var,
    projection: &Projection,
) -> Result<(Var, usize)> {
    let disparity = projection.disparity(g, pred);
    let (reconstructed, mask) = g.warp_rows(right, disparity)?;
    g.masked_mse(reconstructed, left, mask)
}

/// Graph handles for a recorded loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub prediction: Var,
    pub projection: Option<Var>,
}

/// Records the weighted loss. With the projection disabled (or `alpha_p` =
/// 0) the projection term is reported as 0 with `N_p = 0`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    left: Var,
    right: Var,
    projection: &Projection,
    config: &LossConfig,
) -> Result<(LossNodes, LossBreakdown)> {
    config.validate()?;
    let l2 = prediction_loss(g, pred, target)?;
    let mut terms = vec![(l2, T::of(config.alpha_z))];
    let mut breakdown = LossBreakdown {
        prediction: g.value(l2).item().f64(),
        n_z: g.shape(pred).numel(),
        ..Default::default()
    };
    let mut proj_var = None;
    if config.projection_active() {
        let (lp, n_p) = projection_loss(g, pred, left, right, projection)?;
        terms.push((lp, T::of(config.alpha_p)));
        breakdown.projection = g.value(lp).item().f64();
        breakdown.n_p = n_p;
        proj_var = Some(lp);
    }
    let total = g.weighted_sum(&terms)?;
    breakdown.total = g.value(total).item().f64();
    Ok((
        LossNodes {
            total,
            prediction: l2,
            projection: proj_var,
        },
        breakdown,
    ))
}

/// Evaluates [`total_loss`] on plain tensors.
pub fn evaluate_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    left: &Tensor<T>,
    right: &Tensor<T>,
    projection: &Projection,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let t = g.input(target.clone());
    let l = g.input(left.clone());
    let r = g.input(right.clone());
    Ok(total_loss(&mut g, p, t, l, r, projection, config)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape, v).unwrap()
    }

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        let s = Shape::new(1, 3, h, w);
        Tensor::new(s, (0..s.numel()).map(|i| ((i % w) as f64 / w as f64) * 0.5 + 0.1 * (i / (h * w)) as f64).collect()).unwrap()
    }

    fn disparity_projection() -> Projection {
        Projection {
            rig: CameraRig::default(),
            adjustment: AdjustmentParams::IDENTITY,
            mode: TargetMode::Disparity,
        }
    }

    #[test]
    fn prediction_loss_reference_values() {
        let s = Shape::new(1, 1, 1, 2);
        let mut g = Graph::new();
        let p = g.input(t(s, &[0.0, 1.0]));
        let y = g.input(t(s, &[1.0, 1.0]));
        let l = prediction_loss(&mut g, p, y).unwrap();
        assert_eq!(g.value(l).item(), 0.5);

        let target = t(s, &[0.2, 0.7]);
        let shifted = target.map(|v| v + 0.1);
        let (a, b) = (g.input(shifted), g.input(target));
        let l = prediction_loss(&mut g, a, b).unwrap();
        assert!((g.value(l).item() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn identical_views_with_zero_disparity_have_zero_projection_loss() {
        let img = ramp(4, 6);
        let pred = Tensor::zeros(Shape::new(1, 1, 4, 6));
        let mut g = Graph::new();
        let (p, l, r) = (g.input(pred), g.input(img.clone()), g.input(img));
        let (loss, n_p) = projection_loss(&mut g, p, l, r, &disparity_projection()).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        assert_eq!(n_p, 24);
    }

    #[test]
    fn all_samples_out_of_bounds_is_degenerate() {
        let img = ramp(2, 4);
        // prediction 1 means d_max = 40 px, far beyond a 4-wide image
        let pred = Tensor::full(Shape::new(1, 1, 2, 4), 1.0);
        let mut g = Graph::new();
        let (p, l, r) = (g.input(pred), g.input(img.clone()), g.input(img));
        let err = projection_loss(&mut g, p, l, r, &disparity_projection()).unwrap_err();
        assert!(matches!(err, Error::DegenerateProjection));
    }

    #[test]
    fn weights_combine_terms() {
        let img = ramp(3, 8);
        let pred = Tensor::full(Shape::new(1, 1, 3, 8), 0.02);
        let target = Tensor::full(Shape::new(1, 1, 3, 8), 0.1);
        let proj = disparity_projection();
        let both = evaluate_loss(&pred, &target, &img, &img, &proj, &LossConfig::default()).unwrap();
        assert_eq!(both.total, both.prediction + both.projection);
        assert!(both.projection > 0.0);
        assert!(both.n_p <= both.n_z);

        let no_proj = LossConfig {
            alpha_z: 2.0,
            alpha_p: 0.0,
            enable_projection: true,
        };
        let only = evaluate_loss(&pred, &target, &img, &img, &proj, &no_proj).unwrap();
        assert_eq!(only.total, 2.0 * only.prediction);
        assert_eq!((only.projection, only.n_p), (0.0, 0));
    }

    #[test]
    fn invalid_weights() {
        for (az, ap) in [(0.0, 0.0), (-1.0, 1.0), (1.0, f64::NAN)] {
            let cfg = LossConfig {
                alpha_z: az,
                alpha_p: ap,
                enable_projection: true,
            };
            assert!(cfg.validate().is_err());
        }
    }
}
