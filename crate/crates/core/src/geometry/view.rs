use super::{DepthMap, DisparityMap, Image};
use crate::error::{Error, Result};
use crate::ops::warp::warp_rows;
use crate::tensor::{Shape, Tensor};

/// Rebuilds the left view by sampling the right image at `(i - d, j)` for
/// each left pixel `(i, j)`. The mask is true where the sample is in bounds.
pub fn reconstruct_left(right: &Image, disparity: &DisparityMap) -> Result<(Image, Vec<bool>)> {
    let warped = warp_rows(right, disparity.values())?;
    Ok((warped.image, warped.mask))
}

/// Right view produced by forward splatting, with holes where no left pixel
/// landed.
#[derive(Clone, Debug)]
pub struct Synthesized {
    pub image: Image,
    /// One flag per pixel, true for holes.
    pub holes: Vec<bool>,
}

impl Synthesized {
    pub fn hole_fraction(&self) -> f64 {
        if self.holes.is_empty() {
            return 0.0;
        }
        self.holes.iter().filter(|&&h| h).count() as f64 / self.holes.len() as f64
    }
}

/// Forward-warps every left pixel to column `round(i - d)` of the right view.
/// When several pixels land on one target the nearest wins: smallest depth if
/// `depth` is given, otherwise largest disparity. Equal priorities keep the
/// first pixel in scan order.
pub fn synthesize_right(
    left: &Image,
    disparity: &DisparityMap,
    depth: Option<&DepthMap>,
) -> Result<Synthesized> {
    let s = left.shape();
    let d = disparity.values();
    if s.n() != 1 || (d.shape().h(), d.shape().w()) != (s.h(), s.w()) {
        return Err(Error::shape(format!(
            "disparity {:?} for image {:?}",
            d.shape(),
            s
        )));
    }
    if let Some(z) = depth {
        if z.values().shape() != d.shape() {
            return Err(Error::shape("depth and disparity maps differ in shape"));
        }
    }
    let (c, h, w) = (s.c(), s.h(), s.w());
    let mut image = Tensor::zeros(Shape::new(1, c, h, w));
    let mut holes = vec![true; h * w];
    let mut priority = vec![f64::NEG_INFINITY; h * w];
    for j in 0..h {
        for i in 0..w {
            let dv = d.at(0, 0, j, i);
            let target = (i as f64 - dv).round();
            if !(target >= 0.0 && target < w as f64) {
                continue;
            }
            let t = target as usize;
            let rank = match depth {
                Some(z) => -z.values().at(0, 0, j, i),
                None => dv,
            };
            let slot = j * w + t;
            if holes[slot] || rank > priority[slot] {
                holes[slot] = false;
                priority[slot] = rank;
                for ch in 0..c {
                    image.set(0, ch, j, t, left.at(0, ch, j, i));
                }
            }
        }
    }
    Ok(Synthesized { image, holes })
}
