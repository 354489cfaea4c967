//! Horizontal resampling of one image by a per-pixel disparity field.

use crate::error::{Error, Result};
use crate::geometry::sample_row;
use crate::tensor::{Graph, Op, Real, Shape, Tensor, Var};

/// Output of [`warp_rows`]: warped image, per-pixel validity, and the
/// derivative of every output element with respect to its disparity.
pub struct Warped<T> {
    pub image: Tensor<T>,
    pub mask: Vec<bool>,
    pub slope: Vec<T>,
}

/// For every pixel `(i, j)` samples `source` at column `i - disparity(i, j)`
/// on row `j`. Out-of-bounds samples produce 0 and a false mask entry.
pub fn warp_rows<T: Real>(source: &Tensor<T>, disparity: &Tensor<T>) -> Result<Warped<T>> {
    let s = source.shape();
    let d = disparity.shape();
    if d.c() != 1 || (d.n(), d.h(), d.w()) != (s.n(), s.h(), s.w()) {
        return Err(Error::shape(format!(
            "disparity {d:?} does not match source {s:?}"
        )));
    }
    let (h, w, c) = (s.h(), s.w(), s.c());
    let mut image = Tensor::zeros(s);
    let mut mask = vec![false; s.n() * h * w];
    let mut slope = vec![T::zero(); s.numel()];
    for n in 0..s.n() {
        for j in 0..h {
            for i in 0..w {
                let x = T::of(i as f64) - disparity.at(n, 0, j, i);
                let pix = (n * h + j) * w + i;
                for ch in 0..c {
                    let base = s.offset(n, ch, j, 0);
                    let row = &source.data()[base..base + w];
                    if let Some(sample) = sample_row(row, x) {
                        mask[pix] = true;
                        image.data_mut()[base + i] = sample.value;
                        // d(out)/d(disparity) = -d(sample)/dx
                        slope[base + i] = -sample.slope;
                    }
                }
            }
        }
    }
    Ok(Warped { image, mask, slope })
}

pub(crate) fn warp_rows_backward<T: Real>(
    disp_shape: Shape,
    src_shape: Shape,
    slope: &[T],
    g: &Tensor<T>,
) -> Tensor<T> {
    let mut gd = Tensor::zeros(disp_shape);
    let plane = src_shape.plane();
    let c = src_shape.c();
    for (i, (&gv, &sv)) in g.data().iter().zip(slope).enumerate() {
        let n = i / (c * plane);
        gd.data_mut()[n * plane + i % plane] += gv * sv;
    }
    gd
}

impl<T: Real> Graph<T> {
    /// Records [`warp_rows`]; differentiable with respect to `disparity`
    /// only. Returns the warped image and its validity mask.
    pub fn warp_rows(&mut self, source: Var, disparity: Var) -> Result<(Var, Vec<bool>)> {
        let Warped { image, mask, slope } = warp_rows(self.value(source), self.value(disparity))?;
        let out = self.push(
            image,
            Op::WarpRows {
                disparity,
                source,
                slope,
            },
            &[source, disparity],
        );
        Ok((out, mask))
    }
}
