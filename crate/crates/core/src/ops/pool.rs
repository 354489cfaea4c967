use crate::error::{Error, Result};
use crate::tensor::{Graph, Op, Real, Shape, Tensor, Var};

impl<T: Real> Graph<T> {
    /// Non-overlapping `factor`×`factor` max pooling. Gradient routes to the
    /// first maximal element of each window in row-major scan order.
    pub fn maxpool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x);
        if factor == 0 || shape.h() % factor != 0 || shape.w() % factor != 0 {
            return Err(Error::shape(format!(
                "maxpool factor {factor} does not divide {}x{}",
                shape.h(),
                shape.w()
            )));
        }
        if factor == 1 {
            return Ok(self.identity(x));
        }
        let (oh, ow) = (shape.h() / factor, shape.w() / factor);
        let out_shape = Shape::new(shape.n(), shape.c(), oh, ow);
        let mut out = Tensor::zeros(out_shape);
        let mut argmax = vec![0u32; out_shape.numel()];
        let xs = self.value(x).data();
        let w = shape.w();
        for plane in 0..shape.n() * shape.c() {
            let src = &xs[plane * shape.plane()..(plane + 1) * shape.plane()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = oy * factor * w + ox * factor;
                    for dy in 0..factor {
                        let row = (oy * factor + dy) * w + ox * factor;
                        for i in row..row + factor {
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out.data_mut()[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x, factor, argmax }, &[x]))
    }

    /// Nearest-neighbour 2× upsampling: each element becomes a 2×2 block.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let (h, w) = (shape.h(), shape.w());
        let out_shape = Shape::new(shape.n(), shape.c(), 2 * h, 2 * w);
        let mut out = Tensor::zeros(out_shape);
        let xs = self.value(x).data();
        let dst = out.data_mut();
        for plane in 0..shape.n() * shape.c() {
            for y in 0..2 * h {
                let src = &xs[plane * h * w + (y / 2) * w..][..w];
                let row = &mut dst[plane * 4 * h * w + y * 2 * w..][..2 * w];
                for (i, v) in row.iter_mut().enumerate() {
                    *v = src[i / 2];
                }
            }
        }
        self.push(out, Op::Upsample2x(x), &[x])
    }
}

pub(crate) fn maxpool_backward<T: Real>(
    in_shape: Shape,
    argmax: &[u32],
    g: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_shape);
    let out_plane = g.shape().plane();
    let in_plane = in_shape.plane();
    for (o, (&a, &gv)) in argmax.iter().zip(g.data()).enumerate() {
        let plane = o / out_plane;
        gx.data_mut()[plane * in_plane + a as usize] += gv;
    }
    gx
}

pub(crate) fn upsample2x_backward<T: Real>(in_shape: Shape, g: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape.h(), in_shape.w());
    let mut gx = Tensor::zeros(in_shape);
    let gd = g.data();
    let dst = gx.data_mut();
    for plane in 0..in_shape.n() * in_shape.c() {
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[plane * h * w + (y / 2) * w + x / 2] += gd[plane * 4 * h * w + y * 2 * w + x];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_window_pools_to_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(Shape::new(1, 1, 8, 8), 2.5));
        let y = g.maxpool(x, 8).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
    }

    #[test]
    fn ties_route_to_first_in_scan_order() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_slice(Shape::new(1, 1, 2, 2), &[1.0, 7.0, 3.0, 7.0]).unwrap());
        let y = g.maxpool(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_divisible_extent_is_shape_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(Shape::new(1, 1, 6, 8)));
        assert!(matches!(g.maxpool(x, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_replicates_and_backward_counts() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.upsample2x(x);
        assert_eq!(g.value(y).data(), &[3.0; 4]);
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn pool_after_upsample_is_identity_on_constants() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(Shape::new(1, 2, 3, 3), -1.25));
        let up = g.upsample2x(x);
        let down = g.maxpool(up, 2).unwrap();
        assert_eq!(g.value(down), g.value(x));
    }
}
