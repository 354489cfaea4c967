//! Elementwise arithmetic and scalar reductions. Reductions accumulate in
//! f64 whatever the tensor precision.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Op, Real, Tensor, Var};

pub(crate) fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub(crate) fn pow_backward<T: Real>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    exponent: T,
    floor: T,
) -> Tensor<T> {
    zip_map(g, x, |g, x| {
        if x < floor {
            T::zero()
        } else {
            g * exponent * x.powf(exponent - T::one())
        }
    })
}

pub(crate) fn mse_backward<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    g: T,
) -> (Tensor<T>, Tensor<T>) {
    let scale = 2.0 * g.f64() / pred.len() as f64;
    let gp = zip_map(pred, target, |p, t| T::of(scale * (p - t).f64()));
    let gt = gp.map(|v| -v);
    (gp, gt)
}

/// `mask` has one entry per (batch, row, column); it applies to every channel.
pub(crate) fn masked_mse_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    mask: &[bool],
    count: usize,
    g: T,
) -> (Tensor<T>, Tensor<T>) {
    let shape = a.shape();
    let scale = 2.0 * g.f64() / (count * shape.c()) as f64;
    let mut ga = Tensor::zeros(shape);
    for (i, v) in ga.data_mut().iter_mut().enumerate() {
        if mask[pixel_index(shape, i)] {
            *v = T::of(scale * (a.data()[i] - b.data()[i]).f64());
        }
    }
    let gb = ga.map(|v| -v);
    (ga, gb)
}

/// Index into a per-pixel mask for flat element `i` of an NCHW tensor.
#[inline]
fn pixel_index(shape: crate::tensor::Shape, i: usize) -> usize {
    let plane = shape.plane();
    let n = i / (shape.c() * plane);
    n * plane + i % plane
}

impl<T: Real> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale, shift }, &[x])
    }

    /// `max(x, floor)^exponent`; the gradient is zero below `floor`. A
    /// positive floor keeps fractional exponents differentiable near zero.
    pub fn pow(&mut self, x: Var, exponent: T, floor: T) -> Var {
        let out = self.value(x).map(|v| v.max(floor).powf(exponent));
        self.push(out, Op::Pow { x, exponent, floor }, &[x])
    }

    /// `numerator / x`.
    pub fn reciprocal(&mut self, x: Var, numerator: T) -> Var {
        let out = self.value(x).map(|v| numerator / v);
        self.push(out, Op::Reciprocal { x, numerator }, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.is_empty() {
            return Err(Error::shape("mse of empty tensors"));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum();
        let out = Tensor::scalar(T::of(s / p.len() as f64));
        Ok(self.push(out, Op::Mse { pred, target }, &[pred, target]))
    }

    /// Mean squared difference over masked pixels and all channels. `mask`
    /// holds one flag per (batch, row, column). Returns the loss and the
    /// number of valid pixels.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: Vec<bool>) -> Result<(Var, usize)> {
        self.same_shape(a, b, "masked_mse")?;
        let shape = self.shape(a);
        if mask.len() != shape.n() * shape.plane() {
            return Err(Error::shape(format!(
                "mask of {} entries for {:?}",
                mask.len(),
                shape
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateProjection);
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut s = 0.0f64;
        for i in 0..av.len() {
            if mask[pixel_index(shape, i)] {
                s += (av[i].f64() - bv[i].f64()).powi(2);
            }
        }
        let out = Tensor::scalar(T::of(s / (count * shape.c()) as f64));
        Ok((
            self.push(out, Op::MaskedMse { a, b, mask, count }, &[a, b]),
            count,
        ))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = 0.0f64;
        for &(v, w) in terms {
            if !self.shape(v).is_scalar() {
                return Err(Error::shape(format!(
                    "weighted_sum term {:?}",
                    self.shape(v)
                )));
            }
            s += w.f64() * self.value(v).item().f64();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(T::of(s)),
            Op::WeightedSum(terms.to_vec()),
            &vars,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(Shape::new(1, 1, 1, v.len()), v).unwrap()
    }

    #[test]
    fn mse_reference_values() {
        let mut g = Graph::new();
        let p = g.input(row(&[0.0, 1.0]));
        let t = g.input(row(&[1.0, 1.0]));
        let l = g.mse(p, t).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
        let same = g.mse(t, t).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn masked_mse_counts_pixels_not_channels() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_slice(Shape::new(1, 2, 1, 2), &[1.0, 0.0, 3.0, 0.0]).unwrap());
        let b = g.input(Tensor::zeros(Shape::new(1, 2, 1, 2)));
        let (l, n) = g.masked_mse(a, b, vec![true, false]).unwrap();
        assert_eq!(n, 1);
        assert_eq!(g.value(l).item(), (1.0 + 9.0) / 2.0);
        assert!(matches!(
            g.masked_mse(a, b, vec![false, false]),
            Err(Error::DegenerateProjection)
        ));
    }

    #[test]
    fn pow_floor_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(row(&[0.0, 0.25]));
        let y = g.pow(x, 0.5, 1e-6);
        let s = g.sum(y);
        let gx = g.backward(s).unwrap().take(x).unwrap();
        assert_eq!(gx.data()[0], 0.0);
        assert!((gx.data()[1] - 1.0).abs() < 1e-12);
    }
}
