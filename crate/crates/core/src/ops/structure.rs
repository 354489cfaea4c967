use crate::error::{Error, Result};
use crate::tensor::{Graph, Op, Real, Shape, Tensor, Var};

/// Concatenates along the channel axis, in argument order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    let (n, h, w) = (first.n(), first.h(), first.w());
    for p in parts {
        let s = p.shape();
        if (s.n(), s.h(), s.w()) != (n, h, w) {
            return Err(Error::shape(format!("concat of {first:?} with {s:?}")));
        }
    }
    let channels: usize = parts.iter().map(|p| p.shape().c()).sum();
    let mut data = Vec::with_capacity(n * channels * h * w);
    for b in 0..n {
        for p in parts {
            let per = p.shape().c() * h * w;
            data.extend_from_slice(&p.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::new(Shape::new(n, channels, h, w), data)
}

/// Inverse of [`concat_channels`] for the given part shapes.
pub fn split_channels<T: Real>(t: &Tensor<T>, shapes: &[Shape]) -> Vec<Tensor<T>> {
    let s = t.shape();
    let (n, h, w) = (s.n(), s.h(), s.w());
    let mut out: Vec<Vec<T>> = shapes
        .iter()
        .map(|p| Vec::with_capacity(p.numel()))
        .collect();
    let mut offset = 0;
    for _ in 0..n {
        for (dst, p) in out.iter_mut().zip(shapes) {
            let per = p.c() * h * w;
            dst.extend_from_slice(&t.data()[offset..offset + per]);
            offset += per;
        }
    }
    out.into_iter()
        .zip(shapes)
        .map(|(d, &p)| Tensor::new(p, d).expect("split sizes follow shapes"))
        .collect()
}

impl<T: Real> Graph<T> {
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }
}
