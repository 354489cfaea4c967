use crate::tensor::{Graph, Op, Real, Tensor, Var};

/// Logistic function `1 / (1 + e^-x)`, evaluated without overflow and kept
/// strictly inside (0, 1) at the working precision.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let top = one - T::epsilon() / (one + one);
    y.max(T::min_positive_value()).min(top)
}

pub(crate) fn relu_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    super::elementwise::zip_map(g, x, |g, x| if x > T::zero() { g } else { T::zero() })
}

pub(crate) fn sigmoid_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    super::elementwise::zip_map(g, y, |g, y| g * y * (T::one() - y))
}

impl<T: Real> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }
}
