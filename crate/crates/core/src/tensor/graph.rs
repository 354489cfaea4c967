use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvGeometry};
use crate::ops::{activation, batchnorm, elementwise, pool, structure, warp};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation together with whatever the backward rule needs from the
/// forward pass.
#[derive(Debug)]
pub enum Op<T> {
    Leaf,
    Identity(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
        shift: T,
    },
    Pow {
        x: Var,
        exponent: T,
        floor: T,
    },
    Reciprocal {
        x: Var,
        numerator: T,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    MaskedMse {
        a: Var,
        b: Var,
        mask: Vec<bool>,
        count: usize,
    },
    WeightedSum(Vec<(Var, T)>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool {
        x: Var,
        factor: usize,
        argmax: Vec<u32>,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    WarpRows {
        disparity: Var,
        source: Var,
        slope: Vec<T>,
    },
    /// Forward-only operation; reaching it with a live gradient is an error.
    NonDifferentiable {
        x: Var,
        name: &'static str,
    },
}

#[derive(Debug)]
pub struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Append-only tape. Nodes are pushed in evaluation order, so every node's
/// inputs precede it.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradient accumulators indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn identity(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Identity(x), &[x])
    }

    /// Rounds to the nearest integer. Has no backward rule.
    pub fn round(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.round());
        self.push(value, Op::NonDifferentiable { x, name: "round" }, &[x])
    }

    /// Reverse sweep from a scalar loss. The loss gradient is seeded with 1
    /// and contributions along multiple paths are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a (1,1,1,1) loss, got {shape:?}"
            )));
        }
        self.backward_from(loss, Tensor::scalar(T::one()))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(format!(
                "seed gradient {:?} for output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
                continue;
            }
            let mut accumulate = |v: Var, g: Tensor<T>| {
                debug_assert_eq!(g.shape(), self.shape(v));
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                            *e += *x;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            self.backward_node(idx, &upstream, &mut accumulate)?;
            // keep non-leaf gradients too, so callers can inspect intermediates
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        idx: usize,
        g: &Tensor<T>,
        acc: &mut dyn FnMut(Var, Tensor<T>),
    ) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Identity(x) => acc(*x, g.clone()),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(*a, elementwise::zip_map(g, bv, |g, b| g * b));
                }
                if self.wants(*b) {
                    acc(*b, elementwise::zip_map(g, av, |g, a| g * a));
                }
            }
            Op::Affine { x, scale, .. } => {
                let s = *scale;
                acc(*x, g.map(|v| v * s));
            }
            Op::Pow { x, exponent, floor } => {
                acc(
                    *x,
                    elementwise::pow_backward(self.value(*x), g, *exponent, *floor),
                );
            }
            Op::Reciprocal { x, numerator } => {
                let c = *numerator;
                acc(
                    *x,
                    elementwise::zip_map(g, self.value(*x), |g, x| -g * c / (x * x)),
                );
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *x,
                    elementwise::zip_map(g, self.value(*x), |g, x| {
                        if x >= lo && x <= hi {
                            g
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Relu(x) => acc(*x, activation::relu_backward(self.value(*x), g)),
            Op::Sigmoid(x) => acc(*x, activation::sigmoid_backward(out, g)),
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mse { pred, target } => {
                let (gp, gt) =
                    elementwise::mse_backward(self.value(*pred), self.value(*target), g.item());
                if self.wants(*pred) {
                    acc(*pred, gp);
                }
                if self.wants(*target) {
                    acc(*target, gt);
                }
            }
            Op::MaskedMse { a, b, mask, count } => {
                let (ga, gb) = elementwise::masked_mse_backward(
                    self.value(*a),
                    self.value(*b),
                    mask,
                    *count,
                    g.item(),
                );
                if self.wants(*a) {
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::WeightedSum(terms) => {
                let gv = g.item();
                for &(v, w) in terms {
                    if self.wants(v) {
                        acc(v, Tensor::scalar(gv * w));
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let grads = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(gx) = grads.input {
                    acc(*x, gx);
                }
                if let Some(gw) = grads.kernel {
                    acc(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    acc(*b, gb);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (gx, gg, gb) = batchnorm::train_backward(self.value(*gamma), xhat, inv_std, g);
                if self.wants(*x) {
                    acc(*x, gx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, gg);
                }
                if self.wants(*beta) {
                    acc(*beta, gb);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (gx, gg, gb) =
                    batchnorm::eval_backward(self.value(*x), self.value(*gamma), mean, inv_std, g);
                if self.wants(*x) {
                    acc(*x, gx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, gg);
                }
                if self.wants(*beta) {
                    acc(*beta, gb);
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                acc(*x, pool::maxpool_backward(self.shape(*x), argmax, g));
            }
            Op::Upsample2x(x) => acc(*x, pool::upsample2x_backward(self.shape(*x), g)),
            Op::Concat(parts) => {
                let shapes: Vec<Shape> = parts.iter().map(|&p| self.shape(p)).collect();
                for (part, grad) in parts.iter().zip(structure::split_channels(g, &shapes)) {
                    if self.wants(*part) {
                        acc(*part, grad);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                for (v, m) in gx.data_mut().iter_mut().zip(mask) {
                    *v *= *m;
                }
                acc(*x, gx);
            }
            Op::WarpRows {
                disparity,
                source,
                slope,
            } => {
                if self.wants(*source) {
                    return Err(Error::UnsupportedOp(
                        "row warp with respect to the source image".into(),
                    ));
                }
                acc(
                    *disparity,
                    warp::warp_rows_backward(self.shape(*disparity), self.shape(*source), slope, g),
                );
            }
            Op::NonDifferentiable { name, .. } => {
                return Err(Error::UnsupportedOp((*name).to_string()));
            }
        }
        Ok(())
    }
}
