use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Op, Real, Shape, Tensor, Var};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel running statistics, updated by exponential moving average in
/// train mode: `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(Shape::new(1, channels, 1, 1)),
            var: Tensor::full(Shape::new(1, channels, 1, 1), T::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Affine parameters plus running statistics for one normalization layer.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(Shape::new(1, channels, 1, 1), T::one()),
            beta: Tensor::zeros(Shape::new(1, channels, 1, 1)),
            stats: RunningStats::new(channels),
        }
    }
}

/// Graph-free batch normalization.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let gamma = g.input(state.gamma.clone());
    let beta = g.input(state.beta.clone());
    let y = g.batchnorm(x, gamma, beta, &mut state.stats, mode)?;
    Ok(g.value(y).clone())
}

/// Sums over (batch, H, W) for each channel, in f64.
fn channel_sums<T: Real>(shape: Shape, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let (n, c, plane) = (shape.n(), shape.c(), shape.plane());
    let mut sums = vec![0.0; c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                *s += f(i);
            }
        }
    }
    sums
}

impl<T: Real> Graph<T> {
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => self.batchnorm_train(x, gamma, beta, stats),
            Mode::Eval => self.batchnorm_eval(x, gamma, beta, stats),
        }
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var, stats: &RunningStats<T>) -> Result<()> {
        let shape = self.shape(x);
        let c = shape.c();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v).numel() != c {
                return Err(Error::shape(format!(
                    "batchnorm {name} has {} elements for {c} channels",
                    self.shape(v).numel()
                )));
            }
        }
        if stats.channels() != c {
            return Err(Error::shape(format!(
                "batchnorm running stats have {} channels, input has {c}",
                stats.channels()
            )));
        }
        Ok(())
    }

    /// Normalizes with batch statistics and folds them into `stats`.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
    ) -> Result<Var> {
        self.check_bn(x, gamma, beta, stats)?;
        let shape = self.shape(x);
        let (c, plane) = (shape.c(), shape.plane());
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = Tensor::zeros(shape);
        let count = (shape.n() * plane) as f64;
        if count == 0.0 {
            return Err(Error::shape("batchnorm over an empty batch"));
        }
        let mean: Vec<f64> = channel_sums::<T>(shape, |i| xs[i].f64())
            .into_iter()
            .map(|s| s / count)
            .collect();
        let var: Vec<f64> = channel_sums::<T>(shape, |i| {
            let d = xs[i].f64() - mean[(i / plane) % c];
            d * d
        })
        .into_iter()
        .map(|s| s / count)
        .collect();
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + stats.epsilon).sqrt())
            .collect();
        let mut xhat = vec![T::zero(); xs.len()];
        for (i, (o, h)) in out.data_mut().iter_mut().zip(xhat.iter_mut()).enumerate() {
            let ch = (i / plane) % c;
            let norm = (xs[i].f64() - mean[ch]) * inv_std[ch];
            *h = T::of(norm);
            *o = T::of(gs[ch].f64() * norm + bs[ch].f64());
        }
        let m = stats.momentum;
        for ch in 0..c {
            let rm = &mut stats.mean.data_mut()[ch];
            *rm = T::of(m * rm.f64() + (1.0 - m) * mean[ch]);
            let rv = &mut stats.var.data_mut()[ch];
            *rv = T::of(m * rv.f64() + (1.0 - m) * var[ch]);
        }
        let inv_std = inv_std.into_iter().map(T::of).collect();
        Ok(self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Normalizes with the running statistics; read-only.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
    ) -> Result<Var> {
        self.check_bn(x, gamma, beta, stats)?;
        let shape = self.shape(x);
        let (c, plane) = (shape.c(), shape.plane());
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = Tensor::zeros(shape);
        let mean: Vec<T> = stats.mean.data().to_vec();
        let inv_std: Vec<T> = stats
            .var
            .data()
            .iter()
            .map(|v| T::of(1.0 / (v.f64().max(0.0) + stats.epsilon).sqrt()))
            .collect();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *o = gs[ch] * (xs[i] - mean[ch]) * inv_std[ch] + bs[ch];
        }
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }
}

pub(crate) fn train_backward<T: Real>(
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = g.shape();
    let (c, plane) = (shape.c(), shape.plane());
    let count = (shape.n() * plane) as f64;
    let gd = g.data();
    let sum_g = channel_sums::<T>(shape, |i| gd[i].f64());
    let sum_gx = channel_sums::<T>(shape, |i| gd[i].f64() * xhat[i].f64());
    let mut gx = Tensor::zeros(shape);
    for (i, v) in gx.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        let scale = gamma.data()[ch].f64() * inv_std[ch].f64() / count;
        *v = T::of(scale * (count * gd[i].f64() - sum_g[ch] - xhat[i].f64() * sum_gx[ch]));
    }
    let pshape = Shape::new(1, c, 1, 1);
    let ggamma =
        Tensor::new(pshape, sum_gx.into_iter().map(T::of).collect()).expect("channel count");
    let gbeta = Tensor::new(pshape, sum_g.into_iter().map(T::of).collect()).expect("channel count");
    (gx, ggamma, gbeta)
}

pub(crate) fn eval_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = g.shape();
    let (c, plane) = (shape.c(), shape.plane());
    let (gd, xd) = (g.data(), x.data());
    let mut gx = Tensor::zeros(shape);
    for (i, v) in gx.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v = gd[i] * gamma.data()[ch] * inv_std[ch];
    }
    let sum_g = channel_sums::<T>(shape, |i| gd[i].f64());
    let sum_gx = channel_sums::<T>(shape, |i| {
        let ch = (i / plane) % c;
        gd[i].f64() * (xd[i] - mean[ch]).f64() * inv_std[ch].f64()
    });
    let pshape = Shape::new(1, c, 1, 1);
    let ggamma =
        Tensor::new(pshape, sum_gx.into_iter().map(T::of).collect()).expect("channel count");
    let gbeta = Tensor::new(pshape, sum_g.into_iter().map(T::of).collect()).expect("channel count");
    (gx, ggamma, gbeta)
}
