use crate::error::Result;
use crate::ops::{ConvGeometry, Mode, RunningStats};
use crate::tensor::{Graph, Real, Var};

/// Graph handles for one Conv module: convolution, batch normalization, ReLU.
/// The convolution has no bias; normalization would cancel it.
#[derive(Clone, Copy, Debug)]
pub struct ConvModuleVars {
    pub kernel: Var,
    pub gamma: Var,
    pub beta: Var,
    pub geometry: ConvGeometry,
}

/// Running statistics for a forward pass: mutable in train mode, shared in
/// eval mode.
pub enum Stats<'a, T> {
    Train(&'a mut RunningStats<T>),
    Eval(&'a RunningStats<T>),
}

pub fn conv_module<T: Real>(g: &mut Graph<T>, x: Var, p: &ConvModuleVars, stats: Stats<'_, T>) -> Result<Var> {
    let y = g.conv2d(x, p.kernel, None, p.geometry)?;
    let y = match stats {
        Stats::Train(s) => g.batchnorm_train(y, p.gamma, p.beta, s)?,
        Stats::Eval(s) => g.batchnorm_eval(y, p.gamma, p.beta, s)?,
    };
    Ok(g.relu(y))
}

/// One-layer dense block: `concat(x, dropout(ConvModule(x)))`, so the output
/// has the input's channels followed by `growth` new ones.
pub fn dense_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &ConvModuleVars,
    stats: Stats<'_, T>,
    dropout_rate: f64,
    dropout_seed: u64,
) -> Result<Var> {
    let mode = match stats {
        Stats::Train(_) => Mode::Train,
        Stats::Eval(_) => Mode::Eval,
    };
    let features = conv_module(g, x, p, stats)?;
    let features = g.dropout(features, dropout_rate, mode, dropout_seed)?;
    g.concat(&[x, features])
}
