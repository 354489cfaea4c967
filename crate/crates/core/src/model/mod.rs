//! The depth network: a correspondence trunk at reduced resolution with
//! parallel dilated branches and one-layer dense blocks, followed by a
//! stepwise ×2 decoder that merges left-image features at every scale and a
//! sigmoid head.

mod layers;

pub use layers::{conv_module, dense_block, ConvModuleVars, Stats};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::TargetMode;
use crate::ops::{ConvGeometry, Mode, RunningStats};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

pub const DENSE_BLOCKS: usize = 4;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub growth: usize,
    pub dilation_set: Vec<usize>,
    pub downscale: usize,
    pub dropout_rate: f64,
    /// Stacked left and right RGB.
    pub input_channels: usize,
    pub output_mode: TargetMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            growth: 16,
            dilation_set: vec![1, 2, 3, 4],
            downscale: 8,
            dropout_rate: 0.2,
            input_channels: 6,
            output_mode: TargetMode::Depth,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.growth == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.dilation_set.is_empty() || self.dilation_set.contains(&0) {
            return Err(Error::config(format!(
                "dilation set must be non-empty with entries >= 1, got {:?}",
                self.dilation_set
            )));
        }
        if !self.downscale.is_power_of_two() {
            return Err(Error::config(format!("downscale {} is not a power of two", self.downscale)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.input_channels != 6 {
            return Err(Error::config("the network takes stacked RGB pairs (6 channels)"));
        }
        Ok(())
    }

    /// Number of ×2 upsampling steps, `log2(downscale)`.
    pub fn decoder_steps(&self) -> usize {
        self.downscale.trailing_zeros() as usize
    }

    /// `key = value` lines; the inverse of [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let dil: Vec<String> = self.dilation_set.iter().map(|d| d.to_string()).collect();
        format!(
            "base_channels = {}\ngrowth = {}\ndilation_set = {}\ndownscale = {}\ndropout_rate = {}\ninput_channels = {}\noutput_mode = {}\n",
            self.base_channels,
            self.growth,
            dil.join(","),
            self.downscale,
            self.dropout_rate,
            self.input_channels,
            self.output_mode.as_str()
        )
    }

    /// Parses the keys written by [`ModelConfig::to_text`]; other keys are
    /// ignored so the text can share a block with unrelated settings.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in crate::data::parse_key_values(text)? {
            let bad = || Error::format(format!("bad model config value {key} = {value}"));
            match key.as_str() {
                "base_channels" => cfg.base_channels = value.parse().map_err(|_| bad())?,
                "growth" => cfg.growth = value.parse().map_err(|_| bad())?,
                "dilation_set" => {
                    cfg.dilation_set = value
                        .split(',')
                        .map(|d| d.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?
                }
                "downscale" => cfg.downscale = value.parse().map_err(|_| bad())?,
                "dropout_rate" => cfg.dropout_rate = value.parse().map_err(|_| bad())?,
                "input_channels" => cfg.input_channels = value.parse().map_err(|_| bad())?,
                "output_mode" => cfg.output_mode = TargetMode::parse(&value)?,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A named tensor in the model's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Named<V> {
    pub name: String,
    pub value: V,
}

#[derive(Clone, Copy, Debug)]
struct ModuleSlots {
    kernel: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
    geometry: ConvGeometry,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ModuleSlots,
    branches: Vec<ModuleSlots>,
    dense: Vec<ModuleSlots>,
    skip: ModuleSlots,
    decoder: Vec<ModuleSlots>,
    head_kernel: usize,
    head_bias: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Named<Tensor<T>>>,
    stats: Vec<Named<RunningStats<T>>>,
    layout: Layout,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    params: Vec<Named<Tensor<T>>>,
    stats: Vec<Named<RunningStats<T>>>,
}

impl<T: Real> Builder<T> {
    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Named { name, value });
        self.params.len() - 1
    }

    /// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    fn kernel(&mut self, name: String, cout: usize, cin: usize, k: usize) -> usize {
        let shape = Shape::new(cout, cin, k, k);
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| T::of(self.rng.random_range(-bound..bound)))
            .collect();
        self.param(name, Tensor::new(shape, data).expect("kernel shape"))
    }

    fn module(&mut self, name: &str, cin: usize, cout: usize, dilation: usize) -> ModuleSlots {
        let kernel = self.kernel(format!("{name}/conv.kernel"), cout, cin, KERNEL);
        let pshape = Shape::new(1, cout, 1, 1);
        let gamma = self.param(format!("{name}/bn.gamma"), Tensor::full(pshape, T::one()));
        let beta = self.param(format!("{name}/bn.beta"), Tensor::zeros(pshape));
        self.stats.push(Named {
            name: format!("{name}/bn"),
            value: RunningStats::new(cout),
        });
        ModuleSlots {
            kernel,
            gamma,
            beta,
            stats: self.stats.len() - 1,
            geometry: ConvGeometry::same(KERNEL, dilation),
        }
    }
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

enum StatsSet<'a, T> {
    Train(&'a mut [Named<RunningStats<T>>]),
    Eval(&'a [Named<RunningStats<T>>]),
}

impl<T> StatsSet<'_, T> {
    fn get(&mut self, i: usize) -> Stats<'_, T> {
        match self {
            StatsSet::Train(s) => Stats::Train(&mut s[i].value),
            StatsSet::Eval(s) => Stats::Eval(&s[i].value),
        }
    }
}

impl<T: Real> Model<T> {
    /// Builds and initializes the network deterministically from `seed`, then
    /// runs a smoke backward pass to confirm every parameter can receive a
    /// gradient.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = Self::init(config, seed)?;
        model.check_gradient_flow(seed)?;
        Ok(model)
    }

    /// Initialization without the gradient-flow check.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            stats: Vec::new(),
        };
        let base = config.base_channels;
        let stem = b.module("stem", config.input_channels, base, 1);
        let branches: Vec<ModuleSlots> = config
            .dilation_set
            .iter()
            .map(|&l| b.module(&format!("dilated{l}"), base, base, l))
            .collect();
        let mut channels = base * branches.len();
        let mut dense = Vec::with_capacity(DENSE_BLOCKS);
        for i in 0..DENSE_BLOCKS {
            dense.push(b.module(&format!("dense{i}"), channels, config.growth, 1));
            channels += config.growth;
        }
        let skip = b.module("skip", config.input_channels / 2, base, 1);
        let mut decoder = Vec::with_capacity(config.decoder_steps());
        for s in 0..config.decoder_steps() {
            decoder.push(b.module(&format!("decoder{s}"), channels + base, base, 1));
            channels = base;
        }
        let head_kernel = b.kernel("head/conv.kernel".into(), 1, base, 1);
        let head_bias = b.param("head/conv.bias".into(), Tensor::zeros(Shape::new(1, 1, 1, 1)));
        Ok(Model {
            config,
            params: b.params,
            stats: b.stats,
            layout: Layout {
                stem,
                branches,
                dense,
                skip,
                decoder,
                head_kernel,
                head_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Named<Tensor<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named<Tensor<T>>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[Named<RunningStats<T>>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [Named<RunningStats<T>>] {
        &mut self.stats
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.input(p.value.clone())
                }
            })
            .collect()
    }

    /// Checks that `left` and `right` form a valid input pair.
    pub fn check_input(&self, left: Shape, right: Shape) -> Result<()> {
        if left != right {
            return Err(Error::shape(format!("left {left:?} and right {right:?} differ")));
        }
        if left.c() * 2 != self.config.input_channels {
            return Err(Error::shape(format!("expected RGB views, got {left:?}")));
        }
        let k = self.config.downscale;
        if left.h() == 0 || left.w() == 0 || left.h() % k != 0 || left.w() % k != 0 {
            return Err(Error::shape(format!(
                "spatial extent {}x{} is not a positive multiple of {k}",
                left.h(),
                left.w()
            )));
        }
        Ok(())
    }

    /// Train-mode forward: batch statistics, running-stat updates, dropout.
    pub fn forward_train(&mut self, g: &mut Graph<T>, params: &[Var], left: Var, right: Var, dropout_seed: u64) -> Result<Var> {
        self.check_input(g.shape(left), g.shape(right))?;
        let stats = StatsSet::Train(&mut self.stats);
        run(&self.config, &self.layout, g, params, stats, left, right, dropout_seed)
    }

    /// Eval-mode forward using running statistics; does not touch the model.
    pub fn forward_eval(&self, g: &mut Graph<T>, params: &[Var], left: Var, right: Var) -> Result<Var> {
        self.check_input(g.shape(left), g.shape(right))?;
        let stats = StatsSet::Eval(&self.stats);
        run(&self.config, &self.layout, g, params, stats, left, right, 0)
    }

    /// Forward pass on plain tensors; returns `(batch, 1, H, W)` values in (0, 1).
    pub fn forward(&mut self, left: &Tensor<T>, right: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let (l, r) = (g.input(left.clone()), g.input(right.clone()));
        let out = match mode {
            Mode::Train => self.forward_train(&mut g, &params, l, r, dropout_seed)?,
            Mode::Eval => self.forward_eval(&mut g, &params, l, r)?,
        };
        Ok(g.value(out).clone())
    }

    /// Eval-mode prediction.
    pub fn predict(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let (l, r) = (g.input(left.clone()), g.input(right.clone()));
        let out = self.forward_eval(&mut g, &params, l, r)?;
        Ok(g.value(out).clone())
    }

    /// Runs train-mode backward passes on random inputs until every parameter
    /// has received a nonzero gradient; errors naming the first parameter that
    /// never does.
    pub fn check_gradient_flow(&self, seed: u64) -> Result<()> {
        const ATTEMPTS: u64 = 3;
        let side = 2 * self.config.downscale;
        let shape = Shape::new(2, self.config.input_channels / 2, side, side);
        let mut alive = vec![false; self.params.len()];
        let mut scratch = self.clone();
        for attempt in 0..ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5eed + attempt));
            let mut random = |shape: Shape| {
                Tensor::new(shape, (0..shape.numel()).map(|_| T::of(rng.random::<f64>())).collect())
                    .expect("shape")
            };
            let (lt, rt) = (random(shape), random(shape));
            let mut g = Graph::new();
            let params = scratch.bind(&mut g, true);
            let (l, r) = (g.input(lt), g.input(rt));
            let out = scratch.forward_train(&mut g, &params, l, r, attempt)?;
            let upstream = random(g.shape(out)).map(|v| v - T::of(0.5));
            let grads = g.backward_from(out, upstream)?;
            for (flag, &v) in alive.iter_mut().zip(&params) {
                *flag |= grads.get(v).is_some_and(|t| t.data().iter().any(|&x| x != T::zero()));
            }
            if alive.iter().all(|&a| a) {
                return Ok(());
            }
        }
        let dead = alive.iter().position(|&a| !a).expect("some parameter is dead");
        Err(Error::config(format!(
            "parameter `{}` received no gradient in {ATTEMPTS} smoke passes",
            self.params[dead].name
        )))
    }
}

fn module_vars(params: &[Var], m: &ModuleSlots) -> ConvModuleVars {
    ConvModuleVars {
        kernel: params[m.kernel],
        gamma: params[m.gamma],
        beta: params[m.beta],
        geometry: m.geometry,
    }
}

#[allow(clippy::too_many_arguments)]
fn run<T: Real>(
    config: &ModelConfig,
    layout: &Layout,
    g: &mut Graph<T>,
    params: &[Var],
    mut stats: StatsSet<'_, T>,
    left: Var,
    right: Var,
    dropout_seed: u64,
) -> Result<Var> {
    // correspondence trunk at 1/downscale
    let pair = g.concat(&[left, right])?;
    let x = conv_module(g, pair, &module_vars(params, &layout.stem), stats.get(layout.stem.stats))?;
    let x = g.maxpool(x, config.downscale)?;
    let mut branch_out = Vec::with_capacity(layout.branches.len());
    for m in &layout.branches {
        branch_out.push(conv_module(g, x, &module_vars(params, m), stats.get(m.stats))?);
    }
    let mut x = g.concat(&branch_out)?;
    for (i, m) in layout.dense.iter().enumerate() {
        let seed = mix_seed(dropout_seed, i as u64 + 1);
        x = dense_block(g, x, &module_vars(params, m), stats.get(m.stats), config.dropout_rate, seed)?;
    }

    // left-image features, pooled to each decoder scale
    let skip = conv_module(g, left, &module_vars(params, &layout.skip), stats.get(layout.skip.stats))?;
    for (s, m) in layout.decoder.iter().enumerate() {
        x = g.upsample2x(x);
        let factor = config.downscale >> (s + 1);
        let skip_s = g.maxpool(skip, factor)?;
        let merged = g.concat(&[x, skip_s])?;
        x = conv_module(g, merged, &module_vars(params, m), stats.get(m.stats))?;
    }
    let logits = g.conv2d(
        x,
        params[layout.head_kernel],
        Some(params[layout.head_bias]),
        ConvGeometry::default(),
    )?;
    Ok(g.sigmoid(logits))
}
