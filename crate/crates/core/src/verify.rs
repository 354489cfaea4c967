//! Gradient checks for every differentiable operation and the loss chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{AdjustmentParams, CameraRig};
use crate::loss::{total_loss, LossConfig, Projection, TargetMode};
use crate::model::{conv_module, dense_block, ConvModuleVars, Stats};
use crate::ops::{ConvGeometry, Mode, Padding, RunningStats};
use crate::tensor::{grad_check, Shape, Tensor, GRAD_CHECK_EPS};

/// Acceptance threshold for the relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: &'static str,
    /// Largest relative error over all seeds.
    pub max_error: f64,
    pub seeds: usize,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < GRAD_TOLERANCE
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Values at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// A permutation of well separated levels, so perturbations never change
/// which element is largest.
fn distinct(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let n = shape.numel();
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - 0.05 * n as f64).collect();
    for i in (1..n).rev() {
        levels.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, levels).expect("shape")
}

const S: Shape = Shape([2, 2, 3, 4]);

fn case_add(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, -1.0, 1.0), uniform(rng, S, -1.0, 1.0)];
    grad_check(|g, v| g.add(v[0], v[1]), &inputs, GRAD_CHECK_EPS)
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, -1.0, 1.0), uniform(rng, S, -1.0, 1.0)];
    grad_check(|g, v| g.mul(v[0], v[1]), &inputs, GRAD_CHECK_EPS)
}

fn case_affine(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, -1.0, 1.0)];
    grad_check(|g, v| Ok(g.affine(v[0], 1.7, -0.3)), &inputs, GRAD_CHECK_EPS)
}

fn case_pow(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, 0.2, 1.0)];
    grad_check(|g, v| Ok(g.pow(v[0], 1.0 / 1.5, 1e-6)), &inputs, GRAD_CHECK_EPS)
}

fn case_reciprocal(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, 0.5, 2.0)];
    grad_check(|g, v| Ok(g.reciprocal(v[0], 4.0)), &inputs, GRAD_CHECK_EPS)
}

fn case_clamp(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [away_from(rng, S, -1.0, 1.0, &[-0.5, 0.5], 1e-3)];
    grad_check(|g, v| Ok(g.clamp(v[0], -0.5, 0.5)), &inputs, GRAD_CHECK_EPS)
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [away_from(rng, S, -1.0, 1.0, &[0.0], 1e-3)];
    grad_check(|g, v| Ok(g.relu(v[0])), &inputs, GRAD_CHECK_EPS)
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, -3.0, 3.0)];
    grad_check(|g, v| Ok(g.sigmoid(v[0])), &inputs, GRAD_CHECK_EPS)
}

fn case_sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, -1.0, 1.0)];
    grad_check(|g, v| Ok(g.sum(v[0])), &inputs, GRAD_CHECK_EPS)
}

fn case_mse(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, -1.0, 1.0), uniform(rng, S, -1.0, 1.0)];
    grad_check(|g, v| g.mse(v[0], v[1]), &inputs, GRAD_CHECK_EPS)
}

fn case_masked_mse(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, -1.0, 1.0), uniform(rng, S, -1.0, 1.0)];
    let pixels = S.n() * S.plane();
    let mut mask: Vec<bool> = (0..pixels).map(|_| rng.random_bool(0.6)).collect();
    mask[0] = true;
    grad_check(|g, v| Ok(g.masked_mse(v[0], v[1], mask.clone())?.0), &inputs, GRAD_CHECK_EPS)
}

fn case_weighted_sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, -1.0, 1.0), uniform(rng, S, -1.0, 1.0)];
    grad_check(
        |g, v| {
            let (a, b) = (g.sum(v[0]), g.mse(v[0], v[1])?);
            g.weighted_sum(&[(a, 0.7), (b, 1.3)])
        },
        &inputs,
        GRAD_CHECK_EPS,
    )
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dilation = rng.random_range(1..=4);
    let stride = rng.random_range(1..=2);
    let k = 3;
    let reach = dilation * (k - 1);
    let side = reach + 3;
    let pad = rng.random_range(0..=reach / 2);
    let geometry = ConvGeometry {
        stride,
        dilation,
        padding: Padding::uniform(pad),
    };
    let inputs = [
        uniform(rng, Shape::new(2, 2, side, side), -1.0, 1.0),
        uniform(rng, Shape::new(3, 2, k, k), -1.0, 1.0),
        uniform(rng, Shape::new(1, 3, 1, 1), -1.0, 1.0),
    ];
    grad_check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), geometry), &inputs, GRAD_CHECK_EPS)
}

fn case_batchnorm_train(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = Shape::new(3, 2, 2, 3);
    let inputs = [
        uniform(rng, shape, -1.0, 1.0),
        uniform(rng, Shape::new(1, 2, 1, 1), 0.5, 1.5),
        uniform(rng, Shape::new(1, 2, 1, 1), -0.5, 0.5),
    ];
    grad_check(
        |g, v| {
            let mut stats = RunningStats::new(2);
            g.batchnorm_train(v[0], v[1], v[2], &mut stats)
        },
        &inputs,
        GRAD_CHECK_EPS,
    )
}

fn case_batchnorm_eval(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = Shape::new(3, 2, 2, 3);
    let mut stats = RunningStats::new(2);
    stats.mean = uniform(rng, Shape::new(1, 2, 1, 1), -0.5, 0.5);
    stats.var = uniform(rng, Shape::new(1, 2, 1, 1), 0.5, 2.0);
    let inputs = [
        uniform(rng, shape, -1.0, 1.0),
        uniform(rng, Shape::new(1, 2, 1, 1), 0.5, 1.5),
        uniform(rng, Shape::new(1, 2, 1, 1), -0.5, 0.5),
    ];
    grad_check(|g, v| g.batchnorm_eval(v[0], v[1], v[2], &stats), &inputs, GRAD_CHECK_EPS)
}

fn case_maxpool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [distinct(rng, Shape::new(2, 2, 4, 4))];
    grad_check(|g, v| g.maxpool(v[0], 2), &inputs, GRAD_CHECK_EPS)
}

fn case_upsample(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, -1.0, 1.0)];
    grad_check(|g, v| Ok(g.upsample2x(v[0])), &inputs, GRAD_CHECK_EPS)
}

fn case_concat(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [uniform(rng, S, -1.0, 1.0), uniform(rng, Shape::new(2, 3, 3, 4), -1.0, 1.0)];
    grad_check(|g, v| g.concat(&[v[0], v[1]]), &inputs, GRAD_CHECK_EPS)
}

fn case_dropout(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.random();
    let inputs = [uniform(rng, S, -1.0, 1.0)];
    grad_check(|g, v| g.dropout(v[0], 0.3, Mode::Train, seed), &inputs, GRAD_CHECK_EPS)
}

/// Disparities whose fractional part stays clear of the integer kinks of
/// linear interpolation.
fn safe_disparity(rng: &mut ChaCha8Rng, shape: Shape, max: usize) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| rng.random_range(0..max) as f64 + rng.random_range(0.1..0.9))
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn case_warp(rng: &mut ChaCha8Rng) -> Result<f64> {
    let source = uniform(rng, Shape::new(2, 3, 3, 8), 0.0, 1.0);
    let inputs = [safe_disparity(rng, Shape::new(2, 1, 3, 8), 4)];
    grad_check(
        |g, v| {
            let s = g.input(source.clone());
            Ok(g.warp_rows(s, v[0])?.0)
        },
        &inputs,
        GRAD_CHECK_EPS,
    )
}

fn module_inputs(rng: &mut ChaCha8Rng, cin: usize, cout: usize, dilation: usize) -> ([Tensor<f64>; 4], ConvGeometry) {
    (
        [
            uniform(rng, Shape::new(2, cin, 5, 5), -1.0, 1.0),
            uniform(rng, Shape::new(cout, cin, 3, 3), -1.0, 1.0),
            uniform(rng, Shape::new(1, cout, 1, 1), 0.5, 1.5),
            uniform(rng, Shape::new(1, cout, 1, 1), -0.5, 0.5),
        ],
        ConvGeometry::same(3, dilation),
    )
}

fn vars(v: &[crate::tensor::Var], geometry: ConvGeometry) -> ConvModuleVars {
    ConvModuleVars {
        kernel: v[1],
        gamma: v[2],
        beta: v[3],
        geometry,
    }
}

fn case_conv_module(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dilation = rng.random_range(1..=2);
    let (inputs, geometry) = module_inputs(rng, 2, 3, dilation);
    grad_check(
        |g, v| {
            let mut stats = RunningStats::new(3);
            conv_module(g, v[0], &vars(v, geometry), Stats::Train(&mut stats))
        },
        &inputs,
        GRAD_CHECK_EPS,
    )
}

fn case_dense_block(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.random();
    let (inputs, geometry) = module_inputs(rng, 3, 2, 1);
    grad_check(
        |g, v| {
            let mut stats = RunningStats::new(2);
            dense_block(g, v[0], &vars(v, geometry), Stats::Train(&mut stats), 0.2, seed)
        },
        &inputs,
        GRAD_CHECK_EPS,
    )
}

fn loss_chain(rng: &mut ChaCha8Rng, mode: TargetMode, p: f64) -> Result<f64> {
    let rig = CameraRig::default();
    let adjustment = AdjustmentParams::new(p)?;
    let plane = Shape::new(2, 1, 3, 8);
    // predictions chosen through their disparity so warping stays off the
    // interpolation kinks and the depth clamp
    let d = safe_disparity(rng, plane, 4).map(|d| d.max(0.5));
    let pred = d.map(|d| {
        let zn = match mode {
            TargetMode::Depth => 1.0 - rig.fb() / d / rig.z_max(),
            TargetMode::Disparity => d / rig.d_max(),
        };
        zn.powf(p)
    });
    let target = uniform(rng, plane, 0.0, 1.0);
    let left = uniform(rng, Shape::new(2, 3, 3, 8), 0.0, 1.0);
    let right = uniform(rng, Shape::new(2, 3, 3, 8), 0.0, 1.0);
    let projection = Projection { rig, adjustment, mode };
    let config = LossConfig {
        alpha_z: 1.0,
        alpha_p: 1.0,
        enable_projection: true,
    };
    grad_check(
        |g, v| {
            let (l, r) = (g.input(left.clone()), g.input(right.clone()));
            Ok(total_loss(g, v[0], v[1], l, r, &projection, &config)?.0.total)
        },
        &[pred, target],
        GRAD_CHECK_EPS,
    )
}

fn case_loss_depth(rng: &mut ChaCha8Rng) -> Result<f64> {
    loss_chain(rng, TargetMode::Depth, 1.5)
}

fn case_loss_disparity(rng: &mut ChaCha8Rng) -> Result<f64> {
    loss_chain(rng, TargetMode::Disparity, 1.0)
}

pub const CASES: &[(&str, Case)] = &[
    ("add", case_add),
    ("mul", case_mul),
    ("affine", case_affine),
    ("pow", case_pow),
    ("reciprocal", case_reciprocal),
    ("clamp", case_clamp),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("sum", case_sum),
    ("mse", case_mse),
    ("masked_mse", case_masked_mse),
    ("weighted_sum", case_weighted_sum),
    ("conv2d", case_conv2d),
    ("batchnorm_train", case_batchnorm_train),
    ("batchnorm_eval", case_batchnorm_eval),
    ("maxpool", case_maxpool),
    ("upsample2x", case_upsample),
    ("concat", case_concat),
    ("dropout", case_dropout),
    ("warp_rows", case_warp),
    ("conv_module", case_conv_module),
    ("dense_block", case_dense_block),
    ("loss_chain_depth", case_loss_depth),
    ("loss_chain_disparity", case_loss_disparity),
];

/// Runs every case for `seeds` consecutive seeds starting at `base_seed`.
pub fn gradient_suite(base_seed: u64, seeds: usize) -> Result<Vec<GradCheckResult>> {
    CASES
        .iter()
        .enumerate()
        .map(|(i, &(name, case))| {
            let mut max_error = 0.0f64;
            for s in 0..seeds as u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(s) ^ ((i as u64) << 32));
                max_error = max_error.max(case(&mut rng)?);
            }
            Ok(GradCheckResult { name, max_error, seeds })
        })
        .collect()
}
