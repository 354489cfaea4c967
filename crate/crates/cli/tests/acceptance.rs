//! Acceptance suite: one PASS/FAIL line per criterion, run sequentially so
//! the timing budgets are measured on an otherwise idle core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereodepth::data::{
    decode_pfm, decode_ppm, encode_pfm, encode_ppm, generate_dataset, generate_scene, render_scene, DatasetConfig,
    Layer, Scene, SceneConfig, StereoSample, TextureParams,
};
use stereodepth::geometry::{
    adjust, fit_exponent, invert_adjust, reconstruct_left, synthesize_right, AdjustmentParams, CameraRig,
    DisparityMap, FIT_DEFAULT_BINS,
};
use stereodepth::loss::{LossConfig, TargetMode};
use stereodepth::model::{Model, ModelConfig};
use stereodepth::ops::{conv2d, ConvGeometry, ConvSpec, Padding};
use stereodepth::tensor::{Shape, Tensor};
use stereodepth::train::{train, AdamConfig, AdamState, Checkpoint, TrainConfig};
use stereodepth::verify::{gradient_suite, GRAD_TOLERANCE};

/// Exponent chosen by an independent numpy grid search over the same
/// stratified mixture (100 points uniform on [0, 1], 900 uniform on
/// [0.8, 1], 32 bins, p = 1 + 0.05k for k = 0..=60).
const MIXTURE_ORACLE_P: f64 = 3.95;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradient_criterion() -> Outcome {
    let started = Instant::now();
    let results = gradient_suite(0, 5).expect("gradient suite runs");
    let elapsed = started.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
        .expect("non-empty suite");
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    outcome(
        failing.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} ops x 5 seeds, worst relative error {} at {:.2e} (tolerance {GRAD_TOLERANCE:e}), failing {failing:?}, {:.1}s",
            results.len(),
            worst.name,
            worst.max_error,
            elapsed.as_secs_f64()
        ),
    )
}

/// Direct summation of `(F *_l k)(p) = sum_{s + l t = p} F(s) k(t)`.
///
/// The stored kernel is applied as a correlation, so tap `t` of the sum is
/// stored tap `K - 1 - t`, and output position `p` in the padded, strided
/// frame sits at `p * stride - pad + l (K - 1)` in input coordinates.
fn brute_force_conv(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>, g: ConvGeometry) -> Tensor<f64> {
    let (is, ks) = (input.shape(), kernel.shape());
    let l = g.dilation;
    let out_h = (is.h() + g.padding.top + g.padding.bottom - l * (ks.h() - 1) - 1) / g.stride + 1;
    let out_w = (is.w() + g.padding.left + g.padding.right - l * (ks.w() - 1) - 1) / g.stride + 1;
    let mut out = Tensor::zeros(Shape::new(is.n(), ks.n(), out_h, out_w));
    for n in 0..is.n() {
        for o in 0..ks.n() {
            for py in 0..out_h {
                for px in 0..out_w {
                    let ay = (py * g.stride + l * (ks.h() - 1)) as i64 - g.padding.top as i64;
                    let ax = (px * g.stride + l * (ks.w() - 1)) as i64 - g.padding.left as i64;
                    let mut acc = bias.at(0, o, 0, 0);
                    for c in 0..is.c() {
                        for sy in 0..is.h() {
                            for sx in 0..is.w() {
                                for ty in 0..ks.h() {
                                    for tx in 0..ks.w() {
                                        if sy as i64 + (l * ty) as i64 == ay && sx as i64 + (l * tx) as i64 == ax {
                                            let k = kernel.at(o, c, ks.h() - 1 - ty, ks.w() - 1 - tx);
                                            acc += input.at(n, c, sy, sx) * k;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out.set(n, o, py, px, acc);
                }
            }
        }
    }
    out
}

fn conv_oracle_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut dilations = [0usize; 5];
    for _ in 0..50 {
        let l = rng.random_range(1..=4);
        dilations[l] += 1;
        let (kh, kw) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let padding = Padding {
            top: rng.random_range(0..=l * (kh - 1)),
            bottom: rng.random_range(0..=l * (kh - 1)),
            left: rng.random_range(0..=l * (kw - 1)),
            right: rng.random_range(0..=l * (kw - 1)),
        };
        let geometry = ConvGeometry {
            stride: rng.random_range(1..=2),
            dilation: l,
            padding,
        };
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let h = l * (kh - 1) + 1 + rng.random_range(0..=5);
        let w = l * (kw - 1) + 1 + rng.random_range(0..=5);
        let mut random = |shape: Shape| {
            Tensor::new(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let input = random(Shape::new(n, cin, h, w));
        let kernel = random(Shape::new(cout, cin, kh, kw));
        let bias = random(Shape::new(1, cout, 1, 1));
        let expected = brute_force_conv(&input, &kernel, &bias, geometry);
        let spec = ConvSpec {
            kernel,
            bias: Some(bias),
            geometry,
        };
        let got = conv2d(&input, &spec).expect("valid configuration");
        assert_eq!(got.shape(), expected.shape());
        for (a, b) in got.data().iter().zip(expected.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst < 1e-10,
        format!(
            "50 configurations (dilation counts 1-4: {:?}), max abs error {worst:.2e}",
            &dilations[1..]
        ),
    )
}

fn adjustment_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for p in [1.0, 1.5, 2.0, 3.0] {
        let params = AdjustmentParams::new(p).unwrap();
        for _ in 0..10_000 {
            let z: f64 = rng.random();
            worst = worst.max((invert_adjust(adjust(z, params), params) - z).abs());
        }
    }
    // stretch: the adjusted map has slope above 1 exactly past the threshold
    let mut mismatches = 0;
    let mut checked = 0;
    for p in [1.5, 2.0, 3.0] {
        let params = AdjustmentParams::new(p).unwrap();
        let threshold = (1.0 / p).powf(1.0 / (p - 1.0));
        assert_eq!(params.stretch_threshold(), Some(threshold));
        for k in 0..1000 {
            let z = (k as f64 + 0.5) / 1000.0;
            let h = 1e-6;
            let slope = (adjust(z + h, params) - adjust(z - h, params)) / (2.0 * h);
            if (slope - 1.0).abs() < 1e-6 {
                continue;
            }
            checked += 1;
            let algebraic = p * z.powf(p - 1.0) > 1.0;
            if (slope > 1.0) != (z > threshold) || algebraic != (z > threshold) {
                mismatches += 1;
            }
        }
    }
    outcome(
        worst < 1e-12 && mismatches == 0,
        format!("roundtrip max error {worst:.2e} on 4 x 10^4 values; stretch rule mismatches {mismatches}/{checked}"),
    )
}

fn warping_criterion() -> Outcome {
    let rig = CameraRig::default();
    // zero disparity reproduces the source bit for bit
    let mut exact = true;
    let mut maes = Vec::new();
    for seed in 0..20 {
        let sample = generate_scene(
            &SceneConfig {
                seed: 4000 + seed,
                ..Default::default()
            },
            &rig,
        )
        .unwrap();
        let zero = DisparityMap::constant(sample.height(), sample.width(), 0.0);
        exact &= reconstruct_left(&sample.right, &zero).unwrap().0 == sample.right;
        let (rec, _) = reconstruct_left(&sample.right, &sample.ground_truth.disparity(&rig)).unwrap();
        let mask = sample.occlusion.as_ref().unwrap();
        let plane = sample.height() * sample.width();
        let (mut sum, mut count) = (0.0, 0usize);
        for (k, &visible) in mask.iter().enumerate() {
            if visible {
                for c in 0..3 {
                    sum += (rec.data()[c * plane + k] - sample.left.data()[c * plane + k]).abs();
                    count += 1;
                }
            }
        }
        maes.push(sum / count as f64);
    }
    let worst_mae = maes.iter().cloned().fold(0.0, f64::max);

    // hole bands on single-rectangle scenes: fB = 8 so these depths give
    // exact integer disparities
    let band_rig = CameraRig::new(8.0, 1.0, 0.25, 16.0).unwrap();
    let mut band_errors = Vec::new();
    for (d_fg, d_bg) in [(2.0, 1.0), (4.0, 1.0), (4.0, 2.0), (8.0, 2.0), (8.0, 4.0), (16.0, 8.0)] {
        let (w, h) = (64usize, 12usize);
        let layer = Layer {
            x0: 30,
            y0: 3,
            width: 12,
            height: 5,
            depth: 8.0 / d_fg,
        };
        let scene = Scene {
            height: h,
            width: w,
            background_depth: 8.0 / d_bg,
            layers: vec![layer],
            texture: TextureParams::default(),
            texture_seed: d_fg as u64,
        };
        let sample = render_scene(&scene, &band_rig, TargetMode::Disparity).unwrap();
        let synth = synthesize_right(&sample.left, &sample.ground_truth.disparity(&band_rig), None).unwrap();
        let gap = (d_fg - d_bg) as usize;
        for y in layer.y0..layer.y0 + layer.height {
            // holes inside the image, away from the right border
            let row = &synth.holes[y * w..(y + 1) * w];
            let interior = w - d_bg as usize;
            let band: Vec<usize> = (0..interior).filter(|&x| row[x]).collect();
            let start = layer.x0 + layer.width - d_fg as usize;
            let expected: Vec<usize> = (start..start + gap).collect();
            if band != expected {
                band_errors.push(format!("d_fg {d_fg} d_bg {d_bg} row {y}: {band:?}"));
            }
        }
    }
    outcome(
        exact && worst_mae < 2.0 / 255.0 && band_errors.is_empty(),
        format!(
            "zero-disparity exact: {exact}; GT reconstruction MAE worst {:.3}/255 over 20 scenes; hole bands {} of 6 gaps correct {:?}",
            worst_mae * 255.0,
            6 - band_errors.len().min(6),
            band_errors
        ),
    )
}

fn scenes(count: usize, seed: u64, size: usize, depth_range: (f64, f64)) -> Vec<StereoSample> {
    let config = DatasetConfig {
        count,
        scene: SceneConfig {
            seed,
            height: size,
            width: size,
            depth_range,
            ..Default::default()
        },
    };
    generate_dataset(&config, &CameraRig::default()).unwrap()
}

fn overfit_criterion() -> Outcome {
    let train_set = scenes(8, 500, 64, (0.5, 10.0));
    let val_set = scenes(4, 501, 64, (0.5, 10.0));
    let config = TrainConfig {
        iterations: 2000,
        batch_size: 4,
        seed: 0,
        loss: LossConfig::default(),
        adjustment: AdjustmentParams::new(1.5).unwrap(),
        eval_every: 10,
        eval_train: true,
        target_train_epe: Some(0.05),
        ..Default::default()
    };
    let started = Instant::now();
    let model = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
    let out = train(model, &train_set, &val_set, &config).unwrap();
    let elapsed = started.elapsed();
    let records = &out.history.records;
    let first = records.iter().find(|r| r.iteration == 10).expect("evaluation at iteration 10");
    let last = records.last().unwrap();
    let train_epe = last.train.unwrap().epe_normalized;
    let (v10, vend) = (first.validation.unwrap().loss, last.validation.unwrap().loss);
    outcome(
        train_epe < 0.05 && vend < v10 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "training EPE {train_epe:.4} at iteration {}; validation loss {v10:.5} at 10 -> {vend:.5} at end; {:.0}s",
            last.iteration,
            elapsed.as_secs_f64()
        ),
    )
}

struct AblationRun {
    val_loss: f64,
    val_epe: f64,
}

fn ablation_run(seed: u64, p: f64, alpha_p: f64) -> AblationRun {
    // near-object-heavy scenes: every layer within 3 m of a 10 m rig
    let train_set = scenes(16, 100 + seed, 32, (0.5, 3.0));
    let val_set = scenes(8, 200 + seed, 32, (0.5, 3.0));
    let model_config = ModelConfig {
        base_channels: 8,
        growth: 8,
        ..Default::default()
    };
    let config = TrainConfig {
        iterations: 400,
        eval_every: 400,
        seed,
        adjustment: AdjustmentParams::new(p).unwrap(),
        loss: LossConfig {
            alpha_p,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = Model::<f32>::build(model_config, seed).unwrap();
    let out = train(model, &train_set, &val_set, &config).unwrap();
    let v = out.history.records.last().unwrap().validation.unwrap();
    AblationRun {
        val_loss: v.loss,
        val_epe: v.epe_normalized,
    }
}

fn ablation_criteria() -> (Outcome, Outcome) {
    let mut headline = Vec::new();
    let mut no_adjust = Vec::new();
    let mut no_projection = Vec::new();
    for seed in 0..5 {
        headline.push(ablation_run(seed, 1.5, 1.0));
        no_adjust.push(ablation_run(seed, 1.0, 1.0));
        no_projection.push(ablation_run(seed, 1.5, 0.0));
    }
    let loss = |v: &[AblationRun]| median(v.iter().map(|r| r.val_loss).collect());
    let epe = |v: &[AblationRun]| median(v.iter().map(|r| r.val_epe).collect());
    let (l15, l1) = (loss(&headline), loss(&no_adjust));
    let (e1, e0) = (epe(&headline), epe(&no_projection));
    (
        outcome(
            l15 <= l1,
            format!("median validation loss over 5 seeds: p=1.5 {l15:.5}, p=1 {l1:.5}"),
        ),
        outcome(
            e1 <= e0,
            format!("median validation EPE (normalized) over 5 seeds: alpha_p=1 {e1:.4}, alpha_p=0 {e0:.4}"),
        ),
    )
}

fn exponent_criterion() -> Outcome {
    let uniform: Vec<f64> = (0..1000).map(|k| (k as f64 + 0.5) / 1000.0).collect();
    let p_uniform = fit_exponent(&uniform, FIT_DEFAULT_BINS).unwrap().p();
    let mut mixture: Vec<f64> = (0..100).map(|k| (k as f64 + 0.5) / 100.0).collect();
    mixture.extend((0..900).map(|k| 0.8 + 0.2 * (k as f64 + 0.5) / 900.0));
    let p_mixture = fit_exponent(&mixture, FIT_DEFAULT_BINS).unwrap().p();
    outcome(
        p_uniform == 1.0 && (p_mixture - MIXTURE_ORACLE_P).abs() < 1e-9,
        format!("uniform -> p={p_uniform}; mixture -> p={p_mixture} (oracle {MIXTURE_ORACLE_P})"),
    )
}

fn roundtrip_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = Shape::new(1, 1, 13, 17);
    let map = Tensor::new(s, (0..s.numel()).map(|_| rng.random_range(0.0..50.0f32) as f64).collect()).unwrap();
    let pfm = decode_pfm(&encode_pfm(&map).unwrap()).unwrap() == map;
    let s = Shape::new(1, 3, 11, 7);
    let image =
        Tensor::new(s, (0..s.numel()).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect()).unwrap();
    let ppm = decode_ppm(&encode_ppm(&image).unwrap()).unwrap() == image;

    let mut model = Model::<f32>::build(ModelConfig::default(), 4).unwrap();
    let left = Tensor::new(Shape::new(1, 3, 32, 32), (0..3072).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap();
    let right = left.map(|v| 1.0 - v);
    model.forward(&left, &right, stereodepth::ops::Mode::Train, 1).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), model.params().iter().map(|p| &p.value));
    adam.t = 3;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ck");
    let before = model.predict(&left, &right).unwrap();
    let original = Checkpoint::capture(&model, Some(&adam), &[]);
    original.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let restored: Model<f32> = loaded.model().unwrap();
    let ck = loaded == original
        && restored.params() == model.params()
        && restored.running_stats() == model.running_stats()
        && loaded.adam_state(&restored).unwrap().as_ref() == Some(&adam);
    let forward = restored.predict(&left, &right).unwrap() == before;
    outcome(
        pfm && ppm && ck && forward,
        format!("PFM {pfm}, PPM {ppm}, checkpoint {ck}, eval forward identical {forward}"),
    )
}

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_stereodepth"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "`stereodepth {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn same_files(a: &Path, b: &Path) -> Result<usize, String> {
    let list = |d: &Path| {
        let mut v: Vec<String> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    let (la, lb) = (list(a), list(b));
    if la != lb {
        return Err(format!("file sets differ: {la:?} vs {lb:?}"));
    }
    for name in &la {
        if std::fs::read(a.join(name)).unwrap() != std::fs::read(b.join(name)).unwrap() {
            return Err(format!("{name} differs"));
        }
    }
    Ok(la.len())
}

fn determinism_criterion() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let mut notes = Vec::new();
    let mut ok = true;
    for run in ["data_a", "data_b"] {
        cli(&["gen-data", "--seed", "7", "--count", "10", "--size", "32", "--out", &p(run)]);
    }
    for run in ["train_a", "train_b"] {
        cli(&[
            "train", "--data", &p("data_a"), "--out", &p(run), "--seed", "3", "--iterations", "20", "--eval-every",
            "10", "--base-channels", "8", "--growth", "8",
        ]);
    }
    for run in ["eval_a", "eval_b"] {
        let ck = dir.path().join("train_a").join("best.ck");
        cli(&["eval", "--checkpoint", &ck.to_string_lossy(), "--data", &p("data_a"), "--out", &p(run)]);
    }
    for (a, b) in [("data_a", "data_b"), ("train_a", "train_b"), ("eval_a", "eval_b")] {
        match same_files(&dir.path().join(a), &dir.path().join(b)) {
            Ok(n) => notes.push(format!("{}: {n} files identical", a.trim_end_matches("_a"))),
            Err(e) => {
                ok = false;
                notes.push(format!("{}: {e}", a.trim_end_matches("_a")));
            }
        }
    }
    outcome(ok, notes.join("; "))
}

fn bench_criterion() -> Outcome {
    let out = cli(&["bench", "--size", "256", "--repeats", "3"]);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let latency = text
        .split("mean ")
        .nth(1)
        .and_then(|rest| rest.split(" ms").next())
        .and_then(|v| v.parse::<f64>().ok());
    match latency {
        Some(ms) if ms.is_finite() && ms > 0.0 => outcome(true, format!("recorded {ms:.2} ms per 256x256 pair (no target)")),
        _ => outcome(false, format!("no latency in output: {text:?}")),
    }
}

fn main() {
    // `cargo test` forwards filter and listing flags; this suite ignores them
    // except for `--list`, which expects an empty listing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let started = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {id:>2} [{}] {name}: {} ({:.1}s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
        results.push((id, name, o));
    };
    run(1, "gradient suite", &gradient_criterion);
    run(2, "dilated convolution oracle", &conv_oracle_criterion);
    run(3, "adjustment algebra", &adjustment_criterion);
    run(4, "warping identities", &warping_criterion);
    run(5, "overfit", &overfit_criterion);
    let ablations = std::cell::RefCell::new(None);
    let ablation = |pick: usize| {
        let mut cached = ablations.borrow_mut();
        let (a, b) = cached.get_or_insert_with(ablation_criteria);
        let o = if pick == 0 { a } else { b };
        outcome(o.passed, o.detail.clone())
    };
    run(6, "depth-adjustment ablation", &|| ablation(0));
    run(7, "projection-loss ablation", &|| ablation(1));
    run(8, "exponent fitting", &exponent_criterion);
    run(9, "codec and checkpoint roundtrips", &roundtrip_criterion);
    run(10, "determinism", &determinism_criterion);
    run(11, "bench latency", &bench_criterion);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
