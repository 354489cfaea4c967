//! The `stereodepth` command line.
//!
//! Every subcommand resolves its settings from flags, an optional
//! `--config` file and built-in defaults (in that order of precedence),
//! prints the result, and writes it as `run.cfg` next to its outputs.

mod settings;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Command;
use stereodepth::data::{
    generate_dataset, read_dataset, split_dataset, write_dataset, write_pfm, write_ppm, DatasetConfig, SceneConfig,
    StereoSample, mask_image,
};
use stereodepth::geometry::{fit_exponent, synthesize_right, AdjustmentParams, CameraRig, FIT_DEFAULT_BINS};
use stereodepth::loss::{LossConfig, TargetMode};
use stereodepth::metrics::{evaluate, recover};
use stereodepth::model::{Model, ModelConfig};
use stereodepth::tensor::{Shape, Tensor};
use stereodepth::train::{train, AdamConfig, Checkpoint, TrainConfig};
use stereodepth::verify::{gradient_suite, GRAD_TOLERANCE};

pub use settings::{Settings, COMMANDS};

/// File name of the resolved configuration written by each subcommand.
pub const RUN_CONFIG: &str = "run.cfg";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] stereodepth::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Prefixes I/O failures with the path involved.
fn at<T>(path: &Path, result: stereodepth::Result<T>) -> Result<T, CliError> {
    result.map_err(|e| match e {
        stereodepth::Error::Io(io) => CliError::Failed(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub fn cli() -> Command {
    let mut cmd = Command::new("stereodepth")
        .about("Depth estimation from rectified stereo pairs for view synthesis")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in COMMANDS {
        cmd = cmd.subcommand(settings::command(spec));
    }
    cmd
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let spec = COMMANDS.iter().find(|s| s.name == name).expect("registered subcommand");
    let result = Settings::resolve(spec, sub).and_then(|mut settings| match name {
        "gen-data" => gen_data(&mut settings),
        "train" => train_cmd(&mut settings),
        "eval" => eval_cmd(&mut settings),
        "synthesize" => synthesize_cmd(&mut settings),
        "grad-check" => grad_check_cmd(&mut settings),
        "bench" => bench_cmd(&mut settings),
        _ => unreachable!("unknown subcommand {name}"),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn log_config(settings: &Settings) {
    eprint!("{}", settings.to_text());
}

fn prepare_out(settings: &Settings) -> Result<PathBuf, CliError> {
    let out = PathBuf::from(settings.require("out")?);
    fs::create_dir_all(&out)?;
    Ok(out)
}

fn write_run_config(out: &Path, settings: &Settings) -> Result<(), CliError> {
    log_config(settings);
    fs::write(out.join(RUN_CONFIG), settings.to_text())?;
    Ok(())
}

fn parse_mode(settings: &Settings) -> Result<Option<TargetMode>, CliError> {
    settings
        .get("mode")
        .map(|m| TargetMode::parse(m).map_err(|_| CliError::Usage(format!("--mode must be depth or disparity, got {m:?}"))))
        .transpose()
}

fn gen_data(s: &mut Settings) -> Result<(), CliError> {
    let rig = CameraRig::new(s.parse("focal")?, s.parse("baseline")?, s.parse("z_min")?, s.parse("z_max")?)?;
    let size: usize = s.parse("size")?;
    let config = DatasetConfig {
        count: s.parse("count")?,
        scene: SceneConfig {
            seed: s.parse("seed")?,
            height: size,
            width: size,
            layer_count: s.parse("layers")?,
            depth_range: (s.parse("z_near")?, s.parse("z_far")?),
            mode: parse_mode(s)?.expect("mode has a default"),
            ..Default::default()
        },
    };
    let out = prepare_out(s)?;
    write_run_config(&out, s)?;
    let samples = generate_dataset(&config, &rig)?;
    write_dataset(&out, &samples)?;
    println!("wrote {} stereo pairs to {}", samples.len(), out.display());
    Ok(())
}

fn split(samples: Vec<StereoSample>, s: &Settings) -> Result<(Vec<StereoSample>, Vec<StereoSample>), CliError> {
    let ratio: f64 = s.parse("split_ratio")?;
    if samples.len() < 2 {
        return Err(CliError::Failed("a train/test split needs at least two stereo pairs".into()));
    }
    Ok(split_dataset(samples, ratio, s.parse("seed")?)?)
}

fn train_cmd(s: &mut Settings) -> Result<(), CliError> {
    let data = PathBuf::from(s.require("data")?);
    let samples = at(&data, read_dataset(&data))?;
    let mode = samples[0].ground_truth.mode();
    if let Some(expected) = parse_mode(s)? {
        if expected != mode {
            return Err(CliError::Usage(format!(
                "--mode {} but the dataset holds {} ground truth",
                expected.as_str(),
                mode.as_str()
            )));
        }
    }
    let (train_set, test_set) = split(samples, s)?;

    let adjustment = match s.require("p")? {
        "auto" => {
            let rig = train_set[0].rig;
            let values: Vec<f64> = train_set
                .iter()
                .flat_map(|t| t.ground_truth.normalized(&rig).into_data())
                .collect();
            let fitted = fit_exponent(&values, FIT_DEFAULT_BINS)?;
            s.note(format!("fitted p = {:?}", fitted.p()));
            fitted
        }
        _ => AdjustmentParams::new(s.parse("p")?)?,
    };
    let dilations = s
        .require("dilations")?
        .split(',')
        .map(|d| d.trim().parse())
        .collect::<Result<Vec<usize>, _>>()
        .map_err(|_| CliError::Usage("--dilations must be a comma-separated list of integers".into()))?;
    let model_config = ModelConfig {
        base_channels: s.parse("base_channels")?,
        growth: s.parse("growth")?,
        dilation_set: dilations,
        downscale: s.parse("downscale")?,
        dropout_rate: s.parse("dropout")?,
        output_mode: mode,
        ..Default::default()
    };
    let out = prepare_out(s)?;
    let checkpoint = match s.get("checkpoint") {
        Some(p) => PathBuf::from(p),
        None => out.join("best.ck"),
    };
    let config = TrainConfig {
        iterations: s.parse("iterations")?,
        batch_size: s.parse("batch")?,
        seed: s.parse("seed")?,
        loss: LossConfig {
            alpha_z: s.parse("alpha_z")?,
            alpha_p: s.parse("alpha_p")?,
            enable_projection: true,
        },
        adjustment,
        adjust_disparity: s.parse("adjust_disparity")?,
        eval_every: s.parse("eval_every")?,
        adam: AdamConfig {
            lr: s.parse("lr")?,
            ..Default::default()
        },
        checkpoint_path: Some(checkpoint.clone()),
        warm_start: s.get("warm_start").map(PathBuf::from),
        eval_train: false,
        target_train_epe: None,
        metadata: vec![("split_ratio".to_string(), s.require("split_ratio")?.to_string())],
    };
    write_run_config(&out, s)?;
    let model = Model::<f32>::build(model_config, config.seed)?;
    eprintln!(
        "training {} parameters on {} pairs ({} held out)",
        model.parameter_count(),
        train_set.len(),
        test_set.len()
    );
    let started = Instant::now();
    let outcome = train(model, &train_set, &test_set, &config)?;
    fs::write(out.join("history.jsonl"), outcome.history.to_jsonl())?;
    for it in &outcome.history.skipped {
        eprintln!("iteration {it}: skipped batch without valid projected pixels");
    }
    if let Some(r) = outcome.history.records.last() {
        let loss = r.train_loss.map_or(f64::NAN, |l| l.total);
        match r.validation {
            Some(v) => println!(
                "iteration {}: train loss {loss:.6}, validation EPE {:.4} (normalized {:.4})",
                r.iteration, v.epe, v.epe_normalized
            ),
            None => println!("iteration {}: train loss {loss:.6}", r.iteration),
        }
    }
    if let Some(w) = outcome.history.warm_start_loss {
        println!("warm-start loss on the first batch: {w:.6}");
    }
    println!(
        "best checkpoint (iteration {}) written to {} in {:.1}s",
        outcome.history.best_iteration.unwrap_or(0),
        checkpoint.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Loads the checkpoint and the requested subset of the dataset.
fn checkpoint_and_samples(s: &mut Settings) -> Result<(Checkpoint, Model<f32>, AdjustmentParams, Vec<StereoSample>), CliError> {
    let path = PathBuf::from(s.require("checkpoint")?);
    let ck = at(&path, Checkpoint::load(&path))?;
    let model: Model<f32> = ck.model()?;
    let p: f64 = ck
        .meta("effective_p")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Failed("checkpoint lacks the adjustment exponent".into()))?;
    let adjustment = AdjustmentParams::new(p)?;
    for key in ["seed", "split_ratio"] {
        if let Some(v) = ck.meta(key) {
            s.fill(key, v);
        }
    }
    let data = PathBuf::from(s.require("data")?);
    let samples = at(&data, read_dataset(&data))?;
    let subset = match s.require("split")? {
        "all" => samples,
        "test" => split(samples, s)?.1,
        "train" => split(samples, s)?.0,
        other => return Err(CliError::Usage(format!("--split must be test, train or all, got {other:?}"))),
    };
    if subset.is_empty() {
        return Err(CliError::Failed("the selected split is empty".into()));
    }
    Ok((ck, model, adjustment, subset))
}

fn eval_cmd(s: &mut Settings) -> Result<(), CliError> {
    let (_, model, adjustment, samples) = checkpoint_and_samples(s)?;
    let out = prepare_out(s)?;
    write_run_config(&out, s)?;
    let report = evaluate(&model, &samples, adjustment)?;
    fs::write(out.join("report.jsonl"), report.to_jsonl())?;
    let mae = report.mae_right.map_or("n/a".to_string(), |m| format!("{m:.3}"));
    println!(
        "{} pairs: EPE {:.4} {} (normalized {:.4}), right-view MAE {mae}, holes {:.2}%",
        report.records.len(),
        report.epe,
        report.epe_unit(),
        report.epe_normalized,
        100.0 * report.hole_fraction
    );
    Ok(())
}

fn synthesize_cmd(s: &mut Settings) -> Result<(), CliError> {
    let (_, model, adjustment, samples) = checkpoint_and_samples(s)?;
    let out = prepare_out(s)?;
    write_run_config(&out, s)?;
    for sample in &samples {
        let pred: Tensor<f64> = model.predict(&sample.left.cast(), &sample.right.cast())?.cast();
        let rec = recover(&pred, &sample.rig, adjustment, sample.ground_truth.mode())?;
        let synth = synthesize_right(&sample.left, &rec.disparity, rec.depth.as_ref())?;
        let id = sample.id;
        write_ppm(&out.join(format!("{id:04}_synth.ppm")), &synth.image)?;
        write_ppm(
            &out.join(format!("{id:04}_holes.ppm")),
            &mask_image(&synth.holes, sample.height(), sample.width())?,
        )?;
        write_pfm(&out.join(format!("{id:04}_pred.pfm")), &rec.raw)?;
    }
    println!("synthesized {} right views into {}", samples.len(), out.display());
    Ok(())
}

fn grad_check_cmd(s: &mut Settings) -> Result<(), CliError> {
    log_config(s);
    let started = Instant::now();
    let results = gradient_suite(s.parse("seed")?, s.parse("seeds")?)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<22} max relative error {:.3e}  {status}", r.name, r.max_error);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    println!(
        "{} operations, {} seeds each, tolerance {GRAD_TOLERANCE:e}, {:.1}s",
        results.len(),
        s.parse::<usize>("seeds")?,
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn bench_cmd(s: &mut Settings) -> Result<(), CliError> {
    log_config(s);
    let size: usize = s.parse("size")?;
    let repeats: usize = s.parse("repeats")?;
    let seed: u64 = s.parse("seed")?;
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let model: Model<f32> = match s.get("checkpoint") {
        Some(p) => at(Path::new(p), Checkpoint::load(Path::new(p)))?.model()?,
        None => Model::init(ModelConfig::default(), seed)?,
    };
    let scene = SceneConfig {
        seed,
        height: size,
        width: size,
        ..Default::default()
    };
    let sample = stereodepth::data::generate_scene(&scene, &CameraRig::default())?;
    let (left, right): (Tensor<f32>, Tensor<f32>) = (sample.left.cast(), sample.right.cast());
    debug_assert_eq!(left.shape(), Shape::new(1, 3, size, size));
    // one untimed pass to warm caches and allocator
    model.predict(&left, &right)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        model.predict(&left, &right)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / repeats as f64;
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "eval forward latency at {size}x{size}: mean {mean:.2} ms/pair, min {min:.2} ms/pair over {repeats} runs ({} parameters)",
        model.parameter_count()
    );
    Ok(())
}
