//! Adam training loop, checkpoints and history.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, Record, MAGIC, VERSION};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::geometry::{adjust, AdjustmentParams, CameraRig};
use crate::loss::{evaluate_loss, projection_loss, total_loss, LossBreakdown, LossConfig, Projection, TargetMode};
use crate::metrics::{json_number, score_sample};
use crate::model::{mix_seed, Model};
use crate::tensor::{Graph, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adjustment: AdjustmentParams,
    /// Apply the exponent to disparity targets too. Depth targets are always
    /// adjusted.
    pub adjust_disparity: bool,
    pub eval_every: usize,
    pub adam: AdamConfig,
    /// Where the best-validation model is written.
    pub checkpoint_path: Option<PathBuf>,
    /// Checkpoint whose weights initialize the model.
    pub warm_start: Option<PathBuf>,
    /// Also score the training set at every evaluation.
    pub eval_train: bool,
    /// Stop once the normalized training EPE drops below this value
    /// (requires `eval_train`).
    pub target_train_epe: Option<f64>,
    /// Extra `key = value` pairs stored in every checkpoint.
    pub metadata: Vec<(String, String)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 4,
            seed: 0,
            loss: LossConfig::default(),
            adjustment: AdjustmentParams::new(1.5).expect("valid exponent"),
            adjust_disparity: false,
            eval_every: 50,
            adam: AdamConfig::default(),
            checkpoint_path: None,
            warm_start: None,
            eval_train: false,
            target_train_epe: None,
            metadata: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("iterations, batch size and eval interval must be at least 1"));
        }
        if self.target_train_epe.is_some() && !self.eval_train {
            return Err(Error::config("a training EPE target needs eval_train"));
        }
        self.loss.validate()?;
        self.adam.validate()
    }

    /// The exponent actually applied to targets of `mode`.
    pub fn effective_adjustment(&self, mode: TargetMode) -> AdjustmentParams {
        match mode {
            TargetMode::Disparity if !self.adjust_disparity => AdjustmentParams::IDENTITY,
            _ => self.adjustment,
        }
    }
}

/// Validation scores at one evaluation point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalScores {
    /// Report units: centimeters for depth, pixels for disparity.
    pub epe: f64,
    pub epe_normalized: f64,
    pub mae_right: Option<f64>,
    /// `alpha_z * mean((z~ - z^)^2)` in the unadjusted normalized space plus
    /// `alpha_p * L_proj`, so runs with different exponents are comparable.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Loss of the step that ended at this iteration (`None` if skipped).
    pub train_loss: Option<LossBreakdown>,
    pub train: Option<EvalScores>,
    pub validation: Option<EvalScores>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
    /// Iterations whose batch had no valid projected pixel.
    pub skipped: Vec<usize>,
    /// Eval-mode loss on the first batch before any update, when warm
    /// starting.
    pub warm_start_loss: Option<f64>,
    pub best_iteration: Option<usize>,
    pub iterations_run: usize,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> String {
        let scores = |s: &Option<EvalScores>| match s {
            None => "null".to_string(),
            Some(s) => format!(
                "{{\"epe\":{},\"epe_normalized\":{},\"mae_right\":{},\"loss\":{}}}",
                json_number(s.epe),
                json_number(s.epe_normalized),
                s.mae_right.map_or("null".into(), json_number),
                json_number(s.loss)
            ),
        };
        let mut out = String::new();
        for r in &self.records {
            let loss = match &r.train_loss {
                None => "null".to_string(),
                Some(l) => format!(
                    "{{\"total\":{},\"prediction\":{},\"projection\":{},\"n_z\":{},\"n_p\":{}}}",
                    json_number(l.total),
                    json_number(l.prediction),
                    json_number(l.projection),
                    l.n_z,
                    l.n_p
                ),
            };
            let _ = writeln!(
                out,
                "{{\"iteration\":{},\"train_loss\":{},\"train\":{},\"validation\":{}}}",
                r.iteration,
                loss,
                scores(&r.train),
                scores(&r.validation)
            );
        }
        let _ = writeln!(
            out,
            "{{\"summary\":true,\"iterations\":{},\"skipped\":{},\"best_iteration\":{},\"warm_start_loss\":{}}}",
            self.iterations_run,
            self.skipped.len(),
            self.best_iteration.map_or("null".into(), |i| i.to_string()),
            self.warm_start_loss.map_or("null".into(), json_number)
        );
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters after the last iteration.
    pub model: Model<T>,
    /// Parameters with the best validation EPE (the final model when there is
    /// no validation set).
    pub best: Model<T>,
    pub adam: AdamState<T>,
    pub history: TrainHistory,
}

/// Network inputs and adjusted targets for a group of samples.
pub struct Batch<T> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(samples: &[&StereoSample], adjustment: AdjustmentParams) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        if samples.iter().any(|s| s.rig != first.rig || s.ground_truth.mode() != first.ground_truth.mode()) {
            return Err(Error::Data("batch mixes rigs or ground-truth modes".into()));
        }
        let targets: Vec<Tensor<f64>> = samples
            .iter()
            .map(|s| s.ground_truth.normalized(&s.rig).map(|v| adjust(v, adjustment)))
            .collect();
        let stack = |items: Vec<&Tensor<f64>>| -> Result<Tensor<T>> { Ok(Tensor::stack(&items)?.cast()) };
        Ok(Batch {
            left: stack(samples.iter().map(|s| &s.left).collect())?,
            right: stack(samples.iter().map(|s| &s.right).collect())?,
            target: stack(targets.iter().collect())?,
        })
    }
}

/// Endless seeded sequence of sample indices, reshuffled each pass.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchStream {
            order: (0..n).collect(),
            pos: 0,
            pass: 0,
            seed,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order
            .shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0xba7c_0000 + self.pass)));
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.pass += 1;
                self.pos = 0;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn check_dataset(samples: &[StereoSample], mode: TargetMode) -> Result<CameraRig> {
    let first = samples.first().ok_or_else(|| Error::Data("training set is empty".into()))?;
    for s in samples {
        if s.rig != first.rig {
            return Err(Error::Data("samples use different camera rigs".into()));
        }
        if s.ground_truth.mode() != mode {
            return Err(Error::config(format!(
                "model predicts {} but sample {} holds {}",
                mode.as_str(),
                s.id,
                s.ground_truth.mode().as_str()
            )));
        }
    }
    Ok(first.rig)
}

/// Eval-mode training loss (adjusted target) on one batch.
pub fn probe_loss<T: Real>(model: &Model<T>, batch: &Batch<T>, projection: &Projection, loss: &LossConfig) -> Result<f64> {
    let pred = model.predict(&batch.left, &batch.right)?;
    Ok(evaluate_loss(&pred, &batch.target, &batch.left, &batch.right, projection, loss)?.total)
}

/// Scores `samples` one at a time in eval mode.
pub fn score_set<T: Real>(model: &Model<T>, samples: &[StereoSample], config: &TrainConfig) -> Result<EvalScores> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to score".into()));
    }
    let mode = model.config().output_mode;
    let adjustment = config.effective_adjustment(mode);
    let (mut epe, mut epe_n, mut loss) = (0.0, 0.0, 0.0);
    let mut maes = Vec::new();
    for s in samples {
        let left: Tensor<T> = s.left.cast();
        let right: Tensor<T> = s.right.cast();
        let out = model.predict(&left, &right)?;
        let out64: Tensor<f64> = out.cast();
        let rec = score_sample(s, &out64, adjustment)?;
        epe += rec.epe;
        epe_n += rec.epe_normalized;
        maes.extend(rec.mae_right);

        let truth = s.ground_truth.normalized(&s.rig);
        let recovered = crate::metrics::recover(&out64, &s.rig, adjustment, mode)?.normalized;
        let l_z = recovered
            .data()
            .iter()
            .zip(truth.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / truth.len() as f64;
        let mut l = config.loss.alpha_z * l_z;
        if config.loss.projection_active() {
            let projection = Projection {
                rig: s.rig,
                adjustment,
                mode,
            };
            let mut g = Graph::new();
            let (p, lv, rv) = (g.input(out), g.input(left), g.input(right));
            match projection_loss(&mut g, p, lv, rv, &projection) {
                Ok((lp, _)) => l += config.loss.alpha_p * g.value(lp).item().f64(),
                Err(Error::DegenerateProjection) => {}
                Err(e) => return Err(e),
            }
        }
        loss += l;
    }
    let n = samples.len() as f64;
    Ok(EvalScores {
        epe: epe / n,
        epe_normalized: epe_n / n,
        mae_right: (!maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64),
        loss: loss / n,
    })
}

/// One optimizer step; `Ok(None)` when the batch had no valid projection.
fn step<T: Real>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    batch: &Batch<T>,
    projection: &Projection,
    loss: &LossConfig,
    dropout_seed: u64,
) -> Result<Option<LossBreakdown>> {
    let saved_stats = model.running_stats().to_vec();
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let (l, r, t) = (
        g.input(batch.left.clone()),
        g.input(batch.right.clone()),
        g.input(batch.target.clone()),
    );
    let pred = model.forward_train(&mut g, &params, l, r, dropout_seed)?;
    let (nodes, breakdown) = match total_loss(&mut g, pred, t, l, r, projection, loss) {
        Ok(v) => v,
        Err(Error::DegenerateProjection) => {
            model.running_stats_mut().clone_from_slice(&saved_stats);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let mut grads = g.backward(nodes.total)?;
    let grads: Vec<Tensor<T>> = params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    let mut refs: Vec<&mut Tensor<T>> = model.params_mut().iter_mut().map(|p| &mut p.value).collect();
    adam_step(&mut refs, &grads.iter().collect::<Vec<_>>(), adam)?;
    Ok(Some(breakdown))
}

/// Trains `model` on `train_set`, scoring `val_set` every `eval_every`
/// iterations and at the end.
pub fn train<T: Real>(
    mut model: Model<T>,
    train_set: &[StereoSample],
    val_set: &[StereoSample],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let mode = model.config().output_mode;
    let rig = check_dataset(train_set, mode)?;
    if !val_set.is_empty() {
        check_dataset(val_set, mode)?;
    }
    for s in train_set.iter().chain(val_set) {
        model.check_input(s.left.shape(), s.right.shape())?;
    }
    let adjustment = config.effective_adjustment(mode);
    let projection = Projection { rig, adjustment, mode };
    let batch_of = |idx: &[usize]| -> Result<Batch<T>> {
        let samples: Vec<&StereoSample> = idx.iter().map(|&i| &train_set[i]).collect();
        Batch::new(&samples, adjustment)
    };
    let first_batch = BatchStream::new(train_set.len(), config.seed).next_batch(config.batch_size);

    let mut history = TrainHistory::default();
    if let Some(path) = &config.warm_start {
        Checkpoint::load(path)?.load_into(&mut model)?;
        history.warm_start_loss = Some(probe_loss(&model, &batch_of(&first_batch)?, &projection, &config.loss)?);
    }

    let mut adam = AdamState::new(config.adam, model.params().iter().map(|p| &p.value));
    let mut stream = BatchStream::new(train_set.len(), config.seed);
    let mut best: Option<(f64, Model<T>)> = None;
    for it in 1..=config.iterations {
        let batch = batch_of(&stream.next_batch(config.batch_size))?;
        let breakdown = step(
            &mut model,
            &mut adam,
            &batch,
            &projection,
            &config.loss,
            mix_seed(config.seed, it as u64),
        )?;
        history.iterations_run = it;
        if breakdown.is_none() {
            history.skipped.push(it);
            if 2 * history.skipped.len() > config.iterations {
                return Err(Error::Data(format!(
                    "{} of {} batches had no valid projected pixel",
                    history.skipped.len(),
                    config.iterations
                )));
            }
        }
        if it % config.eval_every != 0 && it != config.iterations {
            continue;
        }
        let train_scores = if config.eval_train {
            Some(score_set(&model, train_set, config)?)
        } else {
            None
        };
        let val_scores = if val_set.is_empty() {
            None
        } else {
            Some(score_set(&model, val_set, config)?)
        };
        history.records.push(TrainRecord {
            iteration: it,
            train_loss: breakdown,
            train: train_scores,
            validation: val_scores,
        });
        if let Some(v) = val_scores {
            if best.as_ref().is_none_or(|(e, _)| v.epe_normalized < *e) {
                best = Some((v.epe_normalized, model.clone()));
                history.best_iteration = Some(it);
                if let Some(path) = &config.checkpoint_path {
                    let batch0 = batch_of(&first_batch)?;
                    let recorded = probe_loss(&model, &batch0, &projection, &config.loss)?;
                    let meta = checkpoint_meta(config, mode, it, recorded, Some(v.epe_normalized));
                    Checkpoint::capture(&model, Some(&adam), &meta).save(path)?;
                }
            }
        }
        let reached = match (config.target_train_epe, train_scores) {
            (Some(target), Some(s)) => s.epe_normalized < target,
            _ => false,
        };
        if reached {
            break;
        }
    }

    let best = match best {
        Some((_, m)) => m,
        None => {
            history.best_iteration = Some(history.iterations_run);
            if let Some(path) = &config.checkpoint_path {
                let recorded = probe_loss(&model, &batch_of(&first_batch)?, &projection, &config.loss)?;
                let meta = checkpoint_meta(config, mode, history.iterations_run, recorded, None);
                Checkpoint::capture(&model, Some(&adam), &meta).save(path)?;
            }
            model.clone()
        }
    };
    Ok(TrainOutcome {
        model,
        best,
        adam,
        history,
    })
}

fn checkpoint_meta(
    config: &TrainConfig,
    mode: TargetMode,
    iteration: usize,
    recorded_loss: f64,
    val_epe: Option<f64>,
) -> Vec<(String, String)> {
    let mut meta = vec![
        ("p".to_string(), format!("{:?}", config.adjustment.p())),
        ("adjust_disparity".to_string(), config.adjust_disparity.to_string()),
        ("effective_p".to_string(), format!("{:?}", config.effective_adjustment(mode).p())),
        ("iteration".to_string(), iteration.to_string()),
        ("seed".to_string(), config.seed.to_string()),
        ("recorded_loss".to_string(), format!("{recorded_loss:?}")),
    ];
    if let Some(e) = val_epe {
        meta.push(("val_epe_normalized".to_string(), format!("{e:?}")));
    }
    meta.extend(config.metadata.iter().cloned());
    meta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig, SceneConfig};
    use crate::loss::prediction_loss;
    use crate::model::ModelConfig;
    use crate::ops::ConvGeometry;
    use crate::tensor::Shape;

    fn tiny_model() -> Model<f32> {
        Model::build(
            ModelConfig {
                base_channels: 4,
                growth: 4,
                dilation_set: vec![1, 2],
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    fn samples(count: usize, seed: u64) -> Vec<StereoSample> {
        let cfg = DatasetConfig {
            count,
            scene: SceneConfig {
                seed,
                height: 16,
                width: 16,
                depth_range: (1.0, 10.0),
                ..Default::default()
            },
        };
        generate_dataset(&cfg, &CameraRig::default()).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let model = tiny_model();
        let cfg = TrainConfig {
            iterations: 1,
            adam: AdamConfig { lr: 0.0, ..Default::default() },
            ..Default::default()
        };
        let out = train(model.clone(), &samples(4, 0), &[], &cfg).unwrap();
        assert_eq!(out.model.params(), model.params());
        assert_eq!(out.adam.t, 1);
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let (tr, va) = (samples(4, 2), samples(2, 3));
        let cfg = TrainConfig {
            iterations: 4,
            batch_size: 2,
            eval_every: 2,
            seed: 9,
            ..Default::default()
        };
        let a = train(tiny_model(), &tr, &va, &cfg).unwrap();
        let b = train(tiny_model(), &tr, &va, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.history.records.len(), 2);
        let c = train(tiny_model(), &tr, &va, &TrainConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.model.params(), c.model.params());
    }

    #[test]
    fn warm_start_reproduces_recorded_loss() {
        let (tr, va) = (samples(4, 4), samples(2, 5));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ck");
        let cfg = TrainConfig {
            iterations: 3,
            batch_size: 2,
            eval_every: 1,
            checkpoint_path: Some(path.clone()),
            ..Default::default()
        };
        train(tiny_model(), &tr, &va, &cfg).unwrap();
        let recorded: f64 = Checkpoint::load(&path).unwrap().meta("recorded_loss").unwrap().parse().unwrap();
        let warm = TrainConfig {
            iterations: 1,
            warm_start: Some(path),
            checkpoint_path: None,
            ..cfg
        };
        let out = train(tiny_model(), &tr, &va, &warm).unwrap();
        assert_eq!(out.history.warm_start_loss, Some(recorded));
    }

    #[test]
    fn batch_stream_covers_every_sample_each_pass() {
        let mut s = BatchStream::new(5, 1);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(5)).collect();
        assert_eq!(seen.len(), 15);
        for pass in seen.chunks_mut(5) {
            pass.sort();
            assert_eq!(pass, &[0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let tr = samples(2, 0);
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(train(tiny_model(), &tr, &[], &bad), Err(Error::Config(_))));
        assert!(matches!(train(tiny_model(), &[], &[], &TrainConfig::default()), Err(Error::Data(_))));
        let mut odd = tr.clone();
        odd[0].left = Tensor::zeros(Shape::new(1, 3, 12, 12));
        assert!(train(tiny_model(), &odd, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn linear_toy_loss_is_non_increasing() {
        // one weight scaling a fixed input toward a fixed target
        let x = Tensor::from_slice(Shape::new(1, 1, 1, 4), &[0.1, 0.4, 0.7, 0.9]).unwrap();
        let y = x.map(|v| 0.6 * v);
        let mut w = Tensor::from_slice(Shape::SCALAR, &[1.5]).unwrap();
        let mut adam = AdamState::new(AdamConfig { lr: 1e-3, ..Default::default() }, [&w]);
        let mut last = f64::INFINITY;
        let mut first = None;
        for _ in 0..200 {
            let mut g = Graph::new();
            let (xv, yv, wv) = (g.input(x.clone()), g.input(y.clone()), g.param(w.clone()));
            let pred = g.conv2d(xv, wv, None, ConvGeometry::default()).unwrap();
            let loss = prediction_loss(&mut g, pred, yv).unwrap();
            let value = g.value(loss).item();
            assert!(value <= last, "loss rose from {last} to {value}");
            last = value;
            first.get_or_insert(value);
            let grads = g.backward(loss).unwrap();
            adam_step(&mut [&mut w], &[grads.get(wv).unwrap()], &mut adam).unwrap();
        }
        assert!(last < 0.75 * first.unwrap());
    }
}
