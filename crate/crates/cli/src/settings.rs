//! Resolved settings: flags over config file over defaults.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};
use stereodepth::data::parse_key_values;

use crate::CliError;

/// One setting, usable as `--name-with-dashes` or as `name = value` in a
/// config file.
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help }
}

pub struct Spec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
}

/// Keys that name where outputs go; they are left out of `run.cfg` so that
/// runs writing to different directories produce identical files.
const LOCATION_KEYS: &[&str] = &["out"];

pub const GEN_DATA: Spec = Spec {
    name: "gen-data",
    about: "Generate a synthetic stereo dataset directory",
    keys: &[
        key("out", None, "Output dataset directory"),
        key("seed", Some("0"), "Generator seed"),
        key("count", Some("10"), "Number of stereo pairs"),
        key("size", Some("64"), "Image height and width in pixels"),
        key("mode", Some("depth"), "Ground truth kind: depth or disparity"),
        key("layers", Some("3"), "Foreground rectangles per scene"),
        key("z_near", Some("0.5"), "Nearest layer depth in meters"),
        key("z_far", Some("10"), "Farthest background depth in meters"),
        key("focal", Some("40"), "Focal length in pixels"),
        key("baseline", Some("0.1"), "Baseline in meters"),
        key("z_min", Some("0.1"), "Rig minimum depth in meters"),
        key("z_max", Some("10"), "Rig maximum depth in meters"),
    ],
};

pub const TRAIN: Spec = Spec {
    name: "train",
    about: "Train the network on a dataset directory",
    keys: &[
        key("data", None, "Dataset directory"),
        key("out", None, "Output directory for checkpoint and history"),
        key("seed", Some("0"), "Seed for initialization, split, batching and dropout"),
        key("iterations", Some("1000"), "Optimizer steps"),
        key("batch", Some("4"), "Mini-batch size"),
        key("lr", Some("0.001"), "Adam learning rate"),
        key("p", Some("1.5"), "Depth adjustment exponent, or `auto` to fit it"),
        key("alpha_z", Some("1"), "Weight of the prediction loss"),
        key("alpha_p", Some("1"), "Weight of the projection loss"),
        key("mode", None, "Expected ground truth kind (checked against the dataset)"),
        key("eval_every", Some("50"), "Iterations between validation passes"),
        key("split_ratio", Some("0.9"), "Fraction of pairs used for training"),
        key("base_channels", Some("16"), "Channels of every Conv module"),
        key("growth", Some("16"), "Channels added by each dense block"),
        key("dilations", Some("1,2,3,4"), "Dilation factors of the parallel branches"),
        key("downscale", Some("8"), "Trunk resolution divisor (power of two)"),
        key("dropout", Some("0.2"), "Dropout rate in the dense blocks"),
        key("adjust_disparity", Some("false"), "Apply the exponent to disparity targets"),
        key("checkpoint", None, "Checkpoint path (default: OUT/best.ck)"),
        key("warm_start", None, "Checkpoint to initialize the weights from"),
    ],
};

pub const EVAL: Spec = Spec {
    name: "eval",
    about: "Evaluate a checkpoint and write a JSONL report",
    keys: &[
        key("checkpoint", None, "Checkpoint to evaluate"),
        key("data", None, "Dataset directory"),
        key("out", None, "Output directory for report.jsonl"),
        key("split", Some("test"), "Which pairs to score: test, train or all"),
        key("seed", None, "Split seed (default: the checkpoint's training seed)"),
        key("split_ratio", None, "Split ratio (default: the checkpoint's)"),
    ],
};

pub const SYNTHESIZE: Spec = Spec {
    name: "synthesize",
    about: "Write synthesized right views and hole masks",
    keys: &[
        key("checkpoint", None, "Checkpoint to predict with"),
        key("data", None, "Dataset directory"),
        key("out", None, "Output directory"),
        key("split", Some("all"), "Which pairs to use: test, train or all"),
        key("seed", None, "Split seed (default: the checkpoint's training seed)"),
        key("split_ratio", None, "Split ratio (default: the checkpoint's)"),
    ],
};

pub const GRAD_CHECK: Spec = Spec {
    name: "grad-check",
    about: "Check every backward rule against finite differences",
    keys: &[
        key("seed", Some("0"), "First seed"),
        key("seeds", Some("5"), "Seeds per operation"),
    ],
};

pub const BENCH: Spec = Spec {
    name: "bench",
    about: "Time eval-mode forward passes",
    keys: &[
        key("size", Some("256"), "Image height and width in pixels"),
        key("repeats", Some("5"), "Timed forward passes"),
        key("seed", Some("0"), "Seed for the model and the input pair"),
        key("checkpoint", None, "Checkpoint to time (default: a freshly initialized default model)"),
    ],
};

pub const COMMANDS: &[&Spec] = &[&GEN_DATA, &TRAIN, &EVAL, &SYNTHESIZE, &GRAD_CHECK, &BENCH];

pub fn flag(name: &str) -> String {
    name.replace('_', "-")
}

pub fn command(spec: &Spec) -> Command {
    let mut cmd = Command::new(spec.name).about(spec.about).arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("Config file of `key = value` lines; flags override it"),
    );
    for k in spec.keys {
        let mut help = k.help.to_string();
        if let Some(d) = k.default {
            let _ = write!(help, " [default: {d}]");
        }
        cmd = cmd.arg(Arg::new(k.name).long(flag(k.name)).value_name("VALUE").help(help));
    }
    cmd
}

pub struct Settings {
    command: &'static str,
    values: Vec<(&'static str, Option<String>)>,
    explicit: BTreeSet<&'static str>,
    notes: Vec<String>,
}

impl Settings {
    pub fn resolve(spec: &Spec, matches: &ArgMatches) -> Result<Self, CliError> {
        let mut values: Vec<(&'static str, Option<String>)> =
            spec.keys.iter().map(|k| (k.name, k.default.map(String::from))).collect();
        let mut explicit = BTreeSet::new();
        if let Some(path) = matches.get_one::<String>("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config file {path}: {e}")))?;
            let pairs = parse_key_values(&text).map_err(|e| CliError::Usage(format!("{path}: {e}")))?;
            for (k, v) in pairs {
                let slot = values
                    .iter_mut()
                    .find(|(name, _)| *name == k)
                    .ok_or_else(|| CliError::Usage(format!("{path}: unknown key `{k}` for {}", spec.name)))?;
                slot.1 = Some(v);
                explicit.insert(slot.0);
            }
        }
        for (name, value) in values.iter_mut() {
            if matches.value_source(name) == Some(ValueSource::CommandLine) {
                *value = matches.get_one::<String>(name).cloned();
                explicit.insert(*name);
            }
        }
        Ok(Settings {
            command: spec.name,
            values,
            explicit,
            notes: Vec::new(),
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .unwrap_or_else(|| panic!("`{key}` is not a setting of {}", self.command))
            .1
            .as_deref()
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Fills an unset key, for values inherited from a checkpoint.
    pub fn fill(&mut self, key: &str, value: String) {
        if let Some(slot) = self.values.iter_mut().find(|(k, _)| *k == key) {
            if slot.1.is_none() {
                slot.1 = Some(value);
            }
        }
    }

    /// Adds a comment line to the resolved config, for derived values.
    pub fn note(&mut self, note: String) {
        self.notes.push(note);
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("{} needs --{}", self.command, flag(key))))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| CliError::Usage(format!("invalid value {raw:?} for --{}", flag(key))))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    /// The resolved settings as `key = value` lines, without output
    /// locations.
    pub fn to_text(&self) -> String {
        let mut out = format!("# {}\n", self.command);
        for (k, v) in &self.values {
            if let (Some(v), false) = (v, LOCATION_KEYS.contains(k)) {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        out
    }
}
