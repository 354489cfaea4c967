//! Synthetic stereo data, dataset splitting and file codecs.

pub mod codec;
mod dataset;
mod scene;

pub use codec::{decode_pfm, decode_ppm, encode_pfm, encode_ppm, mask_image, read_pfm, read_ppm, write_pfm, write_ppm};
pub use dataset::{generate_dataset, read_dataset, read_rig, write_dataset, DatasetConfig, RIG_FILE};
pub use scene::{generate_scene, layout_scene, render_scene, Layer, Scene, SceneConfig, TextureParams};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_depth, CameraRig, DepthMap, DisparityMap, Image, Plane};
use crate::loss::TargetMode;

/// Ground truth for the left view, in the units of the dataset's mode.
#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruth {
    /// Raw depth in meters.
    Depth(DepthMap),
    /// Disparity in pixels.
    Disparity(DisparityMap),
}

impl GroundTruth {
    pub fn mode(&self) -> TargetMode {
        match self {
            GroundTruth::Depth(_) => TargetMode::Depth,
            GroundTruth::Disparity(_) => TargetMode::Disparity,
        }
    }

    /// The stored values in raw units (meters or pixels).
    pub fn raw(&self) -> &Plane {
        match self {
            GroundTruth::Depth(z) => z.values(),
            GroundTruth::Disparity(d) => d.values(),
        }
    }

    pub fn depth(&self, rig: &CameraRig) -> DepthMap {
        match self {
            GroundTruth::Depth(z) => z.clone(),
            GroundTruth::Disparity(d) => d.to_depth(rig),
        }
    }

    pub fn disparity(&self, rig: &CameraRig) -> DisparityMap {
        match self {
            GroundTruth::Depth(z) => z.to_disparity(rig).expect("raw depth converts"),
            GroundTruth::Disparity(d) => d.clone(),
        }
    }

    /// Ground truth scaled into `[0, 1]`: `1 - z / z_max` for depth,
    /// `d / d_max` for disparity.
    pub fn normalized(&self, rig: &CameraRig) -> Plane {
        match self {
            GroundTruth::Depth(z) => z.values().map(|v| normalize_depth(v, rig)),
            GroundTruth::Disparity(d) => {
                let d_max = rig.d_max();
                d.values().map(|v| (v / d_max).clamp(0.0, 1.0))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub id: usize,
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub left: Image,
    pub right: Image,
    pub ground_truth: GroundTruth,
    /// True where the left pixel is visible in both views. Only known for
    /// freshly generated samples.
    pub occlusion: Option<Vec<bool>>,
    pub rig: CameraRig,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.left.shape().h()
    }

    pub fn width(&self) -> usize {
        self.left.shape().w()
    }
}

/// Shuffles `samples` with a seeded generator and splits off the first
/// `round(ratio * n)` as the training set.
pub fn split_dataset<T>(mut samples: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio {ratio} outside (0, 1)")));
    }
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * samples.len() as f64).round() as usize).min(samples.len());
    let test = samples.split_off(n_train);
    Ok((samples, test))
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; duplicate keys are an error.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::format(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::format(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let (train, test) = split_dataset((0..10).collect(), 0.9, 1).unwrap();
        assert_eq!((train.len(), test.len()), (9, 1));
        let (train, test) = split_dataset((0..4).collect::<Vec<i32>>(), 0.5, 1).unwrap();
        assert_eq!((train.len(), test.len()), (2, 2));
        let mut all: Vec<i32> = train.into_iter().chain(test).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn split_is_seeded() {
        let a = split_dataset((0..20).collect::<Vec<i32>>(), 0.7, 9).unwrap();
        let b = split_dataset((0..20).collect::<Vec<i32>>(), 0.7, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_dataset(Vec::<i32>::new(), 0.5, 0), Err(Error::Data(_))));
        assert!(matches!(split_dataset(vec![1, 2], 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(split_dataset(vec![1, 2], 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# rig\nf = 40\n\nB=0.1\n").unwrap();
        assert_eq!(kv, vec![("f".into(), "40".into()), ("B".into(), "0.1".into())]);
        assert!(parse_key_values("f 40").is_err());
        assert!(parse_key_values("f = 1\nf = 2").is_err());
    }
}
