//! Dataset directories: `NNNN_left.ppm`, `NNNN_right.ppm`, `NNNN_gt.pfm` and
//! `rig.cfg`.

use std::fs;
use std::path::Path;

use super::codec::{read_pfm, read_ppm, write_pfm, write_ppm};
use super::scene::{generate_scene, SceneConfig};
use super::{parse_key_values, GroundTruth, StereoSample};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, DepthMap, DisparityMap};
use crate::loss::TargetMode;

pub const RIG_FILE: &str = "rig.cfg";

/// Settings for a generated dataset. Sample `k` uses scene seed
/// `seed * 1_000_003 + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    /// Template for every scene; its seed is replaced per sample.
    pub scene: SceneConfig,
}

pub fn generate_dataset(config: &DatasetConfig, rig: &CameraRig) -> Result<Vec<StereoSample>> {
    if config.count == 0 {
        return Err(Error::config("dataset count must be positive"));
    }
    (0..config.count)
        .map(|k| {
            let scene = SceneConfig {
                seed: config.scene.seed.wrapping_mul(1_000_003).wrapping_add(k as u64),
                ..config.scene.clone()
            };
            let mut sample = generate_scene(&scene, rig)?;
            sample.id = k;
            Ok(sample)
        })
        .collect()
}

fn rig_text(rig: &CameraRig, mode: TargetMode) -> String {
    format!(
        "f = {}\nB = {}\nz_min = {}\nz_max = {}\nmode = {}\n",
        rig.focal(),
        rig.baseline(),
        rig.z_min(),
        rig.z_max(),
        mode.as_str()
    )
}

/// Writes samples and the rig description into `dir`, creating it if needed.
/// All samples must share one rig and one ground-truth mode.
pub fn write_dataset(dir: &Path, samples: &[StereoSample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("nothing to write".into()))?;
    let mode = first.ground_truth.mode();
    if samples.iter().any(|s| s.rig != first.rig || s.ground_truth.mode() != mode) {
        return Err(Error::Data("samples mix rigs or ground-truth modes".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RIG_FILE), rig_text(&first.rig, mode))?;
    for s in samples {
        write_ppm(&dir.join(format!("{:04}_left.ppm", s.id)), &s.left)?;
        write_ppm(&dir.join(format!("{:04}_right.ppm", s.id)), &s.right)?;
        write_pfm(&dir.join(format!("{:04}_gt.pfm", s.id)), s.ground_truth.raw())?;
    }
    Ok(())
}

/// Reads `rig.cfg`.
pub fn read_rig(dir: &Path) -> Result<(CameraRig, TargetMode)> {
    let text = fs::read_to_string(dir.join(RIG_FILE))?;
    let (mut f, mut b, mut z_min, mut z_max, mut mode) = (None, None, None, None, None);
    for (key, value) in parse_key_values(&text)? {
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::format(format!("{RIG_FILE}: bad number for `{key}`: {value:?}")))
        };
        match key.as_str() {
            "f" => f = Some(num()?),
            "B" => b = Some(num()?),
            "z_min" => z_min = Some(num()?),
            "z_max" => z_max = Some(num()?),
            "mode" => mode = Some(TargetMode::parse(&value)?),
            _ => return Err(Error::format(format!("{RIG_FILE}: unknown key `{key}`"))),
        }
    }
    let missing = |k: &str| Error::format(format!("{RIG_FILE}: missing `{k}`"));
    let rig = CameraRig::new(
        f.ok_or_else(|| missing("f"))?,
        b.ok_or_else(|| missing("B"))?,
        z_min.ok_or_else(|| missing("z_min"))?,
        z_max.ok_or_else(|| missing("z_max"))?,
    )?;
    Ok((rig, mode.ok_or_else(|| missing("mode"))?))
}

/// Loads every sample in `dir`, ordered by index. Occlusion masks are not
/// stored and come back as `None`.
pub fn read_dataset(dir: &Path) -> Result<Vec<StereoSample>> {
    let (rig, mode) = read_rig(dir)?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix("_gt.pfm") {
            let id = stem
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("unexpected file {name}")))?;
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("no samples in {}", dir.display())));
    }
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            let left = read_ppm(&dir.join(format!("{id:04}_left.ppm")))?;
            let right = read_ppm(&dir.join(format!("{id:04}_right.ppm")))?;
            let gt = read_pfm(&dir.join(format!("{id:04}_gt.pfm")))?;
            let (s, g) = (left.shape(), gt.shape());
            if right.shape() != s || (g.h(), g.w()) != (s.h(), s.w()) {
                return Err(Error::Data(format!("sample {id}: view and ground-truth extents differ")));
            }
            let ground_truth = match mode {
                TargetMode::Depth => GroundTruth::Depth(DepthMap::raw(gt, &rig)?),
                TargetMode::Disparity => GroundTruth::Disparity(DisparityMap::new(gt)?),
            };
            Ok(StereoSample {
                id,
                left,
                right,
                ground_truth,
                occlusion: None,
                rig,
            })
        })
        .collect()
}
