//! End-point error and right-view reconstruction error.

use std::fmt::Write as _;

use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::geometry::{
    synthesize_right, AdjustmentParams, CameraRig, DepthMap, DisparityMap, Image, Plane, Synthesized,
};
use crate::loss::TargetMode;
use crate::model::Model;
use crate::tensor::{Real, Tensor};

/// Mean absolute difference between two maps of the same extent.
pub fn epe(pred: &Plane, gt: &Plane) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("epe of {:?} against {:?}", pred.shape(), gt.shape())));
    }
    if pred.is_empty() {
        return Err(Error::DegenerateMetric("empty map".into()));
    }
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean absolute intensity error over non-hole pixels and all channels, on
/// the 0 to 255 scale.
pub fn mae_right(synthesized: &Synthesized, reference: &Image) -> Result<f64> {
    let s = synthesized.image.shape();
    if reference.shape() != s || synthesized.holes.len() != s.plane() {
        return Err(Error::shape(format!(
            "synthesized {s:?} against reference {:?}",
            reference.shape()
        )));
    }
    let plane = s.plane();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, &hole) in synthesized.holes.iter().enumerate() {
        if hole {
            continue;
        }
        for c in 0..s.c() {
            let i = c * plane + k;
            sum += (synthesized.image.data()[i] - reference.data()[i]).abs();
        }
        count += s.c();
    }
    if count == 0 {
        return Err(Error::DegenerateMetric("every synthesized pixel is a hole".into()));
    }
    Ok(255.0 * sum / count as f64)
}

/// A network output mapped back through the adjustment and the rig.
#[derive(Clone, Debug)]
pub struct Recovered {
    /// Normalized prediction in `[0, 1]`.
    pub normalized: Plane,
    /// Depth in meters or disparity in pixels, following the mode.
    pub raw: Plane,
    pub disparity: DisparityMap,
    pub depth: Option<DepthMap>,
}

/// Inverts the adjustment on a `(1, 1, H, W)` network output and converts it
/// to raw units.
pub fn recover(output: &Plane, rig: &CameraRig, adjustment: AdjustmentParams, mode: TargetMode) -> Result<Recovered> {
    let normalized = DepthMap::predicted(output.clone())?.invert_adjust(adjustment)?;
    match mode {
        TargetMode::Depth => {
            let depth = normalized.denormalize(rig)?;
            Ok(Recovered {
                normalized: normalized.values().clone(),
                raw: depth.values().clone(),
                disparity: depth.to_disparity(rig)?,
                depth: Some(depth),
            })
        }
        TargetMode::Disparity => {
            let d_max = rig.d_max();
            let raw = normalized.values().map(|v| v * d_max);
            Ok(Recovered {
                normalized: normalized.values().clone(),
                disparity: DisparityMap::new(raw.clone())?,
                raw,
                depth: None,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    /// In report units: centimeters for depth, pixels for disparity.
    pub epe: f64,
    /// Mean `|z~ - z^|` in the normalized space.
    pub epe_normalized: f64,
    /// `None` when every synthesized pixel is a hole.
    pub mae_right: Option<f64>,
    pub hole_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: TargetMode,
    pub records: Vec<SampleRecord>,
    pub epe: f64,
    pub epe_normalized: f64,
    pub mae_right: Option<f64>,
    pub hole_fraction: f64,
}

impl EvalReport {
    pub fn from_records(mode: TargetMode, records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::DegenerateMetric("no samples evaluated".into()));
        }
        let n = records.len() as f64;
        let mean = |f: fn(&SampleRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let maes: Vec<f64> = records.iter().filter_map(|r| r.mae_right).collect();
        Ok(EvalReport {
            mode,
            epe: mean(|r| r.epe),
            epe_normalized: mean(|r| r.epe_normalized),
            mae_right: (!maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64),
            hole_fraction: mean(|r| r.hole_fraction),
            records,
        })
    }

    pub fn epe_unit(&self) -> &'static str {
        match self.mode {
            TargetMode::Depth => "cm",
            TargetMode::Disparity => "px",
        }
    }

    /// One JSON object per sample, then a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{{\"sample\":{},\"epe\":{},\"epe_normalized\":{},\"mae_right\":{},\"hole_fraction\":{}}}",
                r.id,
                json_number(r.epe),
                json_number(r.epe_normalized),
                r.mae_right.map_or("null".into(), json_number),
                json_number(r.hole_fraction)
            );
        }
        let _ = writeln!(
            out,
            "{{\"summary\":true,\"samples\":{},\"mode\":\"{}\",\"epe_unit\":\"{}\",\"epe\":{},\"epe_normalized\":{},\"mae_right\":{},\"hole_fraction\":{}}}",
            self.records.len(),
            self.mode.as_str(),
            self.epe_unit(),
            json_number(self.epe),
            json_number(self.epe_normalized),
            self.mae_right.map_or("null".into(), json_number),
            json_number(self.hole_fraction)
        );
        out
    }
}

/// Shortest round-trip decimal, or `null` for non-finite values.
pub fn json_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        "null".into()
    }
}

/// Scores one sample given the network output for it.
pub fn score_sample(sample: &StereoSample, output: &Plane, adjustment: AdjustmentParams) -> Result<SampleRecord> {
    let rig = &sample.rig;
    let mode = sample.ground_truth.mode();
    let rec = recover(output, rig, adjustment, mode)?;
    let scale = match mode {
        TargetMode::Depth => 100.0,
        TargetMode::Disparity => 1.0,
    };
    let epe_raw = epe(&rec.raw, sample.ground_truth.raw())? * scale;
    let epe_normalized = epe(&rec.normalized, &sample.ground_truth.normalized(rig))?;
    let synth = synthesize_right(&sample.left, &rec.disparity, rec.depth.as_ref())?;
    let mae = match mae_right(&synth, &sample.right) {
        Ok(v) => Some(v),
        Err(Error::DegenerateMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SampleRecord {
        id: sample.id,
        epe: epe_raw,
        epe_normalized,
        mae_right: mae,
        hole_fraction: synth.hole_fraction(),
    })
}

/// Runs the model in eval mode on every sample and aggregates the metrics in
/// sample order.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[StereoSample], adjustment: AdjustmentParams) -> Result<EvalReport> {
    let mode = model.config().output_mode;
    let mut records = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.ground_truth.mode() != mode {
            return Err(Error::config(format!(
                "model predicts {} but sample {} holds {}",
                mode.as_str(),
                sample.id,
                sample.ground_truth.mode().as_str()
            )));
        }
        let out = model.predict(&sample.left.cast::<T>(), &sample.right.cast::<T>())?;
        let output: Tensor<f64> = out.cast();
        records.push(score_sample(sample, &output, adjustment)?);
    }
    EvalReport::from_records(mode, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn plane(v: &[f64]) -> Plane {
        Tensor::from_slice(Shape::new(1, 1, 1, v.len()), v).unwrap()
    }

    #[test]
    fn epe_reference_values() {
        let gt = plane(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(epe(&gt, &gt).unwrap(), 0.0);
        assert_eq!(epe(&gt.map(|v| v + 1.0), &gt).unwrap(), 1.0);
        assert_eq!(epe(&plane(&[3.0, 2.0, 5.0, 4.0]), &gt).unwrap(), 1.0);
        assert_eq!(epe(&gt.map(|v| v - 0.25), &gt).unwrap(), 0.25);
        assert!(matches!(epe(&plane(&[1.0]), &gt), Err(Error::Shape(_))));
    }

    fn synth(image: Image, holes: Vec<bool>) -> Synthesized {
        Synthesized { image, holes }
    }

    #[test]
    fn mae_reference_values() {
        let s = Shape::new(1, 3, 2, 2);
        let reference = Tensor::full(s, 0.5);
        assert_eq!(mae_right(&synth(reference.clone(), vec![false; 4]), &reference).unwrap(), 0.0);
        let offset = reference.map(|v| v + 10.0 / 255.0);
        assert!((mae_right(&synth(offset, vec![false; 4]), &reference).unwrap() - 10.0).abs() < 1e-9);
        assert!(matches!(
            mae_right(&synth(reference.clone(), vec![true; 4]), &reference),
            Err(Error::DegenerateMetric(_))
        ));
    }

    #[test]
    fn mae_ignores_hole_pixels() {
        let s = Shape::new(1, 3, 1, 2);
        let reference = Tensor::full(s, 0.5);
        let mut a = reference.clone();
        a.set(0, 0, 0, 1, 0.9);
        let mut b = reference.clone();
        b.set(0, 2, 0, 1, 0.0);
        let holes = vec![false, true];
        assert_eq!(
            mae_right(&synth(a, holes.clone()), &reference).unwrap(),
            mae_right(&synth(b, holes), &reference).unwrap()
        );
    }

    #[test]
    fn recover_depth_roundtrip() {
        let rig = CameraRig::default();
        let p = AdjustmentParams::new(1.5).unwrap();
        let z = plane(&[0.5, 2.0, 9.0]);
        let zn = DepthMap::raw(z.clone(), &rig).unwrap().normalize(&rig).unwrap().adjust(p).unwrap();
        let rec = recover(zn.values(), &rig, p, TargetMode::Depth).unwrap();
        assert!(epe(&rec.raw, &z).unwrap() < 1e-12);
    }

    #[test]
    fn jsonl_has_summary_last() {
        let r = SampleRecord {
            id: 3,
            epe: 1.5,
            epe_normalized: 0.1,
            mae_right: None,
            hole_fraction: 0.0,
        };
        let report = EvalReport::from_records(TargetMode::Disparity, vec![r]).unwrap();
        let text = report.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"mae_right\":null"));
        assert!(lines[1].starts_with("{\"summary\":true"));
    }
}
