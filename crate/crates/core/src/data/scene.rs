//! Procedural stereo scenes made of fronto-parallel textured layers.
//!
//! Each surface carries band-limited value noise defined on the left
//! camera's pixel lattice. The left view samples it directly; the right view
//! samples every surface shifted by its exact disparity, so ground truth and
//! occlusion are known analytically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codec::quantize;
use super::{GroundTruth, StereoSample};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, DepthMap, DisparityMap};
use crate::loss::TargetMode;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureParams {
    pub octaves: usize,
    /// Lattice spacing of the coarsest octave, in pixels. Each further octave
    /// halves it.
    pub base_period: usize,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            octaves: 2,
            base_period: 16,
        }
    }
}

/// Smallest lattice spacing allowed for the finest octave.
pub const MIN_PERIOD: usize = 4;
/// Total noise amplitude around each surface's base color.
const NOISE_AMPLITUDE: f64 = 0.25;

impl TextureParams {
    fn validate(&self) -> Result<()> {
        if self.octaves == 0 || self.octaves > 8 {
            return Err(Error::config(format!("octaves {} outside 1..=8", self.octaves)));
        }
        let finest = self.base_period >> (self.octaves - 1);
        if finest < MIN_PERIOD || finest << (self.octaves - 1) != self.base_period {
            return Err(Error::config(format!(
                "base period {} must halve cleanly to at least {MIN_PERIOD} over {} octaves",
                self.base_period, self.octaves
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub layer_count: usize,
    /// `(z_near, z_far)` in meters; the background sits in the far quarter.
    pub depth_range: (f64, f64),
    pub texture: TextureParams,
    pub mode: TargetMode,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            height: 64,
            width: 64,
            layer_count: 3,
            depth_range: (0.5, 10.0),
            texture: TextureParams::default(),
            mode: TargetMode::Depth,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, rig: &CameraRig) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("scene extents must be positive"));
        }
        let (near, far) = self.depth_range;
        if !(near < far) || near < rig.z_min() || far > rig.z_max() {
            return Err(Error::config(format!(
                "depth range [{near}, {far}] must be increasing and inside [{}, {}]",
                rig.z_min(),
                rig.z_max()
            )));
        }
        self.texture.validate()
    }
}

/// An axis-aligned rectangle of constant depth, in left-image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub depth: f64,
}

impl Layer {
    fn covers(&self, u: f64, row: usize) -> bool {
        row >= self.y0 && row < self.y0 + self.height && u >= self.x0 as f64 && u < (self.x0 + self.width) as f64
    }
}

/// A fully specified scene: background plane plus layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background_depth: f64,
    pub layers: Vec<Layer>,
    pub texture: TextureParams,
    /// Salt for the surface textures and colors.
    pub texture_seed: u64,
}

/// Samples a layout from `config` and renders it.
pub fn generate_scene(config: &SceneConfig, rig: &CameraRig) -> Result<StereoSample> {
    config.validate(rig)?;
    let scene = layout_scene(config);
    render_scene(&scene, rig, config.mode)
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// Draws the background depth and the layer rectangles for `config`.
pub fn layout_scene(config: &SceneConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (near, far) = config.depth_range;
    let background_depth = f32_exact(far - 0.25 * (far - near) * rng.random::<f64>());
    let (h, w) = (config.height, config.width);
    let mut layers = Vec::with_capacity(config.layer_count);
    for _ in 0..config.layer_count {
        let lw = rng.random_range((w / 4).max(1)..=(w / 2).max(1));
        let lh = rng.random_range((h / 4).max(1)..=(h / 2).max(1));
        let x0 = rng.random_range(0..=w - lw);
        let y0 = rng.random_range(0..=h - lh);
        let depth = f32_exact(near + (background_depth - near) * rng.random::<f64>()).min(background_depth);
        layers.push(Layer {
            x0,
            y0,
            width: lw,
            height: lh,
            depth,
        });
    }
    Scene {
        height: h,
        width: w,
        background_depth,
        layers,
        texture: config.texture,
        texture_seed: rng.random(),
    }
}

fn hash(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = hash(seed ^ hash((ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ hash(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(seed: u64, u: f64, v: f64, period: f64) -> f64 {
    let (x, y) = (u / period, v / period);
    let (fx, fy) = (x.floor(), y.floor());
    let (sx, sy) = (smoothstep(x - fx), smoothstep(y - fy));
    let (ix, iy) = (fx as i64, fy as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + sx * (b - a);
    let bottom = c + sx * (d - c);
    top + sy * (bottom - top)
}

struct Surface {
    base: [f64; 3],
    seeds: [u64; 3],
}

impl Surface {
    fn new(scene_seed: u64, index: usize) -> Self {
        let s = hash(scene_seed ^ hash(index as u64 + 1));
        let mut base = [0.0; 3];
        let mut seeds = [0; 3];
        for c in 0..3 {
            let h = hash(s.wrapping_add(c as u64 * 2 + 1));
            base[c] = 0.25 + 0.5 * (h >> 11) as f64 / (1u64 << 53) as f64;
            seeds[c] = hash(s.wrapping_add(c as u64 * 2 + 2));
        }
        Surface { base, seeds }
    }

    fn color(&self, texture: &TextureParams, channel: usize, u: f64, v: f64) -> f64 {
        // amplitudes halve with the period and sum to NOISE_AMPLITUDE
        let norm: f64 = (0..texture.octaves).map(|o| 0.5f64.powi(o as i32)).sum();
        let mut value = self.base[channel];
        for o in 0..texture.octaves {
            let amp = NOISE_AMPLITUDE * 0.5f64.powi(o as i32) / norm;
            let period = (texture.base_period >> o) as f64;
            let n = value_noise(self.seeds[channel] ^ o as u64, u, v, period);
            value += amp * (2.0 * n - 1.0);
        }
        value
    }
}

fn quantized(v: f64) -> f64 {
    quantize(v) as f64 / 255.0
}

/// Renders both views, ground truth and the visibility mask.
pub fn render_scene(scene: &Scene, rig: &CameraRig, mode: TargetMode) -> Result<StereoSample> {
    let (h, w) = (scene.height, scene.width);
    if h == 0 || w == 0 {
        return Err(Error::config("scene extents must be positive"));
    }
    let in_rig = |z: f64| z >= rig.z_min() && z <= rig.z_max();
    if !in_rig(scene.background_depth) {
        return Err(Error::config("background depth outside the rig range"));
    }
    for l in &scene.layers {
        if l.width == 0 || l.height == 0 || l.x0 + l.width > w || l.y0 + l.height > h || !in_rig(l.depth) {
            return Err(Error::config(format!("layer {l:?} outside the image or rig range")));
        }
    }
    scene.texture.validate()?;

    // surface 0 is the background, surface k + 1 is layer k
    let depths: Vec<f64> = std::iter::once(scene.background_depth)
        .chain(scene.layers.iter().map(|l| l.depth))
        .collect();
    let disparities: Vec<f64> = depths.iter().map(|&z| rig.fb() / z).collect();
    let surfaces: Vec<Surface> = (0..depths.len()).map(|k| Surface::new(scene.texture_seed, k)).collect();

    // nearest surface whose footprint contains left-image position u on `row`
    let nearest = |u: f64, row: usize, shift: bool| -> usize {
        let mut best = 0;
        for (k, l) in scene.layers.iter().enumerate() {
            let s = k + 1;
            let x = if shift { u + disparities[s] } else { u };
            if l.covers(x, row) && disparities[s] > disparities[best] {
                best = s;
            }
        }
        best
    };

    let shape = Shape::new(1, 3, h, w);
    let mut left = Tensor::zeros(shape);
    let mut right = Tensor::zeros(shape);
    let mut left_id = vec![0usize; h * w];
    let mut right_id = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let s = nearest(x as f64, y, false);
            left_id[y * w + x] = s;
            let r = nearest(x as f64, y, true);
            right_id[y * w + x] = r;
            for c in 0..3 {
                let vl = surfaces[s].color(&scene.texture, c, x as f64, y as f64);
                left.set(0, c, y, x, quantized(vl));
                let vr = surfaces[r].color(&scene.texture, c, x as f64 + disparities[r], y as f64);
                right.set(0, c, y, x, quantized(vr));
            }
        }
    }

    // a left pixel is visible in both views when both right pixels used to
    // interpolate its correspondence show the same surface
    let mut occlusion = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let s = left_id[y * w + x];
            let c = x as f64 - disparities[s];
            if c < 0.0 || c > (w - 1) as f64 {
                continue;
            }
            let c0 = c.floor() as usize;
            let frac = c - c0 as f64;
            occlusion[y * w + x] = right_id[y * w + c0] == s && (frac == 0.0 || right_id[y * w + c0 + 1] == s);
        }
    }

    let plane = Shape::new(1, 1, h, w);
    let ground_truth = match mode {
        TargetMode::Depth => {
            let z = left_id.iter().map(|&s| depths[s]).collect();
            GroundTruth::Depth(DepthMap::raw(Tensor::new(plane, z)?, rig)?)
        }
        TargetMode::Disparity => {
            let d = left_id.iter().map(|&s| f32_exact(disparities[s])).collect();
            GroundTruth::Disparity(DisparityMap::new(Tensor::new(plane, d)?)?)
        }
    };
    Ok(StereoSample {
        id: 0,
        left,
        right,
        ground_truth,
        occlusion: Some(occlusion),
        rig: *rig,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{reconstruct_left, synthesize_right};

    fn rig() -> CameraRig {
        CameraRig::default()
    }

    fn scene(layers: Vec<Layer>, background_depth: f64) -> Scene {
        Scene {
            height: 16,
            width: 48,
            background_depth,
            layers,
            texture: TextureParams::default(),
            texture_seed: 5,
        }
    }

    #[test]
    fn background_only_scene_is_a_shift() {
        // fB = 4, z = 2 gives d = 2
        let s = render_scene(&scene(vec![], 2.0), &rig(), TargetMode::Disparity).unwrap();
        match &s.ground_truth {
            GroundTruth::Disparity(d) => assert!(d.values().data().iter().all(|&v| v == 2.0)),
            _ => unreachable!(),
        }
        for y in 0..16 {
            for x in 2..48 {
                for c in 0..3 {
                    assert_eq!(s.right.at(0, c, y, x - 2), s.left.at(0, c, y, x));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let cfg = SceneConfig {
            seed: 42,
            ..Default::default()
        };
        let a = generate_scene(&cfg, &rig()).unwrap();
        let b = generate_scene(&cfg, &rig()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneConfig { seed: 43, ..cfg }, &rig()).unwrap();
        assert_ne!(a.left, c.left);
    }

    #[test]
    fn occlusion_band_matches_disparity_gap() {
        // foreground d = 8 (z = 0.5), background d = 2 (z = 2)
        let layer = Layer {
            x0: 20,
            y0: 4,
            width: 10,
            height: 6,
            depth: 0.5,
        };
        let s = render_scene(&scene(vec![layer], 2.0), &rig(), TargetMode::Depth).unwrap();
        let mask = s.occlusion.as_ref().unwrap();
        for y in 0..16 {
            for x in 0..48 {
                let border = x < 2;
                let band = (4..10).contains(&y) && (14..20).contains(&x);
                assert_eq!(mask[y * 48 + x], !(border || band), "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn synthesized_hole_band_matches_disparity_gap() {
        let layer = Layer {
            x0: 20,
            y0: 4,
            width: 10,
            height: 6,
            depth: 0.5,
        };
        let s = render_scene(&scene(vec![layer], 2.0), &rig(), TargetMode::Depth).unwrap();
        let disparity = s.ground_truth.disparity(&rig());
        let synth = synthesize_right(&s.left, &disparity, None).unwrap();
        for y in 0..16 {
            for x in 0..48 {
                let border = x >= 46;
                let band = (4..10).contains(&y) && (22..28).contains(&x);
                assert_eq!(synth.holes[y * 48 + x], border || band, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn photoconsistent_on_visible_pixels() {
        for seed in 0..5 {
            let cfg = SceneConfig {
                seed,
                ..Default::default()
            };
            let s = generate_scene(&cfg, &rig()).unwrap();
            let (rec, _) = reconstruct_left(&s.right, &s.ground_truth.disparity(&rig())).unwrap();
            let mask = s.occlusion.as_ref().unwrap();
            let hw = 64 * 64;
            for (k, &visible) in mask.iter().enumerate() {
                if visible {
                    for c in 0..3 {
                        let e = (rec.data()[c * hw + k] - s.left.data()[c * hw + k]).abs();
                        assert!(e < 2.0 / 255.0, "seed {seed} pixel {k} error {e}");
                    }
                }
            }
        }
    }

    #[test]
    fn ground_truth_within_rig() {
        let s = generate_scene(&SceneConfig::default(), &rig()).unwrap();
        let d = s.ground_truth.disparity(&rig());
        assert!(d.values().data().iter().all(|&v| v >= 0.0 && v <= rig().d_max()));
        let z = s.ground_truth.depth(&rig());
        assert!(z.values().data().iter().all(|&v| v >= rig().z_min() && v <= rig().z_max()));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SceneConfig {
                depth_range: (0.01, 5.0),
                ..Default::default()
            },
            SceneConfig {
                depth_range: (5.0, 5.0),
                ..Default::default()
            },
            SceneConfig {
                width: 0,
                ..Default::default()
            },
            SceneConfig {
                texture: TextureParams {
                    octaves: 3,
                    base_period: 8,
                },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(generate_scene(&cfg, &rig()), Err(Error::Config(_))));
        }
    }
}
