//! Criterion benchmarks live in `benches/`; this crate only provides shared
//! input builders.

use stereodepth::data::{generate_scene, SceneConfig, StereoSample};
use stereodepth::geometry::CameraRig;

/// Deterministic square scene used as benchmark input.
pub fn bench_scene(size: usize) -> StereoSample {
    let config = SceneConfig {
        seed: 17,
        height: size,
        width: size,
        ..Default::default()
    };
    generate_scene(&config, &CameraRig::default()).expect("valid bench scene")
}
