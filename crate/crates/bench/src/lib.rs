//! Benchmark fixtures.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chronoeval_core::builder::{build_stage, read_samples, stage_files, BuildConfig, BuildSources, Quotas, SampleLine, Stage};
use chronoeval_core::modelgw::{CameraIntrinsics, DepthMap};
use chronoeval_core::{synthetic, Corpus, Templates};

pub const FACTOR: usize = 10;

pub fn corpus(n: usize) -> Corpus {
    synthetic::corpus(n, 6, 60, Path::new("/bench/frames"))
}

pub fn build_config(out_dir: PathBuf, seed: u64) -> BuildConfig {
    BuildConfig {
        factor: FACTOR,
        quotas: Quotas::default(),
        seed,
        out_dir,
    }
}

/// Builds the Tag and Long stages into `out_dir` and returns their samples.
pub fn eval_lines(corpus: &Corpus, out_dir: &Path) -> Vec<SampleLine> {
    let templates = Templates::default();
    let authored = HashMap::new();
    let src = BuildSources {
        templates: &templates,
        annotator: None,
        authored: &authored,
    };
    let cfg = build_config(out_dir.to_path_buf(), 0);
    let mut lines = Vec::new();
    for stage in [Stage::Tag, Stage::Long] {
        build_stage(corpus, stage, &cfg, &src).expect("build");
        lines.extend(read_samples(&out_dir.join(stage_files(stage).0)).expect("samples"));
    }
    lines
}

/// A tilted plane seen by a VGA-like camera.
pub fn depth_plane(width: usize, height: usize) -> (DepthMap, CameraIntrinsics) {
    let data = (0..width * height)
        .map(|i| 1.0 + 0.001 * (i % width) as f64 + 0.002 * (i / width) as f64)
        .collect();
    let k = CameraIntrinsics::new(525.0, 525.0, width as f64 / 2.0, height as f64 / 2.0).expect("intrinsics");
    (DepthMap::new(width, height, data).expect("depth"), k)
}
