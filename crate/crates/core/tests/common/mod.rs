#![allow(dead_code)]

use std::path::{Path, PathBuf};

use bioprop::data::idx::{encode_idx_images, encode_idx_labels, IdxImages};
use bioprop::experiment::{parse_config, ExperimentConfig};
use bioprop::Rng;

pub const SMOKE: &str = include_str!("../../../../configs/smoke.yaml");

/// Writes MNIST-format files under `root/mnist`. With `learnable`, class `c`
/// is a bright 6×6 square at a class-specific position over dim noise;
/// otherwise images are pure noise.
pub fn write_mnist(root: &Path, train: usize, test: usize, seed: u64, learnable: bool) {
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = Rng::new(seed);
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let mut pixels = Vec::with_capacity(n * 784);
        for &l in &labels {
            let (r0, c0) = (2 + (l as usize / 5) * 12, 1 + (l as usize % 5) * 5);
            for r in 0..28 {
                for c in 0..28 {
                    let inside = learnable && (r0..r0 + 6).contains(&r) && (c0..c0 + 6).contains(&c);
                    pixels.push(if inside { 200 + rng.below(56) as u8 } else { rng.below(if learnable { 60 } else { 256 }) as u8 });
                }
            }
        }
        let images = IdxImages { count: n, rows: 28, cols: 28, pixels };
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), encode_idx_images(&images)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx_labels(&labels)).unwrap();
    }
}

/// The shipped smoke config pointed at `data_root`, writing under `out`.
pub fn smoke_config(data_root: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = parse_config(SMOKE).unwrap();
    cfg.data.dataset_path = Some(data_root.display().to_string());
    cfg.experiment.output_dir = out.display().to_string();
    cfg
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.experiment.output_dir).join(&cfg.experiment.name)
}

/// `(step, val_top1)` rows of a metrics log.
pub fn val_rows(metrics: &str) -> Vec<(usize, f64)> {
    metrics
        .lines()
        .skip(1)
        .filter_map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (!c[6].is_empty()).then(|| (c[0].parse().unwrap(), c[6].parse().unwrap()))
        })
        .collect()
}
