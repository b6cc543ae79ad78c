//! Closed-form operation counts and wall-clock scaling measurements.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lexer::UNK_ID;
use crate::model::Afpnet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub n: usize,
    pub embed_dim: usize,
    pub stride: usize,
    pub heights: Vec<usize>,
    pub kernels_per_height: usize,
    pub num_heights: usize,
    pub top_p: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Per-height terms of `flop_fpm`.
    pub flop_fpm_per_height: Vec<u64>,
    pub flop_fpm: u64,
    pub flop_rpam: u64,
    /// `flop_fpm + blocks * flop_rpam`.
    pub flop_total: u64,
    pub space_fpm: u64,
    pub space_rpam: u64,
    pub space_total: u64,
}

/// Evaluates the operation and space counts for one input length.
pub fn count_flops(config: &ModelConfig, n: usize) -> Result<CostModel> {
    config.validate()?;
    if n < config.max_height() {
        return Err(Error::Config(format!(
            "length {n} is shorter than the tallest kernel ({})",
            config.max_height()
        )));
    }
    let (k, s, j) = (config.embed_dim as u64, config.stride as u64, config.kernels_per_height as u64);
    let n64 = n as u64;
    let flop_fpm_per_height: Vec<u64> = config
        .heights
        .iter()
        .map(|&h| ((n64 - h as u64) / s + 1) * k * j)
        .collect();
    let flop_fpm = flop_fpm_per_height.iter().sum();
    let rows = config.rows() as u64;
    let width = config.width() as u64;
    let flop_rpam = rows * rows * width;
    let space_fpm = config.heights.iter().map(|&h| n64 * k * j * s * h as u64).sum();
    let space_rpam = config.heads as u64 * width * width + width * rows;
    Ok(CostModel {
        n,
        embed_dim: config.embed_dim,
        stride: config.stride,
        heights: config.heights.clone(),
        kernels_per_height: config.kernels_per_height,
        num_heights: config.num_heights(),
        top_p: config.top_p,
        blocks: config.blocks,
        heads: config.heads,
        flop_fpm_per_height,
        flop_fpm,
        flop_rpam,
        flop_total: flop_fpm + config.blocks as u64 * flop_rpam,
        space_fpm,
        space_rpam,
        space_total: space_fpm + space_rpam,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub n: usize,
    pub repeats: usize,
    pub min_secs: f64,
    pub median_secs: f64,
    pub max_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub parallel: bool,
    pub timings: Vec<Timing>,
    /// `median[i + 1] / median[i]` for consecutive lengths.
    pub median_ratios: Vec<f64>,
}

pub const MIN_REPEATS: usize = 10;

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[m]
    } else {
        (sorted[m - 1] + sorted[m]) / 2.0
    }
}

/// Times full forward passes on uniform-random token ids.
///
/// Each length gets one untimed warm-up run before `repeats` timed runs.
pub fn measure_scaling<T: Scalar>(
    model: &Afpnet<T>,
    lengths: &[usize],
    repeats: usize,
    parallel: bool,
    seed: u64,
) -> Result<ScalingReport> {
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("lengths must be a non-empty ascending list".into()));
    }
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!("at least {MIN_REPEATS} repeats are required, got {repeats}")));
    }
    let max_h = model.config().max_height();
    if lengths[0] < max_h {
        return Err(Error::Config(format!("length {} is shorter than the tallest kernel ({max_h})", lengths[0])));
    }
    let vocab = model.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut timings = Vec::with_capacity(lengths.len());
    for &n in lengths {
        // ids >= UNK never collide with padding
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(UNK_ID..vocab.max(UNK_ID + 1))).collect();
        model.forward_with(&ids, parallel)?;
        let mut secs = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            let pass = model.forward_with(&ids, parallel)?;
            secs.push(start.elapsed().as_secs_f64());
            drop(pass);
        }
        secs.sort_by(f64::total_cmp);
        timings.push(Timing {
            n,
            repeats,
            min_secs: secs[0],
            median_secs: median(&secs),
            max_secs: secs[secs.len() - 1],
        });
    }
    let median_ratios = timings.windows(2).map(|w| w[1].median_secs / w[0].median_secs).collect();
    Ok(ScalingReport {
        parallel,
        timings,
        median_ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_height(h: usize, j: usize, k: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: k,
            heights: vec![h],
            kernels_per_height: j,
            top_p: 15,
            ..Default::default()
        }
    }

    #[test]
    fn worked_example() {
        let c = count_flops(&single_height(2, 200, 256), 100).unwrap();
        assert_eq!(c.flop_fpm, 5_068_800);
        assert_eq!(c.flop_rpam, 200 * 200 * 16);
        assert_eq!(c.flop_total, c.flop_fpm + 6 * c.flop_rpam);
    }

    #[test]
    fn rpam_cost_ignores_length() {
        let cfg = ModelConfig::default();
        let a = count_flops(&cfg, 100).unwrap();
        let b = count_flops(&cfg, 5000).unwrap();
        assert_eq!(a.flop_rpam, b.flop_rpam);
        assert_eq!(a.space_rpam, b.space_rpam);
    }

    #[test]
    fn doubling_length() {
        let cfg = ModelConfig::default();
        for n in [1100, 2000, 7777] {
            let r = count_flops(&cfg, 2 * n).unwrap().flop_fpm as f64 / count_flops(&cfg, n).unwrap().flop_fpm as f64;
            assert!((1.9..=2.1).contains(&r), "{r}");
        }
    }

    #[test]
    fn too_short() {
        assert!(count_flops(&ModelConfig::default(), 10).is_err());
        assert!(count_flops(&ModelConfig::default(), 11).is_ok());
    }

    #[test]
    fn scaling_preconditions() {
        let model = Afpnet::<f32>::init(single_height(2, 2, 4), 5, 0).unwrap();
        assert!(measure_scaling(&model, &[20, 10], 10, false, 0).is_err());
        assert!(measure_scaling(&model, &[10, 20], 9, false, 0).is_err());
        assert!(measure_scaling(&model, &[1], 10, false, 0).is_err());
        let r = measure_scaling(&model, &[10, 10, 20], 10, false, 0).unwrap();
        assert_eq!(r.median_ratios.len(), 2);
        for t in &r.timings {
            assert!(t.min_secs <= t.median_secs && t.median_secs <= t.max_secs);
        }
    }
}
