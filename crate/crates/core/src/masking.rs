//! The four masking strategies used for self-supervised pretraining.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::WindowSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskStrategy {
    RandomBlock,
    Temporal,
    SensorWise,
    MultiScale,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::RandomBlock,
        MaskStrategy::Temporal,
        MaskStrategy::SensorWise,
        MaskStrategy::MultiScale,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// One variant per strategy for every window.
    Variants,
    /// One strategy drawn uniformly per window.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub ratio: f64,
    pub mode: MaskMode,
    pub block_min: usize,
    pub block_max: usize,
    pub scales: Vec<usize>,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            ratio: 0.5,
            mode: MaskMode::Variants,
            block_min: 8,
            block_max: 32,
            scales: vec![4, 8, 16, 32],
        }
    }
}

impl MaskingConfig {
    /// Checks the configuration against a `size x size` grid.
    pub fn validate(&self, size: usize) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.ratio)));
        }
        if self.block_min == 0 || self.block_min > self.block_max || self.block_max > size {
            return Err(Error::Config(format!(
                "block size range [{}, {}] does not fit a {size}x{size} grid",
                self.block_min, self.block_max
            )));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s == 0 || s > size) {
            return Err(Error::Config(format!(
                "multi-scale sizes {:?} must be non-empty and within 1..={size}",
                self.scales
            )));
        }
        Ok(())
    }

    /// Same configuration with block sizes shrunk proportionally for a grid
    /// smaller than 128.
    pub fn scaled_to(&self, size: usize) -> MaskingConfig {
        if size >= 128 {
            return self.clone();
        }
        let f = |s: usize| (s * size / 128).max(1);
        let mut scales: Vec<usize> = self.scales.iter().map(|&s| f(s)).collect();
        scales.dedup();
        MaskingConfig {
            block_min: f(self.block_min),
            block_max: f(self.block_max),
            scales,
            ..self.clone()
        }
    }
}

/// Binary validity grid, row-major `rows x cols` (sensor x time);
/// 1 = observed, 0 = masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<u8>,
    pub strategy: MaskStrategy,
    pub target_ratio: f64,
}

impl MaskTensor {
    pub fn all_valid(rows: usize, cols: usize, strategy: MaskStrategy) -> MaskTensor {
        MaskTensor {
            rows,
            cols,
            grid: vec![1; rows * cols],
            strategy,
            target_ratio: 0.0,
        }
    }

    pub fn masked_fraction(&self) -> f64 {
        self.grid.iter().filter(|&&v| v == 0).count() as f64 / self.grid.len() as f64
    }

    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.grid[r * self.cols + c] == 1
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.grid.iter().map(|&v| v as f64).collect()
    }
}

/// Generates a mask for the standard 128 x 128 window.
pub fn generate_mask<R: Rng + ?Sized>(strategy: MaskStrategy, cfg: &MaskingConfig, rng: &mut R) -> Result<MaskTensor> {
    generate_mask_sized(strategy, cfg, 128, rng)
}

/// Generates a mask over a `size x size` grid.
pub fn generate_mask_sized<R: Rng + ?Sized>(
    strategy: MaskStrategy,
    cfg: &MaskingConfig,
    size: usize,
    rng: &mut R,
) -> Result<MaskTensor> {
    cfg.validate(size)?;
    let mut grid = vec![1u8; size * size];
    match strategy {
        MaskStrategy::Temporal | MaskStrategy::SensorWise => {
            let count = (cfg.ratio * size as f64).round() as usize;
            for line in index::sample(rng, size, count) {
                for k in 0..size {
                    let idx = if strategy == MaskStrategy::Temporal {
                        k * size + line
                    } else {
                        line * size + k
                    };
                    grid[idx] = 0;
                }
            }
        }
        MaskStrategy::RandomBlock | MaskStrategy::MultiScale => {
            let target = (cfg.ratio * (size * size) as f64).round() as usize;
            let mut masked = 0;
            while masked < target {
                let (h, w) = if strategy == MaskStrategy::RandomBlock {
                    (
                        rng.random_range(cfg.block_min..=cfg.block_max),
                        rng.random_range(cfg.block_min..=cfg.block_max),
                    )
                } else {
                    let s = cfg.scales[rng.random_range(0..cfg.scales.len())];
                    (s, s)
                };
                let top = rng.random_range(0..=size - h);
                let left = rng.random_range(0..=size - w);
                let mut fresh = Vec::new();
                for r in top..top + h {
                    for c in left..left + w {
                        if grid[r * size + c] == 1 {
                            grid[r * size + c] = 0;
                            fresh.push(r * size + c);
                        }
                    }
                }
                masked += fresh.len();
                if masked > target {
                    // give back the overshoot from the block just placed
                    let excess = masked - target;
                    for i in index::sample(rng, fresh.len(), excess) {
                        grid[fresh[i]] = 1;
                    }
                    masked = target;
                }
            }
        }
    }
    Ok(MaskTensor {
        rows: size,
        cols: size,
        grid,
        strategy,
        target_ratio: cfg.ratio,
    })
}

/// Zeroes masked cells of a flat `rows x cols` buffer.
pub fn apply_mask_data(data: &[f64], mask: &MaskTensor) -> Result<Vec<f64>> {
    if data.len() != mask.grid.len() {
        return Err(Error::Shape(format!(
            "data has {} cells, mask has {}",
            data.len(),
            mask.grid.len()
        )));
    }
    Ok(data
        .iter()
        .zip(&mask.grid)
        .map(|(&v, &m)| if m == 1 { v } else { 0.0 })
        .collect())
}

/// A window with its masked cells zeroed, paired with the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedWindow {
    pub window: WindowSample,
    pub mask: MaskTensor,
}

pub fn apply_mask(w: &WindowSample, m: &MaskTensor) -> Result<MaskedWindow> {
    let data = apply_mask_data(&w.data, m)?;
    Ok(MaskedWindow {
        window: WindowSample { data, ..w.clone() },
        mask: m.clone(),
    })
}

/// Draws the masks used to augment one window: one per strategy in
/// `variants` mode, a single random strategy in `sampled` mode.
pub fn pretraining_masks<R: Rng + ?Sized>(cfg: &MaskingConfig, size: usize, rng: &mut R) -> Result<Vec<MaskTensor>> {
    match cfg.mode {
        MaskMode::Variants => MaskStrategy::ALL
            .iter()
            .map(|&s| generate_mask_sized(s, cfg, size, rng))
            .collect(),
        MaskMode::Sampled => {
            let s = MaskStrategy::ALL[rng.random_range(0..4)];
            Ok(vec![generate_mask_sized(s, cfg, size, rng)?])
        }
    }
}

/// The four masked variants of a 128 x 128 window, one per strategy.
pub fn make_pretraining_variants<R: Rng + ?Sized>(
    w: &WindowSample,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<Vec<MaskedWindow>> {
    MaskStrategy::ALL
        .iter()
        .map(|&s| apply_mask(w, &generate_mask(s, cfg, rng)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataio::{TrialKey, WINDOW};

    fn window(seed: u64) -> WindowSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..WINDOW * WINDOW).map(|_| rng.random_range(-1.0..1.0)).collect();
        WindowSample::new(data, 3, TrialKey { subject: 1, session: 1, trial: 2 }, 0)
    }

    fn full_lines(m: &MaskTensor, columns: bool) -> usize {
        (0..128)
            .filter(|&k| (0..128).all(|j| if columns { !m.is_valid(j, k) } else { !m.is_valid(k, j) }))
            .count()
    }

    #[test]
    fn temporal_and_sensor_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = generate_mask(MaskStrategy::Temporal, &MaskingConfig::default(), &mut rng).unwrap();
        assert_eq!(full_lines(&m, true), 64);
        assert_eq!(m.masked_fraction(), 0.5);
        let cfg = MaskingConfig { ratio: 0.25, ..Default::default() };
        let m = generate_mask(MaskStrategy::SensorWise, &cfg, &mut rng).unwrap();
        assert_eq!(full_lines(&m, false), 32);
        let untouched = (0..128).filter(|&r| (0..128).all(|c| m.is_valid(r, c))).count();
        assert_eq!(untouched, 96);
    }

    #[test]
    fn block_strategies_hit_ratio() {
        for strategy in [MaskStrategy::RandomBlock, MaskStrategy::MultiScale] {
            for seed in 0..100 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = generate_mask(strategy, &MaskingConfig::default(), &mut rng).unwrap();
                let f = m.masked_fraction();
                assert!((0.48..=0.52).contains(&f), "{strategy:?} seed {seed}: {f}");
            }
        }
    }

    #[test]
    fn invalid_ratio_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ratio in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            let cfg = MaskingConfig { ratio, ..Default::default() };
            assert!(matches!(
                generate_mask(MaskStrategy::Temporal, &cfg, &mut rng),
                Err(Error::Config(_))
            ));
        }
        let cfg = MaskingConfig { block_max: 200, ..Default::default() };
        assert!(generate_mask(MaskStrategy::RandomBlock, &cfg, &mut rng).is_err());
    }

    #[test]
    fn apply_mask_identity_zero_and_elementwise() {
        let w = window(3);
        let ones = MaskTensor::all_valid(128, 128, MaskStrategy::RandomBlock);
        assert_eq!(apply_mask(&w, &ones).unwrap().window, w);
        let zeros = MaskTensor { grid: vec![0; 128 * 128], ..ones.clone() };
        assert!(apply_mask(&w, &zeros).unwrap().window.data.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = generate_mask(MaskStrategy::MultiScale, &MaskingConfig::default(), &mut rng).unwrap();
        let out = apply_mask(&w, &m).unwrap().window;
        for i in 0..128 * 128 {
            let g = m.grid[i] as f64;
            assert_eq!(out.data[i] * (1.0 - g), 0.0);
            assert_eq!(out.data[i] * g, w.data[i] * g);
        }
        let small = MaskTensor::all_valid(64, 64, MaskStrategy::Temporal);
        assert!(matches!(apply_mask(&w, &small), Err(Error::Shape(_))));
    }

    #[test]
    fn variants_are_complete_and_deterministic() {
        let w = window(5);
        let cfg = MaskingConfig::default();
        let a = make_pretraining_variants(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_pretraining_variants(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let strategies: Vec<_> = a.iter().map(|v| v.mask.strategy).collect();
        assert_eq!(strategies, MaskStrategy::ALL.to_vec());
        for v in &a {
            let f = v.mask.masked_fraction();
            match v.mask.strategy {
                MaskStrategy::Temporal | MaskStrategy::SensorWise => assert_eq!(f, 0.5),
                _ => assert!((0.48..=0.52).contains(&f)),
            }
        }
    }

    #[test]
    fn sampled_mode_yields_one_mask() {
        let cfg = MaskingConfig { mode: MaskMode::Sampled, ..Default::default() };
        let masks = pretraining_masks(&cfg, 128, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(masks.len(), 1);
    }

    proptest! {
        #[test]
        fn masks_are_binary_and_homogeneous(seed in 0u64..10_000, ratio in 0.05f64..0.95, which in 0usize..4) {
            let strategy = MaskStrategy::ALL[which];
            let cfg = MaskingConfig { ratio, ..Default::default() };
            let m = generate_mask(strategy, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(m.grid.iter().all(|&v| v <= 1));
            let target = (ratio * 128.0 * 128.0).round() / (128.0 * 128.0);
            match strategy {
                MaskStrategy::Temporal => {
                    for c in 0..128 {
                        prop_assert!((0..128).all(|r| m.is_valid(r, c) == m.is_valid(0, c)));
                    }
                    prop_assert_eq!(full_lines(&m, true), (ratio * 128.0).round() as usize);
                }
                MaskStrategy::SensorWise => {
                    for r in 0..128 {
                        prop_assert!((0..128).all(|c| m.is_valid(r, c) == m.is_valid(r, 0)));
                    }
                    prop_assert_eq!(full_lines(&m, false), (ratio * 128.0).round() as usize);
                }
                _ => prop_assert_eq!(m.masked_fraction(), target),
            }
        }

        #[test]
        fn scaled_config_stays_valid(size in prop::sample::select(vec![16usize, 32, 64, 128])) {
            let cfg = MaskingConfig::default().scaled_to(size);
            prop_assert!(cfg.validate(size).is_ok());
            let m = generate_mask_sized(MaskStrategy::MultiScale, &cfg, size, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            prop_assert!((m.masked_fraction() - 0.5).abs() <= 0.02);
        }
    }
}
