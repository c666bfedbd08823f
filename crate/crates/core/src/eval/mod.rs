//! Experiment orchestration: fooling rates, ablation masks, experiment
//! grids, ratio sweeps and CSV reports.

pub mod config;
pub mod experiment;
pub mod image;
pub mod report;
pub mod sweep;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frequency::{ChannelMask, SampleMasks, BLOCK, BLOCK_AREA};
use crate::models::Model;
use crate::quantization::QuantConfig;
use crate::tensor::{ImageTensor, Real};

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, run_experiment_files, ExperimentInputs, NamedModel, ReportRow};
pub use sweep::{ratio_sweep, sweep_grid, SweepPoint};

/// Which samples count toward the fooling-rate denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Denominator {
    /// Every sample; fooled means the prediction differs from the label.
    All,
    /// Samples the target classifies correctly on clean input.
    #[default]
    Correct,
}

impl FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Denominator::All),
            "correct" => Ok(Denominator::Correct),
            other => Err(Error::config(format!("unknown denominator {other:?}"))),
        }
    }
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Denominator::All => "all",
            Denominator::Correct => "correct",
        })
    }
}

/// Numerator and denominator of a fooling rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoolingCount {
    pub fooled: usize,
    pub eligible: usize,
}

impl FoolingCount {
    pub fn rate(&self) -> f64 {
        self.fooled as f64 / self.eligible as f64
    }
}

/// Counts eligible samples whose prediction differs from the label.
pub fn fooling_count(predictions: &[usize], labels: &[usize], eligible: &[bool]) -> Result<FoolingCount> {
    if predictions.len() != labels.len() || labels.len() != eligible.len() {
        return Err(Error::shape("predictions, labels and eligibility differ in length"));
    }
    let n = eligible.iter().filter(|&&e| e).count();
    if n == 0 {
        return Err(Error::EmptyEligibleSet);
    }
    let fooled = predictions
        .iter()
        .zip(labels)
        .zip(eligible)
        .filter(|((p, y), &e)| e && p != y)
        .count();
    Ok(FoolingCount { fooled, eligible: n })
}

/// Eligibility mask for `denominator` given clean predictions.
pub fn eligibility(clean_predictions: &[usize], labels: &[usize], denominator: Denominator) -> Vec<bool> {
    match denominator {
        Denominator::All => vec![true; labels.len()],
        Denominator::Correct => clean_predictions.iter().zip(labels).map(|(p, y)| p == y).collect(),
    }
}

/// Fraction of eligible samples the model misclassifies on `x_adv`.
pub fn fooling_rate<T: Real, M: Model<T> + ?Sized>(model: &M, x_adv: &ImageTensor<T>, labels: &[usize], eligible: &[bool]) -> Result<f64> {
    Ok(fooling_count(&model.predict(x_adv)?, labels, eligible)?.rate())
}

/// JPEG zig-zag scan index of every position of an 8×8 block.
pub fn zigzag_order() -> [[u8; BLOCK]; BLOCK] {
    let mut m = [[0u8; BLOCK]; BLOCK];
    let (mut r, mut c) = (0usize, 0usize);
    for k in 0..BLOCK_AREA as u8 {
        m[r][c] = k;
        let up = (r + c) % 2 == 0;
        if up {
            if c == BLOCK - 1 {
                r += 1;
            } else if r == 0 {
                c += 1;
            } else {
                r -= 1;
                c += 1;
            }
        } else if r == BLOCK - 1 {
            c += 1;
        } else if c == 0 {
            r += 1;
        } else {
            r += 1;
            c -= 1;
        }
    }
    m
}

/// How masks are chosen during a centralized attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MaskStrategy {
    /// Gradient-optimized masks.
    #[default]
    Optimized,
    /// Random masks drawn once.
    RandA,
    /// Random masks redrawn every iteration.
    RandB,
    /// Lowest zig-zag frequencies.
    Low,
    /// Highest zig-zag frequencies.
    High,
}

impl MaskStrategy {
    pub fn id(self) -> &'static str {
        match self {
            MaskStrategy::Optimized => "optimized",
            MaskStrategy::RandA => "randa",
            MaskStrategy::RandB => "randb",
            MaskStrategy::Low => "low",
            MaskStrategy::High => "high",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "optimized" | "ours" => Ok(MaskStrategy::Optimized),
            "randa" => Ok(MaskStrategy::RandA),
            "randb" => Ok(MaskStrategy::RandB),
            "low" => Ok(MaskStrategy::Low),
            "high" => Ok(MaskStrategy::High),
            other => Err(Error::config(format!("unknown mask strategy {other:?}"))),
        }
    }
}

/// `⌈64·r⌉`, tolerant of representation error in `r`.
pub fn kept_count(r: f64) -> usize {
    ((r * BLOCK_AREA as f64 - 1e-9).ceil().max(0.0) as usize).min(BLOCK_AREA)
}

/// Fixed-strategy mask for one channel. `Optimized` has no fixed mask and
/// yields all ones.
pub fn ablation_mask(strategy: MaskStrategy, r: f64, seed: u64, iteration: usize) -> ChannelMask {
    let k = kept_count(r);
    let zz = zigzag_order();
    let mut mask = ChannelMask::zeros();
    match strategy {
        MaskStrategy::Optimized => return ChannelMask::ones(),
        MaskStrategy::RandA | MaskStrategy::RandB => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if strategy == MaskStrategy::RandB {
                rng.set_stream(iteration as u64 + 1);
            }
            let mut pos: Vec<usize> = (0..BLOCK_AREA).collect();
            pos.shuffle(&mut rng);
            for &p in &pos[..k] {
                mask.0[p] = true;
            }
        }
        MaskStrategy::Low | MaskStrategy::High => {
            for r in 0..BLOCK {
                for c in 0..BLOCK {
                    let idx = zz[r][c] as usize;
                    let keep = if strategy == MaskStrategy::Low {
                        idx < k
                    } else {
                        idx >= BLOCK_AREA - k
                    };
                    mask.set(r, c, keep);
                }
            }
        }
    }
    mask
}

/// Per-channel ablation masks at the configured ratios; each channel draws
/// from its own seed.
pub fn ablation_masks(strategy: MaskStrategy, cfg: &QuantConfig, seed: u64, iteration: usize) -> SampleMasks {
    std::array::from_fn(|c| {
        let channel_seed = seed.wrapping_mul(3).wrapping_add(c as u64);
        ablation_mask(strategy, cfg.ratios[c], channel_seed, iteration)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const APPENDIX_ZIGZAG: [[u8; 8]; 8] = [
        [0, 1, 5, 6, 14, 15, 27, 28],
        [2, 4, 7, 13, 16, 26, 29, 42],
        [3, 8, 12, 17, 25, 30, 41, 43],
        [9, 11, 18, 24, 31, 40, 44, 53],
        [10, 19, 23, 32, 39, 45, 52, 54],
        [20, 22, 33, 38, 46, 51, 55, 60],
        [21, 34, 37, 47, 50, 56, 59, 61],
        [35, 36, 48, 49, 57, 58, 62, 63],
    ];

    #[test]
    fn zigzag_matches_fixture() {
        let z = zigzag_order();
        assert_eq!(z, APPENDIX_ZIGZAG);
        assert_eq!(z[0][0], 0);
        assert_eq!(z[0][2], 5);
        let mut all: Vec<u8> = z.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<u8>>());
    }

    #[test]
    fn fooling_examples() {
        let labels = [0, 1, 2, 3];
        let all = [true; 4];
        assert_eq!(fooling_count(&labels, &labels, &all).unwrap().rate(), 0.0);
        assert_eq!(fooling_count(&[1, 2, 3, 0], &labels, &all).unwrap().rate(), 1.0);
        let c = fooling_count(&[1, 1, 3, 3], &labels, &[true, true, false, false]).unwrap();
        assert_eq!(c, FoolingCount { fooled: 1, eligible: 2 });
        assert!(matches!(fooling_count(&labels, &labels, &[false; 4]), Err(Error::EmptyEligibleSet)));
        // clean inputs under the `correct` denominator are never fooled
        let clean = [0, 2, 2, 1];
        let elig = eligibility(&clean, &labels, Denominator::Correct);
        assert_eq!(fooling_count(&clean, &labels, &elig).unwrap().fooled, 0);
    }

    #[test]
    fn ablation_examples() {
        let low = ablation_mask(MaskStrategy::Low, 1.0 / 64.0, 0, 0);
        assert_eq!(low.count_ones(), 1);
        assert!(low.get(0, 0));
        let high = ablation_mask(MaskStrategy::High, 1.0 / 64.0, 0, 0);
        assert_eq!(high.count_ones(), 1);
        assert!(high.get(7, 7));
        assert_eq!(ablation_mask(MaskStrategy::RandA, 0.3, 5, 1), ablation_mask(MaskStrategy::RandA, 0.3, 5, 5));
        assert_ne!(ablation_mask(MaskStrategy::RandB, 0.3, 5, 1), ablation_mask(MaskStrategy::RandB, 0.3, 5, 5));
        assert_eq!(ablation_mask(MaskStrategy::RandB, 0.3, 5, 2), ablation_mask(MaskStrategy::RandB, 0.3, 5, 2));
        assert_eq!(ablation_mask(MaskStrategy::RandA, 0.3, 5, 0).count_ones(), 20);
        assert_eq!(kept_count(0.9), 58);
        assert_eq!(kept_count(0.05), 4);
        assert_eq!(kept_count(0.0), 0);
        assert_eq!(kept_count(1.0), 64);
    }

    #[test]
    fn low_and_high_are_complementary() {
        for k in 0..=64 {
            let r = k as f64 / 64.0;
            let low = ablation_mask(MaskStrategy::Low, r, 0, 0);
            let high = ablation_mask(MaskStrategy::High, 1.0 - r, 0, 0);
            for i in 0..64 {
                assert_ne!(low.0[i], high.0[i]);
            }
        }
    }

    #[test]
    fn strategy_names() {
        for s in [MaskStrategy::Optimized, MaskStrategy::RandA, MaskStrategy::RandB, MaskStrategy::Low, MaskStrategy::High] {
            assert_eq!(s.id().parse::<MaskStrategy>().unwrap(), s);
        }
        assert_eq!("correct".parse::<Denominator>().unwrap(), Denominator::Correct);
        assert!("most".parse::<Denominator>().is_err());
    }
}
