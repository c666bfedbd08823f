//! Quantization-mask optimization.
//!
//! Each sample owns real logits `P` per channel. The binary mask keeps the
//! entries at or above the `(1 − r)` quantile of `P`; gradients pass through
//! that rounding unchanged, and `P` takes one Adam ascent step on the source
//! loss of the centralized adversarial image per attack iteration.

use crate::error::{Error, Result};
use crate::frequency::{self, Block, ChannelMask, QuantMask, SampleMasks, SampleWeights, TransformMode, BLOCK_AREA};
use crate::models::Model;
use crate::tensor::{ImageTensor, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    /// Fractions of the 64 coefficient positions kept for Y, Cb, Cr.
    pub ratios: [f64; 3],
    /// Adam learning rate.
    pub beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Adam steps on `P` per attack iteration.
    pub inner_steps: usize,
    pub mode: TransformMode,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            ratios: [0.9, 0.05, 0.05],
            beta: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            inner_steps: 1,
            mode: TransformMode::GlobalDct,
        }
    }
}

impl QuantConfig {
    pub fn with_ratios(ratios: [f64; 3]) -> Self {
        Self {
            ratios,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in ["r_y", "r_cb", "r_cr"].iter().zip(self.ratios) {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name}={r} outside [0, 1]")));
            }
        }
        if !(self.beta > 0.0) {
            return Err(Error::config(format!("beta={} must be positive", self.beta)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam moment decays must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam epsilon must be positive"));
        }
        Ok(())
    }

    /// Mean of the three ratios.
    pub fn cumulative_rate(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / 3.0
    }
}

/// `ρ`: the `(1 − r)` quantile of the 64 logits, linearly interpolated
/// between order statistics.
pub fn threshold<T: Real>(p: &Block<T>, r: f64) -> T {
    let mut sorted = *p;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite logits"));
    let pos = (1.0 - r).clamp(0.0, 1.0) * (BLOCK_AREA - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `q_ij = 1` iff `p_ij ≥ ρ`; ties at `ρ` are all kept.
pub fn round_channel<T: Real>(p: &Block<T>, r: f64) -> ChannelMask {
    let rho = threshold(p, r);
    let mut mask = ChannelMask::zeros();
    for (k, &v) in p.iter().enumerate() {
        mask.0[k] = v >= rho;
    }
    mask
}

/// Backward pass of the rounding: `x̂ − detach(x) + x` differentiates to the
/// identity.
pub fn straight_through_backward<T: Copy>(upstream: &Block<T>) -> Block<T> {
    *upstream
}

/// Logits for one sample, all-ones at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLogits<T> {
    pub channels: [Block<T>; 3],
}

impl<T: Real> Default for QuantLogits<T> {
    fn default() -> Self {
        Self {
            channels: [[T::one(); BLOCK_AREA]; 3],
        }
    }
}

impl<T: Real> QuantLogits<T> {
    pub fn round_mask(&self, cfg: &QuantConfig) -> SampleMasks {
        [
            round_channel(&self.channels[0], cfg.ratios[0]),
            round_channel(&self.channels[1], cfg.ratios[1]),
            round_channel(&self.channels[2], cfg.ratios[2]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: [Block<T>; 3],
    pub v: [Block<T>; 3],
    pub t: u32,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self {
            m: [[T::zero(); BLOCK_AREA]; 3],
            v: [[T::zero(); BLOCK_AREA]; 3],
            t: 0,
        }
    }
}

/// Optimizer state owned by one sample of an attack.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState<T> {
    pub logits: QuantLogits<T>,
    pub adam: AdamState<T>,
}

impl<T: Real> Default for QuantState<T> {
    fn default() -> Self {
        Self {
            logits: QuantLogits::default(),
            adam: AdamState::default(),
        }
    }
}

impl<T: Real> QuantState<T> {
    /// One Adam step that increases the objective along `grad`.
    pub fn ascend(&mut self, grad: &SampleWeights<T>, cfg: &QuantConfig) {
        let b1 = T::lit(cfg.adam_beta1);
        let b2 = T::lit(cfg.adam_beta2);
        let eps = T::lit(cfg.adam_eps);
        let lr = T::lit(cfg.beta);
        self.adam.t += 1;
        let t = self.adam.t as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for c in 0..3 {
            let g = straight_through_backward(&grad[c]);
            for k in 0..BLOCK_AREA {
                let m = &mut self.adam.m[c][k];
                *m = b1 * *m + (T::one() - b1) * g[k];
                let v = &mut self.adam.v[c][k];
                *v = b2 * *v + (T::one() - b2) * g[k] * g[k];
                let m_hat = self.adam.m[c][k] / c1;
                let v_hat = self.adam.v[c][k] / c2;
                self.logits.channels[c][k] += lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn mask(&self, cfg: &QuantConfig) -> SampleMasks {
        self.logits.round_mask(cfg)
    }
}

/// Masks for a whole batch.
pub fn round_mask<T: Real>(states: &[QuantState<T>], cfg: &QuantConfig) -> QuantMask {
    QuantMask {
        samples: states.iter().map(|s| s.mask(cfg)).collect(),
    }
}

/// Per-sample gradient of `J(K(x_adv; Q), y)` with respect to the mask
/// entries, plus the per-sample losses at `K(x_adv; Q)`.
pub fn objective_grad<T: Real, M: Model<T> + ?Sized>(
    model: &M,
    x_adv: &ImageTensor<T>,
    labels: &[usize],
    masks: &QuantMask,
    mode: TransformMode,
) -> Result<(Vec<T>, Vec<SampleWeights<T>>)> {
    let quantized = frequency::centralize(x_adv, masks, mode)?;
    let (losses, upstream) = model.per_sample_loss_grad(&quantized, labels)?;
    let grads = frequency::mask_grad(x_adv, &upstream, mode)?;
    Ok((losses, grads))
}

/// Refreshes every sample's logits by `cfg.inner_steps` Adam ascent steps on
/// `J(K(x_adv; Q), y)` and returns the new masks.
pub fn q_step<T: Real, M: Model<T> + ?Sized>(
    model: &M,
    x_adv: &ImageTensor<T>,
    labels: &[usize],
    states: &mut [QuantState<T>],
    cfg: &QuantConfig,
) -> Result<QuantMask> {
    if states.len() != x_adv.batch() {
        return Err(Error::shape(format!(
            "{} optimizer states for a batch of {}",
            states.len(),
            x_adv.batch()
        )));
    }
    let mut masks = round_mask(states, cfg);
    for _ in 0..cfg.inner_steps {
        let (_, grads) = objective_grad(model, x_adv, labels, &masks, cfg.mode)?;
        if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite mask gradient".into()));
        }
        for (state, g) in states.iter_mut().zip(&grads) {
            state.ascend(g, cfg);
        }
        masks = round_mask(states, cfg);
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Sort, interpolate, count.
    fn oracle_count(p: &[f64; 64], r: f64) -> usize {
        let mut s = p.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = (1.0 - r) * 63.0;
        let lo = pos.floor() as usize;
        let rho = s[lo] + (s[pos.ceil() as usize] - s[lo]) * (pos - lo as f64);
        p.iter().filter(|&&v| v >= rho).count()
    }

    fn distinct(seed: u64) -> [f64; 64] {
        let mut vals: Vec<f64> = (1..=64).map(|v| v as f64).collect();
        vals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        vals.try_into().unwrap()
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold(&[1.0f64; 64], 0.3), 1.0);
        let p = distinct(1);
        assert_eq!(threshold(&p, 0.5), 32.5);
        assert_eq!(threshold(&p, 1.0), 1.0);
        assert_eq!(threshold(&p, 0.0), 64.0);
    }

    #[test]
    fn round_mask_examples() {
        assert_eq!(round_channel(&[1.0f32; 64], 0.9), ChannelMask::ones());
        let p = distinct(2);
        assert_eq!(round_channel(&p, 0.9).count_ones(), 57);
        assert_eq!(oracle_count(&p, 0.9), 57);
        let top = round_channel(&p, 0.0);
        assert_eq!(top.count_ones(), 1);
        let argmax = p.iter().position(|&v| v == 64.0).unwrap();
        assert!(top.0[argmax]);
    }

    #[test]
    fn initial_state_keeps_everything() {
        let s = QuantState::<f32>::default();
        for ratios in [[0.9, 0.05, 0.05], [0.01, 0.5, 1.0]] {
            let cfg = QuantConfig::with_ratios(ratios);
            assert_eq!(s.mask(&cfg), [ChannelMask::ones(); 3]);
        }
    }

    #[test]
    fn straight_through_is_identity() {
        let g: Block<f32> = std::array::from_fn(|k| (k as f32 - 31.5) * 0.37);
        assert_eq!(straight_through_backward(&g), g);
        assert_eq!(straight_through_backward(&[0.0f32; 64]), [0.0; 64]);
    }

    #[test]
    fn zero_gradient_step_is_noop() {
        let cfg = QuantConfig::default();
        let mut s = QuantState::<f64>::default();
        s.ascend(&[[0.0; 64]; 3], &cfg);
        assert_eq!(s.logits, QuantLogits::default());
        assert_eq!(s.mask(&cfg), [ChannelMask::ones(); 3]);
    }

    #[test]
    fn first_step_moves_by_beta_sign() {
        let cfg = QuantConfig::default();
        let mut s = QuantState::<f64>::default();
        let g = [[0.25; 64], [-3.0; 64], [1e-3; 64]];
        s.ascend(&g, &cfg);
        for c in 0..3 {
            let expect = cfg.beta * g[c][0] / (g[c][0].abs() + cfg.adam_eps);
            for &p in &s.logits.channels[c] {
                assert!((p - 1.0 - expect).abs() < 1e-12);
                assert!((p - 1.0 - cfg.beta * g[c][0].signum()).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn negative_gradient_flips_corner_entry() {
        let cfg = QuantConfig::default();
        let mut s = QuantState::<f64>::default();
        let mut g = [[0.0; 64]; 3];
        g[0][63] = -5.0;
        s.ascend(&g, &cfg);
        let mask = s.mask(&cfg);
        assert!(!mask[0].get(7, 7));
        assert_eq!(mask[0].count_ones(), 63);
        // oracle: ρ interpolates between the lowered entry and the ties at 1
        assert_eq!(oracle_count(&s.logits.channels[0], 0.9), 63);
    }

    #[test]
    fn update_is_bounded_by_beta() {
        let cfg = QuantConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = QuantState::<f64>::default();
        for _ in 0..20 {
            let before = s.logits.clone();
            let g: SampleWeights<f64> =
                std::array::from_fn(|_| std::array::from_fn(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)));
            s.ascend(&g, &cfg);
            for c in 0..3 {
                for k in 0..64 {
                    let d = (s.logits.channels[c][k] - before.channels[c][k]).abs();
                    // bias-corrected Adam: |m̂|/√v̂ ≤ (1−β1)/√(1−β2) in the worst case
                    assert!(d <= cfg.beta * (1.0 - cfg.adam_beta1) / (1.0 - cfg.adam_beta2).sqrt() + 1e-12);
                }
            }
        }
        let mut fresh = QuantState::<f64>::default();
        let g: SampleWeights<f64> = std::array::from_fn(|c| std::array::from_fn(|k| (k as f64 - 30.0) * (c as f64 + 1.0)));
        fresh.ascend(&g, &cfg);
        for c in 0..3 {
            for k in 0..64 {
                assert!((fresh.logits.channels[c][k] - 1.0).abs() <= cfg.beta * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(QuantConfig::default().validate().is_ok());
        assert!(QuantConfig::with_ratios([1.2, 0.0, 0.0]).validate().is_err());
        let mut cfg = QuantConfig::default();
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
        assert!((QuantConfig::default().cumulative_rate() - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn cardinality_matches_oracle(seed in 0u64..1000, step in 0usize..=20) {
            let r = step as f64 * 0.05;
            let p = distinct(seed);
            prop_assert_eq!(round_channel(&p, r).count_ones(), oracle_count(&p, r));
        }

        #[test]
        fn inclusion_is_monotone_in_ratio(
            vals in proptest::collection::vec(-5.0f64..5.0, 64),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let p: [f64; 64] = vals.try_into().unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(round_channel(&p, lo).is_subset_of(&round_channel(&p, hi)));
        }
    }
}
