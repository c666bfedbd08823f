//! Iterative gradient attacks with optional frequency centralization of the
//! perturbation.
//!
//! Each iteration takes a variant-specific gradient at the current
//! adversarial image, adds `α·sign(·)` to the accumulated perturbation,
//! centralizes it with the current masks, clips to the ℓ∞ ball and the pixel
//! range, and finally refreshes the masks from the source model.

pub mod variants;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frequency::{self, QuantMask};
use crate::models::layers::softmax_cross_entropy;
use crate::models::Model;
use crate::quantization::{self, QuantConfig, QuantState};
use crate::tensor::{ImageTensor, Real};
pub use variants::{
    gaussian_kernel, grad_sign_step, input_diversity, momentum_accumulate, scale_invariant_nesterov_grad, sign,
    translation_invariant_smooth, variance_tuned_grad, Diversity,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Bim,
    Mi,
    Di,
    Ti,
    SiNi,
    Vmi,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Bim, Variant::Mi, Variant::Di, Variant::Ti, Variant::SiNi, Variant::Vmi];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Bim => "bim",
            Variant::Mi => "mi",
            Variant::Di => "di",
            Variant::Ti => "ti",
            Variant::SiNi => "sini",
            Variant::Vmi => "vmi",
        }
    }

    fn uses_momentum(self) -> bool {
        self != Variant::Bim
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace(['-', '_'], "");
        let s = s.strip_suffix("fgsm").unwrap_or(&s);
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::config(format!("unknown attack variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub variant: Variant,
    /// ℓ∞ budget in pixel units, before any rescaling.
    pub epsilon0: f64,
    pub iters: usize,
    /// Step size; `ε / T` when unset.
    pub alpha: Option<f64>,
    pub mu: f64,
    pub di_prob: f64,
    pub di_low_ratio: f64,
    pub ti_kernel: usize,
    pub si_copies: usize,
    pub vmi_neighbors: usize,
    /// VMI sampling radius as a multiple of ε.
    pub vmi_bound_factor: f64,
    pub centralize: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mi,
            epsilon0: 8.0 / 255.0,
            iters: 10,
            alpha: None,
            mu: 1.0,
            di_prob: 0.5,
            di_low_ratio: 0.875,
            ti_kernel: 7,
            si_copies: 5,
            vmi_neighbors: 5,
            vmi_bound_factor: 1.5,
            centralize: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon0 > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.iters == 0 {
            return Err(Error::config("at least one iteration is required"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return Err(Error::config("alpha must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.di_prob) || !(0.0..=1.0).contains(&self.di_low_ratio) {
            return Err(Error::config("DI probability and ratio must lie in [0, 1]"));
        }
        if self.ti_kernel % 2 == 0 {
            return Err(Error::config("TI kernel size must be odd"));
        }
        if self.si_copies == 0 {
            return Err(Error::config("SI-NI needs at least one copy"));
        }
        if !(self.vmi_bound_factor >= 0.0) || !(self.mu >= 0.0) {
            return Err(Error::config("mu and the VMI bound factor must be non-negative"));
        }
        Ok(())
    }
}

/// `ε0 / ((r_Y + r_Cb + r_Cr) / 3)`: keeps the perturbation budget comparable
/// once most coefficients are discarded.
pub fn scale_epsilon(eps0: f64, cfg: &QuantConfig) -> Result<f64> {
    let rate = cfg.cumulative_rate();
    if !(rate > 0.0) {
        return Err(Error::config("cumulative quantization rate must be positive"));
    }
    Ok(eps0 / rate)
}

/// Where masks come from in a centralized run.
#[derive(Clone, Copy, Default)]
pub enum MaskPolicy<'a> {
    /// Percentile-rounded logits updated by Adam each iteration.
    #[default]
    Optimized,
    /// Fixed schedule indexed by iteration (ablation strategies).
    Scheduled(&'a (dyn Fn(usize) -> QuantMask + Sync)),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult<T> {
    pub x_adv: ImageTensor<T>,
    /// `x_adv − x`.
    pub delta: ImageTensor<T>,
    /// Mean white-box loss at the adversarial image before every iteration,
    /// then at the returned image.
    pub loss_trace: Vec<f64>,
    pub masks: Option<QuantMask>,
    pub iterations: usize,
    /// Budget actually enforced.
    pub epsilon: f64,
}

fn mean_loss<T: Real, M: Model<T> + ?Sized>(model: &M, x: &ImageTensor<T>, labels: &[usize]) -> Result<f64> {
    let k = model.num_classes();
    let logits = model.logits(x)?;
    let total: f64 = logits
        .chunks(k)
        .zip(labels)
        .map(|(z, &y)| softmax_cross_entropy(z, y).0.as_f64())
        .sum();
    Ok(total / labels.len().max(1) as f64)
}

fn mean<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len().max(1) as f64
}

/// Runs one attack on a batch. `qcfg` is required when centralizing.
pub fn run_attack<T: Real, M: Model<T> + ?Sized>(
    model: &M,
    x: &ImageTensor<T>,
    labels: &[usize],
    acfg: &AttackConfig,
    qcfg: Option<&QuantConfig>,
    policy: MaskPolicy<'_>,
) -> Result<AttackResult<T>> {
    acfg.validate()?;
    let qcfg = match (acfg.centralize, qcfg) {
        (true, None) => return Err(Error::config("centralized attack requires a quantization config")),
        (true, Some(q)) => {
            q.validate()?;
            Some(q)
        }
        (false, _) => None,
    };
    if labels.len() != x.batch() {
        return Err(Error::shape(format!("{} labels for a batch of {}", labels.len(), x.batch())));
    }

    let eps = match qcfg {
        Some(q) => scale_epsilon(acfg.epsilon0, q)?,
        None => acfg.epsilon0,
    };
    let alpha = acfg.alpha.unwrap_or(eps / acfg.iters as f64);
    let (eps_t, alpha_t, mu_t) = (T::lit(eps), T::lit(alpha), T::lit(acfg.mu));
    let batch = x.batch();
    let mut rng = ChaCha8Rng::seed_from_u64(acfg.seed);

    let mut states = vec![QuantState::<T>::default(); batch];
    let mut masks = match (qcfg, policy) {
        (Some(q), MaskPolicy::Optimized) => Some(quantization::round_mask(&states, q)),
        (Some(_), MaskPolicy::Scheduled(f)) => Some(f(0)),
        (None, _) => None,
    };

    let zeros = ImageTensor::zeros(x.shape(), x.color_space());
    let mut momentum = zeros.clone();
    let mut variance = zeros.clone();
    let mut x_adv = x.clone();
    let mut loss_trace = Vec::with_capacity(acfg.iters + 1);

    for t in 0..acfg.iters {
        let (grad, losses) = match acfg.variant {
            Variant::Bim | Variant::Mi => {
                let (l, g) = model.per_sample_loss_grad(&x_adv, labels)?;
                (g, Some(l))
            }
            Variant::Di => {
                let (xd, div) = input_diversity(&x_adv, acfg.di_prob, acfg.di_low_ratio, &mut rng)?;
                let (_, g) = model.per_sample_loss_grad(&xd, labels)?;
                (div.adjoint(&g)?, None)
            }
            Variant::Ti => {
                let (l, g) = model.per_sample_loss_grad(&x_adv, labels)?;
                (translation_invariant_smooth(&g, acfg.ti_kernel)?, Some(l))
            }
            Variant::SiNi => {
                let (g, _) = scale_invariant_nesterov_grad(model, &x_adv, labels, &momentum, alpha_t, mu_t, acfg.si_copies)?;
                (g, None)
            }
            Variant::Vmi => {
                let bound = acfg.vmi_bound_factor * eps;
                let (g, v, l) = variance_tuned_grad(model, &x_adv, labels, &variance, acfg.vmi_neighbors, bound, &mut rng)?;
                variance = v;
                (g, Some(l))
            }
        };
        loss_trace.push(match losses {
            Some(l) => mean(&l),
            None => mean_loss(model, &x_adv, labels)?,
        });
        if grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at iteration {t}")));
        }

        let direction = if acfg.variant.uses_momentum() {
            momentum = momentum_accumulate(&momentum, &grad, mu_t)?;
            &momentum
        } else {
            &grad
        };

        // accumulated perturbation plus this iteration's increment
        let mut delta = x_adv.zip_map(x, |a, b| a - b)?.zip_map(direction, |d, g| d + alpha_t * sign(g))?;
        if let (Some(q), Some(m)) = (qcfg, &masks) {
            delta = frequency::centralize(&delta, m, q.mode)?;
        }
        let delta = delta.map(|d| d.max(-eps_t).min(eps_t));
        x_adv = x.zip_map(&delta, |a, d| a + d)?.clamp01();

        if let Some(q) = qcfg {
            masks = Some(match policy {
                MaskPolicy::Optimized => quantization::q_step(model, &x_adv, labels, &mut states, q)?,
                MaskPolicy::Scheduled(f) => f(t + 1),
            });
        }
    }
    loss_trace.push(mean_loss(model, &x_adv, labels)?);

    let delta = x_adv.zip_map(x, |a, b| a - b)?;
    Ok(AttackResult {
        x_adv,
        delta,
        loss_trace,
        masks,
        iterations: acfg.iters,
        epsilon: eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ColorSpace;

    /// Linear softmax model `z = W·x` over flattened inputs.
    struct Linear {
        w: Vec<f64>,
        classes: usize,
    }

    impl Model<f64> for Linear {
        fn num_classes(&self) -> usize {
            self.classes
        }

        fn logits(&self, x: &ImageTensor<f64>) -> Result<Vec<f64>> {
            let n = x.sample_len();
            Ok((0..x.batch())
                .flat_map(|b| {
                    let s = x.sample(b);
                    (0..self.classes)
                        .map(|k| self.w[k * n..(k + 1) * n].iter().zip(s).map(|(a, b)| a * b).sum())
                        .collect::<Vec<f64>>()
                })
                .collect())
        }

        fn per_sample_loss_grad(&self, x: &ImageTensor<f64>, labels: &[usize]) -> Result<(Vec<f64>, ImageTensor<f64>)> {
            let n = x.sample_len();
            let z = self.logits(x)?;
            let mut losses = Vec::new();
            let mut data = Vec::new();
            for b in 0..x.batch() {
                let (l, gz) = softmax_cross_entropy(&z[b * self.classes..(b + 1) * self.classes], labels[b]);
                losses.push(l);
                data.extend((0..n).map(|i| (0..self.classes).map(|k| gz[k] * self.w[k * n + i]).sum::<f64>()));
            }
            Ok((losses, x.with_data(data)?))
        }
    }

    fn setup(seed: u64) -> (Linear, ImageTensor<f64>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * 16 * 16;
        let w = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = (0..2 * n).map(|_| rng.gen_range(0.2..0.8)).collect();
        (Linear { w, classes: 3 }, ImageTensor::new([2, 3, 16, 16], x, ColorSpace::Rgb).unwrap())
    }

    #[test]
    fn scale_epsilon_examples() {
        let e = scale_epsilon(8.0 / 255.0, &QuantConfig::with_ratios([0.9, 0.05, 0.05])).unwrap();
        assert!((e - 24.0 / 255.0).abs() < 1e-15);
        assert_eq!(scale_epsilon(0.1, &QuantConfig::with_ratios([1.0, 1.0, 1.0])).unwrap(), 0.1);
        let e = scale_epsilon(8.0 / 255.0, &QuantConfig::with_ratios([0.5, 0.25, 0.25])).unwrap();
        assert!((e - 24.0 / 255.0).abs() < 1e-15);
        assert!(scale_epsilon(0.1, &QuantConfig::with_ratios([0.0; 3])).is_err());
    }

    #[test]
    fn single_bim_step_is_fgsm() {
        let (m, x) = setup(1);
        let labels = [0, 2];
        let cfg = AttackConfig {
            variant: Variant::Bim,
            iters: 1,
            ..AttackConfig::default()
        };
        let r = run_attack(&m, &x, &labels, &cfg, None, MaskPolicy::Optimized).unwrap();
        let (_, g) = m.per_sample_loss_grad(&x, &labels).unwrap();
        let expect = x.zip_map(&g, |a, gv| (a + cfg.epsilon0 * sign(gv)).clamp(0.0, 1.0)).unwrap();
        assert!(r.x_adv.zip_map(&expect, |a, b| a - b).unwrap().max_abs() < 1e-15);
        assert_eq!(r.loss_trace.len(), 2);
        assert!(r.masks.is_none());
    }

    #[test]
    fn grad_sign_step_examples() {
        let (m, x) = setup(2);
        let inc = grad_sign_step(&m, &x, &[1, 1], 0.01).unwrap();
        assert!((inc.max_abs() - 0.01).abs() < 1e-15);
        assert!(inc.data().iter().all(|v| v.abs() == 0.01 || *v == 0.0));
        let zero = Linear { w: vec![0.0; 3 * 768], classes: 3 };
        assert_eq!(grad_sign_step(&zero, &x, &[1, 1], 0.01).unwrap().max_abs(), 0.0);
        assert!(grad_sign_step(&m, &x, &[1, 1], 0.0).is_err());
    }

    #[test]
    fn identity_centralization_matches_vanilla() {
        let (m, x) = setup(3);
        let labels = [1, 0];
        let q = QuantConfig {
            inner_steps: 0,
            ..QuantConfig::with_ratios([1.0, 1.0, 1.0])
        };
        for variant in [Variant::Bim, Variant::Mi] {
            let base = AttackConfig::new(variant);
            let vanilla = run_attack(&m, &x, &labels, &base, None, MaskPolicy::Optimized).unwrap();
            let cent = AttackConfig { centralize: true, ..base };
            let c = run_attack(&m, &x, &labels, &cent, Some(&q), MaskPolicy::Optimized).unwrap();
            assert!(c.x_adv.zip_map(&vanilla.x_adv, |a, b| a - b).unwrap().max_abs() <= 1e-4);
            assert_eq!(c.masks.unwrap(), QuantMask::ones(2));
        }
    }

    #[test]
    fn centralize_requires_quant_config() {
        let (m, x) = setup(4);
        let cfg = AttackConfig {
            centralize: true,
            ..AttackConfig::default()
        };
        assert!(matches!(run_attack(&m, &x, &[0, 0], &cfg, None, MaskPolicy::Optimized), Err(Error::Config(_))));
    }

    #[test]
    fn budget_and_determinism_for_every_variant() {
        let (m, x) = setup(5);
        let labels = [2, 1];
        let q = QuantConfig::default();
        for variant in Variant::ALL {
            for centralize in [false, true] {
                let cfg = AttackConfig {
                    variant,
                    centralize,
                    iters: 4,
                    seed: 11,
                    ..AttackConfig::default()
                };
                let a = run_attack(&m, &x, &labels, &cfg, Some(&q), MaskPolicy::Optimized).unwrap();
                let b = run_attack(&m, &x, &labels, &cfg, Some(&q), MaskPolicy::Optimized).unwrap();
                assert_eq!(a, b);
                let eps = if centralize { 24.0 / 255.0 } else { 8.0 / 255.0 };
                assert!((a.epsilon - eps).abs() < 1e-12);
                assert!(a.delta.max_abs() <= eps + 1e-6, "{variant} {centralize}");
                assert!(a.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn scheduled_masks_are_used() {
        let (m, x) = setup(6);
        let q = QuantConfig::default();
        let sched = |_t: usize| QuantMask::zeros(2);
        let cfg = AttackConfig {
            centralize: true,
            ..AttackConfig::default()
        };
        let r = run_attack(&m, &x, &[0, 1], &cfg, Some(&q), MaskPolicy::Scheduled(&sched)).unwrap();
        assert_eq!(r.delta.max_abs(), 0.0);
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.id().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("MI-FGSM".parse::<Variant>().unwrap(), Variant::Mi);
        assert_eq!("si-ni".parse::<Variant>().unwrap(), Variant::SiNi);
        assert!("pgd".parse::<Variant>().is_err());
    }
}
