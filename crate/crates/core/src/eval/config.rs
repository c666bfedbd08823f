//! Experiment configuration and its plain-text `key=value` form.

use std::path::{Path, PathBuf};

use super::{Denominator, MaskStrategy};
use crate::attack::{AttackConfig, Variant};
use crate::defense::{DefenseConfig, DefenseKind};
use crate::error::{Error, Result};
use crate::frequency::TransformMode;
use crate::quantization::QuantConfig;

/// Iteration counts used when none are given.
pub const DEFAULT_ITERS: [usize; 3] = [5, 10, 20];
/// Larger iteration set for full-length runs.
pub const LONG_ITERS: [usize; 3] = [10, 20, 50];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub id: String,
    /// Dataset container; the `test` split is attacked.
    pub data: PathBuf,
    pub source: PathBuf,
    pub targets: Vec<PathBuf>,
    pub variants: Vec<Variant>,
    /// Base budget on the `[0, 1]` scale.
    pub epsilon: f64,
    pub iters: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Number of leading test samples attacked.
    pub samples: usize,
    pub centralize: bool,
    pub strategy: MaskStrategy,
    pub quant: QuantConfig,
    pub defense: DefenseConfig,
    pub denominator: Denominator,
    /// Template for the variant-specific knobs; variant, budget, iteration
    /// count and seed are overwritten per run.
    pub attack: AttackConfig,
    pub out: PathBuf,
    /// Persist `x_adv` of every run for later verification.
    pub save_artifacts: bool,
    /// Number of normalized perturbation images written per run.
    pub export_images: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "exp".into(),
            data: PathBuf::from("data.cft"),
            source: PathBuf::new(),
            targets: Vec::new(),
            variants: vec![Variant::Mi],
            epsilon: 8.0 / 255.0,
            iters: DEFAULT_ITERS.to_vec(),
            seeds: vec![0],
            samples: 500,
            centralize: false,
            strategy: MaskStrategy::Optimized,
            quant: QuantConfig::default(),
            defense: DefenseConfig::default(),
            denominator: Denominator::Correct,
            attack: AttackConfig::default(),
            out: PathBuf::from("out"),
            save_artifacts: true,
            export_images: 0,
        }
    }
}

/// Parses `key=value` lines. Blank lines and text after `#` are ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        pairs.push((k.to_ascii_lowercase(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl ExperimentConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Sets one key. `epsilon` is given on the 8-bit scale.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key.replace('-', "_").as_str() {
            "id" => self.id = v.to_string(),
            "data" => self.data = PathBuf::from(v),
            "source" => self.source = PathBuf::from(v),
            "targets" => self.targets = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
            "variant" | "variants" => self.variants = list(key, v)?,
            "epsilon" => self.epsilon = num::<f64>(key, v)? / 255.0,
            "iters" => self.iters = list(key, v)?,
            "long_iters" => {
                if boolean(key, v)? {
                    self.iters = LONG_ITERS.to_vec();
                }
            }
            "seed" | "seeds" => self.seeds = list(key, v)?,
            "samples" => self.samples = num(key, v)?,
            "centralize" => self.centralize = boolean(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "ry" | "r_y" => self.quant.ratios[0] = num(key, v)?,
            "rcb" | "r_cb" => self.quant.ratios[1] = num(key, v)?,
            "rcr" | "r_cr" => self.quant.ratios[2] = num(key, v)?,
            "lr" | "beta" => self.quant.beta = num(key, v)?,
            "inner_steps" => self.quant.inner_steps = num(key, v)?,
            "transform" => {
                self.quant.mode = match v.to_ascii_lowercase().as_str() {
                    "global" => TransformMode::GlobalDct,
                    "block" => TransformMode::BlockDct,
                    _ => return Err(Error::config(format!("transform: expected global or block, got {v:?}"))),
                }
            }
            "defense" | "kind" => self.defense.kind = v.parse::<DefenseKind>()?,
            "quality" => self.defense.quality = num(key, v)?,
            "bits" => self.defense.bits = num(key, v)?,
            "denominator" => self.denominator = v.parse()?,
            "mu" => self.attack.mu = num(key, v)?,
            "alpha" => self.attack.alpha = Some(num::<f64>(key, v)? / 255.0),
            "di_prob" => self.attack.di_prob = num(key, v)?,
            "ti_kernel" => self.attack.ti_kernel = num(key, v)?,
            "si_copies" => self.attack.si_copies = num(key, v)?,
            "vmi_neighbors" => self.attack.vmi_neighbors = num(key, v)?,
            "vmi_bound" => self.attack.vmi_bound_factor = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "save_artifacts" => self.save_artifacts = boolean(key, v)?,
            "export_images" => self.export_images = num(key, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Checks everything that does not need the models or dataset.
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.iters.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("variants, iters and seeds must be non-empty"));
        }
        if self.iters.contains(&0) {
            return Err(Error::config("iteration counts must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.samples == 0 {
            return Err(Error::config("samples must be positive"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("at least one target model is required"));
        }
        if self.targets.contains(&self.source) {
            return Err(Error::config("the source model may not also be a target"));
        }
        if self.strategy != MaskStrategy::Optimized && !self.centralize {
            return Err(Error::config("ablation strategies require centralize=true"));
        }
        self.attack.validate()?;
        if self.centralize {
            self.quant.validate()?;
        }
        // surfaces quality/bit-depth range errors up front
        self.defense.apply(&crate::tensor::ImageTensor::<f32>::zeros([1, 3, 8, 8], crate::tensor::ColorSpace::Rgb))?;
        Ok(())
    }
}
