//! Attack grids over (variant × T × seed) evaluated against every target.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::image::write_perturbation_ppm;
use super::{ablation_masks, eligibility, fooling_count, FoolingCount, MaskStrategy};
use crate::attack::{run_attack, AttackConfig, MaskPolicy, Variant};
use crate::error::{Error, Result};
use crate::frequency::QuantMask;
use crate::models::io::{load_tensors, save_tensors, NamedTensor, TENSORS_MAGIC};
use crate::models::{load_dataset_split, load_weights, Classifier, Dataset, Model};
use crate::quantization::QuantConfig;
use crate::tensor::{l2_per_sample, linf_per_sample, ColorSpace, ImageTensor};

/// Columns of the report CSV, in order.
pub const REPORT_HEADER: [&str; 17] = [
    "experiment_id",
    "source",
    "target",
    "variant",
    "centralized",
    "strategy",
    "defense",
    "iters",
    "seed",
    "r_y",
    "r_cb",
    "r_cr",
    "n_eligible",
    "n_fooled",
    "fooling_rate",
    "mean_linf",
    "mean_l2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct NamedModel {
    pub id: String,
    pub model: Classifier<f32>,
}

impl NamedModel {
    pub fn new(id: impl Into<String>, model: Classifier<f32>) -> Self {
        Self { id: id.into(), model }
    }

    /// Loads weights; the id is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok(Self::new(id, load_weights(path)?))
    }
}

/// Models and data an experiment runs on.
#[derive(Debug, Clone)]
pub struct ExperimentInputs {
    pub source: NamedModel,
    pub targets: Vec<NamedModel>,
    /// Attacked samples (already truncated to the configured count).
    pub data: Dataset,
}

impl ExperimentInputs {
    pub fn new(source: NamedModel, targets: Vec<NamedModel>, data: &Dataset, samples: usize) -> Result<Self> {
        if samples > data.len() {
            return Err(Error::config(format!("{samples} samples requested but the test split has {}", data.len())));
        }
        if targets.iter().any(|t| t.id == source.id) {
            return Err(Error::config(format!("source {:?} is also a target", source.id)));
        }
        Ok(Self {
            source,
            targets,
            data: data.head(samples),
        })
    }

    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let data = load_dataset_split(&cfg.data, "test")?;
        let source = NamedModel::load(&cfg.source)?;
        let targets = cfg.targets.iter().map(|p| NamedModel::load(p)).collect::<Result<Vec<_>>>()?;
        Self::new(source, targets, &data, cfg.samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment_id: String,
    pub source: String,
    pub target: String,
    pub variant: Variant,
    pub centralized: bool,
    pub strategy: MaskStrategy,
    pub defense: String,
    pub iters: usize,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub n_eligible: usize,
    pub n_fooled: usize,
    pub fooling_rate: f64,
    pub mean_linf: f64,
    pub mean_l2: f64,
}

impl ReportRow {
    /// Strategy column value; vanilla runs have none.
    fn strategy_field(&self) -> &'static str {
        if self.centralized {
            self.strategy.id()
        } else {
            "none"
        }
    }

    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.experiment_id.clone(),
            self.source.clone(),
            self.target.clone(),
            self.variant.to_string(),
            self.centralized.to_string(),
            self.strategy_field().to_string(),
            self.defense.clone(),
            self.iters.to_string(),
            self.seed.to_string(),
            format!("{:.4}", self.ratios[0]),
            format!("{:.4}", self.ratios[1]),
            format!("{:.4}", self.ratios[2]),
            self.n_eligible.to_string(),
            self.n_fooled.to_string(),
            format!("{:.6}", self.fooling_rate),
            format!("{:.6}", self.mean_linf),
            format!("{:.6}", self.mean_l2),
        ]
    }

    pub fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != REPORT_HEADER.len() {
            return Err(Error::config(format!("report row has {} fields, expected {}", rec.len(), REPORT_HEADER.len())));
        }
        fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
            rec[i]
                .parse()
                .map_err(|_| Error::config(format!("report column {}: cannot parse {:?}", REPORT_HEADER[i], &rec[i])))
        }
        let strategy = match &rec[5] {
            "none" => MaskStrategy::Optimized,
            s => s.parse()?,
        };
        Ok(Self {
            experiment_id: rec[0].to_string(),
            source: rec[1].to_string(),
            target: rec[2].to_string(),
            variant: rec[3].parse()?,
            centralized: field(rec, 4)?,
            strategy,
            defense: rec[6].to_string(),
            iters: field(rec, 7)?,
            seed: field(rec, 8)?,
            ratios: [field(rec, 9)?, field(rec, 10)?, field(rec, 11)?],
            n_eligible: field(rec, 12)?,
            n_fooled: field(rec, 13)?,
            fooling_rate: field(rec, 14)?,
            mean_linf: field(rec, 15)?,
            mean_l2: field(rec, 16)?,
        })
    }
}

pub fn report_bytes(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    fs::write(path, report_bytes(rows)?)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(Error::config(format!("{} does not carry the report header", path.display())));
    }
    r.records().map(|rec| ReportRow::from_record(&rec?)).collect()
}

/// One attack of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub variant: Variant,
    pub iters: usize,
    pub seed: u64,
    pub x_adv: ImageTensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunRecord>,
}

pub fn run_id(cfg: &ExperimentConfig, variant: Variant, iters: usize, seed: u64) -> String {
    let mode = if cfg.centralize { cfg.strategy.id() } else { "vanilla" };
    format!("{}-{}-{}-t{}-s{}", cfg.id, variant, mode, iters, seed)
}

pub fn attack_config(cfg: &ExperimentConfig, variant: Variant, iters: usize, seed: u64) -> AttackConfig {
    AttackConfig {
        variant,
        epsilon0: cfg.epsilon,
        iters,
        centralize: cfg.centralize,
        seed,
        ..cfg.attack.clone()
    }
}

/// Runs one attack of the grid on the source model.
pub fn craft(cfg: &ExperimentConfig, inputs: &ExperimentInputs, variant: Variant, iters: usize, seed: u64) -> Result<ImageTensor<f32>> {
    craft_with(cfg, &cfg.quant, inputs, variant, iters, seed)
}

pub(crate) fn craft_with(
    cfg: &ExperimentConfig,
    quant: &QuantConfig,
    inputs: &ExperimentInputs,
    variant: Variant,
    iters: usize,
    seed: u64,
) -> Result<ImageTensor<f32>> {
    let acfg = attack_config(cfg, variant, iters, seed);
    let batch = inputs.data.len();
    let strategy = cfg.strategy;
    let schedule = move |t: usize| QuantMask::broadcast(ablation_masks(strategy, quant, seed, t), batch);
    let policy = match (cfg.centralize, strategy) {
        (true, MaskStrategy::Optimized) | (false, _) => MaskPolicy::Optimized,
        (true, _) => MaskPolicy::Scheduled(&schedule),
    };
    let qcfg = cfg.centralize.then_some(quant);
    let res = run_attack(&inputs.source.model, &inputs.data.images, &inputs.data.labels, &acfg, qcfg, policy)?;
    Ok(res.x_adv)
}

/// Clean-input eligibility of every target under the configured defense.
pub fn target_eligibility(cfg: &ExperimentConfig, inputs: &ExperimentInputs) -> Result<Vec<Vec<bool>>> {
    let clean = cfg.defense.apply(&inputs.data.images)?;
    inputs
        .targets
        .iter()
        .map(|t| Ok(eligibility(&t.model.predict(&clean)?, &inputs.data.labels, cfg.denominator)))
        .collect()
}

/// Fooling counts of `x_adv` against every target, after the defense.
pub fn evaluate_targets(
    cfg: &ExperimentConfig,
    inputs: &ExperimentInputs,
    eligible: &[Vec<bool>],
    x_adv: &ImageTensor<f32>,
) -> Result<Vec<FoolingCount>> {
    let defended = cfg.defense.apply(x_adv)?;
    inputs
        .targets
        .iter()
        .zip(eligible)
        .map(|(t, e)| fooling_count(&t.model.predict(&defended)?, &inputs.data.labels, e))
        .collect()
}

fn rows_for_run(
    cfg: &ExperimentConfig,
    inputs: &ExperimentInputs,
    eligible: &[Vec<bool>],
    run: &RunRecord,
) -> Result<Vec<ReportRow>> {
    let counts = evaluate_targets(cfg, inputs, eligible, &run.x_adv)?;
    let n = inputs.data.len() as f64;
    let mean_linf = linf_per_sample(&run.x_adv, &inputs.data.images).iter().sum::<f64>() / n;
    let mean_l2 = l2_per_sample(&run.x_adv, &inputs.data.images).iter().sum::<f64>() / n;
    Ok(inputs
        .targets
        .iter()
        .zip(counts)
        .map(|(t, c)| ReportRow {
            experiment_id: run.run_id.clone(),
            source: inputs.source.id.clone(),
            target: t.id.clone(),
            variant: run.variant,
            centralized: cfg.centralize,
            strategy: cfg.strategy,
            defense: cfg.defense.to_string(),
            iters: run.iters,
            seed: run.seed,
            ratios: if cfg.centralize { cfg.quant.ratios } else { [1.0; 3] },
            n_eligible: c.eligible,
            n_fooled: c.fooled,
            fooling_rate: c.rate(),
            mean_linf,
            mean_l2,
        })
        .collect())
}

fn grid(cfg: &ExperimentConfig) -> Vec<(Variant, usize, u64)> {
    let mut points = Vec::new();
    for &v in &cfg.variants {
        for &t in &cfg.iters {
            for &s in &cfg.seeds {
                points.push((v, t, s));
            }
        }
    }
    points
}

/// Runs the full grid in memory. Rows are ordered variant, T, seed, target.
pub fn run_experiment(cfg: &ExperimentConfig, inputs: &ExperimentInputs) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let eligible = target_eligibility(cfg, inputs)?;
    let runs = grid(cfg)
        .into_par_iter()
        .map(|(variant, iters, seed)| {
            Ok(RunRecord {
                run_id: run_id(cfg, variant, iters, seed),
                variant,
                iters,
                seed,
                x_adv: craft(cfg, inputs, variant, iters, seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for run in &runs {
        rows.extend(rows_for_run(cfg, inputs, &eligible, run)?);
    }
    Ok(ExperimentOutput { rows, runs })
}

pub fn report_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("report.csv")
}

pub fn artifact_path(cfg: &ExperimentConfig, run_id: &str) -> PathBuf {
    cfg.out.join("artifacts").join(format!("{run_id}.cft"))
}

/// Writes the report, the `x_adv` artifacts and the perturbation images.
pub fn persist(cfg: &ExperimentConfig, inputs: &ExperimentInputs, output: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    write_report(&report_path(cfg), &output.rows)?;
    if cfg.save_artifacts {
        fs::create_dir_all(cfg.out.join("artifacts"))?;
        for run in &output.runs {
            let [b, c, h, w] = run.x_adv.shape();
            let tensors = [
                NamedTensor::new("x_adv", vec![b, c, h, w], run.x_adv.data().to_vec()),
                NamedTensor::new("labels", vec![b], inputs.data.labels.iter().map(|&y| y as f32).collect()),
            ];
            save_tensors(&artifact_path(cfg, &run.run_id), &TENSORS_MAGIC, &tensors)?;
        }
    }
    if cfg.export_images > 0 {
        let dir = cfg.out.join("images");
        fs::create_dir_all(&dir)?;
        for run in &output.runs {
            let delta = run.x_adv.zip_map(&inputs.data.images, |a, b| a - b)?;
            for b in 0..cfg.export_images.min(delta.batch()) {
                write_perturbation_ppm(&delta, b, &dir.join(format!("{}-{b}.ppm", run.run_id)))?;
            }
        }
    }
    Ok(())
}

/// Loads a persisted `x_adv` artifact.
pub fn load_artifact(path: &Path) -> Result<ImageTensor<f32>> {
    let tensors = load_tensors(path, &TENSORS_MAGIC)?;
    let t = tensors
        .into_iter()
        .find(|t| t.name == "x_adv")
        .ok_or_else(|| Error::MissingTensor("x_adv".into()))?;
    if t.dims.len() != 4 {
        return Err(Error::MalformedTensor {
            name: t.name,
            reason: "expected rank 4".into(),
        });
    }
    ImageTensor::new([t.dims[0], t.dims[1], t.dims[2], t.dims[3]], t.data, ColorSpace::Rgb)
}

/// Rebuilds every report row from the persisted artifacts alone.
pub fn recompute_rows(cfg: &ExperimentConfig, inputs: &ExperimentInputs) -> Result<Vec<ReportRow>> {
    let eligible = target_eligibility(cfg, inputs)?;
    let mut rows = Vec::new();
    for (variant, iters, seed) in grid(cfg) {
        let id = run_id(cfg, variant, iters, seed);
        let run = RunRecord {
            x_adv: load_artifact(&artifact_path(cfg, &id))?,
            run_id: id,
            variant,
            iters,
            seed,
        };
        rows.extend(rows_for_run(cfg, inputs, &eligible, &run)?);
    }
    Ok(rows)
}

/// Loads everything from disk, runs the grid and persists the results.
pub fn run_experiment_files(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let inputs = ExperimentInputs::load(cfg)?;
    let output = run_experiment(cfg, &inputs)?;
    persist(cfg, &inputs, &output)?;
    Ok(output.rows)
}
