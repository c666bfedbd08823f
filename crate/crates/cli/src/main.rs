use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freqattack_core::defense::DefenseConfig;
use freqattack_core::eval::config::ExperimentConfig;
use freqattack_core::eval::experiment::{read_report, report_path, run_experiment_files, ExperimentInputs};
use freqattack_core::eval::report::{aggregate_over_iters, write_summary};
use freqattack_core::eval::sweep::{parse_channel, ratio_sweep, write_sweep};
use freqattack_core::models::io::{load_tensors, save_tensors, NamedTensor, TENSORS_MAGIC};
use freqattack_core::models::{
    generate_synthetic_dataset, load_dataset_split, save_dataset, save_weights, train, Arch, Classifier, SynthDatasetSpec,
    TrainConfig,
};
use freqattack_core::{ColorSpace, Error, ImageTensor, Result};

#[derive(Parser)]
#[command(name = "freqattack", version, about = "Frequency-centralized transfer attacks on small image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shape dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4000)]
        n_train: usize,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on a generated dataset.
    Train {
        #[arg(long)]
        arch: Arch,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Craft adversarial examples on the source and evaluate the targets.
    Attack(ExperimentArgs),
    /// Centralized attack with a fixed mask strategy.
    Ablate {
        #[arg(long)]
        strategy: String,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Sweep one channel's quantization ratio.
    Sweep {
        #[arg(long)]
        channel: String,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        /// Sum of the three ratios held at every grid point.
        #[arg(long, default_value_t = 1.0)]
        total: f64,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Apply an input defense to every image tensor in a container.
    Defend {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 75)]
        quality: u8,
        #[arg(long, default_value_t = 3)]
        bits: u8,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate a report over iteration counts.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags shared by the experiment subcommands. Each overrides the matching
/// key of `--config`.
#[derive(Args, Default)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    source: Option<String>,
    /// Comma-separated weight files.
    #[arg(long)]
    targets: Option<String>,
    /// Comma-separated: bim, mi, di, ti, sini, vmi.
    #[arg(long)]
    variant: Option<String>,
    /// Budget on the 8-bit scale.
    #[arg(long)]
    epsilon: Option<String>,
    /// Comma-separated iteration counts.
    #[arg(long)]
    iters: Option<String>,
    /// Use the long iteration set 10,20,50.
    #[arg(long)]
    long_iters: bool,
    #[arg(long)]
    centralize: bool,
    #[arg(long)]
    ry: Option<String>,
    #[arg(long)]
    rcb: Option<String>,
    #[arg(long)]
    rcr: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    inner_steps: Option<String>,
    /// Comma-separated attack seeds.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    /// none, jpeg or bitdepth.
    #[arg(long)]
    defense: Option<String>,
    #[arg(long)]
    quality: Option<String>,
    #[arg(long)]
    bits: Option<String>,
    /// all or correct.
    #[arg(long)]
    denominator: Option<String>,
    #[arg(long)]
    export_images: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        let pairs = [
            ("id", &self.id),
            ("data", &self.data),
            ("source", &self.source),
            ("targets", &self.targets),
            ("variants", &self.variant),
            ("epsilon", &self.epsilon),
            ("iters", &self.iters),
            ("ry", &self.ry),
            ("rcb", &self.rcb),
            ("rcr", &self.rcr),
            ("lr", &self.lr),
            ("inner_steps", &self.inner_steps),
            ("seeds", &self.seed),
            ("samples", &self.samples),
            ("defense", &self.defense),
            ("quality", &self.quality),
            ("bits", &self.bits),
            ("denominator", &self.denominator),
            ("export_images", &self.export_images),
            ("out", &self.out),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if self.long_iters {
            cfg.set("long_iters", "true")?;
        }
        if self.centralize {
            cfg.centralize = true;
        }
        Ok(cfg)
    }
}

fn print_rows(rows: &[freqattack_core::eval::ReportRow]) {
    for r in rows {
        println!(
            "{:<40} -> {:<16} fooling {:.4} ({}/{})",
            r.experiment_id, r.target, r.fooling_rate, r.n_fooled, r.n_eligible
        );
    }
}

fn defend_file(defense: &DefenseConfig, input: &Path, out: &Path) -> Result<()> {
    let mut tensors = load_tensors(input, &TENSORS_MAGIC)?;
    for t in tensors.iter_mut().filter(|t| t.dims.len() == 4) {
        let x = ImageTensor::new([t.dims[0], t.dims[1], t.dims[2], t.dims[3]], std::mem::take(&mut t.data), ColorSpace::Rgb)?;
        *t = NamedTensor::new(t.name.clone(), t.dims.clone(), defense.apply(&x)?.into_data());
    }
    save_tensors(out, &TENSORS_MAGIC, &tensors)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            n_train,
            n_test,
            out,
        } => {
            let (tr, te) = generate_synthetic_dataset(&SynthDatasetSpec::new(seed, n_train, n_test))?;
            save_dataset(&out, &tr, &te)?;
            println!("wrote {} train and {} test images to {}", tr.len(), te.len(), out.display());
        }
        Command::Train {
            arch,
            data,
            epochs,
            seed,
            lr,
            batch_size,
            out,
        } => {
            let tr = load_dataset_split(&data, "train")?;
            let te = load_dataset_split(&data, "test")?;
            let [_, c, h, w] = tr.images.shape();
            let mut model = Classifier::new(arch, [c, h, w], freqattack_core::models::dataset::NUM_CLASSES, seed)?;
            let cfg = TrainConfig {
                epochs,
                batch_size,
                learning_rate: lr,
                seed,
                ..TrainConfig::default()
            };
            let m = train(&mut model, &tr, &te, &cfg)?;
            save_weights(&model, &out)?;
            println!(
                "{arch}: train accuracy {:.4}, test accuracy {:.4}, saved to {}",
                m.train_accuracy,
                m.test_accuracy,
                out.display()
            );
        }
        Command::Attack(args) => {
            let cfg = args.resolve()?;
            print_rows(&run_experiment_files(&cfg)?);
            println!("report: {}", report_path(&cfg).display());
        }
        Command::Ablate { strategy, exp } => {
            let mut cfg = exp.resolve()?;
            cfg.set("strategy", &strategy)?;
            cfg.centralize = true;
            print_rows(&run_experiment_files(&cfg)?);
            println!("report: {}", report_path(&cfg).display());
        }
        Command::Sweep {
            channel,
            steps,
            total,
            exp,
        } => {
            let mut cfg = exp.resolve()?;
            cfg.centralize = true;
            cfg.validate()?;
            let channel = parse_channel(&channel)?;
            let inputs = ExperimentInputs::load(&cfg)?;
            let rows = ratio_sweep(&cfg, &inputs, channel, steps, total)?;
            std::fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join("sweep.csv");
            write_sweep(&path, &rows)?;
            for r in &rows {
                match &r.row {
                    Some(row) => println!("{:?} -> {:<16} fooling {:.4}", r.point.ratios, row.target, row.fooling_rate),
                    None => println!("{:?} infeasible, skipped", r.point.ratios),
                }
            }
            println!("sweep: {}", path.display());
        }
        Command::Defend {
            kind,
            quality,
            bits,
            input,
            out,
        } => {
            let defense = DefenseConfig {
                kind: kind.parse()?,
                quality,
                bits,
            };
            defend_file(&defense, &input, &out)?;
            println!("applied {defense} to {}, wrote {}", input.display(), out.display());
        }
        Command::Report { input, out } => {
            let summary = aggregate_over_iters(&read_report(&input)?);
            write_summary(&out, &summary)?;
            println!("{} groups written to {}", summary.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
