//! Command-line entry point: dataset generation and corruption, staged
//! training runs, evaluation, and report exports. A TOML config file drives
//! every hyperparameter; flags override the file; the effective config is
//! echoed into the output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvfuzz::config::RunConfig;
use mvfuzz::data::io::{load_csv, save_dataset_csv, LabelSource};
use mvfuzz::data::{inject_misalignment, inject_noise, CorruptionSpec};
use mvfuzz::error::Error;
use mvfuzz::gmm::DivisionResult;
use mvfuzz::manifest::{write_atomic, RunManifest};
use mvfuzz::metrics::{division_rates, uncertainty_density};
use mvfuzz::pipeline::{
    build_datasets, derive_seed, evaluate_run, run_control, run_pipeline, TrainedEnsemble,
};

fn config_reference() -> String {
    let defaults = RunConfig::default()
        .to_toml_string()
        .unwrap_or_else(|e| format!("<unavailable: {e}>"));
    format!(
        "CONFIG KEYS AND DEFAULTS (TOML; any subset may be overridden):\n\n{defaults}"
    )
}

#[derive(Parser)]
#[command(
    name = "mvfuzz",
    about = "Fuzzy multi-view classification with conflict-aware fusion and staged robust training",
    after_help = config_reference(),
    after_long_help = config_reference()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply for anything unset.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(short, long)]
    out_dir: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print progress details.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset (with the configured
    /// corruption applied) as CSV files plus conflict ground truth.
    GenData(Common),
    /// Apply the configured corruption to an existing CSV dataset.
    Corrupt(Common),
    /// Run the staged training pipeline (or the single-stage control).
    Train {
        #[command(flatten)]
        common: Common,
        /// Train the control arm instead: one stage with the plain
        /// multi-task loss and average fusion, same epoch budget.
        #[arg(long)]
        single_stage: bool,
    },
    /// Evaluate a finished run: accuracy, FPR95, division quality, and
    /// uncertainty density, written as report.json and density.csv.
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Compare a run's division table against the dataset's ground truth.
    DivideReport {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Export the uncertainty histogram of a run over its test split.
    Density {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    write_atomic(
        &dir.join("effective_config.toml"),
        cfg.to_toml_string()?.as_bytes(),
    )
}

fn gen_data(common: &Common) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let mut ds = mvfuzz::data::generate_synthetic(
        cfg.data.views,
        cfg.data.classes,
        cfg.data.instances,
        &cfg.data.view_dims,
        cfg.data.separation,
        derive_seed(cfg.seed, 1),
    )?;
    let c = &cfg.data.corruption;
    if c.misalign_rate > 0.0 {
        ds = inject_misalignment(
            &ds,
            &CorruptionSpec {
                misalign_rate: c.misalign_rate,
                views_per_instance: c.views_per_instance,
                noise_rate: 0.0,
                noise_std: c.noise_std,
                noise_mean: c.noise_mean,
                seed: derive_seed(cfg.seed, 2),
            },
        )?;
    }
    if c.noise_rate > 0.0 {
        ds = inject_noise(
            &ds,
            &CorruptionSpec {
                misalign_rate: 0.0,
                views_per_instance: c.views_per_instance,
                noise_rate: c.noise_rate,
                noise_std: c.noise_std,
                noise_mean: c.noise_mean,
                seed: derive_seed(cfg.seed, 3),
            },
        )?;
    }
    echo_config(&cfg, &common.out_dir)?;
    let files = save_dataset_csv(&ds, &common.out_dir)?;
    if common.verbose {
        for f in &files {
            eprintln!("wrote {}", f.display());
        }
    }
    println!(
        "generated {} instances x {} views into {}",
        ds.instance_count(),
        ds.view_count(),
        common.out_dir.display()
    );
    Ok(())
}

fn corrupt(common: &Common) -> Result<(), Error> {
    let cfg = load_config(common)?;
    if cfg.data.csv.view_paths.is_empty() {
        return Err(Error::config(
            "corrupt requires data.csv.view_paths pointing at the dataset to corrupt",
        ));
    }
    let labels = match (&cfg.data.csv.label_file, &cfg.data.csv.label_column) {
        (Some(path), None) => LabelSource::File(path.clone()),
        (None, Some(column)) => LabelSource::Column(column.clone()),
        _ => {
            return Err(Error::config(
                "set exactly one of data.csv.label_file / data.csv.label_column",
            ))
        }
    };
    let ds = load_csv(&cfg.data.csv.view_paths, &labels)?;
    let c = &cfg.data.corruption;
    let mut out = ds;
    if c.misalign_rate > 0.0 {
        out = inject_misalignment(
            &out,
            &CorruptionSpec {
                misalign_rate: c.misalign_rate,
                views_per_instance: c.views_per_instance,
                noise_rate: 0.0,
                noise_std: c.noise_std,
                noise_mean: c.noise_mean,
                seed: derive_seed(cfg.seed, 2),
            },
        )?;
    }
    if c.noise_rate > 0.0 {
        out = inject_noise(
            &out,
            &CorruptionSpec {
                misalign_rate: 0.0,
                views_per_instance: c.views_per_instance,
                noise_rate: c.noise_rate,
                noise_std: c.noise_std,
                noise_mean: c.noise_mean,
                seed: derive_seed(cfg.seed, 3),
            },
        )?;
    }
    echo_config(&cfg, &common.out_dir)?;
    save_dataset_csv(&out, &common.out_dir)?;
    println!(
        "corrupted dataset written to {}",
        common.out_dir.display()
    );
    Ok(())
}

fn train(common: &Common, single_stage: bool) -> Result<(), Error> {
    let cfg = load_config(common)?;
    if common.verbose {
        eprintln!("building datasets (seed {})", cfg.seed);
    }
    let (train, test) = build_datasets(&cfg)?;
    let manifest = if single_stage {
        run_control(&train, &test, &cfg, &common.out_dir)?
    } else {
        run_pipeline(&train, &test, &cfg, &common.out_dir)?
    };
    let final_eval = manifest
        .final_eval
        .as_ref()
        .ok_or_else(|| Error::invalid("run finished without a final evaluation"))?;
    println!(
        "run complete: test accuracy {:.4} ({} fusion), artifacts in {}",
        final_eval.test_accuracy,
        final_eval.fusion,
        common.out_dir.display()
    );
    Ok(())
}

fn eval(run_dir: &Path) -> Result<(), Error> {
    let report = evaluate_run(run_dir)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::config(format!("report encode: {e}")))?;
    write_atomic(&run_dir.join("report.json"), json.as_bytes())?;
    write_atomic(
        &run_dir.join("density.csv"),
        report.uncertainty_histogram.to_csv().as_bytes(),
    )?;
    println!(
        "test accuracy {:.4}, fpr95 {}, report.json and density.csv written to {}",
        report.test_accuracy,
        report
            .fpr95
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        run_dir.display()
    );
    Ok(())
}

fn divide_report(run_dir: &Path) -> Result<(), Error> {
    let manifest = RunManifest::load(run_dir)?;
    let division_path = run_dir.join("division.csv");
    if !division_path.exists() {
        return Err(Error::invalid(format!(
            "{} has no division.csv (single-stage run?)",
            run_dir.display()
        )));
    }
    let division = DivisionResult::from_csv(&std::fs::read_to_string(&division_path)?)?;
    let (train, _) = build_datasets(&manifest.config)?;
    let truth = train
        .conflicts
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset carries no conflict ground truth"))?;
    let rates = division_rates(&division, truth)?;
    let json = serde_json::to_string_pretty(&rates)
        .map_err(|e| Error::config(format!("report encode: {e}")))?;
    write_atomic(&run_dir.join("division_report.json"), json.as_bytes())?;
    for warning in &rates.warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "division quality: fpr {}, fnr {}, average {} (division_report.json written)",
        fmt_rate(rates.pooled_fpr),
        fmt_rate(rates.pooled_fnr),
        fmt_rate(rates.pooled_average),
    );
    Ok(())
}

fn fmt_rate(rate: Option<f64>) -> String {
    rate.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

fn density(run_dir: &Path) -> Result<(), Error> {
    let manifest = RunManifest::load(run_dir)?;
    let final_eval = manifest
        .final_eval
        .as_ref()
        .ok_or_else(|| Error::invalid("run has no final evaluation"))?;
    let ensemble = TrainedEnsemble::load(&run_dir.join(&final_eval.checkpoint))?;
    let (_, test) = build_datasets(&manifest.config)?;
    let eval = ensemble.evaluate(&test)?;
    let conflicting: Vec<bool> = match &test.conflicts {
        Some(c) => (0..test.instance_count())
            .map(|i| c.is_instance_conflicting(i))
            .collect(),
        None => vec![false; test.instance_count()],
    };
    let table = uncertainty_density(
        &eval.uncertainties,
        &conflicting,
        manifest.config.eval.density_bins,
    )?;
    write_atomic(&run_dir.join("density.csv"), table.to_csv().as_bytes())?;
    println!("density.csv written to {}", run_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::GenData(common) => gen_data(common),
        Command::Corrupt(common) => corrupt(common),
        Command::Train {
            common,
            single_stage,
        } => train(common, *single_stage),
        Command::Eval { run_dir } => eval(run_dir),
        Command::DivideReport { run_dir } => divide_report(run_dir),
        Command::Density { run_dir } => density(run_dir),
    }
}

/// Exit codes: 0 success, 2 configuration problems, 4 numeric failures,
/// 3 everything data-related (parsing, IO, degenerate inputs).
fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Numeric { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
