use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use coformer::app::{
    evaluate, load_checkpoint, run_gradcheck, save_checkpoint, sweep, train, write_sweep_csv,
    RunConfig, SweepParam,
};
use coformer::data::{
    generate_synthetic, irregularize_dataset, read_dataset_file, write_dataset_file, Dataset,
    SyntheticConfig,
};
use coformer::nn::GradCheckOptions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "coformer",
    version,
    about = "Irregular multivariate time-series classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phase-coupling dataset.
    GenData {
        /// JSON file with the generator settings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop a fraction of samples from every observation.
    Irregularize {
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the epoch log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and test over five fixed splits for each parameter value.
    Sweep {
        /// `k` (inter-variate neighbors) or `layers`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn read_synthetic(path: &Path) -> Result<SyntheticConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))
}

fn sweep_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.data.dataset, &cfg.data.synthetic) {
        (Some(path), _) => Ok(read_dataset_file(path, cfg.data.n_classes)?),
        (None, Some(syn)) => Ok(generate_synthetic(syn)?),
        (None, None) => bail!("the config needs data.dataset or data.synthetic for a sweep"),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { config, out } => {
            let syn = read_synthetic(&config)?;
            let ds = generate_synthetic(&syn)?;
            write_dataset_file(&out, &ds)?;
            eprintln!("wrote {} observations to {}", ds.len(), out.display());
        }
        Command::Irregularize {
            ratio,
            seed,
            input,
            out,
        } => {
            let ds = read_dataset_file(&input, None)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let thinned = irregularize_dataset(&ds, ratio, &mut rng)?;
            write_dataset_file(&out, &thinned)?;
        }
        Command::Train {
            config,
            train: train_path,
            val,
            out,
            log,
        } => {
            let cfg = RunConfig::load(&config)?;
            let train_set = read_dataset_file(&train_path, cfg.data.n_classes)?;
            let mut val_set = read_dataset_file(&val, cfg.data.n_classes)?;
            val_set.meta.n_classes = val_set.meta.n_classes.max(train_set.meta.n_classes);
            let outcome = train(&cfg, &train_set, &val_set, |entry| println!("{entry}"))?;
            if let Some(path) = log {
                let mut f = create(&path)?;
                for entry in &outcome.log {
                    serde_json::to_writer(&mut f, entry)?;
                    writeln!(f)?;
                }
                f.flush()?;
            }
            save_checkpoint(&outcome.best, &out)?;
            println!(
                "best epoch {} saved to {}",
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Eval { ckpt, data, report } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let ds = read_dataset_file(&data, Some(ckpt.model.config.n_classes))?;
            let metrics = evaluate(&ckpt.model, &ds, Default::default())?;
            let mut f = create(&report)?;
            serde_json::to_writer_pretty(&mut f, &metrics)?;
            writeln!(f)?;
            f.flush()?;
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::Gradcheck { preset, seed } => {
            if preset != "tiny" {
                bail!("unknown preset `{preset}` (only `tiny` is available)");
            }
            let report = run_gradcheck(seed, &GradCheckOptions::default())?;
            let worst = report
                .worst
                .as_ref()
                .map(|c| format!("{}[{}]", c.param, c.index))
                .unwrap_or_else(|| "-".into());
            println!("max relative error {:.3e} at {worst}", report.max_rel_err);
            println!(
                "checked {} coordinates, skipped {} at kinks",
                report.checked,
                report.skipped.len()
            );
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!("{verdict} (tolerance {:.0e})", report.tolerance);
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep {
            param,
            values,
            config,
            out,
        } => {
            let param: SweepParam = param.parse()?;
            let cfg = RunConfig::load(&config)?;
            let ds = sweep_dataset(&cfg)?;
            let rows = sweep(&cfg, &ds, param, &values, |row| {
                eprintln!(
                    "{}={} split {}: accuracy {:.4}{}",
                    row.param,
                    row.value,
                    row.split,
                    row.accuracy,
                    row.auroc
                        .map(|a| format!(" auroc {a:.4}"))
                        .unwrap_or_default()
                );
            })?;
            write_sweep_csv(create(&out)?, &rows)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
