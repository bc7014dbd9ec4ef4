use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bgfd::ablate::{ablate_with_progress, write_report};
use bgfd::config::ExperimentConfig;
use bgfd::gradsuite;
use bgfd::model::Model;
use bgfd::synth::{generate_dataset, read_dataset, write_dataset, Dataset};
use bgfd::train::{evaluate, train_with_progress};

#[derive(Parser)]
#[command(
    name = "bgfd",
    version,
    about = "Siamese change detection with noise disturbance, detail compensation and MI loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Train a model and write model.json and report.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset; metrics use the training data when omitted.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Evaluate a trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model file; defaults to <out>/model.json.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train and evaluate the six-row component matrix.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Directory holding train/ and test/ datasets; synthesized when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_into(cfg: &bgfd::synth::SynthConfig, dir: &Path) -> Result<Dataset> {
    let pairs = generate_dataset(cfg)?;
    write_dataset(&pairs, dir)?;
    Ok(Dataset::from_pairs(&pairs))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(c) => {
            let mut cfg = load_config(&c)?;
            if let Some(seed) = c.seed {
                cfg.synth.seed = seed;
            }
            synth_into(&cfg.synth, &c.out)?;
            println!("wrote {} pairs to {}", cfg.synth.count, c.out.display());
        }
        Command::Train { common, data, val } => {
            let cfg = load_config(&common)?;
            let train_set = read_dataset(&data)?;
            let val_set = val.map(|p| read_dataset(&p)).transpose()?;
            let every = (cfg.optim.iterations / 10).max(1);
            let (model, report) = train_with_progress(&cfg, &train_set, val_set.as_ref(), |it, loss| {
                if (it + 1) % every == 0 {
                    eprintln!("iteration {:>6}  loss {loss:.6}", it + 1);
                }
            })?;
            model.save(&common.out.join("model.json"))?;
            write(&common.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
            let mut w = csv::Writer::from_path(common.out.join("losses.csv"))?;
            w.write_record(["iteration", "segmentation", "mi", "total"])?;
            for i in 0..report.total_losses.len() {
                w.write_record([
                    i.to_string(),
                    format!("{:.9}", report.seg_losses[i]),
                    format!("{:.9}", report.mi_losses[i]),
                    format!("{:.9}", report.total_losses[i]),
                ])?;
            }
            w.flush()?;
            report.metrics.write_csv(fs::File::create(common.out.join("metrics.csv"))?)?;
            write(
                &common.out.join("timing.json"),
                &format!("{{\"wall_time_secs\": {:.3}}}", report.wall_time_secs),
            )?;
            println!("{}", report.metrics.to_json());
        }
        Command::Eval { common, data, model } => {
            load_config(&common)?;
            let path = model.unwrap_or_else(|| common.out.join("model.json"));
            let model = Model::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let metrics = evaluate(&model, &read_dataset(&data)?)?;
            write(&common.out.join("metrics.json"), &metrics.to_json())?;
            metrics.write_csv(fs::File::create(common.out.join("metrics.csv"))?)?;
            println!("{}", metrics.to_json());
        }
        Command::Ablate { common, data } => {
            let cfg = load_config(&common)?;
            let (train_set, test_set) = match data {
                Some(d) => (read_dataset(&d.join("train"))?, read_dataset(&d.join("test"))?),
                None => (
                    synth_into(&cfg.ablation.train, &common.out.join("data/train"))?,
                    synth_into(&cfg.ablation.test, &common.out.join("data/test"))?,
                ),
            };
            let report = ablate_with_progress(&cfg, &train_set, &test_set, |row, seed, r| {
                eprintln!("{row:<10} seed {seed}: f1 {:.4}  fp-rate {:.4}", r.metrics.f1, r.fp_rate);
            })?;
            write_report(&report, &common.out)?;
            for r in &report.rows {
                println!("{:<10} mean f1 {:.4}  mean fp-rate {:.4}", r.name, r.mean_f1, r.mean_fp_rate);
            }
        }
        Command::Gradcheck { common, seeds } => {
            load_config(&common)?;
            let checks = gradsuite::run_suite(seeds)?;
            write(&common.out.join("gradcheck.json"), &serde_json::to_string_pretty(&checks)?)?;
            for c in &checks {
                println!(
                    "{:<14} max rel error {:.3e}  {}",
                    c.op,
                    c.max_error,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            if checks.iter().any(|c| !c.passed) {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}
