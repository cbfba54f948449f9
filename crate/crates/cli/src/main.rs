use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use convprompt::experiment::{self, ExperimentConfig, RunRecord, SWEEP_PARAMS};
use convprompt::method::methods;
use convprompt::similarity::{budget_report, AttributeFile, EmbedderConfig, SimilarityConfig};

#[derive(Parser)]
#[command(name = "convprompt", version, about = "Continual learning with convolutional prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on every task of a stream and report accuracy and forgetting.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed (backbone, data and training).
        #[arg(long)]
        seed: Option<u64>,
        /// Method to run instead of the configured one.
        #[arg(long, value_name = "METHOD")]
        baseline: Option<String>,
        /// Where to write the run record; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Independent runs over values of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SWEEP_PARAMS))]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Writes every record as a JSON array.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-task similarity to history and the resulting generator budget.
    Similarity {
        #[arg(long)]
        attributes: PathBuf,
        #[arg(long, default_value = "attribute", value_parser = ["attribute", "class_label"])]
        mode: String,
        #[arg(long, default_value_t = 3)]
        j_max: usize,
        /// JSON table of text embeddings; attributes without one use the
        /// deterministic trigram embedder.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        embedding_dim: usize,
    },
    /// Finite-difference check of every trainable parameter group.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        config = config.with_seed(seed);
    }
    Ok(config)
}

fn run(config: PathBuf, seed: Option<u64>, baseline: Option<String>, out: Option<PathBuf>) -> Result<()> {
    let mut config = load_config(&config, seed)?;
    if let Some(method) = baseline {
        if !methods().contains(&method) {
            bail!("unknown method `{method}` (expected one of {:?})", methods().names());
        }
        config = config.with_method(&method);
    }
    let out = out.or_else(|| config.output.clone());
    let record = experiment::run(&config).context("run failed")?;
    print!("{}", record.summary());
    if let Some(path) = out {
        record.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!("record written to {}", path.display());
    }
    Ok(())
}

fn sweep(config: PathBuf, param: String, values: Vec<String>, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(&config, None)?;
    let entries = experiment::sweep(&config, &param, &values).context("sweep failed")?;
    println!("{:<12} {:>8} {:>8} {:>6} {:>11}", param, "A_T", "F_T", "M_T", "trainable%");
    for e in &entries {
        let r: &RunRecord = &e.record;
        let f = r.f_t.map_or("-".to_string(), |f| format!("{f:.4}"));
        println!(
            "{:<12} {:>8.4} {:>8} {:>6} {:>11.3}",
            e.value, r.a_t, f, r.total_generators, r.parameters.trainable_percent
        );
    }
    if let Some(path) = out {
        std::fs::write(&path, serde_json::to_string_pretty(&entries)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn similarity(
    attributes: PathBuf,
    mode: String,
    j_max: usize,
    embeddings: Option<PathBuf>,
    embedding_dim: usize,
) -> Result<()> {
    if j_max == 0 {
        bail!("--j-max must be at least 1");
    }
    let file = AttributeFile::load(&attributes).with_context(|| format!("loading {}", attributes.display()))?;
    let config = SimilarityConfig {
        mode,
        embedder: embeddings.map_or(EmbedderConfig::Deterministic, EmbedderConfig::File),
        embedding_dim,
    };
    config.validate()?;
    let mut strategy = config.build()?;
    println!("{:<6} {:>8} {:>4}", "task", "sim_t", "J_t");
    for line in budget_report(&file, strategy.as_mut(), j_max)? {
        let sim = line.sim_t.map_or("-".to_string(), |s| format!("{s:.4}"));
        println!("{:<6} {:>8} {:>4}", line.task, sim, line.j_t);
    }
    Ok(())
}

fn gradcheck(corrupt: bool) -> Result<bool> {
    let report = experiment::gradcheck_suite(corrupt)?;
    println!("{:<12} {:>14}", "group", "max rel err");
    for (group, err) in &report.groups {
        let mark = if *err < report.tolerance { "ok" } else { "FAIL" };
        println!("{group:<12} {err:>14.3e} {mark}");
    }
    println!(
        "{} entries checked, worst {:.3e}, tolerance {:.0e}: {}",
        report.parameters_checked,
        report.max_relative_error,
        report.tolerance,
        if report.passed { "pass" } else { "fail" }
    );
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            baseline,
            out,
        } => run(config, seed, baseline, out).map(|_| true),
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => sweep(config, param, values, out).map(|_| true),
        Command::Similarity {
            attributes,
            mode,
            j_max,
            embeddings,
            embedding_dim,
        } => similarity(attributes, mode, j_max, embeddings, embedding_dim).map(|_| true),
        Command::Gradcheck { corrupt } => gradcheck(corrupt),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
