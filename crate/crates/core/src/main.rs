use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use ctp::data::{gen_corpus, CorpusSpec};
use ctp::harness::{load_report, preset, root_seed, write_outputs, write_plots, ExperimentSpec, Runner, PRESETS};
use ctp::mixer::{audit_csv, MixPlan};
use ctp::schedule::{dump_csv, ScheduleConfig};
use ctp::Result;

/// Continual-pretraining toolkit on synthetic corpora.
#[derive(Parser)]
#[command(name = "ctp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate token files for one corpus spec (or a JSON list of them).
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print `step,lr,phase` for a schedule config.
    ScheduleDump {
        #[arg(long)]
        config: PathBuf,
        /// Step limit, required for open-ended schedules.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-batch replay/new composition for a mix plan.
    MixAudit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a custom experiment described by a JSON experiment spec.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Run a named preset.
    Experiment {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the resolved spec as JSON instead of running it.
        #[arg(long)]
        print_spec: bool,
    },
    /// Rebuild and print the comparison report of a finished run.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Regenerate SVG plots of a finished run.
    Plot {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_and_write(spec: &ExperimentSpec, out: &Path) -> Result<bool> {
    let mut runner = Runner::new();
    let result = runner.run(spec)?;
    let report = ctp::harness::build_report(&result)?;
    write_outputs(&result, &report, out)?;
    log::info!("{} phases trained, {} reused; outputs in {}", runner.phases_run, runner.phases_reused, out.display());
    print!("{}", report.render());
    Ok(report.all_passed())
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let value: serde_json::Value = read_json(spec)?;
    let specs: Vec<CorpusSpec> = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    std::fs::create_dir_all(out)?;
    let mut manifest = Vec::new();
    for s in &specs {
        let c = gen_corpus(s)?;
        c.train.save(out.join(format!("{}.train.tok", s.name)))?;
        c.val.save(out.join(format!("{}.val.tok", s.name)))?;
        println!("{} train {} val {} entropy-rate {:.4}", s.name, c.train.checksum(), c.val.checksum(), c.matrix.entropy_rate());
        manifest.push(serde_json::json!({
            "spec": s,
            "train_sha256": c.train.checksum(),
            "val_sha256": c.val.checksum(),
            "entropy_rate": c.matrix.entropy_rate(),
        }));
    }
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out)?,
        Command::ScheduleDump { config, steps, out } => {
            let cfg: ScheduleConfig = read_json(&config)?;
            let mut w = sink(out.as_deref())?;
            dump_csv(&cfg.resolve()?, steps, &mut w)?;
            w.flush()?;
        }
        Command::MixAudit { config, steps, out } => {
            let plan: MixPlan = read_json(&config)?;
            let mut w = sink(out.as_deref())?;
            audit_csv(&plan, steps, &mut w)?;
            w.flush()?;
        }
        Command::Train { config, out } => {
            let mut spec: ExperimentSpec = read_json(&config)?;
            if std::env::var_os("CTP_SEED").is_some() {
                spec.reseed(root_seed());
            }
            return run_and_write(&spec, &out);
        }
        Command::Experiment { preset: name, scale, out, print_spec } => {
            let spec = preset(&name, scale, root_seed())?;
            if print_spec {
                println!("{}", serde_json::to_string_pretty(&spec)?);
                return Ok(true);
            }
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&name));
            return run_and_write(&spec, &out);
        }
        Command::Report { dir } => {
            let (_, report) = load_report(&dir)?;
            print!("{}", report.render());
            return Ok(report.all_passed());
        }
        Command::Plot { dir, out } => {
            let (result, _) = load_report(&dir)?;
            write_plots(&result, &out.unwrap_or_else(|| dir.join("plots")))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            if let ctp::CtpError::UnknownPreset(_) = e {
                eprintln!("error: {e}; known presets: {}", PRESETS.join(", "));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(2)
        }
    }
}
