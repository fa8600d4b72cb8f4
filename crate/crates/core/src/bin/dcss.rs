use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dcss::config::{ExperimentConfig, Precision, ReportFormat};
use dcss::data::{make_synthetic, write_binary_dataset, Task};
use dcss::extract::derive_plan;
use dcss::model::load_checkpoint;
use dcss::pipeline::{run_until, write_json, Experiment, StopAfter};
use dcss::rng::{Purpose, SeedTree};
use dcss::search::evaluate;
use dcss::{Element, Error, Result};

/// Per-layer channel-width search for small CNNs.
#[derive(Parser, Debug)]
#[command(name = "dcss", version)]
struct Cli {
    /// TOML experiment configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured cost weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Binary dataset (read by training commands, written by `gen-data`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Report format.
    #[arg(long, global = true, value_enum)]
    format: Option<ReportFormat>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train weights with zero gates; writes warmup.ckpt.
    Warmup,
    /// Alternate weight and gate updates; writes search.ckpt and the history.
    Search,
    /// Derive the slim plan from a searched checkpoint; no training.
    Extract {
        /// Searched checkpoint (defaults to <out>/search.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Extract and fine-tune the slim network; writes slim.ckpt.
    Finetune,
    /// Evaluate a checkpoint on the test set.
    Eval {
        /// Checkpoint (defaults to <out>/slim.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every stage and write the report.
    Pipeline {
        /// Reuse stage artifacts already present in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Write a synthetic classification dataset to --data.
    GenData,
    /// Run the oracle-equivalence and gradient suites.
    Verify {
        /// Random instances per gradient check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n\nFor more information, try '--help'.");
    ExitCode::from(2)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(l) = cli.lambda {
        cfg.lambda = l;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &cli.data {
        cfg.data_path = Some(d.clone());
    }
    if let Some(f) = cli.format {
        cfg.report_format = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_value(value: &serde_json::Value, format: ReportFormat) {
    match format {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(value).expect("json value")),
        ReportFormat::Csv => {
            println!("key,value");
            if let serde_json::Value::Object(map) = value {
                for (k, v) in map {
                    println!("{k},{v}");
                }
            }
        }
    }
}

fn extract(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join("search.ckpt"));
    fn typed<T: Element>(cfg: &ExperimentConfig, path: &std::path::Path) -> Result<()> {
        let ckpt = load_checkpoint::<T>(path)?;
        let plan = derive_plan(&ckpt.network, cfg.tau_end)?;
        let stamped = dcss::pipeline::Stamped {
            config_hash: ckpt.config_hash,
            seed: ckpt.seed,
            body: plan,
        };
        std::fs::create_dir_all(&cfg.out_dir)?;
        write_json(&cfg.out_dir.join("plan.json"), &stamped)?;
        print_value(&serde_json::to_value(&stamped)?, cfg.report_format);
        Ok(())
    }
    match cfg.precision {
        Precision::F32 => typed::<f32>(cfg, &path),
        Precision::F64 => typed::<f64>(cfg, &path),
    }
}

fn eval(cfg: ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join("slim.ckpt"));
    fn typed<T: Element>(exp: &Experiment, path: &std::path::Path) -> Result<()> {
        let mut net = load_checkpoint::<T>(path)?.network;
        let d = &exp.data;
        let metrics = evaluate(&mut net, &d.test, &d.all_test(), exp.cfg.batch_size, exp.cfg.tau_end)?;
        let value = serde_json::json!({
            "config_hash": exp.hash,
            "seed": exp.cfg.seed,
            "checkpoint": path.display().to_string(),
            "loss": metrics.loss,
            "accuracy": metrics.accuracy,
            "samples": metrics.samples,
            "flops": net.true_flops(),
        });
        print_value(&value, exp.cfg.report_format);
        Ok(())
    }
    let exp = Experiment::new(cfg)?;
    match exp.cfg.precision {
        Precision::F32 => typed::<f32>(&exp, &path),
        Precision::F64 => typed::<f64>(&exp, &path),
    }
}

fn gen_data(cfg: &ExperimentConfig, path: &std::path::Path) -> Result<()> {
    if cfg.task != Task::Classify {
        return Err(Error::Config("the binary format stores classification data only".into()));
    }
    let data = make_synthetic(&cfg.synthetic_spec(), &mut SeedTree::new(cfg.seed).fork(Purpose::Data))?;
    write_binary_dataset(path, &data)?;
    println!("wrote {} samples to {}", data.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Warmup => run_until(cfg, true, StopAfter::Warmup).map(|_| true),
        Command::Search => run_until(cfg, true, StopAfter::Search).map(|_| true),
        Command::Finetune => run_until(cfg, true, StopAfter::Finetune).map(|_| true),
        Command::Extract { checkpoint } => extract(&cfg, checkpoint).map(|_| true),
        Command::Eval { checkpoint } => eval(cfg, checkpoint).map(|_| true),
        Command::Pipeline { resume } => {
            let format = cfg.report_format;
            let report = run_until(cfg, resume, StopAfter::All)?.expect("full run");
            match format {
                ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                ReportFormat::Csv => print!("{}", report.to_csv()),
            }
            Ok(true)
        }
        Command::GenData => {
            let path = cfg.data_path.take().expect("checked by main");
            gen_data(&cfg, &path).map(|_| true)
        }
        Command::Verify { instances } => {
            let mut all = true;
            for suite in dcss::verify::run_all(cfg.seed, instances) {
                println!("{} {}: {}", if suite.passed { "PASS" } else { "FAIL" }, suite.name, suite.detail);
                all &= suite.passed;
            }
            Ok(all)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData if cli.data.is_none() => return usage_error("gen-data needs --data <path>"),
        Command::GenData | Command::Verify { .. } | Command::Extract { .. } if cli.lambda.is_some() => {
            return usage_error("--lambda only applies to training commands")
        }
        Command::Verify { .. } if cli.data.is_some() || cli.out.is_some() => {
            return usage_error("verify takes no --data or --out")
        }
        _ => {}
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
