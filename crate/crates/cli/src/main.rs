// SPDX-License-Identifier: MIT OR Apache-2.0

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use spatial_cbm::eval::{MiouAggregation, ThresholdPolicy};
use spatial_cbm::{Error, Result};
use spatial_cbm_pipeline::probe::linear_probe;
use spatial_cbm_pipeline::stages::*;
use spatial_cbm_pipeline::toydata::{toy_run_config, write_toy_dataset, ToySpec};
use spatial_cbm_pipeline::{exit_code, RunConfig, EXIT_CONFIG, EXIT_OK};
use spatial_cbm_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "spatial-cbm", version, about = "Train, explain and serve spatial concept bottleneck models")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the concept catalog.
    Concepts,
    /// Compute per-cell concept similarity targets.
    Similarities(SimilarityArgs),
    /// Train the concept bottleneck layer.
    TrainCbl,
    /// Fit the sparse classification head and write the model bundle.
    TrainHead,
    /// Explain one image: JSON plus heatmap PNGs.
    Explain {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Evaluate the trained bundle.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve the trained bundle over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = 30)]
        ttl_minutes: u64,
        #[arg(long, default_value_t = 256)]
        max_sessions: usize,
    },
    /// All training stages in order, then classification on the validation set.
    Run,
    /// Dense linear probe on pooled backbone features.
    Probe {
        #[arg(long, default_value_t = 1e-3)]
        lambda: f64,
    },
    /// Write the synthetic ten-class dataset and a matching config.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        train_per_class: usize,
        #[arg(long, default_value_t = 6)]
        val_per_class: usize,
    },
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long)]
    grid_h: Option<usize>,
    #[arg(long)]
    grid_w: Option<usize>,
    #[arg(long)]
    radius: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Reuse intact chunks left by an interrupted run.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MiouArg {
    Dataset,
    PerImage,
}

#[derive(Subcommand)]
enum EvalCommand {
    Classify {
        /// Defaults to the validation manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    Segment {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// `mean` or `fixed:<t>`.
        #[arg(long, default_value = "mean")]
        threshold_policy: String,
        #[arg(long, value_enum, default_value = "dataset")]
        miou: MiouArg,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let path = path.ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    RunConfig::load(path)
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
}

fn run(cli: Cli) -> Result<()> {
    let cfg = || load_config(cli.config.as_deref());
    match cli.command {
        Command::Concepts => print(json!(cmd_concepts(&cfg()?)?)),
        Command::Similarities(a) => {
            let mut cfg = cfg()?;
            let s = &mut cfg.similarity;
            s.grid_h = a.grid_h.unwrap_or(s.grid_h);
            s.grid_w = a.grid_w.unwrap_or(s.grid_w);
            s.radius = a.radius.unwrap_or(s.radius);
            s.batch_size = a.batch_size.unwrap_or(s.batch_size);
            cfg.validate()?;
            print(json!(cmd_similarities_with(&cfg, a.resume)?));
        }
        Command::TrainCbl => print(json!(cmd_train_cbl(&cfg()?)?)),
        Command::TrainHead => print(json!(cmd_train_head(&cfg()?)?)),
        Command::Explain { image, k } => {
            let (dir, e) = cmd_explain(&cfg()?, &image, k)?;
            print(json!({ "dir": dir, "explanation": e }));
        }
        Command::Eval(EvalCommand::Classify { manifest }) => {
            let r = cmd_eval_classify(&cfg()?, manifest.as_deref())?;
            println!("{}", r.to_table());
        }
        Command::Eval(EvalCommand::Segment { manifest, threshold_policy, miou }) => {
            let policy: ThresholdPolicy = threshold_policy.parse()?;
            let agg = match miou {
                MiouArg::Dataset => MiouAggregation::Dataset,
                MiouArg::PerImage => MiouAggregation::PerImage,
            };
            let r = cmd_eval_segment(&cfg()?, manifest.as_deref(), policy, agg)?;
            println!("{}", r.to_table());
        }
        Command::Serve { addr, ttl_minutes, max_sessions } => {
            let cfg = cfg()?;
            let bundle = open_bundle(&cfg.output_dir)?;
            let svc = ServiceConfig {
                session_ttl: Duration::from_secs(ttl_minutes * 60),
                max_sessions,
                ..ServiceConfig::default()
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(spatial_cbm_service::serve(bundle, addr, svc))?;
        }
        Command::Run => {
            if let Some(r) = run_all(&cfg()?)? {
                println!("{}", r.to_table());
            }
        }
        Command::Probe { lambda } => print(json!(linear_probe(&cfg()?, lambda)?)),
        Command::ToyData { out, seed, train_per_class, val_per_class } => {
            let spec = ToySpec { train_per_class, val_per_class, seed, ..ToySpec::default() };
            let data = write_toy_dataset(&out.join("data"), &spec)?;
            let cfg = toy_run_config(&data, &out.join("run"), seed);
            let path = out.join("config.json");
            cfg.save(&path)?;
            print(json!({ "config": path, "train": data.train, "val": data.val }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { EXIT_OK as u8 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
