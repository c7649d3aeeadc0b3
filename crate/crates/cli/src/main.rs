use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use vfiqa::commands::{self, TrainOptions};
use vfiqa::server;
use vfiqa_core::annotation::AnnotationService;
use vfiqa_core::dataset::{AUTO_THRESHOLD, DEFAULT_PATCH};
use vfiqa_core::TrainConfig;

#[derive(Parser)]
#[command(name = "vfiqa", version, about = "Perceptual quality metric for frame-interpolated video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distance of a clip from its reference (lower is better).
    Score {
        #[arg(long)]
        a: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Weights file; required by the learned metric.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "learned")]
        metric: String,
        /// Sliding-window stride for clips longer than the model's window.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Train the metric on the labeled triplets of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        /// Frames per clip (default: length of the first labeled triplet).
        #[arg(long)]
        frames: Option<usize>,
    },
    /// 2AFC agreement with the labels of a manifest; prints results JSON.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "learned")]
        metric: String,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Write the results JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank correlations of predictions against MOS, grouped by group_id.
    Corr {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label unlabeled triplets whose metric gap exceeds the threshold.
    AnnotateAuto {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = AUTO_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value = "pixel")]
        metric: String,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output manifest (default: rewrite the input in place).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-left corner of the patch where two clips differ most.
    SelectPatch {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PATCH)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Serve unlabeled triplets to annotators over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long)]
        manifest: PathBuf,
        /// Judgment log (default: judgments.jsonl next to the manifest).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Comma-separated annotator ids allowed to take part.
        #[arg(long, value_delimiter = ',')]
        annotators: Option<Vec<String>>,
    },
}

fn emit_json(value: &impl serde::Serialize, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Score { a, reference, model, metric, stride } => {
            let metric = commands::create_metric(&metric, model.as_deref(), stride)?;
            println!("{}", commands::score(&a, &reference, metric.as_ref())?);
        }
        Command::Train { manifest, out, seed, epochs, batch, lr, weight_decay, frames } => {
            let config = TrainConfig { lr, batch, epochs, weight_decay, seed, ..Default::default() };
            config.validate()?;
            let opts = TrainOptions { manifest, out: out.clone(), config, frames };
            commands::train(&opts, |s| {
                eprintln!("epoch {:>3}  loss {:.5}  steps {}  skipped {}", s.epoch + 1, s.mean_loss, s.steps, s.skipped)
            })?;
            eprintln!("wrote {}", out.display());
        }
        Command::Eval { manifest, model, metric, stride, out } => {
            let metric = commands::create_metric(&metric, model.as_deref(), stride)?;
            emit_json(&commands::eval(&manifest, metric.as_ref())?, out.as_ref())?;
        }
        Command::Corr { csv, out } => {
            let (results, report) = commands::corr(&csv)?;
            if !report.excluded.is_empty() {
                eprintln!("excluded groups: {}", report.excluded.join(", "));
            }
            emit_json(&results, out.as_ref())?;
        }
        Command::AnnotateAuto { manifest, threshold, metric, model, out } => {
            let metric = commands::create_metric(&metric, model.as_deref(), 1)?;
            let out = out.unwrap_or_else(|| manifest.clone());
            let summary = commands::annotate_auto(&manifest, &out, metric.as_ref(), threshold)?;
            emit_json(&summary, None)?;
        }
        Command::SelectPatch { a, b, size, stride } => {
            let (row, col) = commands::select_patch(&a, &b, size, stride)?;
            println!("{}", serde_json::json!({ "row": row, "col": col }));
        }
        Command::Serve { port, host, manifest, log, annotators } => {
            let log = log.unwrap_or_else(|| manifest.with_file_name("judgments.jsonl"));
            let service = AnnotationService::open(&manifest, &log, annotators)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(server::serve(service, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
