//! Operator CLI for the cross-view transformer pipeline.
//!
//! Commands: `gen-synth`, `pretrain`, `finetune`, `eval`, `gradcheck`,
//! `bench-attn`. Numeric precision is f32 unless `CVFORMER_F64=1` is set.

use clap::{Args, Parser, Subcommand};
use cvformer::commands;
use cvformer::error::Result;
use cvformer::ingest::{self, GenConfig};
use cvformer::runconfig::{self, FileConfig, Overrides, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "cvformer", version, about = "Cross-view transformer for functional brain networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-class dataset with planted block structure
    GenSynth {
        /// Number of subjects (must be even; half per class)
        #[arg(long, default_value_t = 200)]
        subjects: usize,
        /// Regions of interest per subject
        #[arg(long, default_value_t = 90)]
        rois: usize,
        /// Time points per series
        #[arg(long, default_value_t = 120)]
        timepoints: usize,
        /// Class separation in (0, 1]
        #[arg(long, default_value_t = 0.8)]
        effect: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory that will hold manifest.txt and series/
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: contrastive pretraining over the train split
    Pretrain(RunArgs),
    /// Stage two: supervised fine-tuning with best-validation selection
    Finetune(RunArgs),
    /// Evaluate a checkpoint on the test split
    Eval(RunArgs),
    /// Verify every gradient rule against central finite differences
    Gradcheck {
        #[arg(long, hide = true)]
        inject_backward_fault: bool,
    },
    /// Measure attention-core MACs across token counts and fit slopes
    BenchAttn {
        /// Comma-separated token counts, at least two distinct values
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        counts: Vec<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest path
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for checkpoints, CSV logs, and the config echo
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Contrastive weight in the fine-tuning loss
    #[arg(long)]
    lambda: Option<f64>,
    /// Checkpoint to initialize from (pretrain output, or best.ckpt for eval)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Keep both view branches but disable cross-view fusion
    #[arg(long)]
    no_cross_view: bool,
    /// RoI-token branch only
    #[arg(long, conflicts_with_all = ["conn_only", "no_cross_view"])]
    roi_only: bool,
    /// Connectivity-patch branch only
    #[arg(long, conflicts_with = "no_cross_view")]
    conn_only: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let flags = Overrides {
            manifest: self.manifest.clone(),
            out: self.out.clone(),
            seed: self.seed,
            lambda: self.lambda,
            init: self.init.clone(),
            no_cross_view: self.no_cross_view,
            roi_only: self.roi_only,
            conn_only: self.conn_only,
        };
        let manifest = runconfig::manifest_path(&file, &flags)?;
        let meta = ingest::load_manifest(&manifest)?;
        RunConfig::resolve(&file, &flags, meta.roi_count, meta.num_classes)
    }
}

fn f64_mode() -> bool {
    std::env::var("CVFORMER_F64").map(|v| v == "1").unwrap_or(false)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenSynth { subjects, rois, timepoints, effect, seed, out } => {
            let cfg = GenConfig { subjects, rois, timepoints, effect, seed };
            let manifest = commands::run_gen_synth(&cfg, &out)?;
            println!("{}", manifest.display());
        }
        Command::Pretrain(args) => {
            let rc = args.resolve()?;
            let result = if f64_mode() {
                commands::run_pretrain::<f64>(&rc)?
            } else {
                commands::run_pretrain::<f32>(&rc)?
            };
            println!(
                "pretrain: {} epochs, loss {} -> {}",
                result.losses.len(),
                result.losses.first().map(|l| l.to_string()).unwrap_or_default(),
                result.losses.last().map(|l| l.to_string()).unwrap_or_default()
            );
            println!("wrote {}", result.checkpoint.display());
            println!("wrote {}", result.log.display());
        }
        Command::Finetune(args) => {
            let rc = args.resolve()?;
            let result = if f64_mode() {
                commands::run_finetune::<f64>(&rc)?
            } else {
                commands::run_finetune::<f32>(&rc)?
            };
            println!(
                "finetune: {} epochs, best epoch {} (val accuracy={} recall={})",
                result.rows.len(),
                result.best_epoch,
                cvformer::train::fmt_pct(result.best_val.accuracy),
                cvformer::train::fmt_pct(result.best_val.recall),
            );
            println!(
                "test accuracy={} recall={} n={}",
                cvformer::train::fmt_pct(result.test.accuracy),
                cvformer::train::fmt_pct(result.test.recall),
                result.test.n
            );
            println!("wrote {}", result.best_checkpoint.display());
            println!("wrote {}", result.metrics_csv.display());
        }
        Command::Eval(args) => {
            let rc = args.resolve()?;
            let (_, line) = if f64_mode() {
                commands::run_eval::<f64>(&rc)?
            } else {
                commands::run_eval::<f32>(&rc)?
            };
            println!("{line}");
        }
        Command::Gradcheck { inject_backward_fault } => {
            if inject_backward_fault {
                cvformer::tape::set_backward_fault(true);
            }
            let report = commands::run_gradcheck()?;
            print!("{}", report.render());
            if !report.all_passed {
                return Ok(1);
            }
        }
        Command::BenchAttn { counts } => {
            let report = if f64_mode() {
                commands::run_bench_attn::<f64>(&counts)?
            } else {
                commands::run_bench_attn::<f32>(&counts)?
            };
            print!("{}", report.render());
        }
    }
    Ok(0)
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
