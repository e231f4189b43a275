use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use maskrec::config::{DenseMode, RunConfig};
use maskrec::inference::Strategy;
use maskrec::pipeline::{self, LoadedModel, TrainInputs, CATALOG_FILE};

/// Masked-diffusion sequential recommendation over semantic IDs.
#[derive(Parser)]
#[command(name = "maskrec", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for this stage.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit residual k-means codebooks and write the SID catalog.
    Tokenize {
        #[arg(long)]
        embeddings: PathBuf,
        /// Replace semantic tokens with uniform random ones.
        #[arg(long)]
        randomize: bool,
    },
    /// Train the denoiser with periodic validation.
    Train {
        #[arg(long, required_unless_present = "interactions")]
        split: Option<PathBuf>,
        /// Interaction log to filter and split instead of a prepared split.
        #[arg(long, conflicts_with = "split")]
        interactions: Option<PathBuf>,
        /// Item IDs in embedding-row order, one per line.
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long, required_unless_present = "item_ids")]
        catalog: Option<PathBuf>,
        /// Item embeddings, needed in dense mode.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Model raw item IDs (one token per item) instead of SIDs.
        #[arg(long)]
        item_ids: bool,
    },
    /// Evaluate a checkpoint, sweeping strategies and NFE budgets.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated NFE budgets.
        #[arg(long, value_delimiter = ',')]
        nfe: Vec<usize>,
        /// Comma-separated strategies (random, greedy, left_to_right).
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<Strategy>,
        /// Items predicted per user; must match the split's holdout size.
        #[arg(long)]
        k_items: Option<usize>,
        #[arg(long)]
        dense_mode: Option<DenseMode>,
    },
    /// Write ranked next-item predictions for each user's test context.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        k_items: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        dense_mode: Option<DenseMode>,
    },
    /// Drop a fraction of every training sequence.
    Sparsify {
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
    },
    /// Generate the synthetic cluster-Markov dataset.
    Synth,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the catalog saved next to the checkpoint.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl ModelArgs {
    fn catalog(&self) -> PathBuf {
        self.catalog.clone().unwrap_or_else(|| {
            self.checkpoint
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(CATALOG_FILE)
        })
    }

    fn load(&self) -> Result<(LoadedModel, Vec<PathBuf>)> {
        let catalog = self.catalog();
        let loaded = LoadedModel::load(&self.checkpoint, &catalog, self.embeddings.as_deref())?;
        let mut inputs = vec![self.checkpoint.clone(), catalog];
        inputs.extend(self.embeddings.clone());
        Ok((loaded, inputs))
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MADREC_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("MADREC_THREADS={v:?} is not a thread count"))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
    }
    Ok(())
}

fn as_refs(paths: &[PathBuf]) -> Vec<&Path> {
    paths.iter().map(PathBuf::as_path).collect()
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    let out = &cli.common.out;
    match cli.cmd {
        Cmd::Tokenize { embeddings, randomize } => {
            let report = pipeline::tokenize(&cfg, &embeddings, out, randomize)?;
            print!("{}", report.to_table());
        }
        Cmd::Train {
            split,
            interactions,
            items,
            catalog,
            embeddings,
            resume,
            item_ids,
        } => {
            let inputs = TrainInputs {
                split,
                interactions,
                items,
                catalog,
                embeddings,
                resume,
                item_ids,
            };
            let report = pipeline::train(&cfg, &inputs, out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Eval {
            model,
            nfe,
            strategy,
            k_items,
            dense_mode,
        } => {
            if !nfe.is_empty() {
                cfg.eval.nfes = nfe;
            }
            if !strategy.is_empty() {
                cfg.eval.strategies = strategy;
            }
            if let Some(d) = dense_mode {
                cfg.eval.dense_mode = d;
            }
            let split = maskrec::data::EvalSplit::read(&model.split)?;
            if let Some(k) = k_items {
                if k != split.mode.targets() {
                    bail!("--k-items {k} does not match the split, which holds out {}", split.mode.targets());
                }
            }
            let (loaded, inputs) = model.load()?;
            for r in pipeline::evaluate(&cfg, &loaded, &model.split, out, &as_refs(&inputs))? {
                println!("[{}]\n{}", r.label, r.report.to_table());
            }
        }
        Cmd::Infer {
            model,
            nfe,
            strategy,
            k_items,
            top_k,
            dense_mode,
        } => {
            if nfe.is_some() {
                cfg.infer.nfe = nfe;
            }
            if let Some(s) = strategy {
                cfg.infer.strategy = s;
            }
            if let Some(k) = k_items {
                cfg.infer.k_items = k;
            }
            if let Some(k) = top_k {
                cfg.infer.top_k = k;
            }
            if let Some(d) = dense_mode {
                cfg.eval.dense_mode = d;
            }
            let (loaded, inputs) = model.load()?;
            let n = pipeline::infer(&cfg, &loaded, &model.split, out, &as_refs(&inputs))?;
            println!("wrote predictions for {n} users to {}", out.join("predictions.jsonl").display());
        }
        Cmd::Sparsify { split, fraction } => {
            let s = pipeline::sparsify(&cfg, &split, fraction, out)?;
            let kept: usize = s.users.iter().map(|u| u.train.len()).sum();
            println!("{} users, {kept} training items kept", s.users.len());
        }
        Cmd::Synth => {
            let r = pipeline::synth(&cfg, out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
