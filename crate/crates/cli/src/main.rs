use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use adrcm_cli::config::{read, PipelineConfig};
use adrcm_cli::pipeline::{self, AdrcmPaths};
use adrcm_core::eval::Averaging;
use adrcm_core::inference::RagMode;

#[derive(Parser)]
#[command(name = "adrcm", version, about = "Document-level biomedical relation extraction pipeline")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override configuration fields.
#[derive(Args)]
struct Overrides {
    /// Dataset preset: cdr, gda or biored.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Summary attempts per triplet.
    #[arg(long, global = true)]
    beta: Option<u32>,
    /// Seed for negative sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// None-labeled export rows per original positive.
    #[arg(long, global = true)]
    negative_ratio: Option<f64>,
    /// Retrieval for inference: cui, unscoped or off.
    #[arg(long, global = true, value_parser = parse_rag)]
    rag: Option<RagMode>,
    /// Snippets per entity pair.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Keyed reply script (JSON) used instead of a chat endpoint.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// OpenAI-compatible API root for chat completions.
    #[arg(long, global = true)]
    chat_url: Option<String>,
    /// OpenAI-compatible API root for embeddings.
    #[arg(long, global = true)]
    embed_url: Option<String>,
    /// Directory for the model reply cache.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
}

fn parse_rag(s: &str) -> Result<RagMode, String> {
    match s {
        "cui" => Ok(RagMode::Cui),
        "unscoped" => Ok(RagMode::Unscoped),
        "off" => Ok(RagMode::Off),
        other => Err(format!("unknown rag mode `{other}` (expected cui, unscoped or off)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a PubTator file into a normalized corpus.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Tab-separated identifier to CUI map.
        #[arg(long)]
        cui_map: Option<PathBuf>,
        /// Tab-separated doc_id to split manifest.
        #[arg(long, requires = "split")]
        splits: Option<PathBuf>,
        #[arg(long, requires = "splits")]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate and confirm synthetic summaries for every positive triplet.
    Synth {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the cross-mapped dataset and the fine-tuning export.
    BuildAdrcm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        synthesis: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build the CUI index from knowledge-base snapshots.
    Index {
        #[arg(long, required = true, num_args = 1..)]
        kb: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a relation for every candidate pair.
    Infer {
        #[arg(long)]
        corpus: PathBuf,
        /// Required unless --rag off.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against the corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Macro-average over labels instead of micro.
        #[arg(long = "macro")]
        macro_avg: bool,
    },
    /// Run the whole pipeline on the bundled toy corpus with scripted replies.
    E2eMock {
        #[arg(long)]
        out_dir: PathBuf,
        /// Stop after this many model calls, as if the process were killed.
        #[arg(long)]
        fail_after: Option<usize>,
    },
}

fn configure(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(v) = &o.preset {
        cfg.dataset.preset = v.clone();
    }
    if let Some(v) = o.beta {
        cfg.iors.beta = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.negative_ratio {
        cfg.adrcm.negative_ratio = v;
    }
    if let Some(v) = o.rag {
        cfg.index.rag = v;
    }
    if let Some(v) = o.k {
        cfg.index.k = v;
    }
    if let Some(v) = &o.mock_script {
        cfg.backend.mock_script = Some(v.clone());
    }
    if let Some(v) = &o.chat_url {
        cfg.backend.chat_url = Some(v.clone());
    }
    if let Some(v) = &o.embed_url {
        cfg.backend.embed_url = Some(v.clone());
    }
    if let Some(v) = &o.cache_dir {
        cfg.cache_dir = Some(v.clone());
    }
    cfg.check()?;
    cfg.check_files()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = configure(&cli)?;
    match cli.command {
        Command::Ingest { input, cui_map, splits, split, out } => {
            let cui = cui_map.as_deref().map(read).transpose()?;
            let manifest = splits.as_deref().map(read).transpose()?;
            let sel = manifest.as_deref().zip(split.as_deref());
            pipeline::ingest(&cfg, &read(&input)?, cui.as_deref(), sel, &out)?;
        }
        Command::Synth { corpus, out } => {
            let corpus = pipeline::load_corpus(&cfg, &corpus)?;
            let llm = pipeline::chat_gateway(&cfg, None, None)?;
            let result = pipeline::synth(&cfg, &corpus, &llm, &out)?;
            if !result.errors.is_empty() {
                bail!("{} triplet(s) failed; rerun to resume from the cache", result.errors.len());
            }
        }
        Command::BuildAdrcm { corpus, synthesis, out_dir } => {
            let corpus = pipeline::load_corpus(&cfg, &corpus)?;
            let synthesis = pipeline::load_synthesis(&synthesis)?;
            pipeline::build_adrcm(&cfg, &corpus, &synthesis, &AdrcmPaths::in_dir(&out_dir))?;
        }
        Command::Index { kb, out } => {
            let texts = kb.iter().map(|p| Ok((p.display().to_string(), read(p)?))).collect::<Result<Vec<_>>>()?;
            let embedder = pipeline::embedder(&cfg);
            pipeline::index(&cfg, texts.iter().map(|(n, t)| (n.as_str(), t.as_str())), embedder.as_ref(), &out)?;
        }
        Command::Infer { corpus, index, out } => {
            let corpus = pipeline::load_corpus(&cfg, &corpus)?;
            let idx = match (&index, cfg.index.rag) {
                (Some(p), _) => Some(pipeline::load_index(p)?),
                (None, RagMode::Off) => None,
                (None, _) => bail!("--index is required unless --rag off"),
            };
            let llm = pipeline::chat_gateway(&cfg, None, None)?;
            let embedder = pipeline::embedder(&cfg);
            let run = pipeline::infer(&cfg, &corpus, idx.as_ref(), embedder.as_ref(), &llm, &out)?;
            if !run.failures.is_empty() {
                for f in &run.failures {
                    eprintln!("{}:{}->{}: {}", f.doc_id, f.head_id, f.tail_id, f.error);
                }
                bail!("{} pair(s) failed; rerun to resume from the cache", run.failures.len());
            }
        }
        Command::Eval { corpus, predictions, out, macro_avg } => {
            let corpus = pipeline::load_corpus(&cfg, &corpus)?;
            let averaging = if macro_avg { Averaging::Macro } else { Averaging::Micro };
            pipeline::evaluate(&corpus, &predictions, averaging, out.as_deref())?;
        }
        Command::E2eMock { out_dir, fail_after } => {
            pipeline::e2e_mock(&cfg, &out_dir, fail_after)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
