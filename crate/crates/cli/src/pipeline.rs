//! Pipeline stages. Each stage reads its inputs, writes its artifacts
//! atomically and echoes their paths.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, bail, Context, Result};

use adrcm_core::adrcm::{self, ExportOptions, FineTuneExport};
use adrcm_core::corpus::{self, CuiMap, SplitManifest};
use adrcm_core::eval::{self, Averaging, EvalReport};
use adrcm_core::inference::{self, InferenceConfig, Instruction, PredictionRun, Retriever};
use adrcm_core::iors::{
    self, IorsConfig, SynthesisOutput, DEFAULT_CONFIRMATION_INSTRUCTION, DEFAULT_SUMMARY_INSTRUCTION,
};
use adrcm_core::kb::{self, CuiIndex};
use adrcm_core::llm::{
    ChatBackend, ChatExchange, HashEmbedder, HttpChatBackend, HttpEmbedder, LlmError, ResponseCache, RetryPolicy,
    ScriptedBackend,
};
use adrcm_core::{Corpus, Embedder, LlmGateway};

use crate::config::{read, PipelineConfig};

pub const TOY_CORPUS: &str = include_str!("../assets/toy/corpus.pubtator");
pub const TOY_CUI_MAP: &str = include_str!("../assets/toy/cui_map.tsv");
pub const TOY_KB: &str = include_str!("../assets/toy/kb.jsonl");
pub const TOY_SCRIPT: &str = include_str!("../assets/toy/script.json");

/// Writes through a temporary file so readers never see a partial artifact.
pub fn write_artifact(kind: &str, path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
    println!("wrote {kind}: {}", path.display());
    Ok(())
}

/// Fails every call after the first `n` that reach the backend. Used to
/// simulate an interrupted run.
struct FailAfter {
    inner: Box<dyn ChatBackend>,
    left: AtomicUsize,
}

impl ChatBackend for FailAfter {
    fn complete(&self, exchange: &ChatExchange) -> Result<String, LlmError> {
        let ok = self.left.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok();
        if !ok {
            return Err(LlmError::Transport { attempts: 1, message: "run interrupted".into() });
        }
        self.inner.complete(exchange)
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }
}

pub fn chat_gateway(cfg: &PipelineConfig, script: Option<&str>, fail_after: Option<usize>) -> Result<LlmGateway> {
    let backend: Box<dyn ChatBackend> = match (script, &cfg.backend.mock_script, &cfg.backend.chat_url) {
        (Some(text), _, _) => Box::new(ScriptedBackend::keyed_from_json(text)?),
        (None, Some(path), _) => Box::new(ScriptedBackend::keyed_from_json(&read(path)?)?),
        (None, None, Some(url)) => Box::new(HttpChatBackend::new(url, None)),
        (None, None, None) => bail!("no chat backend configured; set backend.chat_url or backend.mock_script"),
    };
    let backend = match fail_after {
        Some(n) => Box::new(FailAfter { inner: backend, left: AtomicUsize::new(n) }),
        None => backend,
    };
    let mut gw = LlmGateway::from_boxed(backend)
        .with_max_in_flight(cfg.backend.max_in_flight)
        .with_retry(RetryPolicy { max_retries: cfg.backend.max_retries, ..RetryPolicy::default() });
    if let Some(dir) = &cfg.cache_dir {
        gw = gw.with_cache(ResponseCache::on_disk(dir)?);
    }
    Ok(gw)
}

pub fn embedder(cfg: &PipelineConfig) -> Box<dyn Embedder> {
    match &cfg.backend.embed_url {
        Some(url) => Box::new(HttpEmbedder::new(url, cfg.backend.embed_model.clone(), None)),
        None => Box::new(HashEmbedder),
    }
}

pub fn iors_config(cfg: &PipelineConfig) -> Result<IorsConfig> {
    let summary = match &cfg.iors.summary_template {
        Some(p) => read(p)?,
        None => DEFAULT_SUMMARY_INSTRUCTION.to_string(),
    };
    let confirm = match &cfg.iors.confirmation_template {
        Some(p) => read(p)?,
        None => DEFAULT_CONFIRMATION_INSTRUCTION.to_string(),
    };
    let mut c = IorsConfig::new(cfg.iors.beta, &summary, &confirm)?;
    c.include_gold_relation = cfg.iors.include_gold_relation;
    c.max_summary_chars = cfg.iors.max_summary_chars;
    c.summary_params.model_id = cfg.backend.chat_model.clone();
    c.confirmation_params.model_id = cfg.backend.chat_model.clone();
    Ok(c)
}

fn instruction_text(cfg: &PipelineConfig) -> Result<String> {
    match &cfg.adrcm.instruction {
        Some(p) => read(p),
        None => Ok(inference::DEFAULT_INFERENCE_INSTRUCTION.to_string()),
    }
}

pub fn inference_config(cfg: &PipelineConfig) -> Result<InferenceConfig> {
    let mut c = InferenceConfig {
        instruction: Instruction::new(&instruction_text(cfg)?)?,
        rag: cfg.index.rag,
        k: cfg.index.k,
        per_entity_quota: cfg.index.per_entity_quota,
        ..InferenceConfig::default()
    };
    c.params.model_id = cfg.backend.infer_model.clone().unwrap_or_else(|| cfg.backend.chat_model.clone());
    Ok(c)
}

pub fn load_corpus(cfg: &PipelineConfig, path: &Path) -> Result<Corpus> {
    Ok(corpus::load_corpus(&read(path)?, &cfg.schema()?)?)
}

/// PubTator → normalized corpus file.
pub fn ingest(
    cfg: &PipelineConfig,
    pubtator: &str,
    cui_map: Option<&str>,
    split: Option<(&str, &str)>,
    out: &Path,
) -> Result<Corpus> {
    let parsed = corpus::parse_pubtator(pubtator, &cfg.schema()?)?;
    for v in &parsed.violations {
        log::warn!("line {}: {}: {}", v.line, v.doc_id, v.message);
    }
    let mut c = parsed.corpus;
    if let Some(map) = cui_map {
        c = c.with_cuis(&CuiMap::parse(map)?);
    }
    if let Some((manifest, name)) = split {
        c = c.select_split(&SplitManifest::parse(manifest)?, name);
    }
    write_artifact("corpus", out, &corpus::save_corpus(&c))?;
    println!(
        "  {} documents, {} triplets, {} skipped annotations",
        c.len(),
        c.triplet_count(),
        parsed.violations.len()
    );
    Ok(c)
}

pub fn synth(cfg: &PipelineConfig, corpus: &Corpus, llm: &LlmGateway, out: &Path) -> Result<SynthesisOutput> {
    let result = iors::run_corpus_synthesis(&iors_config(cfg)?, corpus, llm);
    write_artifact("synthesis", out, &iors::save_synthesis(&result))?;
    let r = &result.report;
    println!(
        "  {} triplets: {} accepted, {} discarded, {} failed ({} summary / {} confirmation calls)",
        r.work_items, r.accepted, r.discarded, r.errored, r.summary_calls, r.confirmation_calls
    );
    Ok(result)
}

pub fn load_synthesis(path: &Path) -> Result<SynthesisOutput> {
    iors::load_synthesis(&read(path)?).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub struct AdrcmPaths {
    pub dataset: PathBuf,
    pub export: PathBuf,
    pub sidecar: PathBuf,
}

impl AdrcmPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dataset: dir.join("dataset.jsonl"),
            export: dir.join("finetune.jsonl"),
            sidecar: dir.join("finetune.sidecar.json"),
        }
    }
}

pub fn build_adrcm(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    synthesis: &SynthesisOutput,
    paths: &AdrcmPaths,
) -> Result<FineTuneExport> {
    let dataset = adrcm::build_adrcm_dataset(corpus, &synthesis.accepted)?;
    write_artifact("adrcm dataset", &paths.dataset, &adrcm::save_dataset(&dataset))?;
    let options = ExportOptions { negative_ratio: cfg.adrcm.negative_ratio, seed: cfg.seed, beta: cfg.iors.beta };
    let export = adrcm::export_finetune(&dataset, corpus, &instruction_text(cfg)?, &cfg.hyperparams()?, &options)?;
    write_artifact("fine-tune export", &paths.export, &export.to_jsonl())?;
    write_artifact("fine-tune sidecar", &paths.sidecar, &export.sidecar_json())?;
    let h = &export.sidecar.hyperparams;
    println!(
        "  {} records, {} export rows; lora rank {} alpha {} lr {} dropout {}",
        dataset.len(),
        export.rows.len(),
        h.lora_rank,
        h.lora_alpha,
        h.learning_rate,
        h.lora_dropout
    );
    Ok(export)
}

pub fn index<'a, I>(cfg: &PipelineConfig, snapshots: I, embedder: &dyn Embedder, out: &Path) -> Result<CuiIndex>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let docs = kb::ingest_kb_snapshot(snapshots)?;
    let idx = kb::build_index(&docs, embedder, cfg.chunk_params())?;
    write_artifact("index", out, &kb::save_index(&idx))?;
    println!("  {} documents, {} chunks, {} CUIs", docs.len(), idx.chunk_count(), idx.primary().len());
    Ok(idx)
}

pub fn load_index(path: &Path) -> Result<CuiIndex> {
    kb::load_index(&read(path)?).with_context(|| format!("cannot load index {}", path.display()))
}

pub fn infer(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    index: Option<&CuiIndex>,
    embedder: &dyn Embedder,
    llm: &LlmGateway,
    out: &Path,
) -> Result<PredictionRun> {
    let run = inference::predict_corpus(corpus, Retriever { index, embedder }, llm, &inference_config(cfg)?);
    write_artifact("predictions", out, &inference::save_predictions(&run.predictions))?;
    let unparseable = run.predictions.iter().filter(|p| p.unparseable).count();
    println!("  {} predictions, {} unparseable, {} failed", run.predictions.len(), unparseable, run.failures.len());
    Ok(run)
}

pub fn evaluate(
    corpus: &Corpus,
    predictions_path: &Path,
    averaging: Averaging,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let preds = inference::load_predictions(&read(predictions_path)?)
        .map_err(|e| anyhow!("{}: {e}", predictions_path.display()))?;
    let report = eval::compute_report(&preds, corpus, averaging)?;
    if let Some(out) = out {
        write_artifact("report", out, &report.to_json())?;
    }
    print!("{}", report.table());
    Ok(report)
}

/// Full pipeline over the bundled toy corpus with the keyed reply script
/// and the hashing embedder. Model replies are cached under `out/cache`,
/// so an interrupted run resumes where it stopped.
pub fn e2e_mock(cfg: &PipelineConfig, out: &Path, fail_after: Option<usize>) -> Result<EvalReport> {
    let mut cfg = cfg.clone();
    cfg.dataset.preset = "cdr".into();
    cfg.dataset.schema_file = None;
    cfg.backend.embed_url = None;
    if cfg.cache_dir.is_none() {
        cfg.cache_dir = Some(out.join("cache"));
    }
    let llm = chat_gateway(&cfg, Some(TOY_SCRIPT), fail_after)?;

    let corpus = ingest(&cfg, TOY_CORPUS, Some(TOY_CUI_MAP), None, &out.join("corpus.jsonl"))?;

    let synthesis = iors::run_corpus_synthesis(&iors_config(&cfg)?, &corpus, &llm);
    if !synthesis.errors.is_empty() {
        bail!("synthesis interrupted: {} triplet(s) failed; rerun to resume", synthesis.errors.len());
    }
    write_artifact("synthesis", &out.join("synthesis.jsonl"), &iors::save_synthesis(&synthesis))?;

    build_adrcm(&cfg, &corpus, &synthesis, &AdrcmPaths::in_dir(out))?;

    let embedder = HashEmbedder;
    let idx = index(&cfg, [("kb.jsonl", TOY_KB)], &embedder, &out.join("index.jsonl"))?;

    let run = inference::predict_corpus(
        &corpus,
        Retriever { index: Some(&idx), embedder: &embedder },
        &llm,
        &inference_config(&cfg)?,
    );
    if !run.failures.is_empty() {
        bail!("inference interrupted: {} pair(s) failed; rerun to resume", run.failures.len());
    }
    let preds_path = out.join("predictions.jsonl");
    write_artifact("predictions", &preds_path, &inference::save_predictions(&run.predictions))?;

    let report = evaluate(&corpus, &preds_path, Averaging::Micro, Some(&out.join("report.json")))?;
    let stats = llm.stats();
    log::info!("backend calls {}, cache hits {}", stats.backend_calls, stats.cache_hits);
    Ok(report)
}
