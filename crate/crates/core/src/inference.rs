//! Final prompt assembly, model invocation and output parsing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{enumerate_candidate_pairs, CandidatePair, Corpus};
use crate::exec::bounded_map;
use crate::kb::{build_query, retrieve, CuiIndex, KbError, RetrievalOptions, ScopeMode, Snippet};
use crate::llm::{ChatExchange, ChatParams, Embedder, LlmError, LlmGateway};
use crate::model::{Entity, RelationSchema, TrainingSample};
use crate::template::{Template, TemplateError};

pub const DEFAULT_INFERENCE_INSTRUCTION: &str = include_str!("../templates/inference.txt");

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("entity {0} not found in sample")]
    UnknownEntity(String),
    #[error("{doc_id} ({head_id}, {tail_id}): retrieval failed: {source}")]
    Retrieval {
        doc_id: String,
        head_id: String,
        tail_id: String,
        #[source]
        source: Box<KbError>,
    },
    #[error("{doc_id} ({head_id}, {tail_id}): model call failed: {source}")]
    Llm {
        doc_id: String,
        head_id: String,
        tail_id: String,
        #[source]
        source: Box<LlmError>,
    },
    #[error("retrieval is enabled but no index was supplied")]
    MissingIndex,
}

/// Task instruction with a single `{labels}` slot. Shared by inference and
/// fine-tuning export.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction(Template);

impl Instruction {
    pub fn new(text: &str) -> Result<Self, TemplateError> {
        Ok(Self(Template::new(text.trim_end(), &["labels"], &["labels"])?))
    }

    pub fn render(&self, labels: &[String]) -> String {
        self.0.render(&[("labels", &labels.join(", "))]).expect("labels slot is always supplied")
    }
}

impl Default for Instruction {
    fn default() -> Self {
        Self::new(DEFAULT_INFERENCE_INSTRUCTION).expect("default instruction is valid")
    }
}

/// Everything after the instruction: document, optional snippets, and the
/// entity pair.
pub fn render_prompt_input(document: &str, snippets: &[Snippet], head: &str, tail: &str) -> String {
    let mut out = format!("Document:\n{document}\n\n");
    if !snippets.is_empty() {
        out.push_str("Relevant snippets:\n");
        for (i, s) in snippets.iter().enumerate() {
            out.push_str(&format!("[{}] ({}, {}) {}\n", i + 1, s.chunk.source, s.chunk.cui, s.chunk.text));
        }
        out.push('\n');
    }
    out.push_str(&format!("Head entity: {head}\nTail entity: {tail}"));
    out
}

pub fn assemble_inference_prompt(
    instruction: &Instruction,
    labels: &[String],
    document: &str,
    snippets: &[Snippet],
    head: &Entity,
    tail: &Entity,
    params: &ChatParams,
) -> ChatExchange {
    let prompt = format!(
        "{}\n\n{}",
        instruction.render(labels),
        render_prompt_input(document, snippets, &head.canonical_name, &tail.canonical_name)
    );
    ChatExchange::user(prompt, params.clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLabel {
    pub label: String,
    pub unparseable: bool,
}

fn at_word_boundary(hay: &str, start: usize, end: usize) -> bool {
    let before = hay[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
    let after = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
    before && after
}

/// Whole-reply lookup first, then the earliest label or alias mentioned in
/// the reply (longest wins on a shared start). Anything else is the none
/// label with the unparseable flag set.
pub fn parse_relation_output(raw: &str, schema: &RelationSchema) -> ParsedLabel {
    if let Some(l) = schema.lookup(raw) {
        return ParsedLabel { label: l.to_string(), unparseable: false };
    }
    let hay = raw.to_lowercase();
    let mut candidates: Vec<(String, &str)> = Vec::new();
    for l in schema.labels() {
        candidates.push((l.to_lowercase(), l));
        candidates.push((l.to_lowercase().replace('_', " "), l));
    }
    for (alias, l) in schema.aliases() {
        candidates.push((alias.clone(), l));
    }
    let mut best: Option<(usize, usize, &str)> = None;
    for (needle, label) in &candidates {
        if needle.is_empty() {
            continue;
        }
        for (pos, _) in hay.match_indices(needle.as_str()) {
            let end = pos + needle.len();
            if !at_word_boundary(&hay, pos, end) {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, blen, _)) => pos < bp || (pos == bp && needle.len() > blen),
            };
            if better {
                best = Some((pos, needle.len(), label));
            }
            break;
        }
    }
    match best {
        Some((_, _, label)) => ParsedLabel { label: label.to_string(), unparseable: false },
        None => ParsedLabel { label: schema.none_label().to_string(), unparseable: true },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub head_id: String,
    pub tail_id: String,
    pub label: String,
    pub raw_output: String,
    pub snippets_used: Vec<String>,
    pub unparseable: bool,
}

/// Which retrieval feeds the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RagMode {
    /// Chunks scoped to the pair's CUIs.
    #[default]
    Cui,
    /// Chunk-only retrieval over the whole index.
    Unscoped,
    /// No snippets.
    Off,
}

#[derive(Debug, Clone)]
pub struct InferenceConfig {
    pub instruction: Instruction,
    pub rag: RagMode,
    pub k: usize,
    pub per_entity_quota: Option<usize>,
    pub params: ChatParams,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            instruction: Instruction::default(),
            rag: RagMode::Cui,
            k: 4,
            per_entity_quota: None,
            params: ChatParams { temperature: 0.0, ..ChatParams::default() },
        }
    }
}

/// Retrieval backing for inference. `index` may be absent only with
/// [`RagMode::Off`].
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub index: Option<&'a CuiIndex>,
    pub embedder: &'a dyn Embedder,
}

fn entity<'a>(sample: &'a TrainingSample, id: &str) -> Result<&'a Entity, InferenceError> {
    sample.entity(id).ok_or_else(|| InferenceError::UnknownEntity(id.to_string()))
}

/// Retrieve, assemble, call the model at the configured temperature, parse.
pub fn predict_pair(
    sample: &TrainingSample,
    pair: &CandidatePair,
    schema: &RelationSchema,
    retriever: Retriever<'_>,
    llm: &LlmGateway,
    config: &InferenceConfig,
) -> Result<Prediction, InferenceError> {
    let head = entity(sample, &pair.head_id)?;
    let tail = entity(sample, &pair.tail_id)?;
    let snippets = match config.rag {
        RagMode::Off => Vec::new(),
        mode => {
            let index = retriever.index.ok_or(InferenceError::MissingIndex)?;
            let options = RetrievalOptions {
                k: config.k,
                scope: if mode == RagMode::Unscoped { ScopeMode::Unscoped } else { ScopeMode::Cui },
                per_entity_quota: config.per_entity_quota,
            };
            let query = build_query(head, tail, schema.labels());
            retrieve(index, head, tail, &query, retriever.embedder, &options)
                .map_err(|source| InferenceError::Retrieval {
                    doc_id: sample.doc_id().to_string(),
                    head_id: pair.head_id.clone(),
                    tail_id: pair.tail_id.clone(),
                    source: Box::new(source),
                })?
                .snippets
        }
    };
    let exchange = assemble_inference_prompt(
        &config.instruction,
        schema.labels(),
        &sample.document.text(),
        &snippets,
        head,
        tail,
        &config.params,
    )
    .with_route(format!("infer|{}|{}|{}", sample.doc_id(), pair.head_id, pair.tail_id));
    let raw = llm.chat(&exchange).map_err(|source| InferenceError::Llm {
        doc_id: sample.doc_id().to_string(),
        head_id: pair.head_id.clone(),
        tail_id: pair.tail_id.clone(),
        source: Box::new(source),
    })?;
    let parsed = parse_relation_output(&raw, schema);
    Ok(Prediction {
        doc_id: sample.doc_id().to_string(),
        head_id: pair.head_id.clone(),
        tail_id: pair.tail_id.clone(),
        label: parsed.label,
        raw_output: raw,
        snippets_used: snippets.into_iter().map(|s| s.chunk.chunk_id).collect(),
        unparseable: parsed.unparseable,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFailure {
    pub doc_id: String,
    pub head_id: String,
    pub tail_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionRun {
    pub predictions: Vec<Prediction>,
    pub failures: Vec<PairFailure>,
}

/// Predicts every candidate pair of every sample in corpus order. Failed
/// pairs are recorded and skipped; rerunning over a warm cache resumes.
pub fn predict_corpus(
    corpus: &Corpus,
    retriever: Retriever<'_>,
    llm: &LlmGateway,
    config: &InferenceConfig,
) -> PredictionRun {
    let schema = corpus.schema();
    let items: Vec<(&TrainingSample, CandidatePair)> = corpus
        .samples()
        .iter()
        .flat_map(|s| enumerate_candidate_pairs(s, schema).into_iter().map(move |p| (s, p)))
        .collect();
    let results = bounded_map(&items, llm.concurrency(), |(sample, pair)| {
        predict_pair(sample, pair, schema, retriever, llm, config)
    });
    let mut run = PredictionRun::default();
    for ((sample, pair), r) in items.iter().zip(results) {
        match r {
            Ok(p) => run.predictions.push(p),
            Err(e) => {
                log::warn!("{e}");
                run.failures.push(PairFailure {
                    doc_id: sample.doc_id().to_string(),
                    head_id: pair.head_id.clone(),
                    tail_id: pair.tail_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    run
}

pub fn save_predictions(predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

pub fn load_predictions(text: &str) -> Result<Vec<Prediction>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}
