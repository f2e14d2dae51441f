//! Iterative summary generation with relation confirmation.
//!
//! For each annotated triplet the model writes a summary of the document
//! focused on that relation. A second, independent call reads only the
//! summary and names the relation. A summary whose confirmed relation matches
//! the gold label becomes a synthetic training document; otherwise it is kept
//! as a failure example for the next attempt. After `beta` failed attempts
//! the triplet is discarded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::exec::bounded_map;
use crate::llm::{ChatExchange, ChatParams, LlmError, LlmGateway};
use crate::model::{RelationSchema, TrainingSample, Triplet};
use crate::template::{Template, TemplateError};

pub const DEFAULT_SUMMARY_INSTRUCTION: &str = include_str!("../templates/summary.txt");
pub const DEFAULT_CONFIRMATION_INSTRUCTION: &str = include_str!("../templates/confirmation.txt");
pub const DEFAULT_BETA: u32 = 3;
pub const DEFAULT_MAX_SUMMARY_CHARS: usize = 4000;

const FAILURE_HEADING: &str =
    "Previous unsatisfactory summaries (the relation could not be confirmed from them; write a better one):";

#[derive(Debug, Error)]
pub enum IorsError {
    #[error("beta must be at least 1")]
    ZeroBeta,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("label list is empty")]
    EmptyLabels,
    #[error("summary is empty")]
    EmptySummary,
    #[error("entity {0} not found in sample")]
    UnknownEntity(String),
    #[error("model call failed after {} summary call(s): {source}", trace.summary_calls)]
    Llm {
        #[source]
        source: LlmError,
        trace: IorsTrace,
    },
}

#[derive(Debug, Clone)]
pub struct IorsConfig {
    beta: u32,
    summary_instruction: Template,
    confirmation_instruction: Template,
    /// Append the gold relation to the confirmation prompt.
    pub include_gold_relation: bool,
    pub max_summary_chars: usize,
    pub summary_params: ChatParams,
    pub confirmation_params: ChatParams,
}

impl IorsConfig {
    pub fn new(beta: u32, summary_instruction: &str, confirmation_instruction: &str) -> Result<Self, IorsError> {
        if beta == 0 {
            return Err(IorsError::ZeroBeta);
        }
        let summary_slots = ["head", "tail", "relation"];
        let confirm_slots = ["head", "tail", "labels"];
        Ok(Self {
            beta,
            summary_instruction: Template::new(summary_instruction.trim_end(), &summary_slots, &summary_slots)?,
            confirmation_instruction: Template::new(
                confirmation_instruction.trim_end(),
                &confirm_slots,
                &confirm_slots,
            )?,
            include_gold_relation: false,
            max_summary_chars: DEFAULT_MAX_SUMMARY_CHARS,
            summary_params: ChatParams { temperature: 0.7, ..ChatParams::default() },
            confirmation_params: ChatParams { temperature: 0.0, ..ChatParams::default() },
        })
    }

    pub fn with_beta(beta: u32) -> Result<Self, IorsError> {
        Self::new(beta, DEFAULT_SUMMARY_INSTRUCTION, DEFAULT_CONFIRMATION_INSTRUCTION)
    }

    pub fn beta(&self) -> u32 {
        self.beta
    }
}

impl Default for IorsConfig {
    fn default() -> Self {
        Self::with_beta(DEFAULT_BETA).expect("default templates are valid")
    }
}

/// An accepted synthetic document for one triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub summary: String,
    pub triplet: Triplet,
    pub source_doc_id: String,
    pub iterations_used: u32,
    /// Rejected summaries, in generation order.
    pub failures: Vec<String>,
    /// Raw confirmation replies, in call order.
    pub confirmations: Vec<String>,
}

/// Everything that happened while processing one triplet.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IorsTrace {
    pub summaries: Vec<String>,
    pub confirmations: Vec<String>,
    pub summary_calls: u32,
    pub confirmation_calls: u32,
    pub overlong: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IorsOutcome {
    Accepted(SyntheticRecord),
    Discarded(IorsTrace),
}

fn names<'a>(sample: &'a TrainingSample, triplet: &Triplet) -> Result<(&'a str, &'a str), IorsError> {
    let head = sample.entity(&triplet.head_id).ok_or_else(|| IorsError::UnknownEntity(triplet.head_id.clone()))?;
    let tail = sample.entity(&triplet.tail_id).ok_or_else(|| IorsError::UnknownEntity(triplet.tail_id.clone()))?;
    Ok((&head.canonical_name, &tail.canonical_name))
}

fn route(stage: &str, doc_id: &str, triplet: &Triplet, iteration: u32) -> String {
    format!("{stage}|{doc_id}|{}|{}|{iteration}", triplet.head_id, triplet.tail_id)
}

/// Instruction with the triplet filled in, the full document, and every
/// failed summary so far under a labeled heading.
pub fn build_summary_prompt(
    config: &IorsConfig,
    sample: &TrainingSample,
    schema: &RelationSchema,
    triplet: &Triplet,
    failures: &[String],
) -> Result<ChatExchange, IorsError> {
    let (head, tail) = names(sample, triplet)?;
    let instruction = config.summary_instruction.render(&[
        ("head", head),
        ("tail", tail),
        ("relation", schema.verbalize(&triplet.relation)),
    ])?;
    let mut prompt = format!("{instruction}\n\nDocument:\n{}\n", sample.document.text());
    if !failures.is_empty() {
        prompt.push('\n');
        prompt.push_str(FAILURE_HEADING);
        prompt.push('\n');
        for (i, f) in failures.iter().enumerate() {
            prompt.push_str(&format!("Failure example {}:\n{}\n", i + 1, f));
        }
    }
    let iteration = failures.len() as u32 + 1;
    Ok(ChatExchange::user(prompt, config.summary_params.clone()).with_route(route(
        "summary",
        sample.doc_id(),
        triplet,
        iteration,
    )))
}

/// Instruction with the entity names and the label list, followed by the
/// summary. The gold relation is only included when the config asks for it.
pub fn build_confirmation_prompt(
    config: &IorsConfig,
    summary: &str,
    head: &str,
    tail: &str,
    labels: &[String],
    gold_relation: Option<&str>,
) -> Result<ChatExchange, IorsError> {
    if labels.is_empty() {
        return Err(IorsError::EmptyLabels);
    }
    if summary.trim().is_empty() {
        return Err(IorsError::EmptySummary);
    }
    let label_list = labels.join(", ");
    let instruction =
        config.confirmation_instruction.render(&[("head", head), ("tail", tail), ("labels", &label_list)])?;
    let mut prompt = format!("{instruction}\n\nSummary:\n{summary}\n");
    if let (true, Some(gold)) = (config.include_gold_relation, gold_relation) {
        prompt.push_str(&format!("\nCandidate relation: {gold}\n"));
    }
    Ok(ChatExchange::user(prompt, config.confirmation_params.clone()))
}

/// Lowercase, trim and strip terminal punctuation, then resolve against the
/// schema's label names and alias table.
pub fn normalize_relation_label<'a>(raw: &str, schema: &'a RelationSchema) -> Option<&'a str> {
    schema.lookup(raw)
}

/// Runs the generate/confirm loop for one triplet.
pub fn generate_synthetic(
    config: &IorsConfig,
    sample: &TrainingSample,
    schema: &RelationSchema,
    triplet: &Triplet,
    llm: &LlmGateway,
) -> Result<IorsOutcome, IorsError> {
    let (head, tail) = names(sample, triplet)?;
    let mut failures: Vec<String> = Vec::new();
    let mut trace = IorsTrace::default();
    let mut theta = 0;
    while theta < config.beta {
        let summary_prompt = build_summary_prompt(config, sample, schema, triplet, &failures)?;
        let summary = llm.chat(&summary_prompt).map_err(|source| IorsError::Llm { source, trace: trace.clone() })?;
        trace.summary_calls += 1;
        trace.summaries.push(summary.clone());

        if summary.trim().is_empty() || summary.chars().count() > config.max_summary_chars {
            trace.overlong += u32::from(!summary.trim().is_empty());
            failures.push(summary);
            theta += 1;
            continue;
        }

        let confirm_prompt =
            build_confirmation_prompt(config, &summary, head, tail, schema.labels(), Some(&triplet.relation))?
                .with_route(route("confirm", sample.doc_id(), triplet, theta + 1));
        let confirmed = llm.chat(&confirm_prompt).map_err(|source| IorsError::Llm { source, trace: trace.clone() })?;
        trace.confirmation_calls += 1;
        trace.confirmations.push(confirmed.clone());

        if normalize_relation_label(&confirmed, schema) == Some(triplet.relation.as_str()) {
            return Ok(IorsOutcome::Accepted(SyntheticRecord {
                summary,
                triplet: triplet.clone(),
                source_doc_id: sample.doc_id().to_string(),
                iterations_used: theta + 1,
                failures,
                confirmations: trace.confirmations,
            }));
        }
        failures.push(summary);
        theta += 1;
    }
    Ok(IorsOutcome::Discarded(trace))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardedRecord {
    pub triplet: Triplet,
    pub source_doc_id: String,
    pub trace: IorsTrace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisFailure {
    pub triplet: Triplet,
    pub source_doc_id: String,
    pub error: String,
    pub trace: IorsTrace,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub work_items: usize,
    pub accepted: usize,
    pub discarded: usize,
    pub errored: usize,
    pub summary_calls: u64,
    pub confirmation_calls: u64,
    pub overlong_summaries: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynthesisOutput {
    pub accepted: Vec<SyntheticRecord>,
    pub discarded: Vec<DiscardedRecord>,
    pub errors: Vec<SynthesisFailure>,
    pub report: SynthesisReport,
}

impl SynthesisOutput {
    pub fn discarded_count(&self) -> usize {
        self.discarded.len()
    }
}

/// Runs [`generate_synthetic`] once per non-none triplet of every sample.
/// Per-triplet failures are recorded and skipped.
pub fn run_corpus_synthesis(config: &IorsConfig, corpus: &Corpus, llm: &LlmGateway) -> SynthesisOutput {
    let schema = corpus.schema();
    let mut items: Vec<(&TrainingSample, &Triplet)> =
        corpus.samples().iter().flat_map(|s| s.positive_triplets(schema).map(move |t| (s, t))).collect();
    items.sort_by(|a, b| (a.0.doc_id(), &a.1.head_id, &a.1.tail_id).cmp(&(b.0.doc_id(), &b.1.head_id, &b.1.tail_id)));

    let results = bounded_map(&items, llm.concurrency(), |(sample, triplet)| {
        generate_synthetic(config, sample, schema, triplet, llm)
    });

    let mut out = SynthesisOutput::default();
    out.report.work_items = items.len();
    for ((sample, triplet), result) in items.iter().zip(results) {
        match result {
            Ok(IorsOutcome::Accepted(rec)) => {
                let calls = rec.iterations_used as u64;
                out.report.summary_calls += calls;
                out.report.confirmation_calls += rec.confirmations.len() as u64;
                out.report.overlong_summaries += calls - rec.confirmations.len() as u64;
                out.accepted.push(rec);
            }
            Ok(IorsOutcome::Discarded(trace)) => {
                out.report.summary_calls += u64::from(trace.summary_calls);
                out.report.confirmation_calls += u64::from(trace.confirmation_calls);
                out.report.overlong_summaries += u64::from(trace.overlong);
                out.discarded.push(DiscardedRecord {
                    triplet: (*triplet).clone(),
                    source_doc_id: sample.doc_id().to_string(),
                    trace,
                });
            }
            Err(e) => {
                let trace = match &e {
                    IorsError::Llm { trace, .. } => trace.clone(),
                    _ => IorsTrace::default(),
                };
                log::warn!("synthesis failed for {} ({}, {}): {e}", sample.doc_id(), triplet.head_id, triplet.tail_id);
                out.errors.push(SynthesisFailure {
                    triplet: (*triplet).clone(),
                    source_doc_id: sample.doc_id().to_string(),
                    error: e.to_string(),
                    trace,
                });
            }
        }
    }
    out.report.accepted = out.accepted.len();
    out.report.discarded = out.discarded.len();
    out.report.errored = out.errors.len();
    out
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
enum SynthesisLine {
    Accepted(SyntheticRecord),
    Discarded(DiscardedRecord),
    Error(SynthesisFailure),
}

/// One JSON object per line, tagged by `outcome`, with full traces.
pub fn save_synthesis(out: &SynthesisOutput) -> String {
    let mut lines: Vec<(String, String, String, SynthesisLine)> = Vec::new();
    for r in &out.accepted {
        lines.push(key(&r.source_doc_id, &r.triplet, SynthesisLine::Accepted(r.clone())));
    }
    for r in &out.discarded {
        lines.push(key(&r.source_doc_id, &r.triplet, SynthesisLine::Discarded(r.clone())));
    }
    for r in &out.errors {
        lines.push(key(&r.source_doc_id, &r.triplet, SynthesisLine::Error(r.clone())));
    }
    lines.sort_by(|a, b| (&a.0, &a.1, &a.2).cmp(&(&b.0, &b.1, &b.2)));
    lines.into_iter().map(|(_, _, _, l)| serde_json::to_string(&l).expect("synthesis line serializes") + "\n").collect()
}

fn key(doc: &str, t: &Triplet, line: SynthesisLine) -> (String, String, String, SynthesisLine) {
    (doc.to_string(), t.head_id.clone(), t.tail_id.clone(), line)
}

pub fn load_synthesis(text: &str) -> Result<SynthesisOutput, String> {
    let mut out = SynthesisOutput::default();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))? {
            SynthesisLine::Accepted(r) => {
                out.report.summary_calls += u64::from(r.iterations_used);
                out.report.confirmation_calls += r.confirmations.len() as u64;
                out.accepted.push(r);
            }
            SynthesisLine::Discarded(r) => {
                out.report.summary_calls += u64::from(r.trace.summary_calls);
                out.report.confirmation_calls += u64::from(r.trace.confirmation_calls);
                out.discarded.push(r);
            }
            SynthesisLine::Error(r) => out.errors.push(r),
        }
    }
    out.report.accepted = out.accepted.len();
    out.report.discarded = out.discarded.len();
    out.report.errored = out.errors.len();
    out.report.work_items = out.accepted.len() + out.discarded.len() + out.errors.len();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedBackend;
    use crate::model::fixtures::cdr_sample;

    fn gw(replies: &[&str]) -> LlmGateway {
        LlmGateway::new(ScriptedBackend::sequence(replies.iter().copied()))
    }

    #[test]
    fn summary_prompt_without_failures() {
        let s = cdr_sample();
        let ex = build_summary_prompt(&IorsConfig::default(), &s, &RelationSchema::cdr(), &s.triplets[0], &[]).unwrap();
        let text = ex.text();
        assert!(text.contains(&s.document.text()));
        assert!(text.contains("Naloxone induce hypotension"));
        assert!(!text.contains("Failure example"));
        assert_eq!(ex.params.temperature, 0.7);
    }

    #[test]
    fn summary_prompt_quotes_each_failure_once() {
        let s = cdr_sample();
        let ex = build_summary_prompt(
            &IorsConfig::default(),
            &s,
            &RelationSchema::cdr(),
            &s.triplets[0],
            &["s1 text".to_string()],
        )
        .unwrap();
        let text = ex.text();
        assert_eq!(text.matches(FAILURE_HEADING).count(), 1);
        assert_eq!(text.matches("Failure example").count(), 1);
        assert_eq!(text.matches("s1 text").count(), 1);
    }

    #[test]
    fn confirmation_prompt_lists_labels_without_gold() {
        let cfg = IorsConfig::default();
        let schema = RelationSchema::cdr();
        let ex = build_confirmation_prompt(&cfg, "summary", "a", "b", schema.labels(), Some("CID")).unwrap();
        let text = ex.text();
        assert!(text.contains("CID, None"));
        assert!(!text.contains("Candidate relation"));
        assert_eq!(ex.params.temperature, 0.0);

        let mut leaky = cfg.clone();
        leaky.include_gold_relation = true;
        let ex = build_confirmation_prompt(&leaky, "summary", "a", "b", schema.labels(), Some("CID")).unwrap();
        assert!(ex.text().contains("Candidate relation: CID"));
    }

    #[test]
    fn confirmation_prompt_errors() {
        let cfg = IorsConfig::default();
        assert!(matches!(build_confirmation_prompt(&cfg, "s", "a", "b", &[], None), Err(IorsError::EmptyLabels)));
        assert!(matches!(
            build_confirmation_prompt(&cfg, "  ", "a", "b", &["x".into()], None),
            Err(IorsError::EmptySummary)
        ));
    }

    #[test]
    fn config_validation() {
        assert!(matches!(IorsConfig::with_beta(0), Err(IorsError::ZeroBeta)));
        assert!(matches!(
            IorsConfig::new(3, "about {head} and {tail}", DEFAULT_CONFIRMATION_INSTRUCTION),
            Err(IorsError::Template(TemplateError::MissingPlaceholder(_)))
        ));
        assert!(matches!(
            IorsConfig::new(3, DEFAULT_SUMMARY_INSTRUCTION, "{head} {tail}"),
            Err(IorsError::Template(TemplateError::MissingPlaceholder(_)))
        ));
        assert_eq!(IorsConfig::default().beta(), 3);
    }

    #[test]
    fn label_normalization() {
        let cdr = RelationSchema::cdr();
        assert_eq!(normalize_relation_label("CID.", &cdr), Some("CID"));
        assert_eq!(normalize_relation_label("  induce ", &cdr), Some("CID"));
        assert_eq!(normalize_relation_label("maybe related", &cdr), None);
        assert_eq!(normalize_relation_label("none", &cdr), Some("None"));
    }

    #[test]
    fn first_pass_match() {
        let s = cdr_sample();
        let llm = gw(&["s1", "CID"]);
        let out = generate_synthetic(&IorsConfig::default(), &s, &RelationSchema::cdr(), &s.triplets[0], &llm).unwrap();
        let IorsOutcome::Accepted(rec) = out else { panic!("expected acceptance") };
        assert_eq!(rec.iterations_used, 1);
        assert!(rec.failures.is_empty());
        assert_eq!(rec.summary, "s1");
        assert_eq!(rec.source_doc_id, "100");
    }

    #[test]
    fn mismatch_then_match() {
        let s = cdr_sample();
        let llm = gw(&["s1", "None", "s2", "induce."]);
        let out = generate_synthetic(&IorsConfig::default(), &s, &RelationSchema::cdr(), &s.triplets[0], &llm).unwrap();
        let IorsOutcome::Accepted(rec) = out else { panic!("expected acceptance") };
        assert_eq!(rec.iterations_used, 2);
        assert_eq!(rec.failures, vec!["s1".to_string()]);
        assert_eq!(rec.summary, "s2");
    }

    #[test]
    fn never_matching_discards_after_beta() {
        let s = cdr_sample();
        let backend = ScriptedBackend::sequence(["a", "None", "b", "None", "c", "None", "extra"]);
        let llm = LlmGateway::new(backend);
        let out = generate_synthetic(&IorsConfig::default(), &s, &RelationSchema::cdr(), &s.triplets[0], &llm).unwrap();
        let IorsOutcome::Discarded(trace) = out else { panic!("expected discard") };
        assert_eq!(trace.summary_calls, 3);
        assert_eq!(trace.confirmation_calls, 3);
        assert_eq!(llm.stats().backend_calls, 6);
    }

    #[test]
    fn overlong_summary_is_a_failed_iteration() {
        let s = cdr_sample();
        let mut cfg = IorsConfig::with_beta(2).unwrap();
        cfg.max_summary_chars = 5;
        let llm = gw(&["far too long", "ok", "CID"]);
        let out = generate_synthetic(&cfg, &s, &RelationSchema::cdr(), &s.triplets[0], &llm).unwrap();
        let IorsOutcome::Accepted(rec) = out else { panic!("expected acceptance") };
        assert_eq!(rec.iterations_used, 2);
        assert_eq!(rec.confirmations.len(), 1);
    }

    #[test]
    fn transport_error_carries_partial_trace() {
        let s = cdr_sample();
        let llm = gw(&["s1", "None"]);
        let err =
            generate_synthetic(&IorsConfig::default(), &s, &RelationSchema::cdr(), &s.triplets[0], &llm).unwrap_err();
        match err {
            IorsError::Llm { source, trace } => {
                assert_eq!(source, LlmError::ScriptExhausted);
                assert_eq!(trace.summary_calls, 1);
                assert_eq!(trace.confirmations, vec!["None".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synthesis_lines_round_trip() {
        let s = cdr_sample();
        let corpus = Corpus::new(RelationSchema::cdr(), vec![s]).unwrap();
        let out = run_corpus_synthesis(&IorsConfig::default(), &corpus, &gw(&["s1", "CID"]));
        assert_eq!(out.report.accepted, 1);
        let text = save_synthesis(&out);
        assert!(text.starts_with("{\"outcome\":\"accepted\""));
        let back = load_synthesis(&text).unwrap();
        assert_eq!(back.accepted, out.accepted);
        assert_eq!(back.report, out.report);
    }
}
