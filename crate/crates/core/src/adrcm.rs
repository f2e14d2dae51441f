//! Document-relation cross-mapping: one record per (document, triplet),
//! mixing original documents with accepted synthetic summaries, and the
//! fine-tuning export built from it.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{enumerate_candidate_pairs, Corpus};
use crate::inference::{render_prompt_input, Instruction};
use crate::iors::SyntheticRecord;
use crate::llm::fnv1a64;
use crate::model::{TrainingSample, Triplet};
use crate::template::TemplateError;

#[derive(Debug, Error)]
pub enum AdrcmError {
    #[error("records reference different documents: {0} and {1}")]
    DocIdMismatch(String, String),
    #[error("synthetic record references unknown document {0}")]
    OrphanRecord(String),
    #[error("synthetic record for {doc_id} carries triplet ({head}, {tail}, {relation}) absent from the document")]
    UnknownTriplet { doc_id: String, head: String, tail: String, relation: String },
    #[error("entity {1} not found in document {0}")]
    UnknownEntity(String, String),
    #[error("label {0} is not in the schema")]
    UnknownLabel(String),
    #[error("{0} must be positive")]
    Hyperparam(&'static str),
    #[error("negative ratio must be a finite non-negative number")]
    NegativeRatio,
    #[error("unknown hyperparameter preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ADRCMRecord {
    pub text: String,
    pub triplet: Triplet,
    pub provenance: Provenance,
    pub source_doc_id: String,
}

/// One original record per annotated triplet, in canonical triplet order.
pub fn split_sample(sample: &TrainingSample) -> Vec<ADRCMRecord> {
    let text = sample.document.text();
    sample
        .sorted_triplets()
        .into_iter()
        .map(|t| ADRCMRecord {
            text: text.clone(),
            triplet: t.clone(),
            provenance: Provenance::Original,
            source_doc_id: sample.doc_id().to_string(),
        })
        .collect()
}

/// Union of a sample's split records with its accepted synthetic records.
/// Synthetic records follow the originals, ordered by head then tail.
pub fn merge_sample(split: &[ADRCMRecord], synthetic: &[SyntheticRecord]) -> Result<Vec<ADRCMRecord>, AdrcmError> {
    let mut doc_id: Option<&str> = None;
    for id in split.iter().map(|r| r.source_doc_id.as_str()).chain(synthetic.iter().map(|s| s.source_doc_id.as_str())) {
        match doc_id {
            None => doc_id = Some(id),
            Some(d) if d != id => return Err(AdrcmError::DocIdMismatch(d.to_string(), id.to_string())),
            Some(_) => {}
        }
    }
    let mut synth: Vec<&SyntheticRecord> = synthetic.iter().collect();
    synth.sort_by(|a, b| (&a.triplet.head_id, &a.triplet.tail_id).cmp(&(&b.triplet.head_id, &b.triplet.tail_id)));
    let mut out = split.to_vec();
    out.extend(synth.into_iter().map(|s| ADRCMRecord {
        text: s.summary.clone(),
        triplet: s.triplet.clone(),
        provenance: Provenance::Synthetic,
        source_doc_id: s.source_doc_id.clone(),
    }));
    Ok(out)
}

/// [`merge_sample`] over every sample, in corpus order.
pub fn build_adrcm_dataset(corpus: &Corpus, accepted: &[SyntheticRecord]) -> Result<Vec<ADRCMRecord>, AdrcmError> {
    let mut by_doc: HashMap<&str, Vec<SyntheticRecord>> = HashMap::new();
    for s in accepted {
        let sample =
            corpus.sample(&s.source_doc_id).ok_or_else(|| AdrcmError::OrphanRecord(s.source_doc_id.clone()))?;
        if !sample.triplets.contains(&s.triplet) {
            return Err(AdrcmError::UnknownTriplet {
                doc_id: s.source_doc_id.clone(),
                head: s.triplet.head_id.clone(),
                tail: s.triplet.tail_id.clone(),
                relation: s.triplet.relation.clone(),
            });
        }
        by_doc.entry(s.source_doc_id.as_str()).or_default().push(s.clone());
    }
    let mut out = Vec::new();
    for sample in corpus.samples() {
        let synth = by_doc.remove(sample.doc_id()).unwrap_or_default();
        out.extend(merge_sample(&split_sample(sample), &synth)?);
    }
    Ok(out)
}

pub const LLAMA2_7B_CHAT: &str = "meta-llama/Llama-2-7b-chat-hf";

/// LoRA settings recorded next to the export. Training itself happens
/// elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub base_model_id: String,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub learning_rate: f64,
    pub lora_dropout: f64,
}

impl Hyperparams {
    pub fn preset(name: &str) -> Result<Self, AdrcmError> {
        let (lora_rank, lora_alpha) = match name.to_ascii_lowercase().as_str() {
            "cdr" => (16, 32),
            "gda" | "biored" => (64, 16),
            other => return Err(AdrcmError::UnknownPreset(other.to_string())),
        };
        Ok(Self { base_model_id: LLAMA2_7B_CHAT.into(), lora_rank, lora_alpha, learning_rate: 2e-4, lora_dropout: 0.1 })
    }

    pub fn validate(&self) -> Result<(), AdrcmError> {
        if self.lora_rank == 0 {
            return Err(AdrcmError::Hyperparam("lora_rank"));
        }
        if self.lora_alpha == 0 {
            return Err(AdrcmError::Hyperparam("lora_alpha"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(AdrcmError::Hyperparam("learning_rate"));
        }
        if self.lora_dropout.is_nan() || self.lora_dropout <= 0.0 || self.lora_dropout >= 1.0 {
            return Err(AdrcmError::Hyperparam("lora_dropout"));
        }
        if self.base_model_id.trim().is_empty() {
            return Err(AdrcmError::Hyperparam("base_model_id"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportOptions {
    /// None-labeled rows drawn per original positive triplet.
    pub negative_ratio: f64,
    pub seed: u64,
    /// Recorded in the sidecar only.
    pub beta: u32,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self { negative_ratio: 1.0, seed: 0, beta: crate::iors::DEFAULT_BETA }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRow {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema: String,
    pub hyperparams: Hyperparams,
    pub iors_beta: u32,
    pub negative_ratio: f64,
    pub seed: u64,
    pub rows: usize,
    pub original_rows: usize,
    pub synthetic_rows: usize,
    pub negative_rows: usize,
    /// SHA-256 of the export file.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneExport {
    pub instruction: String,
    pub rows: Vec<ExportRow>,
    pub sidecar: Sidecar,
}

impl FineTuneExport {
    /// The export file: one row object per line.
    pub fn to_jsonl(&self) -> String {
        rows_jsonl(&self.rows)
    }

    pub fn sidecar_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.sidecar).expect("sidecar serializes");
        s.push('\n');
        s
    }
}

fn rows_jsonl(rows: &[ExportRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    out
}

fn names<'a>(sample: &'a TrainingSample, t: &Triplet) -> Result<(&'a str, &'a str), AdrcmError> {
    let get = |id: &str| {
        sample
            .entity(id)
            .map(|e| e.canonical_name.as_str())
            .ok_or_else(|| AdrcmError::UnknownEntity(sample.doc_id().to_string(), id.to_string()))
    };
    Ok((get(&t.head_id)?, get(&t.tail_id)?))
}

/// One row per dataset record plus seeded none-labeled rows from original
/// documents. Rows are ordered by (document, provenance, head, tail).
pub fn export_finetune(
    dataset: &[ADRCMRecord],
    corpus: &Corpus,
    instruction: &str,
    hyperparams: &Hyperparams,
    options: &ExportOptions,
) -> Result<FineTuneExport, AdrcmError> {
    hyperparams.validate()?;
    if !options.negative_ratio.is_finite() || options.negative_ratio < 0.0 {
        return Err(AdrcmError::NegativeRatio);
    }
    let schema = corpus.schema();
    let rendered = Instruction::new(instruction)?.render(schema.labels());
    let order: HashMap<&str, usize> = corpus.samples().iter().enumerate().map(|(i, s)| (s.doc_id(), i)).collect();

    type Key = (usize, Provenance, String, String);
    let mut keyed: Vec<(Key, ExportRow)> = Vec::with_capacity(dataset.len());
    let (mut original_rows, mut synthetic_rows) = (0, 0);
    for r in dataset {
        let pos =
            *order.get(r.source_doc_id.as_str()).ok_or_else(|| AdrcmError::OrphanRecord(r.source_doc_id.clone()))?;
        if !schema.has_label(&r.triplet.relation) {
            return Err(AdrcmError::UnknownLabel(r.triplet.relation.clone()));
        }
        let (h, t) = names(&corpus.samples()[pos], &r.triplet)?;
        match r.provenance {
            Provenance::Original => original_rows += 1,
            Provenance::Synthetic => synthetic_rows += 1,
        }
        keyed.push((
            (pos, r.provenance, r.triplet.head_id.clone(), r.triplet.tail_id.clone()),
            ExportRow {
                instruction: rendered.clone(),
                input: render_prompt_input(&r.text, &[], h, t),
                output: r.triplet.relation.clone(),
            },
        ));
    }

    let mut negative_rows = 0;
    if options.negative_ratio > 0.0 {
        let mut positives: BTreeMap<usize, usize> = BTreeMap::new();
        for r in dataset.iter().filter(|r| r.provenance == Provenance::Original && !schema.is_none(&r.triplet.relation))
        {
            *positives.entry(order[r.source_doc_id.as_str()]).or_default() += 1;
        }
        for (&pos, &n_pos) in &positives {
            let sample = &corpus.samples()[pos];
            let pool: Vec<_> =
                enumerate_candidate_pairs(sample, schema).into_iter().filter(|p| schema.is_none(&p.gold)).collect();
            let want = ((n_pos as f64) * options.negative_ratio).round() as usize;
            let take = want.min(pool.len());
            if take == 0 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ fnv1a64(sample.doc_id().as_bytes()));
            let mut picked = rand::seq::index::sample(&mut rng, pool.len(), take).into_vec();
            picked.sort_unstable();
            for i in picked {
                let p = &pool[i];
                let t = Triplet::new(p.head_id.clone(), p.tail_id.clone(), schema.none_label());
                let (h, tl) = names(sample, &t)?;
                keyed.push((
                    (pos, Provenance::Original, p.head_id.clone(), p.tail_id.clone()),
                    ExportRow {
                        instruction: rendered.clone(),
                        input: render_prompt_input(&sample.document.text(), &[], h, tl),
                        output: schema.none_label().to_string(),
                    },
                ));
                negative_rows += 1;
            }
        }
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let rows: Vec<ExportRow> = keyed.into_iter().map(|(_, r)| r).collect();
    let fingerprint = hex::encode(Sha256::digest(rows_jsonl(&rows).as_bytes()));
    let sidecar = Sidecar {
        schema: schema.name().to_string(),
        hyperparams: hyperparams.clone(),
        iors_beta: options.beta,
        negative_ratio: options.negative_ratio,
        seed: options.seed,
        rows: rows.len(),
        original_rows,
        synthetic_rows,
        negative_rows,
        fingerprint,
    };
    Ok(FineTuneExport { instruction: instruction.to_string(), rows, sidecar })
}

pub fn save_dataset(records: &[ADRCMRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn load_dataset(text: &str) -> Result<Vec<ADRCMRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::DEFAULT_INFERENCE_INSTRUCTION;
    use crate::model::fixtures::cdr_sample;
    use crate::model::{CharRange, Entity, EntityType, Mention, RelationSchema};

    fn synth(doc: &str, t: &Triplet, summary: &str) -> SyntheticRecord {
        SyntheticRecord {
            summary: summary.into(),
            triplet: t.clone(),
            source_doc_id: doc.into(),
            iterations_used: 1,
            failures: vec![],
            confirmations: vec![],
        }
    }

    /// Two chemicals and two diseases, one CID triplet, so three none pairs.
    fn wide_sample(doc_id: &str) -> TrainingSample {
        let mut s = cdr_sample();
        s.document.doc_id = doc_id.into();
        let text = s.document.text();
        let extra = |id: &str, etype, name: &str, start: usize| Entity {
            entity_id: id.into(),
            cui: None,
            etype,
            canonical_name: name.into(),
            mentions: vec![Mention {
                surface: text[start..start + 1].into(),
                sentence_index: 0,
                range: CharRange::new(start, start + 1),
            }],
        };
        s.entities.push(extra("D000001", EntityType::Chemical, "x", 0));
        s.entities.push(extra("D000002", EntityType::Disease, "y", 1));
        s
    }

    #[test]
    fn split_counts_and_text() {
        let s = cdr_sample();
        let recs = split_sample(&s);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].text, s.document.text());
        assert_eq!(recs[0].provenance, Provenance::Original);
        let mut empty = cdr_sample();
        empty.triplets.clear();
        assert!(split_sample(&empty).is_empty());
    }

    #[test]
    fn merge_keeps_duplicate_triplets() {
        let s = cdr_sample();
        let split = split_sample(&s);
        let merged = merge_sample(&split, &[synth("100", &s.triplets[0], "Naloxone induces hypotension.")]).unwrap();
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].triplet, merged[1].triplet);
        assert_ne!(merged[0].text, merged[1].text);
        assert_eq!(merged[1].provenance, Provenance::Synthetic);
        assert!(matches!(
            merge_sample(&split, &[synth("999", &s.triplets[0], "x")]),
            Err(AdrcmError::DocIdMismatch(..))
        ));
    }

    #[test]
    fn dataset_rejects_orphans() {
        let s = cdr_sample();
        let corpus = Corpus::new(RelationSchema::cdr(), vec![s.clone()]).unwrap();
        assert!(matches!(
            build_adrcm_dataset(&corpus, &[synth("7", &s.triplets[0], "x")]),
            Err(AdrcmError::OrphanRecord(_))
        ));
        let bogus = Triplet::new("D007022", "D009270", "CID");
        assert!(matches!(
            build_adrcm_dataset(&corpus, &[synth("100", &bogus, "x")]),
            Err(AdrcmError::UnknownTriplet { .. })
        ));
        let ds = build_adrcm_dataset(&corpus, &[synth("100", &s.triplets[0], "x")]).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn presets() {
        let cdr = Hyperparams::preset("cdr").unwrap();
        assert_eq!((cdr.lora_rank, cdr.lora_alpha, cdr.learning_rate, cdr.lora_dropout), (16, 32, 2e-4, 0.1));
        for p in ["gda", "BioRED"] {
            let h = Hyperparams::preset(p).unwrap();
            assert_eq!((h.lora_rank, h.lora_alpha), (64, 16));
        }
        assert!(Hyperparams::preset("docred").is_err());
    }

    #[test]
    fn export_rows_and_negatives() {
        let corpus = Corpus::new(RelationSchema::cdr(), vec![wide_sample("1"), wide_sample("2")]).unwrap();
        let ds = build_adrcm_dataset(&corpus, &[]).unwrap();
        let hp = Hyperparams::preset("cdr").unwrap();
        let no_neg = ExportOptions { negative_ratio: 0.0, ..Default::default() };
        let e = export_finetune(&ds, &corpus, DEFAULT_INFERENCE_INSTRUCTION, &hp, &no_neg).unwrap();
        assert_eq!(e.rows.len(), ds.len());
        assert_eq!(e.rows[0].output, "CID");
        assert!(e.rows[0].instruction.contains("CID, None"));
        assert!(e.rows[0].input.ends_with("Head entity: Naloxone\nTail entity: hypotension"));

        let opts = ExportOptions { negative_ratio: 2.0, seed: 7, beta: 3 };
        let a = export_finetune(&ds, &corpus, DEFAULT_INFERENCE_INSTRUCTION, &hp, &opts).unwrap();
        let b = export_finetune(&ds, &corpus, DEFAULT_INFERENCE_INSTRUCTION, &hp, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sidecar.negative_rows, 4);
        assert_eq!(a.rows.len(), 6);
        assert!(a.rows.iter().all(|r| corpus.schema().has_label(&r.output)));
        assert_eq!(a.sidecar.fingerprint, hex::encode(Sha256::digest(a.to_jsonl().as_bytes())));
        let sidecar = a.sidecar_json();
        assert!(sidecar.contains("\"lora_rank\": 16") && sidecar.contains("\"learning_rate\": 0.0002"));
    }

    #[test]
    fn bad_instruction_and_hyperparams() {
        let corpus = Corpus::new(RelationSchema::cdr(), vec![cdr_sample()]).unwrap();
        let hp = Hyperparams::preset("cdr").unwrap();
        let opts = ExportOptions::default();
        assert!(matches!(
            export_finetune(&[], &corpus, "Pick from {labels} for {drug}", &hp, &opts),
            Err(AdrcmError::Template(TemplateError::UnknownPlaceholder(_)))
        ));
        let zero = Hyperparams { lora_rank: 0, ..hp };
        assert!(matches!(
            export_finetune(&[], &corpus, DEFAULT_INFERENCE_INSTRUCTION, &zero, &opts),
            Err(AdrcmError::Hyperparam(_))
        ));
    }

    #[test]
    fn dataset_file_round_trips() {
        let ds = split_sample(&cdr_sample());
        assert_eq!(load_dataset(&save_dataset(&ds)).unwrap(), ds);
    }
}
