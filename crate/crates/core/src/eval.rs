//! Precision, recall and F1 over candidate pairs, split by whether the gold
//! entities share a sentence.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{enumerate_candidate_pairs, Corpus};
use crate::inference::Prediction;
use crate::model::TrainingSample;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("entity {1} not found in document {0}")]
    UnknownEntity(String, String),
    #[error("predictions do not match the candidate pairs; missing: [{}], extra: [{}]", .missing.join(", "), .extra.join(", "))]
    Coverage { missing: Vec<String>, extra: Vec<String> },
    #[error("duplicate prediction for {0}")]
    Duplicate(String),
    #[error("prediction for {0} has label {1} outside the schema")]
    UnknownLabel(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locality {
    Intra,
    Inter,
}

/// Intra when some sentence holds a mention of both entities.
pub fn classify_locality(sample: &TrainingSample, head_id: &str, tail_id: &str) -> Result<Locality, EvalError> {
    let get = |id: &str| {
        sample.entity(id).ok_or_else(|| EvalError::UnknownEntity(sample.doc_id().to_string(), id.to_string()))
    };
    let head = get(head_id)?.sentence_indices();
    let tail = get(tail_id)?.sentence_indices();
    Ok(if head.intersection(&tail).next().is_some() { Locality::Intra } else { Locality::Inter })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Scores from raw counts. Zero denominators score 0 and are named in
/// `flags` with the given prefix.
pub fn score_counts(c: Counts, prefix: &str, flags: &mut Vec<String>) -> Scores {
    let precision = ratio(c.tp, c.tp + c.fp, &format!("{prefix}precision"), flags);
    let recall = ratio(c.tp, c.tp + c.fn_, &format!("{prefix}recall"), flags);
    Scores { precision, recall, f1: f1_of(precision, recall) }
}

fn score(per_label: &BTreeMap<String, Counts>, averaging: Averaging, prefix: &str, flags: &mut Vec<String>) -> Scores {
    match averaging {
        Averaging::Micro => {
            let mut total = Counts::default();
            per_label.values().for_each(|c| total.add(*c));
            score_counts(total, prefix, flags)
        }
        Averaging::Macro => {
            if per_label.is_empty() {
                flags.push(format!("{prefix}labels"));
                return Scores::default();
            }
            let mut sum = Scores::default();
            for (label, c) in per_label {
                let s = score_counts(*c, &format!("{prefix}{label}."), flags);
                sum.precision += s.precision;
                sum.recall += s.recall;
                sum.f1 += s.f1;
            }
            let n = per_label.len() as f64;
            Scores { precision: sum.precision / n, recall: sum.recall / n, f1: sum.f1 / n }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub gold_positives: u64,
    pub predicted_positives: u64,
    pub intra_gold: u64,
    pub inter_gold: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub averaging: Averaging,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub intra_f1: f64,
    pub inter_f1: f64,
    pub intra: Scores,
    pub inter: Scores,
    pub per_label: BTreeMap<String, Counts>,
    pub counts: ReportCounts,
    /// Quantities whose denominator was zero.
    pub zero_denominators: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Fixed-width table, percentages to one decimal.
    pub fn table(&self) -> String {
        let pct = |x: f64| format!("{:.1}", x * 100.0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>6} {:>6} {:>6} {:>8} {:>8}", "", "P", "R", "F1", "Intra-F1", "Inter-F1");
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>6} {:>6} {:>8} {:>8}",
            "Overall",
            pct(self.precision),
            pct(self.recall),
            pct(self.f1),
            pct(self.intra_f1),
            pct(self.inter_f1)
        );
        let _ = writeln!(
            out,
            "gold={} predicted={} intra={} inter={}",
            self.counts.gold_positives, self.counts.predicted_positives, self.counts.intra_gold, self.counts.inter_gold
        );
        out
    }
}

fn pair_key(doc: &str, h: &str, t: &str) -> String {
    format!("{doc}:{h}->{t}")
}

/// Scores `predictions` against the gold labels of every candidate pair in
/// `corpus`. Every candidate pair needs exactly one prediction.
pub fn compute_report(
    predictions: &[Prediction],
    corpus: &Corpus,
    averaging: Averaging,
) -> Result<EvalReport, EvalError> {
    let schema = corpus.schema();
    let mut predicted: HashMap<(&str, &str, &str), &str> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if !schema.has_label(&p.label) {
            return Err(EvalError::UnknownLabel(pair_key(&p.doc_id, &p.head_id, &p.tail_id), p.label.clone()));
        }
        if predicted.insert((&p.doc_id, &p.head_id, &p.tail_id), &p.label).is_some() {
            return Err(EvalError::Duplicate(pair_key(&p.doc_id, &p.head_id, &p.tail_id)));
        }
    }

    let positive: Vec<&String> = schema.labels().iter().filter(|l| !schema.is_none(l)).collect();
    let empty = || positive.iter().map(|l| (l.to_string(), Counts::default())).collect::<BTreeMap<_, _>>();
    let (mut all, mut intra, mut inter) = (empty(), empty(), empty());
    let mut counts = ReportCounts::default();
    let mut missing = Vec::new();
    let mut seen = 0usize;

    for sample in corpus.samples() {
        for pair in enumerate_candidate_pairs(sample, schema) {
            let Some(&pred) = predicted.get(&(sample.doc_id(), pair.head_id.as_str(), pair.tail_id.as_str())) else {
                missing.push(pair_key(sample.doc_id(), &pair.head_id, &pair.tail_id));
                continue;
            };
            seen += 1;
            let locality = classify_locality(sample, &pair.head_id, &pair.tail_id)?;
            let side = if locality == Locality::Intra { &mut intra } else { &mut inter };
            let gold = pair.gold.as_str();
            let gold_pos = !schema.is_none(gold);
            let pred_pos = !schema.is_none(pred);
            if gold_pos {
                counts.gold_positives += 1;
                match locality {
                    Locality::Intra => counts.intra_gold += 1,
                    Locality::Inter => counts.inter_gold += 1,
                }
            }
            if pred_pos {
                counts.predicted_positives += 1;
            }
            let mut bump = |label: &str, f: fn(&mut Counts)| {
                f(all.get_mut(label).expect("positive label"));
                f(side.get_mut(label).expect("positive label"));
            };
            if gold_pos && pred == gold {
                bump(gold, |c| c.tp += 1);
            } else {
                if pred_pos {
                    bump(pred, |c| c.fp += 1);
                }
                if gold_pos {
                    bump(gold, |c| c.fn_ += 1);
                }
            }
        }
    }

    if !missing.is_empty() || seen != predicted.len() {
        let mut extra: Vec<String> = Vec::new();
        for p in predictions {
            let known = corpus
                .sample(&p.doc_id)
                .map(|s| {
                    enumerate_candidate_pairs(s, schema)
                        .iter()
                        .any(|c| c.head_id == p.head_id && c.tail_id == p.tail_id)
                })
                .unwrap_or(false);
            if !known {
                extra.push(pair_key(&p.doc_id, &p.head_id, &p.tail_id));
            }
        }
        return Err(EvalError::Coverage { missing, extra });
    }

    let mut flags = Vec::new();
    let overall = score(&all, averaging, "", &mut flags);
    let intra_s = score(&intra, averaging, "intra.", &mut flags);
    let inter_s = score(&inter, averaging, "inter.", &mut flags);
    Ok(EvalReport {
        averaging,
        precision: overall.precision,
        recall: overall.recall,
        f1: overall.f1,
        intra_f1: intra_s.f1,
        inter_f1: inter_s.f1,
        intra: intra_s,
        inter: inter_s,
        per_label: all,
        counts,
        zero_denominators: flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::cdr_sample;
    use crate::model::{CharRange, Entity, EntityType, Mention, RelationSchema};

    fn mention_in(sentences: &[usize]) -> Vec<Mention> {
        sentences
            .iter()
            .map(|&i| Mention { surface: "x".into(), sentence_index: i, range: CharRange::new(0, 1) })
            .collect()
    }

    fn with_sentences(h: &[usize], t: &[usize]) -> TrainingSample {
        let mut s = cdr_sample();
        s.entities[0].mentions = mention_in(h);
        s.entities[1].mentions = mention_in(t);
        s
    }

    #[test]
    fn locality_rule() {
        assert_eq!(classify_locality(&cdr_sample(), "D009270", "D007022").unwrap(), Locality::Intra);
        assert_eq!(classify_locality(&with_sentences(&[1], &[9]), "D009270", "D007022").unwrap(), Locality::Inter);
        assert_eq!(
            classify_locality(&with_sentences(&[1, 2], &[2, 5]), "D009270", "D007022").unwrap(),
            Locality::Intra
        );
        assert!(matches!(classify_locality(&cdr_sample(), "D009270", "nope"), Err(EvalError::UnknownEntity(..))));
    }

    #[test]
    fn arithmetic() {
        let mut flags = Vec::new();
        let s = score_counts(Counts { tp: 3, fp: 1, fn_: 2 }, "", &mut flags);
        assert_eq!((s.precision, s.recall), (0.75, 0.6));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        let z = score_counts(Counts::default(), "x.", &mut flags);
        assert_eq!(z, Scores::default());
        assert_eq!(flags, vec!["x.precision", "x.recall"]);
    }

    fn pred(doc: &str, h: &str, t: &str, label: &str) -> Prediction {
        Prediction {
            doc_id: doc.into(),
            head_id: h.into(),
            tail_id: t.into(),
            label: label.into(),
            raw_output: label.into(),
            snippets_used: vec![],
            unparseable: false,
        }
    }

    #[test]
    fn perfect_predictions() {
        let c = Corpus::new(RelationSchema::cdr(), vec![cdr_sample()]).unwrap();
        let r = compute_report(&[pred("100", "D009270", "D007022", "CID")], &c, Averaging::Micro).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.intra_f1), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.counts, ReportCounts { gold_positives: 1, predicted_positives: 1, intra_gold: 1, inter_gold: 0 });
        assert_eq!(r.zero_denominators, vec!["inter.precision", "inter.recall"]);
        assert!(r.table().contains("Overall   100.0  100.0  100.0    100.0      0.0"));
    }

    #[test]
    fn coverage_errors_list_pairs() {
        let c = Corpus::new(RelationSchema::cdr(), vec![cdr_sample()]).unwrap();
        let e = compute_report(&[], &c, Averaging::Micro).unwrap_err();
        assert!(e.to_string().contains("100:D009270->D007022"));
        let extra = [pred("100", "D009270", "D007022", "CID"), pred("100", "D007022", "D009270", "None")];
        match compute_report(&extra, &c, Averaging::Micro).unwrap_err() {
            EvalError::Coverage { missing, extra } => {
                assert!(missing.is_empty());
                assert_eq!(extra, vec!["100:D007022->D009270"]);
            }
            other => panic!("{other}"),
        }
        let dup = [pred("100", "D009270", "D007022", "CID"), pred("100", "D009270", "D007022", "CID")];
        assert!(matches!(compute_report(&dup, &c, Averaging::Micro), Err(EvalError::Duplicate(_))));
    }

    #[test]
    fn wrong_positive_label_is_fp_and_fn() {
        let mut s = cdr_sample();
        s.entities[0].etype = EntityType::Gene;
        s.triplets[0].relation = "Association".into();
        let c = Corpus::new(RelationSchema::biored(), vec![s]).unwrap();
        let r = compute_report(&[pred("100", "D009270", "D007022", "Bind")], &c, Averaging::Micro).unwrap();
        assert_eq!(r.per_label["Association"], Counts { tp: 0, fp: 0, fn_: 1 });
        assert_eq!(r.per_label["Bind"], Counts { tp: 0, fp: 1, fn_: 0 });
        assert_eq!((r.precision, r.recall), (0.0, 0.0));
    }

    #[test]
    fn macro_averages_labels() {
        let mut s = cdr_sample();
        s.entities[0].etype = EntityType::Gene;
        s.entities.push(Entity {
            entity_id: "G2".into(),
            cui: None,
            etype: EntityType::Gene,
            canonical_name: "g".into(),
            mentions: vec![Mention { surface: "N".into(), sentence_index: 1, range: CharRange::new(31, 32) }],
        });
        s.triplets[0].relation = "Association".into();
        let c = Corpus::new(RelationSchema::biored(), vec![s]).unwrap();
        let pairs = enumerate_candidate_pairs(&c.samples()[0], c.schema());
        let preds: Vec<Prediction> = pairs
            .iter()
            .map(|p| pred("100", &p.head_id, &p.tail_id, if p.gold == "None" { "None" } else { "Association" }))
            .collect();
        let micro = compute_report(&preds, &c, Averaging::Micro).unwrap();
        let macro_ = compute_report(&preds, &c, Averaging::Macro).unwrap();
        assert_eq!(micro.f1, 1.0);
        // Only Association has support; the other seven score zero.
        assert!((macro_.f1 - 1.0 / 8.0).abs() < 1e-12);
    }
}
