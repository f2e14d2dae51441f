//! Dataset ingestion and the normalized corpus format.
//!
//! PubTator blocks look like this (annotation columns are tab-separated):
//!
//! ```text
//! 227508|t|Naloxone reverses the antihypertensive effect of clonidine.
//! 227508|a|In unanesthetized, spontaneously hypertensive rats ...
//! 227508  0  8  Naloxone  Chemical  D009270
//! 227508  CID  D008750  D007022
//! ```
//!
//! The normalized format is one JSON object per line, preceded by a header
//! line naming the schema and its labels.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    char_slice, validate_sample, CharRange, DatasetTag, Document, Entity, EntityType, Mention, RelationSchema,
    TrainingSample, Triplet, Violation,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed line: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown relation tag `{tag}`")]
    UnknownRelation { line: usize, tag: String },
    #[error("line {line}: unknown entity type `{etype}`")]
    UnknownEntityType { line: usize, etype: String },
    #[error("line {line}: span [{start}, {end}) reads `{found}` but the annotation says `{expected}`")]
    SpanMismatch { line: usize, start: usize, end: usize, expected: String, found: String },
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("sample `{doc_id}` is invalid: {violations}")]
    InvalidSample { doc_id: String, violations: String },
    #[error("schema mismatch: file declares `{found}`, expected `{expected}`")]
    SchemaMismatch { expected: String, found: String },
    #[error("missing corpus header")]
    MissingHeader,
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

/// A schema plus the samples annotated under it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    schema: RelationSchema,
    samples: Vec<TrainingSample>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate doc ids and invalid samples.
    pub fn new(schema: RelationSchema, samples: Vec<TrainingSample>) -> Result<Self, CorpusError> {
        let mut ids = HashSet::new();
        for s in &samples {
            if !ids.insert(s.doc_id().to_string()) {
                return Err(CorpusError::DuplicateDocId(s.doc_id().to_string()));
            }
            let v = validate_sample(s, &schema);
            if !v.is_empty() {
                return Err(CorpusError::InvalidSample {
                    doc_id: s.doc_id().to_string(),
                    violations: v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
                });
            }
        }
        Ok(Self { schema, samples })
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, doc_id: &str) -> Option<&TrainingSample> {
        self.samples.iter().find(|s| s.doc_id() == doc_id)
    }

    /// Total annotated relations, the Σ J_i of the dataset.
    pub fn triplet_count(&self) -> usize {
        self.samples.iter().map(|s| s.triplets.len()).sum()
    }

    /// Attaches CUIs from an identifier map. Entities already carrying a CUI
    /// keep it.
    pub fn with_cuis(mut self, map: &CuiMap) -> Self {
        for s in &mut self.samples {
            for e in &mut s.entities {
                if e.cui.is_none() {
                    e.cui = map.lookup(&e.entity_id).map(str::to_string);
                }
            }
        }
        self
    }

    /// Keeps only documents a split manifest assigns to `split`.
    pub fn select_split(&self, manifest: &SplitManifest, split: &str) -> Corpus {
        let samples = self.samples.iter().filter(|s| manifest.split_of(s.doc_id()) == Some(split)).cloned().collect();
        Corpus { schema: self.schema.clone(), samples }
    }
}

/// Dataset identifier → CUI lookup, loaded from `identifier<TAB>CUI` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CuiMap {
    map: BTreeMap<String, String>,
}

impl CuiMap {
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(CorpusError::Malformed {
                    line: i + 1,
                    message: format!("expected 2 tab-separated fields, found {}", fields.len()),
                });
            }
            if !crate::model::is_valid_cui(fields[1]) {
                return Err(CorpusError::Record { line: i + 1, message: format!("invalid CUI `{}`", fields[1]) });
            }
            map.insert(fields[0].to_string(), fields[1].to_string());
        }
        Ok(Self { map })
    }

    pub fn insert(&mut self, identifier: impl Into<String>, cui: impl Into<String>) {
        self.map.insert(identifier.into(), cui.into());
    }

    pub fn lookup(&self, identifier: &str) -> Option<&str> {
        self.map.get(identifier).map(String::as_str)
    }
}

/// `doc_id<TAB>split` lines, e.g. a train/dev partition of GDA.
#[derive(Debug, Clone, Default)]
pub struct SplitManifest {
    splits: HashMap<String, String>,
}

impl SplitManifest {
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut splits = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('\t') {
                Some((doc, split)) => {
                    splits.insert(doc.to_string(), split.trim().to_string());
                }
                None => {
                    return Err(CorpusError::Malformed { line: i + 1, message: "expected doc_id<TAB>split".into() })
                }
            }
        }
        Ok(Self { splits })
    }

    pub fn split_of(&self, doc_id: &str) -> Option<&str> {
        self.splits.get(doc_id).map(String::as_str)
    }
}

/// Result of reading a PubTator file: the corpus plus annotation problems
/// that were skipped rather than treated as fatal.
#[derive(Debug, Clone)]
pub struct ParsedCorpus {
    pub corpus: Corpus,
    pub violations: Vec<ParseViolation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseViolation {
    pub line: usize,
    pub doc_id: String,
    pub message: String,
}

#[derive(Default)]
struct Block {
    pmid: String,
    title: Option<String>,
    body: Option<String>,
    mentions: Vec<RawMention>,
    relations: Vec<RawRelation>,
}

struct RawMention {
    line: usize,
    range: CharRange,
    surface: String,
    etype: EntityType,
    identifiers: Vec<String>,
}

struct RawRelation {
    line: usize,
    label: String,
    id1: String,
    id2: String,
}

/// Parses PubTator-formatted content into a corpus under `schema`.
pub fn parse_pubtator(content: &str, schema: &RelationSchema) -> Result<ParsedCorpus, CorpusError> {
    let tag = DatasetTag::from_schema_name(schema.name());
    let mut blocks: Vec<(usize, Block)> = Vec::new();
    let mut current: Option<(usize, Block)> = None;

    for (idx, raw_line) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(b) = current.take() {
                blocks.push(b);
            }
            continue;
        }
        if let Some((pmid, kind, rest)) = split_text_line(line) {
            let needs_new = match &current {
                Some((_, b)) => b.pmid != pmid || (kind == "t" && b.title.is_some()),
                None => true,
            };
            if needs_new {
                if let Some(b) = current.take() {
                    blocks.push(b);
                }
                current = Some((line_no, Block { pmid: pmid.to_string(), ..Default::default() }));
            }
            let block = &mut current.as_mut().expect("block opened above").1;
            match kind {
                "t" => block.title = Some(rest.to_string()),
                _ => block.body = Some(rest.to_string()),
            }
            continue;
        }

        let fields: Vec<&str> = line.split('\t').collect();
        let Some((_, block)) = current.as_mut() else {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: "annotation line before any title line".into(),
            });
        };
        if fields[0] != block.pmid {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: format!("PMID `{}` does not match block `{}`", fields[0], block.pmid),
            });
        }
        let is_mention = fields.len() >= 3 && fields[1].parse::<usize>().is_ok() && fields[2].parse::<usize>().is_ok();
        if is_mention {
            // CDR composite mentions carry a seventh column listing the parts.
            if fields.len() != 6 && fields.len() != 7 {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("mention line has {} fields, expected 6", fields.len()),
                });
            }
            let start: usize = fields[1].parse().expect("checked");
            let end: usize = fields[2].parse().expect("checked");
            let etype = EntityType::from_annotation(fields[4])
                .ok_or_else(|| CorpusError::UnknownEntityType { line: line_no, etype: fields[4].to_string() })?;
            let identifiers = fields[5]
                .split(['|', ',', ';'])
                .map(str::trim)
                .filter(|id| !id.is_empty() && *id != "-1" && *id != "-")
                .map(str::to_string)
                .collect();
            block.mentions.push(RawMention {
                line: line_no,
                range: CharRange::new(start, end),
                surface: fields[3].to_string(),
                etype,
                identifiers,
            });
        } else {
            // BioRED appends a novelty column.
            if fields.len() != 4 && fields.len() != 5 {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("relation line has {} fields, expected 4", fields.len()),
                });
            }
            block.relations.push(RawRelation {
                line: line_no,
                label: fields[1].to_string(),
                id1: fields[2].to_string(),
                id2: fields[3].to_string(),
            });
        }
    }
    if let Some(b) = current.take() {
        blocks.push(b);
    }

    let mut samples = Vec::with_capacity(blocks.len());
    let mut violations = Vec::new();
    for (first_line, block) in blocks {
        samples.push(build_sample(first_line, block, schema, tag, &mut violations)?);
    }
    let corpus = Corpus::new(schema.clone(), samples)?;
    Ok(ParsedCorpus { corpus, violations })
}

fn split_text_line(line: &str) -> Option<(&str, &str, &str)> {
    let (pmid, rest) = line.split_once('|')?;
    if pmid.contains('\t') {
        return None;
    }
    let (kind, text) = rest.split_once('|')?;
    matches!(kind, "t" | "a").then_some((pmid, kind, text))
}

fn build_sample(
    first_line: usize,
    block: Block,
    schema: &RelationSchema,
    tag: DatasetTag,
    violations: &mut Vec<ParseViolation>,
) -> Result<TrainingSample, CorpusError> {
    let title = block.title.clone().ok_or_else(|| CorpusError::Malformed {
        line: first_line,
        message: format!("document {} has no title line", block.pmid),
    })?;
    let body = block.body.clone().unwrap_or_default();
    let text = format!("{title} {body}");
    let text_len = text.chars().count();

    for m in &block.mentions {
        let found = char_slice(&text, m.range);
        if found != Some(m.surface.as_str()) {
            return Err(CorpusError::SpanMismatch {
                line: m.line,
                start: m.range.start,
                end: m.range.end,
                expected: m.surface.clone(),
                found: found.unwrap_or("<out of bounds>").to_string(),
            });
        }
    }

    let title_len = title.chars().count();
    let mut sentences = segment_sentences(&title);
    match sentences.last_mut() {
        // The joining space belongs to the last title sentence.
        Some(last) => last.end += 1,
        None => sentences.push(CharRange::new(0, 1)),
    }
    sentences.extend(
        segment_sentences(&body).into_iter().map(|r| CharRange::new(r.start + title_len + 1, r.end + title_len + 1)),
    );
    debug_assert_eq!(sentences.last().map(|r| r.end), Some(text_len));
    let spans: Vec<CharRange> = block.mentions.iter().map(|m| m.range).collect();
    let sentences = merge_straddled(sentences, &spans);

    let mut by_id: BTreeMap<String, Entity> = BTreeMap::new();
    for m in &block.mentions {
        if m.identifiers.is_empty() {
            violations.push(ParseViolation {
                line: m.line,
                doc_id: block.pmid.clone(),
                message: format!("mention `{}` has no identifier and was skipped", m.surface),
            });
            continue;
        }
        let sentence_index =
            sentences.iter().position(|s| s.contains(&m.range)).expect("merged sentences contain every mention");
        for id in &m.identifiers {
            let entity = by_id.entry(id.clone()).or_insert_with(|| Entity {
                entity_id: id.clone(),
                cui: None,
                etype: m.etype,
                canonical_name: m.surface.clone(),
                mentions: Vec::new(),
            });
            if entity.etype != m.etype {
                violations.push(ParseViolation {
                    line: m.line,
                    doc_id: block.pmid.clone(),
                    message: format!(
                        "identifier {id} typed {} here but {} earlier; keeping {}",
                        m.etype, entity.etype, entity.etype
                    ),
                });
            }
            entity.mentions.push(Mention { surface: m.surface.clone(), sentence_index, range: m.range });
        }
    }
    for e in by_id.values_mut() {
        e.mentions.sort_by_key(|m| m.range);
        e.mentions.dedup();
        e.canonical_name = e.mentions[0].surface.clone();
    }

    let mut triplets = Vec::new();
    let mut seen = HashSet::new();
    for r in &block.relations {
        let label = schema
            .lookup(&r.label)
            .ok_or_else(|| CorpusError::UnknownRelation { line: r.line, tag: r.label.clone() })?
            .to_string();
        let mut skip = |message: String| {
            violations.push(ParseViolation { line: r.line, doc_id: block.pmid.clone(), message });
        };
        let (Some(a), Some(b)) = (by_id.get(&r.id1), by_id.get(&r.id2)) else {
            let missing = if by_id.contains_key(&r.id1) { &r.id2 } else { &r.id1 };
            skip(format!("relation references identifier {missing} absent from mention lines"));
            continue;
        };
        if a.entity_id == b.entity_id {
            skip(format!("relation relates {} to itself", a.entity_id));
            continue;
        }
        let (head, tail) = if schema.allows(a.etype, b.etype) {
            (a, b)
        } else if schema.allows(b.etype, a.etype) {
            (b, a)
        } else {
            skip(format!("types ({}, {}) not allowed by schema {}", a.etype, b.etype, schema.name()));
            continue;
        };
        if !seen.insert((head.entity_id.clone(), tail.entity_id.clone())) {
            skip(format!("duplicate relation ({}, {})", head.entity_id, tail.entity_id));
            continue;
        }
        triplets.push(Triplet::new(head.entity_id.clone(), tail.entity_id.clone(), label));
    }
    triplets.sort_by(|a, b| (&a.head_id, &a.tail_id).cmp(&(&b.head_id, &b.tail_id)));

    Ok(TrainingSample {
        document: Document { doc_id: block.pmid, title, body, sentences, dataset_tag: tag },
        entities: by_id.into_values().collect(),
        triplets,
    })
}

/// Joins consecutive sentences whenever a mention crosses their boundary.
fn merge_straddled(sentences: Vec<CharRange>, spans: &[CharRange]) -> Vec<CharRange> {
    let mut out: Vec<CharRange> = Vec::with_capacity(sentences.len());
    for s in sentences {
        if let Some(last) = out.last_mut() {
            let crosses = spans.iter().any(|m| m.start < last.end && m.end > last.end);
            if crosses {
                last.end = s.end;
                continue;
            }
        }
        out.push(s);
    }
    out
}

/// Splits after `.`, `!` or `?` when followed by whitespace or end of text.
/// Whitespace after a terminator stays with the preceding sentence, so the
/// ranges tile the text exactly.
pub fn segment_sentences(text: &str) -> Vec<CharRange> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let boundary = matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if boundary {
            let mut end = i + 1;
            while end < chars.len() && chars[end].is_whitespace() {
                end += 1;
            }
            out.push(CharRange::new(start, end));
            start = end;
            i = end;
        } else {
            i += 1;
        }
    }
    if start < chars.len() {
        out.push(CharRange::new(start, chars.len()));
    }
    out
}

/// One ordered entity pair eligible for prediction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidatePair {
    pub head_id: String,
    pub tail_id: String,
    pub gold: String,
}

/// Every ordered pair whose types the schema allows, sorted by head then tail.
/// Annotated pairs carry their gold label; the rest carry the none label.
pub fn enumerate_candidate_pairs(sample: &TrainingSample, schema: &RelationSchema) -> Vec<CandidatePair> {
    let gold: HashMap<(&str, &str), &str> =
        sample.triplets.iter().map(|t| ((t.head_id.as_str(), t.tail_id.as_str()), t.relation.as_str())).collect();
    let mut entities: Vec<&Entity> = sample.entities.iter().collect();
    entities.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
    let mut out = Vec::new();
    for h in &entities {
        for t in &entities {
            if h.entity_id == t.entity_id || !schema.allows(h.etype, t.etype) {
                continue;
            }
            let label = gold.get(&(h.entity_id.as_str(), t.entity_id.as_str())).copied().unwrap_or(schema.none_label());
            out.push(CandidatePair {
                head_id: h.entity_id.clone(),
                tail_id: t.entity_id.clone(),
                gold: label.to_string(),
            });
        }
    }
    out
}

const CORPUS_FORMAT: &str = "adrcm-corpus";

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    schema: String,
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    doc_id: String,
    dataset_tag: DatasetTag,
    title: String,
    body: String,
    sentences: Vec<CharRange>,
    entities: Vec<Entity>,
    triplets: Vec<Triplet>,
}

/// Serializes a corpus to the normalized line-delimited format.
pub fn save_corpus(corpus: &Corpus) -> String {
    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        schema: corpus.schema.name().to_string(),
        labels: corpus.schema.labels().to_vec(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in &corpus.samples {
        let rec = SampleRecord {
            doc_id: s.document.doc_id.clone(),
            dataset_tag: s.document.dataset_tag,
            title: s.document.title.clone(),
            body: s.document.body.clone(),
            sentences: s.document.sentences.clone(),
            entities: s.entities.clone(),
            triplets: s.triplets.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Reads the normalized format, checking the header against `schema`.
pub fn load_corpus(text: &str, schema: &RelationSchema) -> Result<Corpus, CorpusError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines.next().ok_or(CorpusError::MissingHeader)?;
    let header: CorpusHeader = serde_json::from_str(header_line)
        .map_err(|e| CorpusError::Record { line: 1, message: format!("bad header: {e}") })?;
    if header.format != CORPUS_FORMAT {
        return Err(CorpusError::Record { line: 1, message: format!("unknown format `{}`", header.format) });
    }
    if header.schema != schema.name() || header.labels != schema.labels() {
        return Err(CorpusError::SchemaMismatch {
            expected: format!("{} {:?}", schema.name(), schema.labels()),
            found: format!("{} {:?}", header.schema, header.labels),
        });
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let rec: SampleRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::Record { line: idx + 1, message: e.to_string() })?;
        samples.push(TrainingSample {
            document: Document {
                doc_id: rec.doc_id,
                title: rec.title,
                body: rec.body,
                sentences: rec.sentences,
                dataset_tag: rec.dataset_tag,
            },
            entities: rec.entities,
            triplets: rec.triplets,
        });
    }
    Corpus::new(schema.clone(), samples)
}

/// Convenience for checks that only need the violation list of a loaded corpus.
pub fn corpus_violations(corpus: &Corpus) -> Vec<(String, Violation)> {
    corpus
        .samples
        .iter()
        .flat_map(|s| validate_sample(s, &corpus.schema).into_iter().map(move |v| (s.doc_id().to_string(), v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::cdr_sample;

    const MINIMAL: &str = "\
100|t|Naloxone reverses hypotension.
100|a|Naloxone caused hypotension in rats.
100\t0\t8\tNaloxone\tChemical\tD009270
100\t18\t29\thypotension\tDisease\tD007022
100\t31\t39\tNaloxone\tChemical\tD009270
100\t47\t58\thypotension\tDisease\tD007022
100\tCID\tD009270\tD007022
";

    #[test]
    fn minimal_block() {
        let parsed = parse_pubtator(MINIMAL, &RelationSchema::cdr()).unwrap();
        assert!(parsed.violations.is_empty());
        let c = &parsed.corpus;
        assert_eq!(c.len(), 1);
        let s = &c.samples()[0];
        assert_eq!(s.entities.len(), 2);
        assert_eq!(s.triplets, vec![Triplet::new("D009270", "D007022", "CID")]);
        let mut expected = cdr_sample();
        expected.entities[0].cui = None;
        expected.entities.reverse();
        assert_eq!(s, &expected);
    }

    #[test]
    fn span_mismatch_is_reported() {
        let bad = MINIMAL.replace("100\t18\t29\thypotension", "100\t18\t29\thypertension");
        let err = parse_pubtator(&bad, &RelationSchema::cdr()).unwrap_err();
        match err {
            CorpusError::SpanMismatch { line, start, end, .. } => {
                assert_eq!((line, start, end), (4, 18, 29));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_field_count_names_line() {
        let bad = MINIMAL.replace("100\t0\t8\tNaloxone\tChemical\tD009270", "100\t0\t8\tNaloxone\tChemical");
        match parse_pubtator(&bad, &RelationSchema::cdr()).unwrap_err() {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_relation_tag() {
        let bad = MINIMAL.replace("\tCID\t", "\tTREATS\t");
        match parse_pubtator(&bad, &RelationSchema::cdr()).unwrap_err() {
            CorpusError::UnknownRelation { tag, line } => {
                assert_eq!(tag, "TREATS");
                assert_eq!(line, 7);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_relation_identifier_is_a_violation() {
        let doc = format!("{MINIMAL}100\tCID\tD000001\tD007022\n");
        let parsed = parse_pubtator(&doc, &RelationSchema::cdr()).unwrap();
        assert_eq!(parsed.corpus.samples()[0].triplets.len(), 1);
        assert_eq!(parsed.violations.len(), 1);
        assert!(parsed.violations[0].message.contains("D000001"));
    }

    #[test]
    fn reversed_relation_is_oriented_by_type() {
        let doc = MINIMAL.replace("100\tCID\tD009270\tD007022", "100\tCID\tD007022\tD009270");
        let parsed = parse_pubtator(&doc, &RelationSchema::cdr()).unwrap();
        assert_eq!(parsed.corpus.samples()[0].triplets[0].head_id, "D009270");
    }

    #[test]
    fn composite_identifiers_and_blank_ids() {
        let doc = "\
7|t|Aspirin and ibuprofen.
7|a|Renal and hepatic injury followed.
7\t0\t7\tAspirin\tChemical\tD001241
7\t12\t21\tibuprofen\tChemical\tD007052
7\t23\t47\tRenal and hepatic injury\tDisease\tD007674|D056486\trenal injury|hepatic injury
7\t23\t28\tRenal\tDisease\t-1
7\tCID\tD001241\tD056486
";
        let parsed = parse_pubtator(doc, &RelationSchema::cdr()).unwrap();
        let s = &parsed.corpus.samples()[0];
        assert_eq!(s.entities.len(), 4);
        assert_eq!(parsed.violations.len(), 1);
        assert_eq!(enumerate_candidate_pairs(s, &RelationSchema::cdr()).len(), 4);
    }

    #[test]
    fn mention_straddling_a_boundary_merges_sentences() {
        let doc = "\
9|t|Effects of vit. C therapy.
9|a|None seen.
9\t11\t17\tvit. C\tChemical\tD001205
";
        let parsed = parse_pubtator(doc, &RelationSchema::cdr()).unwrap();
        let s = &parsed.corpus.samples()[0];
        assert_eq!(s.document.sentences, vec![CharRange::new(0, 27), CharRange::new(27, 37)]);
        assert!(validate_sample(s, &RelationSchema::cdr()).is_empty());
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(segment_sentences("A b. C d."), vec![CharRange::new(0, 5), CharRange::new(5, 9)]);
        assert!(segment_sentences("").is_empty());
        assert_eq!(segment_sentences("No terminator"), vec![CharRange::new(0, 13)]);
        assert_eq!(segment_sentences("e.g.x. Y!"), vec![CharRange::new(0, 7), CharRange::new(7, 9)]);
    }

    #[test]
    fn candidate_pairs_two_by_two() {
        let mut s = cdr_sample();
        let mut chem2 = s.entities[0].clone();
        chem2.entity_id = "D000002".into();
        let mut dis2 = s.entities[1].clone();
        dis2.entity_id = "D000003".into();
        s.entities.push(chem2);
        s.entities.push(dis2);
        let pairs = enumerate_candidate_pairs(&s, &RelationSchema::cdr());
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs.iter().filter(|p| p.gold == "CID").count(), 1);
        assert_eq!(pairs.iter().filter(|p| p.gold == "None").count(), 3);
        let keys: Vec<(&str, &str)> = pairs.iter().map(|p| (p.head_id.as_str(), p.tail_id.as_str())).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn no_pairs_without_required_type() {
        let mut s = cdr_sample();
        s.entities.truncate(1);
        s.triplets.clear();
        assert!(enumerate_candidate_pairs(&s, &RelationSchema::cdr()).is_empty());
    }

    #[test]
    fn empty_corpus_round_trip() {
        let c = Corpus::new(RelationSchema::cdr(), vec![]).unwrap();
        let text = save_corpus(&c);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(load_corpus(&text, &RelationSchema::cdr()).unwrap(), c);
    }

    #[test]
    fn single_sample_round_trip() {
        let c = Corpus::new(RelationSchema::cdr(), vec![cdr_sample()]).unwrap();
        assert_eq!(load_corpus(&save_corpus(&c), &RelationSchema::cdr()).unwrap(), c);
    }

    #[test]
    fn normalized_record_field_names() {
        let c = Corpus::new(RelationSchema::cdr(), vec![cdr_sample()]).unwrap();
        let text = save_corpus(&c);
        let rec: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        for f in ["doc_id", "title", "body", "sentences", "entities", "triplets"] {
            assert!(rec.get(f).is_some(), "missing {f}");
        }
    }

    #[test]
    fn unknown_dataset_tag_is_rejected() {
        let c = Corpus::new(RelationSchema::cdr(), vec![cdr_sample()]).unwrap();
        let text = save_corpus(&c).replace("\"dataset_tag\":\"CDR\"", "\"dataset_tag\":\"DocRED\"");
        assert!(matches!(load_corpus(&text, &RelationSchema::cdr()), Err(CorpusError::Record { line: 2, .. })));
    }

    #[test]
    fn schema_header_mismatch() {
        let c = Corpus::new(RelationSchema::cdr(), vec![]).unwrap();
        assert!(matches!(
            load_corpus(&save_corpus(&c), &RelationSchema::gda()),
            Err(CorpusError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_doc_ids_rejected() {
        let err = Corpus::new(RelationSchema::cdr(), vec![cdr_sample(), cdr_sample()]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateDocId(_)));
    }

    #[test]
    fn cui_map_attaches() {
        let map = CuiMap::parse("# id\tcui\nD007022\tC0020649\n").unwrap();
        let c = Corpus::new(RelationSchema::cdr(), vec![cdr_sample()]).unwrap().with_cuis(&map);
        assert_eq!(c.samples()[0].entities[1].cui.as_deref(), Some("C0020649"));
        assert_eq!(c.samples()[0].entities[0].cui.as_deref(), Some("C0027358"));
        assert!(CuiMap::parse("D1\t123").is_err());
    }

    #[test]
    fn split_manifest_selects_documents() {
        let c = Corpus::new(RelationSchema::cdr(), vec![cdr_sample()]).unwrap();
        let m = SplitManifest::parse("100\ttrain\n").unwrap();
        assert_eq!(c.select_split(&m, "train").len(), 1);
        assert_eq!(c.select_split(&m, "dev").len(), 0);
    }
}
