//! Canonical data types shared by every pipeline stage.
//!
//! All character offsets are half-open `[start, end)` ranges counted in
//! Unicode scalar values over `title + " " + body`.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use thiserror::Error;

/// Half-open character range `[start, end)`. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct CharRange {
    pub start: usize,
    pub end: usize,
}

impl CharRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, other: &CharRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl From<[usize; 2]> for CharRange {
    fn from(v: [usize; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<CharRange> for [usize; 2] {
    fn from(r: CharRange) -> Self {
        [r.start, r.end]
    }
}

/// Returns the substring covered by a character range, or `None` when the
/// range falls outside the text.
pub fn char_slice(text: &str, range: CharRange) -> Option<&str> {
    if range.start > range.end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let start = indices.nth(range.start)?;
    let end = if range.end == range.start { start } else { indices.nth(range.end - range.start - 1)? };
    Some(&text[start..end])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetTag {
    #[serde(rename = "CDR")]
    Cdr,
    #[serde(rename = "GDA")]
    Gda,
    #[serde(rename = "BioRED")]
    BioRed,
    #[serde(rename = "custom")]
    Custom,
}

impl DatasetTag {
    /// Maps a schema name onto the dataset it describes.
    pub fn from_schema_name(name: &str) -> Self {
        match name.to_ascii_lowercase().as_str() {
            "cdr" => DatasetTag::Cdr,
            "gda" => DatasetTag::Gda,
            "biored" => DatasetTag::BioRed,
            _ => DatasetTag::Custom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    Chemical,
    Disease,
    Gene,
    Variant,
    Species,
    CellLine,
}

impl EntityType {
    /// Parses the type column of an annotation file. Accepts the spellings
    /// used by the CDR, GDA and BioRED distributions.
    pub fn from_annotation(raw: &str) -> Option<Self> {
        let t = match raw.trim().to_ascii_lowercase().as_str() {
            "chemical" | "chemicalentity" | "drug" => EntityType::Chemical,
            "disease" | "diseaseorphenotypicfeature" | "phenotype" => EntityType::Disease,
            "gene" | "geneorgeneproduct" | "protein" => EntityType::Gene,
            "variant" | "sequencevariant" | "dnamutation" | "proteinmutation" | "snp" => EntityType::Variant,
            "species" | "organismtaxon" => EntityType::Species,
            "cellline" | "cell_line" => EntityType::CellLine,
            _ => return None,
        };
        Some(t)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EntityType::Chemical => "chemical",
            EntityType::Disease => "disease",
            EntityType::Gene => "gene",
            EntityType::Variant => "variant",
            EntityType::Species => "species",
            EntityType::CellLine => "cell_line",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `C` followed by exactly seven ASCII digits.
pub fn is_valid_cui(cui: &str) -> bool {
    let b = cui.as_bytes();
    b.len() == 8 && b[0] == b'C' && b[1..].iter().all(u8::is_ascii_digit)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub sentences: Vec<CharRange>,
    pub dataset_tag: DatasetTag,
}

impl Document {
    /// The coordinate space for every offset: title, one space, body.
    pub fn text(&self) -> String {
        format!("{} {}", self.title, self.body)
    }

    pub fn char_len(&self) -> usize {
        self.title.chars().count() + 1 + self.body.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub surface: String,
    pub sentence_index: usize,
    pub range: CharRange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cui: Option<String>,
    pub etype: EntityType,
    pub canonical_name: String,
    pub mentions: Vec<Mention>,
}

impl Entity {
    /// Sorted, deduplicated sentence indices hosting a mention.
    pub fn sentence_indices(&self) -> BTreeSet<usize> {
        self.mentions.iter().map(|m| m.sentence_index).collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema has no labels")]
    NoLabels,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("none label `{0}` is not among the labels")]
    NoneLabelMissing(String),
    #[error("alias `{alias}` maps to unknown label `{label}`")]
    AliasTarget { alias: String, label: String },
    #[error("unknown schema preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid schema file: {0}")]
    Format(String),
}

/// Label inventory and typing constraints for one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct RelationSchema {
    name: String,
    labels: Vec<String>,
    none_label: String,
    allowed_type_pairs: BTreeSet<(EntityType, EntityType)>,
    aliases: BTreeMap<String, String>,
    verbalizations: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    name: String,
    labels: Vec<String>,
    none_label: String,
    allowed_type_pairs: Vec<(EntityType, EntityType)>,
    #[serde(default)]
    aliases: BTreeMap<String, String>,
    #[serde(default)]
    verbalizations: BTreeMap<String, String>,
}

impl TryFrom<RawSchema> for RelationSchema {
    type Error = SchemaError;

    fn try_from(raw: RawSchema) -> Result<Self, Self::Error> {
        let mut schema =
            RelationSchema::new(raw.name, raw.labels, raw.none_label, raw.allowed_type_pairs, raw.aliases)?;
        schema.verbalizations = raw.verbalizations;
        Ok(schema)
    }
}

impl From<RelationSchema> for RawSchema {
    fn from(s: RelationSchema) -> Self {
        RawSchema {
            name: s.name,
            labels: s.labels,
            none_label: s.none_label,
            allowed_type_pairs: s.allowed_type_pairs.into_iter().collect(),
            aliases: s.aliases,
            verbalizations: s.verbalizations,
        }
    }
}

/// Lowercase, trim, and strip terminal punctuation.
pub fn normalize_surface(raw: &str) -> String {
    let lowered = raw.trim().to_lowercase();
    lowered
        .trim_end_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '!' | '?') || c.is_whitespace())
        .trim()
        .to_string()
}

impl RelationSchema {
    pub fn new(
        name: impl Into<String>,
        labels: Vec<String>,
        none_label: impl Into<String>,
        allowed_type_pairs: impl IntoIterator<Item = (EntityType, EntityType)>,
        aliases: BTreeMap<String, String>,
    ) -> Result<Self, SchemaError> {
        let none_label = none_label.into();
        if labels.is_empty() {
            return Err(SchemaError::NoLabels);
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(SchemaError::DuplicateLabel(l.clone()));
            }
        }
        if !labels.contains(&none_label) {
            return Err(SchemaError::NoneLabelMissing(none_label));
        }
        let mut normalized = BTreeMap::new();
        for (alias, label) in aliases {
            if !labels.contains(&label) {
                return Err(SchemaError::AliasTarget { alias, label });
            }
            normalized.insert(normalize_surface(&alias), label);
        }
        Ok(Self {
            name: name.into(),
            labels,
            none_label,
            allowed_type_pairs: allowed_type_pairs.into_iter().collect(),
            aliases: normalized,
            verbalizations: BTreeMap::new(),
        })
    }

    /// Natural-language phrasing of a label used inside generation prompts
    /// (`CID` reads as "induce"). Falls back to the label itself.
    pub fn with_verbalization(mut self, label: &str, phrase: &str) -> Self {
        self.verbalizations.insert(label.to_string(), phrase.to_string());
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn none_label(&self) -> &str {
        &self.none_label
    }

    pub fn allowed_type_pairs(&self) -> &BTreeSet<(EntityType, EntityType)> {
        &self.allowed_type_pairs
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn is_none(&self, label: &str) -> bool {
        label == self.none_label
    }

    pub fn allows(&self, head: EntityType, tail: EntityType) -> bool {
        self.allowed_type_pairs.contains(&(head, tail))
    }

    pub fn verbalize<'a>(&'a self, label: &'a str) -> &'a str {
        self.verbalizations.get(label).map(String::as_str).unwrap_or(label)
    }

    /// Exact label names (case-insensitive) resolve to themselves, then the
    /// alias table is consulted. Input is normalized first.
    pub fn lookup(&self, raw: &str) -> Option<&str> {
        let key = normalize_surface(raw);
        if key.is_empty() {
            return None;
        }
        if let Some(l) = self.labels.iter().find(|l| l.to_lowercase() == key) {
            return Some(l.as_str());
        }
        self.aliases.get(&key).map(String::as_str)
    }

    pub fn preset(name: &str) -> Result<Self, SchemaError> {
        match name.to_ascii_lowercase().as_str() {
            "cdr" => Ok(Self::cdr()),
            "gda" => Ok(Self::gda()),
            "biored" => Ok(Self::biored()),
            other => Err(SchemaError::UnknownPreset(other.to_string())),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        serde_json::from_str(text).map_err(|e| SchemaError::Format(e.to_string()))
    }

    /// Chemical-induced disease, binary.
    pub fn cdr() -> Self {
        let aliases = alias_map(&[
            ("cid", "CID"),
            ("chemical-induced disease", "CID"),
            ("chemical induced disease", "CID"),
            ("induce", "CID"),
            ("induces", "CID"),
            ("induced", "CID"),
            ("none", "None"),
            ("no relation", "None"),
            ("no", "None"),
            ("null", "None"),
            ("nr", "None"),
        ]);
        Self::new(
            "CDR",
            vec!["CID".into(), "None".into()],
            "None",
            [(EntityType::Chemical, EntityType::Disease)],
            aliases,
        )
        .expect("CDR preset is well-formed")
        .with_verbalization("CID", "induce")
    }

    /// Gene-disease association, binary.
    pub fn gda() -> Self {
        let aliases = alias_map(&[
            ("gda", "GDA"),
            ("gene-disease association", "GDA"),
            ("association", "GDA"),
            ("associated", "GDA"),
            ("associate", "GDA"),
            ("none", "None"),
            ("no relation", "None"),
            ("no", "None"),
            ("null", "None"),
        ]);
        Self::new("GDA", vec!["GDA".into(), "None".into()], "None", [(EntityType::Gene, EntityType::Disease)], aliases)
            .expect("GDA preset is well-formed")
            .with_verbalization("GDA", "associate with")
    }

    /// Eight BioRED relation types plus the none label.
    pub fn biored() -> Self {
        let labels: Vec<String> = [
            "Association",
            "Positive_Correlation",
            "Negative_Correlation",
            "Bind",
            "Cotreatment",
            "Comparison",
            "Drug_Interaction",
            "Conversion",
            "None",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let aliases = alias_map(&[
            ("association", "Association"),
            ("associated", "Association"),
            ("positive correlation", "Positive_Correlation"),
            ("positive_correlation", "Positive_Correlation"),
            ("negative correlation", "Negative_Correlation"),
            ("negative_correlation", "Negative_Correlation"),
            ("bind", "Bind"),
            ("binds", "Bind"),
            ("binding", "Bind"),
            ("cotreatment", "Cotreatment"),
            ("co-treatment", "Cotreatment"),
            ("comparison", "Comparison"),
            ("drug interaction", "Drug_Interaction"),
            ("drug_interaction", "Drug_Interaction"),
            ("conversion", "Conversion"),
            ("none", "None"),
            ("no relation", "None"),
            ("null", "None"),
        ]);
        use EntityType::*;
        let pairs = [
            (Chemical, Disease),
            (Chemical, Gene),
            (Gene, Disease),
            (Variant, Disease),
            (Chemical, Variant),
            (Gene, Gene),
            (Chemical, Chemical),
            (Variant, Variant),
        ];
        Self::new("BioRED", labels, "None", pairs, aliases)
            .expect("BioRED preset is well-formed")
            .with_verbalization("Association", "be associated with")
            .with_verbalization("Positive_Correlation", "positively correlate with")
            .with_verbalization("Negative_Correlation", "negatively correlate with")
            .with_verbalization("Bind", "bind")
            .with_verbalization("Cotreatment", "be co-administered with")
            .with_verbalization("Comparison", "be compared with")
            .with_verbalization("Drug_Interaction", "interact with")
            .with_verbalization("Conversion", "convert to")
    }
}

fn alias_map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(a, l)| (a.to_string(), l.to_string())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head_id: String,
    pub tail_id: String,
    pub relation: String,
}

impl Triplet {
    pub fn new(head: impl Into<String>, tail: impl Into<String>, relation: impl Into<String>) -> Self {
        Self { head_id: head.into(), tail_id: tail.into(), relation: relation.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub document: Document,
    pub entities: Vec<Entity>,
    pub triplets: Vec<Triplet>,
}

impl TrainingSample {
    pub fn doc_id(&self) -> &str {
        &self.document.doc_id
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.entity_id == id)
    }

    /// Triplets sorted by `(head_id, tail_id)`.
    pub fn sorted_triplets(&self) -> Vec<&Triplet> {
        let mut t: Vec<&Triplet> = self.triplets.iter().collect();
        t.sort_by(|a, b| (&a.head_id, &a.tail_id).cmp(&(&b.head_id, &b.tail_id)));
        t
    }

    /// Triplets whose relation is not the schema's none label.
    pub fn positive_triplets<'a>(&'a self, schema: &'a RelationSchema) -> impl Iterator<Item = &'a Triplet> + 'a {
        self.triplets.iter().filter(move |t| !schema.is_none(&t.relation))
    }
}

/// A broken structural invariant. Violations are reported as data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyDocId,
    SentenceOutOfBounds { index: usize, range: CharRange, text_len: usize },
    SentenceOrder { index: usize },
    DuplicateEntity { entity_id: String },
    NoMentions { entity_id: String },
    MentionSentence { entity_id: String, sentence_index: usize },
    MentionOutsideSentence { entity_id: String, range: CharRange, sentence_index: usize },
    MalformedCui { entity_id: String, cui: String },
    SelfRelation { entity_id: String },
    UnknownLabel { label: String },
    UnknownEntity { entity_id: String },
    DuplicatePair { head_id: String, tail_id: String },
    DisallowedTypePair { head_id: String, tail_id: String, head: EntityType, tail: EntityType },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyDocId => write!(f, "doc_id is empty"),
            Violation::SentenceOutOfBounds { index, range, text_len } => {
                write!(f, "sentence {index} range [{}, {}) exceeds text length {text_len}", range.start, range.end)
            }
            Violation::SentenceOrder { index } => {
                write!(f, "sentence {index} overlaps or precedes its predecessor")
            }
            Violation::DuplicateEntity { entity_id } => write!(f, "entity {entity_id} defined twice"),
            Violation::NoMentions { entity_id } => write!(f, "entity {entity_id} has no mentions"),
            Violation::MentionSentence { entity_id, sentence_index } => {
                write!(f, "entity {entity_id} mention references missing sentence {sentence_index}")
            }
            Violation::MentionOutsideSentence { entity_id, range, sentence_index } => write!(
                f,
                "entity {entity_id} mention [{}, {}) lies outside sentence {sentence_index}",
                range.start, range.end
            ),
            Violation::MalformedCui { entity_id, cui } => {
                write!(f, "entity {entity_id} has malformed CUI `{cui}`")
            }
            Violation::SelfRelation { entity_id } => {
                write!(f, "triplet relates entity {entity_id} to itself")
            }
            Violation::UnknownLabel { label } => write!(f, "relation label `{label}` is not in the schema"),
            Violation::UnknownEntity { entity_id } => {
                write!(f, "triplet references unknown entity {entity_id}")
            }
            Violation::DuplicatePair { head_id, tail_id } => {
                write!(f, "pair ({head_id}, {tail_id}) annotated more than once")
            }
            Violation::DisallowedTypePair { head_id, tail_id, head, tail } => {
                write!(f, "pair ({head_id}, {tail_id}) has types ({head}, {tail}) outside allowed_type_pairs")
            }
        }
    }
}

/// Checks every structural invariant of a sample against a schema.
pub fn validate_sample(sample: &TrainingSample, schema: &RelationSchema) -> Vec<Violation> {
    let mut out = Vec::new();
    let doc = &sample.document;
    if doc.doc_id.is_empty() {
        out.push(Violation::EmptyDocId);
    }
    let text_len = doc.char_len();
    let mut prev_end = 0usize;
    for (index, r) in doc.sentences.iter().enumerate() {
        if r.end > text_len || r.start > r.end {
            out.push(Violation::SentenceOutOfBounds { index, range: *r, text_len });
        }
        if index > 0 && r.start < prev_end {
            out.push(Violation::SentenceOrder { index });
        }
        prev_end = r.end;
    }

    let mut ids = HashSet::new();
    for e in &sample.entities {
        if !ids.insert(e.entity_id.as_str()) {
            out.push(Violation::DuplicateEntity { entity_id: e.entity_id.clone() });
        }
        if e.mentions.is_empty() {
            out.push(Violation::NoMentions { entity_id: e.entity_id.clone() });
        }
        for m in &e.mentions {
            match doc.sentences.get(m.sentence_index) {
                None => out.push(Violation::MentionSentence {
                    entity_id: e.entity_id.clone(),
                    sentence_index: m.sentence_index,
                }),
                Some(s) if !s.contains(&m.range) => out.push(Violation::MentionOutsideSentence {
                    entity_id: e.entity_id.clone(),
                    range: m.range,
                    sentence_index: m.sentence_index,
                }),
                Some(_) => {}
            }
        }
        if let Some(cui) = &e.cui {
            if !is_valid_cui(cui) {
                out.push(Violation::MalformedCui { entity_id: e.entity_id.clone(), cui: cui.clone() });
            }
        }
    }

    let mut pairs = HashSet::new();
    for t in &sample.triplets {
        if t.head_id == t.tail_id {
            out.push(Violation::SelfRelation { entity_id: t.head_id.clone() });
        }
        if !schema.has_label(&t.relation) {
            out.push(Violation::UnknownLabel { label: t.relation.clone() });
        }
        let head = sample.entity(&t.head_id);
        let tail = sample.entity(&t.tail_id);
        if head.is_none() {
            out.push(Violation::UnknownEntity { entity_id: t.head_id.clone() });
        }
        if tail.is_none() && t.tail_id != t.head_id {
            out.push(Violation::UnknownEntity { entity_id: t.tail_id.clone() });
        }
        if let (Some(h), Some(tl)) = (head, tail) {
            if !schema.allows(h.etype, tl.etype) {
                out.push(Violation::DisallowedTypePair {
                    head_id: t.head_id.clone(),
                    tail_id: t.tail_id.clone(),
                    head: h.etype,
                    tail: tl.etype,
                });
            }
        }
        if !pairs.insert((t.head_id.as_str(), t.tail_id.as_str())) {
            out.push(Violation::DuplicatePair { head_id: t.head_id.clone(), tail_id: t.tail_id.clone() });
        }
    }
    out
}
