//! Two-layer knowledge-base index: CUIs on the first layer, embedded
//! document chunks grouped under their CUI on the second.
//!
//! Retrieval restricts the candidate set to chunks filed under the head and
//! tail entities' CUIs and ranks them by exact cosine similarity. Entities
//! without a CUI fall back to a lexical layer keyed by case-folded document
//! title.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::{Embedder, LlmError};
use crate::model::{is_valid_cui, Entity};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{file}:{line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error("{file}:{line}: invalid CUI `{cui}`")]
    InvalidCui { file: String, line: usize, cui: String },
    #[error("chunk overlap {overlap} must be smaller than chunk size {size}")]
    Overlap { size: usize, overlap: usize },
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-length vector")]
    ZeroVector,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("index file: {0}")]
    Format(String),
    #[error("index fingerprint mismatch: header {header}, content {content}")]
    Fingerprint { header: String, content: String },
    #[error(transparent)]
    Embedding(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbSource {
    Wikipedia,
    NcbiGene,
    NcbiMesh,
    NcbiProtein,
    Other,
}

impl KbSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            KbSource::Wikipedia => "wikipedia",
            KbSource::NcbiGene => "ncbi_gene",
            KbSource::NcbiMesh => "ncbi_mesh",
            KbSource::NcbiProtein => "ncbi_protein",
            KbSource::Other => "other",
        }
    }
}

impl fmt::Display for KbSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KbDocument {
    pub cui: String,
    pub source: KbSource,
    pub title: String,
    pub text: String,
}

/// Reads snapshot files of one JSON object per line (`cui`, `source`,
/// `title`, `text`). Duplicates by `(cui, source, title)` keep the first copy.
pub fn ingest_kb_snapshot<'a, I>(files: I) -> Result<Vec<KbDocument>, KbError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (file, content) in files {
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| KbError::Malformed { file: file.to_string(), line: i + 1, message };
            let doc: KbDocument = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            if !is_valid_cui(&doc.cui) {
                return Err(KbError::InvalidCui { file: file.to_string(), line: i + 1, cui: doc.cui });
            }
            if doc.text.trim().is_empty() {
                return Err(malformed("empty text".into()));
            }
            if seen.insert((doc.cui.clone(), doc.source, doc.title.clone())) {
                out.push(doc);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub size: usize,
    pub overlap: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self { size: 256, overlap: 32 }
    }
}

/// A trailing window shorter than this merges into its predecessor.
pub const MIN_TAIL_TOKENS: usize = 16;

/// Whitespace-token windows of `size` tokens advancing by `size - overlap`.
/// Returns `((start, end), text)` pairs in token coordinates.
/// Token range and joined text of one window.
pub type Window = ((usize, usize), String);

pub fn chunk_text(text: &str, size: usize, overlap: usize) -> Result<Vec<Window>, KbError> {
    if size == 0 || overlap >= size {
        return Err(KbError::Overlap { size, overlap });
    }
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let n = tokens.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let stride = size - overlap;
    let mut windows: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + size).min(n);
        windows.push((start, end));
        if end == n {
            break;
        }
        start += stride;
    }
    if windows.len() > 1 {
        let (s, e) = windows[windows.len() - 1];
        if e - s < MIN_TAIL_TOKENS {
            windows.pop();
            windows.last_mut().expect("at least one window").1 = n;
        }
    }
    Ok(windows.into_iter().map(|(s, e)| ((s, e), tokens[s..e].join(" "))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub cui: String,
    pub source: KbSource,
    pub text: String,
    pub token_range: (usize, usize),
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuiIndex {
    /// CUI → ids of its documents.
    primary: BTreeMap<String, Vec<String>>,
    documents: BTreeMap<String, KbDocument>,
    /// CUI → embedded chunks of its documents.
    secondary: BTreeMap<String, Vec<Chunk>>,
    /// Case-folded document title → CUIs carrying that title.
    lexical: BTreeMap<String, BTreeSet<String>>,
    dimension: usize,
    chunk_params: ChunkParams,
    fingerprint: String,
}

const EMBED_BATCH: usize = 64;

fn casefold(s: &str) -> String {
    s.trim().to_lowercase()
}

impl CuiIndex {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn chunk_params(&self) -> ChunkParams {
        self.chunk_params
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn primary(&self) -> &BTreeMap<String, Vec<String>> {
        &self.primary
    }

    pub fn document(&self, doc_id: &str) -> Option<&KbDocument> {
        self.documents.get(doc_id)
    }

    pub fn chunks_for(&self, cui: &str) -> &[Chunk] {
        self.secondary.get(cui).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.secondary.values().flatten()
    }

    pub fn chunk_count(&self) -> usize {
        self.secondary.values().map(Vec::len).sum()
    }

    /// CUIs whose documents carry this title, ignoring case.
    pub fn lexical_cuis(&self, name: &str) -> Option<&BTreeSet<String>> {
        self.lexical.get(&casefold(name))
    }

    /// Index keys an entity resolves to: its CUI, or the lexical bucket of
    /// its canonical name when it has none.
    pub fn scope_for(&self, entity: &Entity) -> BTreeSet<String> {
        match &entity.cui {
            Some(cui) => BTreeSet::from([cui.clone()]),
            None => self.lexical_cuis(&entity.canonical_name).cloned().unwrap_or_default(),
        }
    }

    fn assemble(
        docs: Vec<(String, KbDocument)>,
        chunks: Vec<Chunk>,
        dimension: usize,
        chunk_params: ChunkParams,
    ) -> Self {
        let mut primary: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut lexical: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut documents = BTreeMap::new();
        for (id, d) in docs {
            primary.entry(d.cui.clone()).or_default().push(id.clone());
            lexical.entry(casefold(&d.title)).or_default().insert(d.cui.clone());
            documents.insert(id, d);
        }
        let mut secondary: BTreeMap<String, Vec<Chunk>> = BTreeMap::new();
        for c in chunks {
            secondary.entry(c.cui.clone()).or_default().push(c);
        }
        primary.values_mut().for_each(|ids| ids.sort());
        secondary.values_mut().for_each(|cs| cs.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id)));
        let mut index =
            Self { primary, documents, secondary, lexical, dimension, chunk_params, fingerprint: String::new() };
        index.fingerprint = index.content_hash();
        index
    }

    fn record_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for (doc_id, d) in &self.documents {
            let rec = IndexRecord::Document { doc_id: doc_id.clone(), document: d.clone() };
            lines.push(serde_json::to_string(&rec).expect("record serializes"));
        }
        for c in self.chunks() {
            lines.push(serde_json::to_string(&IndexRecord::Chunk(c.clone())).expect("record serializes"));
        }
        lines
    }

    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}|{}|{}\n", self.dimension, self.chunk_params.size, self.chunk_params.overlap));
        for l in self.record_lines() {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Chunks and embeds every document, filing chunks under their CUI.
pub fn build_index(docs: &[KbDocument], embedder: &dyn Embedder, params: ChunkParams) -> Result<CuiIndex, KbError> {
    if params.size == 0 || params.overlap >= params.size {
        return Err(KbError::Overlap { size: params.size, overlap: params.overlap });
    }
    let dimension = embedder.dimension()?;
    let mut sorted: Vec<&KbDocument> = docs.iter().collect();
    sorted.sort();
    sorted.dedup_by(|a, b| (&a.cui, a.source, &a.title) == (&b.cui, b.source, &b.title));

    let mut ordinal: BTreeMap<(String, KbSource), usize> = BTreeMap::new();
    let mut with_ids = Vec::with_capacity(sorted.len());
    let mut pending: Vec<Chunk> = Vec::new();
    for d in sorted {
        let n = ordinal.entry((d.cui.clone(), d.source)).or_insert(0);
        let doc_id = format!("{}/{}/{:03}", d.cui, d.source, n);
        *n += 1;
        for (i, (range, text)) in chunk_text(&d.text, params.size, params.overlap)?.into_iter().enumerate() {
            pending.push(Chunk {
                chunk_id: format!("{doc_id}#{i:04}"),
                doc_id: doc_id.clone(),
                cui: d.cui.clone(),
                source: d.source,
                text,
                token_range: range,
                vector: Vec::new(),
            });
        }
        with_ids.push((doc_id, d.clone()));
    }
    for batch in pending.chunks_mut(EMBED_BATCH) {
        let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        if vectors.len() != batch.len() {
            return Err(KbError::Format(format!(
                "embedder returned {} vectors for {} texts",
                vectors.len(),
                batch.len()
            )));
        }
        for (c, v) in batch.iter_mut().zip(vectors) {
            if v.len() != dimension {
                return Err(KbError::DimensionMismatch(dimension, v.len()));
            }
            c.vector = v;
        }
    }
    Ok(CuiIndex::assemble(with_ids, pending, dimension, params))
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, KbError> {
    if a.len() != b.len() {
        return Err(KbError::DimensionMismatch(a.len(), b.len()));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(KbError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// How the candidate set is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeMode {
    /// Only chunks under the head and tail CUIs.
    #[default]
    Cui,
    /// Every chunk in the index, no CUI scoping.
    Unscoped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalOptions {
    pub k: usize,
    pub scope: ScopeMode,
    /// When set, the top `q` chunks of each entity's scope are pooled
    /// instead of ranking the joint scope once.
    pub per_entity_quota: Option<usize>,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self { k: 4, scope: ScopeMode::Cui, per_entity_quota: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snippet {
    pub chunk: Chunk,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub snippets: Vec<Snippet>,
    pub query_cuis: BTreeSet<String>,
    /// Set when the scoped candidate set was empty.
    pub empty_scope: bool,
}

/// Default retrieval query: both entity names followed by the label list.
pub fn build_query(head: &Entity, tail: &Entity, labels: &[String]) -> String {
    let mut q = format!("{} {}", head.canonical_name, tail.canonical_name);
    for l in labels {
        q.push(' ');
        q.push_str(l);
    }
    q
}

fn rank<'a>(candidates: impl Iterator<Item = &'a Chunk>, query: &[f64], limit: usize) -> Result<Vec<Snippet>, KbError> {
    let mut scored = candidates.map(|c| Ok((cosine(query, &c.vector)?, c))).collect::<Result<Vec<_>, KbError>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.chunk_id.cmp(&b.1.chunk_id)));
    Ok(scored.into_iter().take(limit).map(|(score, c)| Snippet { chunk: c.clone(), score }).collect())
}

/// Ranks the scoped candidates by cosine similarity to the embedded query,
/// breaking ties by ascending chunk id, and keeps the top `k`.
pub fn retrieve(
    index: &CuiIndex,
    head: &Entity,
    tail: &Entity,
    query_text: &str,
    embedder: &dyn Embedder,
    options: &RetrievalOptions,
) -> Result<RetrievalResult, KbError> {
    if options.k == 0 {
        return Err(KbError::ZeroK);
    }
    let head_scope = index.scope_for(head);
    let tail_scope = index.scope_for(tail);
    let query_cuis: BTreeSet<String> = head_scope.union(&tail_scope).cloned().collect();

    let query = embedder
        .embed_batch(&[query_text.to_string()])?
        .into_iter()
        .next()
        .ok_or_else(|| KbError::Format("embedder returned no vector".into()))?;
    if query.len() != index.dimension && index.chunk_count() > 0 {
        return Err(KbError::DimensionMismatch(index.dimension, query.len()));
    }

    let mut snippets = match (options.scope, options.per_entity_quota) {
        (ScopeMode::Unscoped, _) => rank(index.chunks(), &query, options.k)?,
        (ScopeMode::Cui, None) => rank(query_cuis.iter().flat_map(|c| index.chunks_for(c)), &query, options.k)?,
        (ScopeMode::Cui, Some(q)) => {
            let mut pooled: Vec<Snippet> = Vec::new();
            for scope in [&head_scope, &tail_scope] {
                for s in rank(scope.iter().flat_map(|c| index.chunks_for(c)), &query, q)? {
                    if !pooled.iter().any(|p| p.chunk.chunk_id == s.chunk.chunk_id) {
                        pooled.push(s);
                    }
                }
            }
            pooled.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.chunk.chunk_id.cmp(&b.chunk.chunk_id)));
            pooled
        }
    };
    let empty_scope = snippets.is_empty();
    snippets.truncate(options.k);
    Ok(RetrievalResult { snippets, query_cuis, empty_scope })
}

const INDEX_FORMAT: &str = "adrcm-cui-index";

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    dimension: usize,
    chunk_size: usize,
    chunk_overlap: usize,
    fingerprint: String,
    documents: usize,
    chunks: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum IndexRecord {
    Document {
        doc_id: String,
        #[serde(flatten)]
        document: KbDocument,
    },
    Chunk(Chunk),
}

/// Header line followed by one record per document and per chunk.
pub fn save_index(index: &CuiIndex) -> String {
    let header = IndexHeader {
        format: INDEX_FORMAT.into(),
        dimension: index.dimension,
        chunk_size: index.chunk_params.size,
        chunk_overlap: index.chunk_params.overlap,
        fingerprint: index.fingerprint.clone(),
        documents: index.documents.len(),
        chunks: index.chunk_count(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for l in index.record_lines() {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

pub fn load_index(text: &str) -> Result<CuiIndex, KbError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: IndexHeader = serde_json::from_str(lines.next().ok_or_else(|| KbError::Format("empty file".into()))?)
        .map_err(|e| KbError::Format(format!("header: {e}")))?;
    if header.format != INDEX_FORMAT {
        return Err(KbError::Format(format!("unknown format `{}`", header.format)));
    }
    let mut docs = Vec::new();
    let mut chunks = Vec::new();
    for (i, line) in lines.enumerate() {
        match serde_json::from_str(line).map_err(|e| KbError::Format(format!("record {}: {e}", i + 1)))? {
            IndexRecord::Document { doc_id, document } => docs.push((doc_id, document)),
            IndexRecord::Chunk(c) => {
                if c.vector.len() != header.dimension {
                    return Err(KbError::DimensionMismatch(header.dimension, c.vector.len()));
                }
                chunks.push(c);
            }
        }
    }
    let params = ChunkParams { size: header.chunk_size, overlap: header.chunk_overlap };
    let index = CuiIndex::assemble(docs, chunks, header.dimension, params);
    if index.fingerprint != header.fingerprint {
        return Err(KbError::Fingerprint { header: header.fingerprint, content: index.fingerprint });
    }
    Ok(index)
}
